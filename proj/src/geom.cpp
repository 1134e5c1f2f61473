#include "bevdet/geom.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "bevdet/rng.hpp"

namespace bevdet::geom {

namespace {
constexpr double kPi = 3.14159265358979323846;
constexpr double kAreaEps = 1e-9;
}  // namespace

double normalizeAngle(double a) {
    a = std::fmod(a + kPi, 2.0 * kPi);
    if (a < 0.0) a += 2.0 * kPi;
    return a - kPi;
}

OrientedBox::OrientedBox(double cx_, double cy_, double l_, double w_, double theta_)
    : cx(cx_), cy(cy_), l(l_), w(w_), theta(normalizeAngle(theta_)) {}

OrientedBox::OrientedBox(double cx_, double cy_, double l_, double w_, double theta_, double score_)
    : OrientedBox(cx_, cy_, l_, w_, theta_) {
    score = score_;
}

double ConvexPolygon::area() const {
    double a = 0.0;
    const std::size_t n = vertices.size();
    for (std::size_t i = 0; i < n; ++i) {
        const auto& [x0, y0] = vertices[i];
        const auto& [x1, y1] = vertices[(i + 1) % n];
        a += x0 * y1 - x1 * y0;
    }
    return 0.5 * a;
}

ConvexPolygon boxToPolygon(const OrientedBox& box) {
    const double c = std::cos(box.theta);
    const double s = std::sin(box.theta);
    const double hl = 0.5 * box.l;
    const double hw = 0.5 * box.w;
    // CCW corner order for theta = 0: (+hl,+hw), (-hl,+hw), (-hl,-hw), (+hl,-hw).
    const double lx[4] = {hl, -hl, -hl, hl};
    const double ly[4] = {hw, hw, -hw, -hw};
    ConvexPolygon p;
    p.vertices.reserve(4);
    for (int i = 0; i < 4; ++i) {
        p.vertices.emplace_back(box.cx + c * lx[i] - s * ly[i],
                                box.cy + s * lx[i] + c * ly[i]);
    }
    return p;
}

namespace {

// Clips subject against the half-plane left of edge (ax,ay)->(bx,by).
void clipByEdge(const std::vector<std::pair<double, double>>& in,
                double ax, double ay, double bx, double by,
                std::vector<std::pair<double, double>>& out) {
    out.clear();
    const std::size_t n = in.size();
    if (n == 0) return;
    const double ex = bx - ax;
    const double ey = by - ay;
    auto side = [&](const std::pair<double, double>& p) {
        return ex * (p.second - ay) - ey * (p.first - ax);
    };
    for (std::size_t i = 0; i < n; ++i) {
        const auto& cur = in[i];
        const auto& nxt = in[(i + 1) % n];
        const double sc = side(cur);
        const double sn = side(nxt);
        if (sc >= 0.0) out.push_back(cur);
        if ((sc > 0.0 && sn < 0.0) || (sc < 0.0 && sn > 0.0)) {
            const double t = sc / (sc - sn);
            out.emplace_back(cur.first + t * (nxt.first - cur.first),
                             cur.second + t * (nxt.second - cur.second));
        }
    }
}

double clipAreaOrdered(const ConvexPolygon& subject, const ConvexPolygon& clip) {
    std::vector<std::pair<double, double>> cur = subject.vertices;
    std::vector<std::pair<double, double>> next;
    const std::size_t n = clip.vertices.size();
    for (std::size_t i = 0; i < n && !cur.empty(); ++i) {
        const auto& a = clip.vertices[i];
        const auto& b = clip.vertices[(i + 1) % n];
        clipByEdge(cur, a.first, a.second, b.first, b.second, next);
        cur.swap(next);
    }
    if (cur.size() < 3) return 0.0;
    double area = 0.0;
    for (std::size_t i = 0; i < cur.size(); ++i) {
        const auto& p0 = cur[i];
        const auto& p1 = cur[(i + 1) % cur.size()];
        area += p0.first * p1.second - p1.first * p0.second;
    }
    area *= 0.5;
    return area > kAreaEps ? area : 0.0;
}

// Canonical argument order so intersection(a,b) == intersection(b,a) exactly.
bool polyLess(const ConvexPolygon& a, const ConvexPolygon& b) {
    if (a.vertices.size() != b.vertices.size()) return a.vertices.size() < b.vertices.size();
    return a.vertices < b.vertices;
}

}  // namespace

double convexIntersectionArea(const ConvexPolygon& a, const ConvexPolygon& b) {
    if (polyLess(b, a)) return clipAreaOrdered(b, a);
    return clipAreaOrdered(a, b);
}

double rotatedIoU(const OrientedBox& a, const OrientedBox& b) {
    const ConvexPolygon pa = boxToPolygon(a);
    const ConvexPolygon pb = boxToPolygon(b);
    const double inter = convexIntersectionArea(pa, pb);
    const double uni = a.l * a.w + b.l * b.w - inter;
    if (uni <= 0.0) return 0.0;
    return std::clamp(inter / uni, 0.0, 1.0);
}

std::vector<std::size_t> nmsIndices(const std::vector<OrientedBox>& dets, double iouThresh) {
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
        const double si = dets[i].score.value_or(0.0);
        const double sj = dets[j].score.value_or(0.0);
        if (si != sj) return si > sj;
        return i < j;
    });
    std::vector<std::size_t> kept;
    for (std::size_t idx : order) {
        bool keep = true;
        for (std::size_t k : kept) {
            if (rotatedIoU(dets[idx], dets[k]) > iouThresh) {
                keep = false;
                break;
            }
        }
        if (keep) kept.push_back(idx);
    }
    return kept;
}

std::vector<OrientedBox> nms(const std::vector<OrientedBox>& dets, double iouThresh) {
    std::vector<OrientedBox> out;
    for (std::size_t i : nmsIndices(dets, iouThresh)) out.push_back(dets[i]);
    return out;
}

double monteCarloIoU(const OrientedBox& a, const OrientedBox& b,
                     std::uint64_t samples, std::uint64_t seed) {
    if (samples == 0) throw std::invalid_argument("monteCarloIoU: samples must be >= 1");
    const ConvexPolygon pa = boxToPolygon(a);
    const ConvexPolygon pb = boxToPolygon(b);
    double xmin = pa.vertices[0].first, xmax = xmin;
    double ymin = pa.vertices[0].second, ymax = ymin;
    for (const auto* poly : {&pa, &pb}) {
        for (const auto& [x, y] : poly->vertices) {
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    }
    // Point-in-box via the box's local frame.
    struct Frame {
        double cx, cy, c, s, hl, hw;
    };
    auto frame = [](const OrientedBox& box) {
        return Frame{box.cx, box.cy, std::cos(box.theta), std::sin(box.theta),
                     0.5 * box.l, 0.5 * box.w};
    };
    const Frame fa = frame(a);
    const Frame fb = frame(b);
    const std::uint64_t base = Rng::mix(seed, 0x10c9);
    const double w = (xmax - xmin) * 0x1.0p-32;
    const double h = (ymax - ymin) * 0x1.0p-32;
    std::uint64_t nInter = 0;
    std::uint64_t nUnion = 0;
    // Counter-based splitmix64 stream (one draw per sample, 32 bits per
    // coordinate); no loop-carried dependency, branch-free point tests.
    constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;
    for (std::uint64_t i = 0; i < samples; ++i) {
        std::uint64_t z = base + (i + 1) * kGamma;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        z ^= z >> 31;
        const double x = xmin + w * double(std::uint32_t(z >> 32));
        const double y = ymin + h * double(std::uint32_t(z));
        double dx = x - fa.cx, dy = y - fa.cy;
        double u = fa.c * dx + fa.s * dy;
        double v = fa.c * dy - fa.s * dx;
        const bool ia = (u <= fa.hl) & (u >= -fa.hl) & (v <= fa.hw) & (v >= -fa.hw);
        dx = x - fb.cx;
        dy = y - fb.cy;
        u = fb.c * dx + fb.s * dy;
        v = fb.c * dy - fb.s * dx;
        const bool ib = (u <= fb.hl) & (u >= -fb.hl) & (v <= fb.hw) & (v >= -fb.hw);
        nInter += std::uint64_t(ia & ib);
        nUnion += std::uint64_t(ia | ib);
    }
    if (nUnion == 0) return 0.0;
    return static_cast<double>(nInter) / static_cast<double>(nUnion);
}

}  // namespace bevdet::geom
