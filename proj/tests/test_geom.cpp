#include <doctest.h>

#include <cmath>

#include "bevdet/geom.hpp"
#include "bevdet/rng.hpp"

using namespace bevdet;
using geom::OrientedBox;

namespace {

constexpr double kPi = 3.14159265358979323846;

OrientedBox randomBox(Rng& rng) {
    return OrientedBox(rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0),
                       rng.uniform(0.5, 6.0), rng.uniform(0.5, 4.0),
                       rng.uniform(-kPi, kPi));
}

// Reference greedy NMS with a precomputed IoU matrix; written independently
// of geom::nms.
std::vector<std::size_t> bruteNms(const std::vector<OrientedBox>& dets, double thresh) {
    const std::size_t n = dets.size();
    std::vector<std::vector<double>> iou(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            iou[i][j] = geom::rotatedIoU(dets[i], dets[j]);
        }
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double sa = dets[a].score.value_or(0.0);
        const double sb = dets[b].score.value_or(0.0);
        return sa != sb ? sa > sb : a < b;
    });
    std::vector<std::size_t> kept;
    for (std::size_t idx : order) {
        bool ok = true;
        for (std::size_t k : kept) {
            if (iou[idx][k] > thresh) ok = false;
        }
        if (ok) kept.push_back(idx);
    }
    return kept;
}

}  // namespace

TEST_CASE("boxToPolygon axis-aligned corners and area") {
    auto p = geom::boxToPolygon(OrientedBox(0, 0, 2, 1, 0));
    REQUIRE(p.vertices.size() == 4);
    CHECK(p.area() == doctest::Approx(2.0).epsilon(1e-9));
    for (const auto& [x, y] : p.vertices) {
        CHECK(std::fabs(std::fabs(x) - 1.0) < 1e-12);
        CHECK(std::fabs(std::fabs(y) - 0.5) < 1e-12);
    }
}

TEST_CASE("boxToPolygon is periodic in pi") {
    auto p0 = geom::boxToPolygon(OrientedBox(0, 0, 2, 1, 0));
    auto p1 = geom::boxToPolygon(OrientedBox(0, 0, 2, 1, kPi));
    // Same corner set (order may be rotated).
    for (const auto& [x, y] : p1.vertices) {
        bool found = false;
        for (const auto& [x0, y0] : p0.vertices) {
            if (std::fabs(x - x0) < 1e-9 && std::fabs(y - y0) < 1e-9) found = true;
        }
        CHECK(found);
    }
}

TEST_CASE("boxToPolygon 90 degree rotation swaps extents") {
    auto p = geom::boxToPolygon(OrientedBox(1, 1, 2, 1, kPi / 2));
    CHECK(p.area() == doctest::Approx(2.0).epsilon(1e-9));
    double xMin = 1e9, xMax = -1e9, yMin = 1e9, yMax = -1e9;
    for (const auto& [x, y] : p.vertices) {
        xMin = std::min(xMin, x);
        xMax = std::max(xMax, x);
        yMin = std::min(yMin, y);
        yMax = std::max(yMax, y);
    }
    CHECK(xMin == doctest::Approx(0.5));
    CHECK(xMax == doctest::Approx(1.5));
    CHECK(yMin == doctest::Approx(0.0));
    CHECK(yMax == doctest::Approx(2.0));
}

TEST_CASE("convexIntersectionArea basics") {
    auto unit = geom::boxToPolygon(OrientedBox(0, 0, 1, 1, 0));
    CHECK(geom::convexIntersectionArea(unit, unit) == doctest::Approx(1.0).epsilon(1e-9));
    auto shifted = geom::boxToPolygon(OrientedBox(0.5, 0, 1, 1, 0));
    CHECK(geom::convexIntersectionArea(unit, shifted) == doctest::Approx(0.5).epsilon(1e-9));
    auto far = geom::boxToPolygon(OrientedBox(10, 0, 1, 1, 0));
    CHECK(geom::convexIntersectionArea(unit, far) == 0.0);
}

TEST_CASE("unit square vs 45-degree rotated copy") {
    // Regular octagon overlap: area = 2*(sqrt(2)-1)*2 = 8*(sqrt(2)-1)/2... the
    // closed form is 2*(sqrt(2)-1) * 2 = 0.8284271.
    auto a = geom::boxToPolygon(OrientedBox(0, 0, 1, 1, 0));
    auto b = geom::boxToPolygon(OrientedBox(0, 0, 1, 1, kPi / 4));
    const double expected = 2.0 * (std::sqrt(2.0) - 1.0);
    CHECK(geom::convexIntersectionArea(a, b) == doctest::Approx(expected).epsilon(1e-9));
    // Cross-check against the Monte-Carlo oracle.
    const double mc = geom::monteCarloIoU(OrientedBox(0, 0, 1, 1, 0),
                                          OrientedBox(0, 0, 1, 1, kPi / 4), 10'000'000, 7);
    const double iou = expected / (2.0 - expected);
    CHECK(std::fabs(mc - iou) < 0.001);
}

TEST_CASE("rotatedIoU basics") {
    OrientedBox a(0, 0, 1, 1, 0);
    CHECK(geom::rotatedIoU(a, a) == doctest::Approx(1.0));
    OrientedBox b(0.5, 0, 1, 1, 0);
    CHECK(geom::rotatedIoU(a, b) == doctest::Approx(1.0 / 3.0).epsilon(1e-9));
    OrientedBox c(0, 0, 1, 1, kPi / 4);
    const double inter = 2.0 * (std::sqrt(2.0) - 1.0);
    CHECK(geom::rotatedIoU(a, c) == doctest::Approx(inter / (2.0 - inter)).epsilon(1e-6));
}

TEST_CASE("rotatedIoU symmetry and heading period") {
    Rng rng(11);
    for (int i = 0; i < 200; ++i) {
        OrientedBox a = randomBox(rng);
        OrientedBox b = randomBox(rng);
        // Not bitwise: the clip order differs, and FMA contraction rounds
        // the two orders differently.
        CHECK(std::fabs(geom::rotatedIoU(a, b) - geom::rotatedIoU(b, a)) < 1e-12);
        OrientedBox aPi(a.cx, a.cy, a.l, a.w, a.theta + kPi);
        CHECK(std::fabs(geom::rotatedIoU(a, aPi) - 1.0) < 1e-9);
    }
}

TEST_CASE("monteCarloIoU trivial cases") {
    OrientedBox a(0, 0, 2, 1, 0.4);
    CHECK(geom::monteCarloIoU(a, a, 1000, 3) == 1.0);
    OrientedBox far(20, 0, 1, 1, 0);
    CHECK(geom::monteCarloIoU(a, far, 1000, 3) == 0.0);
}

TEST_CASE("monteCarloIoU cross-checks rotatedIoU") {
    OrientedBox a(0, 0, 2, 1, 0.3);
    OrientedBox b(0.5, 0.2, 1.5, 1, 1.0);
    const double mc = geom::monteCarloIoU(a, b, 10'000'000, 42);
    CHECK(std::fabs(mc - geom::rotatedIoU(a, b)) < 0.003);
}

TEST_CASE("rotatedIoU vs Monte-Carlo over random pairs") {
    Rng rng(5);
    for (int i = 0; i < 100; ++i) {
        OrientedBox a = randomBox(rng);
        OrientedBox b = randomBox(rng);
        b.cx = a.cx + rng.uniform(-3.0, 3.0);
        b.cy = a.cy + rng.uniform(-3.0, 3.0);
        const double mc = geom::monteCarloIoU(a, b, 200'000, 100 + i);
        CHECK(std::fabs(mc - geom::rotatedIoU(a, b)) < 0.02);
    }
}

TEST_CASE("nms keeps high score and disjoint boxes") {
    std::vector<OrientedBox> dets = {
        OrientedBox(0, 0, 2, 2, 0, 0.9),
        OrientedBox(0.5, 0, 2, 2, 0, 0.8),   // IoU with first well above 0.1
        OrientedBox(20, 0, 2, 2, 0, 0.7),
    };
    auto kept = geom::nmsIndices(dets, 0.1);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0] == 0);
    CHECK(kept[1] == 2);
}

TEST_CASE("nms single box and empty input") {
    CHECK(geom::nms({}, 0.1).empty());
    auto kept = geom::nms({OrientedBox(1, 2, 3, 1, 0.2, 0.5)}, 0.1);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].cx == 1);
}

TEST_CASE("nms matches brute-force reference on random sets") {
    Rng rng(23);
    for (int rep = 0; rep < 5; ++rep) {
        std::vector<OrientedBox> dets;
        for (int i = 0; i < 200; ++i) {
            OrientedBox b = randomBox(rng);
            b.score = rng.uniform();
            dets.push_back(b);
        }
        CHECK(geom::nmsIndices(dets, 0.1) == bruteNms(dets, 0.1));
    }
}

TEST_CASE("nms is permutation independent for distinct scores") {
    Rng rng(31);
    std::vector<OrientedBox> dets;
    for (int i = 0; i < 50; ++i) {
        OrientedBox b = randomBox(rng);
        b.score = (i + 1) * 0.01;  // distinct
        dets.push_back(b);
    }
    auto kept = geom::nms(dets, 0.1);
    std::vector<OrientedBox> shuffled = dets;
    // Deterministic shuffle.
    for (std::size_t i = shuffled.size(); i > 1; --i) {
        std::swap(shuffled[i - 1], shuffled[rng.uniformInt(i)]);
    }
    auto kept2 = geom::nms(shuffled, 0.1);
    REQUIRE(kept.size() == kept2.size());
    auto key = [](const OrientedBox& b) { return b.score.value_or(0.0); };
    std::vector<double> s1, s2;
    for (const auto& b : kept) s1.push_back(key(b));
    for (const auto& b : kept2) s2.push_back(key(b));
    std::sort(s1.begin(), s1.end());
    std::sort(s2.begin(), s2.end());
    CHECK(s1 == s2);
}
