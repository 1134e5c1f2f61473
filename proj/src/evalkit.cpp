#include "bevdet/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace bevdet::evalkit {

using geom::OrientedBox;
using nlohmann::json;

MatchResult matchDetections(const std::vector<OrientedBox>& dets,
                            const std::vector<OrientedBox>& gts, double iouThresh) {
    MatchResult res;
    res.iouThresh = iouThresh;
    res.detIsTp.assign(dets.size(), false);
    res.detMatchedGt.assign(dets.size(), -1);
    res.gtMatched.assign(gts.size(), false);

    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return dets[a].score > dets[b].score;
    });

    for (std::size_t di : order) {
        double best = iouThresh;
        int bestGt = -1;
        for (std::size_t gi = 0; gi < gts.size(); ++gi) {
            if (res.gtMatched[gi]) continue;
            double iou = geom::rotatedIoU(dets[di], gts[gi]);
            if (iou >= best && (bestGt < 0 || iou > best)) {
                best = iou;
                bestGt = static_cast<int>(gi);
            }
        }
        if (bestGt >= 0) {
            res.detIsTp[di] = true;
            res.detMatchedGt[di] = bestGt;
            res.gtMatched[bestGt] = true;
        }
    }
    return res;
}

namespace {

// (recall, precision) samples in detection order after score-desc sort.
std::vector<std::pair<double, double>> prPoints(std::vector<ScoredDet>& dets, int nGt) {
    std::stable_sort(dets.begin(), dets.end(),
                     [](const ScoredDet& a, const ScoredDet& b) { return a.score > b.score; });
    std::vector<std::pair<double, double>> pts;
    pts.reserve(dets.size());
    int tp = 0;
    for (std::size_t i = 0; i < dets.size(); ++i) {
        if (dets[i].tp) ++tp;
        double recall = static_cast<double>(tp) / nGt;
        double precision = static_cast<double>(tp) / static_cast<double>(i + 1);
        pts.emplace_back(recall, precision);
    }
    return pts;
}

}  // namespace

double averagePrecision(std::vector<ScoredDet> dets, int nGt, ApMode mode) {
    if (nGt <= 0) throw NoGroundTruth("averagePrecision: no ground truth boxes");
    auto pts = prPoints(dets, nGt);

    if (mode == ApMode::Interp40) {
        double sum = 0.0;
        for (int k = 1; k <= 40; ++k) {
            double r = k / 40.0;
            double best = 0.0;
            for (const auto& [recall, precision] : pts)
                if (recall >= r - 1e-12) best = std::max(best, precision);
            sum += best;
        }
        return sum / 40.0;
    }

    // Precision envelope: p(r) = max precision at any recall >= r. Integrate
    // exactly over the recall steps (recall only changes at true positives).
    double area = 0.0;
    double prevRecall = 0.0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        if (pts[i].first <= prevRecall) continue;  // FP: recall unchanged
        double best = 0.0;
        for (std::size_t j = i; j < pts.size(); ++j) best = std::max(best, pts[j].second);
        area += (pts[i].first - prevRecall) * best;
        prevRecall = pts[i].first;
    }
    return area;
}

namespace {

std::pair<std::vector<ScoredDet>, int> poolFrames(const std::vector<FrameBoxes>& frames,
                                                  double iouThresh) {
    std::vector<ScoredDet> pooled;
    int nGt = 0;
    for (const auto& f : frames) {
        auto m = matchDetections(f.dets, f.gts, iouThresh);
        for (std::size_t i = 0; i < f.dets.size(); ++i)
            pooled.push_back({f.dets[i].score.value_or(0.0), m.detIsTp[i]});
        nGt += static_cast<int>(f.gts.size());
    }
    return {std::move(pooled), nGt};
}

}  // namespace

double datasetAp(const std::vector<FrameBoxes>& frames, double iouThresh, ApMode mode) {
    auto [pooled, nGt] = poolFrames(frames, iouThresh);
    return averagePrecision(std::move(pooled), nGt, mode);
}

std::vector<RangeBin> rangeBinnedEval(const std::vector<FrameBoxes>& frames,
                                      const std::vector<std::pair<double, double>>& bins,
                                      double iouThresh) {
    std::vector<RangeBin> out;
    for (auto [lo, hi] : bins) {
        auto inBin = [&](const OrientedBox& b) {
            double r = std::hypot(b.cx, b.cy);
            return r >= lo && r < hi;
        };
        std::vector<FrameBoxes> sub;
        RangeBin rb{lo, hi};
        for (const auto& f : frames) {
            FrameBoxes fb;
            for (const auto& d : f.dets)
                if (inBin(d)) fb.dets.push_back(d);
            for (const auto& g : f.gts)
                if (inBin(g)) fb.gts.push_back(g);
            rb.nDet += static_cast<int>(fb.dets.size());
            rb.nGt += static_cast<int>(fb.gts.size());
            sub.push_back(std::move(fb));
        }
        if (rb.nGt > 0) {
            rb.apInterp40 = datasetAp(sub, iouThresh, ApMode::Interp40);
            rb.apContinuous = datasetAp(sub, iouThresh, ApMode::Continuous);
        }
        out.push_back(rb);
    }
    return out;
}

std::vector<std::pair<std::pair<double, double>, std::optional<double>>> groundErrorByRange(
    const std::vector<float>& pred, const std::vector<float>& gt,
    const std::vector<std::uint8_t>& mask, const bev::BevConfig& cfg,
    const std::vector<std::pair<double, double>>& bins) {
    const std::size_t n = static_cast<std::size_t>(cfg.heightPx()) * cfg.widthPx();
    if (pred.size() != n || gt.size() != n || mask.size() != n)
        throw std::invalid_argument("groundErrorByRange: size mismatch with grid");

    std::vector<double> sum(bins.size(), 0.0);
    std::vector<std::int64_t> cnt(bins.size(), 0);
    for (int i = 0; i < cfg.heightPx(); ++i) {
        for (int j = 0; j < cfg.widthPx(); ++j) {
            std::size_t idx = static_cast<std::size_t>(i) * cfg.widthPx() + j;
            if (!mask[idx]) continue;
            double x = cfg.xMin + (i + 0.5) * cfg.dL;  // rows index x
            double y = cfg.yMin + (j + 0.5) * cfg.dW;
            double r = std::hypot(x, y);
            for (std::size_t b = 0; b < bins.size(); ++b) {
                if (r >= bins[b].first && r < bins[b].second) {
                    sum[b] += std::abs(static_cast<double>(pred[idx]) - gt[idx]);
                    ++cnt[b];
                    break;
                }
            }
        }
    }
    std::vector<std::pair<std::pair<double, double>, std::optional<double>>> out;
    for (std::size_t b = 0; b < bins.size(); ++b) {
        std::optional<double> v;
        if (cnt[b] > 0) v = sum[b] / cnt[b];
        out.push_back({bins[b], v});
    }
    return out;
}

SegMetrics segmentationMetrics(const std::vector<float>& pred, const std::vector<float>& gt) {
    if (pred.size() != gt.size() || pred.empty())
        throw std::invalid_argument("segmentationMetrics: size mismatch");
    std::int64_t correct = 0, inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        bool p = pred[i] >= 0.5f;
        bool g = gt[i] >= 0.5f;
        correct += (p == g);
        inter += (p && g);
        uni += (p || g);
    }
    SegMetrics m;
    m.pixelAccuracy = static_cast<double>(correct) / pred.size();
    if (uni > 0) m.iou = static_cast<double>(inter) / uni;
    return m;
}

EvalReport buildReport(const std::vector<FrameBoxes>& frames, double iouThresh,
                       const std::vector<std::pair<double, double>>& bins) {
    EvalReport rep;
    auto [pooled, nGt] = poolFrames(frames, iouThresh);
    rep.nGt = nGt;
    rep.nDet = static_cast<int>(pooled.size());
    rep.apInterp40 = 100.0 * averagePrecision(pooled, nGt, ApMode::Interp40);
    rep.apContinuous = 100.0 * averagePrecision(pooled, nGt, ApMode::Continuous);
    rep.prCurve = prPoints(pooled, nGt);
    rep.rangeBins = rangeBinnedEval(frames, bins, iouThresh);
    return rep;
}

namespace {

json optToJson(const std::optional<double>& v) {
    if (v) return *v;
    return nullptr;
}

std::optional<double> optFromJson(const json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<double>();
}

}  // namespace

void emitReportJson(const EvalReport& report, const std::string& path) {
    json j;
    j["ap_interp40"] = report.apInterp40;
    j["ap_continuous"] = report.apContinuous;
    j["n_gt"] = report.nGt;
    j["n_det"] = report.nDet;
    j["pr_curve"] = json::array();
    for (const auto& [r, p] : report.prCurve) j["pr_curve"].push_back({r, p});
    j["range_bins"] = json::array();
    for (const auto& b : report.rangeBins) {
        j["range_bins"].push_back({{"lo", b.lo},
                                   {"hi", b.hi},
                                   {"n_gt", b.nGt},
                                   {"n_det", b.nDet},
                                   {"ap_interp40", optToJson(b.apInterp40)},
                                   {"ap_continuous", optToJson(b.apContinuous)}});
    }
    j["road_accuracy"] = optToJson(report.roadAccuracy);
    j["road_iou"] = optToJson(report.roadIoU);
    j["ground_l1_by_range"] = json::array();
    for (const auto& [bin, v] : report.groundL1ByRange)
        j["ground_l1_by_range"].push_back({{"lo", bin.first}, {"hi", bin.second},
                                           {"mean_abs_err", optToJson(v)}});
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << j.dump(2) << "\n";
}

EvalReport readReportJson(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path);
    json j;
    try {
        f >> j;
    } catch (const json::parse_error& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
    EvalReport rep;
    rep.apInterp40 = j.at("ap_interp40").get<double>();
    rep.apContinuous = j.at("ap_continuous").get<double>();
    rep.nGt = j.at("n_gt").get<int>();
    rep.nDet = j.at("n_det").get<int>();
    for (const auto& pt : j.at("pr_curve"))
        rep.prCurve.emplace_back(pt.at(0).get<double>(), pt.at(1).get<double>());
    for (const auto& b : j.at("range_bins")) {
        RangeBin rb;
        rb.lo = b.at("lo").get<double>();
        rb.hi = b.at("hi").get<double>();
        rb.nGt = b.at("n_gt").get<int>();
        rb.nDet = b.at("n_det").get<int>();
        rb.apInterp40 = optFromJson(b.at("ap_interp40"));
        rb.apContinuous = optFromJson(b.at("ap_continuous"));
        rep.rangeBins.push_back(rb);
    }
    rep.roadAccuracy = optFromJson(j.at("road_accuracy"));
    rep.roadIoU = optFromJson(j.at("road_iou"));
    for (const auto& b : j.at("ground_l1_by_range"))
        rep.groundL1ByRange.push_back({{b.at("lo").get<double>(), b.at("hi").get<double>()},
                                       optFromJson(b.at("mean_abs_err"))});
    return rep;
}

void emitReportCsv(const EvalReport& report, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << "bin_lo,bin_hi,nGT,nDet,AP_interp40,AP_continuous\n";
    auto cell = [](const std::optional<double>& v) {
        if (!v) return std::string();
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6f", *v);
        return std::string(buf);
    };
    for (const auto& b : report.rangeBins)
        f << b.lo << "," << b.hi << "," << b.nGt << "," << b.nDet << ","
          << cell(b.apInterp40) << "," << cell(b.apContinuous) << "\n";
}

void emitReportSvg(const EvalReport& report, const std::string& path) {
    const int w = 480, h = 480, m = 48;
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    auto px = [&](double r) { return m + r * (w - 2 * m); };
    auto py = [&](double p) { return h - m - p * (h - 2 * m); };
    f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
    f << "<rect width='100%' height='100%' fill='white'/>\n";
    f << "<line x1='" << px(0) << "' y1='" << py(0) << "' x2='" << px(1) << "' y2='" << py(0)
      << "' stroke='black'/>\n";
    f << "<line x1='" << px(0) << "' y1='" << py(0) << "' x2='" << px(0) << "' y2='" << py(1)
      << "' stroke='black'/>\n";
    f << "<text x='" << w / 2 << "' y='" << h - 12 << "' text-anchor='middle'>recall</text>\n";
    f << "<text x='14' y='" << h / 2 << "' text-anchor='middle' transform='rotate(-90 14 "
      << h / 2 << ")'>precision</text>\n";
    if (!report.prCurve.empty()) {
        f << "<polyline fill='none' stroke='steelblue' stroke-width='2' points='";
        f << px(0) << "," << py(report.prCurve.front().second) << " ";
        for (const auto& [r, p] : report.prCurve) f << px(r) << "," << py(p) << " ";
        f << "'/>\n";
    }
    char title[96];
    std::snprintf(title, sizeof title, "AP interp40 = %.2f%%  continuous = %.2f%%",
                  report.apInterp40, report.apContinuous);
    f << "<text x='" << w / 2 << "' y='24' text-anchor='middle'>" << title << "</text>\n";
    f << "</svg>\n";
}

}  // namespace bevdet::evalkit
