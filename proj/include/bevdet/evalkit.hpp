#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bevdet/bevgrid.hpp"
#include "bevdet/geom.hpp"

namespace bevdet::evalkit {

struct MatchResult {
    std::vector<bool> detIsTp;        // per detection, score-desc processing
    std::vector<int> detMatchedGt;    // -1 for FP
    std::vector<bool> gtMatched;
    double iouThresh = 0.7;
};

// Greedy: detections by descending score, each takes the highest-IoU unmatched
// ground truth with IoU >= thresh.
MatchResult matchDetections(const std::vector<geom::OrientedBox>& dets,
                            const std::vector<geom::OrientedBox>& gts,
                            double iouThresh = 0.7);

struct ScoredDet {
    double score;
    bool tp;
};

enum class ApMode { Interp40, Continuous };

struct NoGroundTruth : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// AP in [0,1]. interp40 = mean of max precision at recalls 0.025..1.0;
// continuous = exact area under the precision envelope.
double averagePrecision(std::vector<ScoredDet> dets, int nGt, ApMode mode);

struct FrameBoxes {
    std::vector<geom::OrientedBox> dets;
    std::vector<geom::OrientedBox> gts;
};

// Pools per-frame matches into one PR curve.
double datasetAp(const std::vector<FrameBoxes>& frames, double iouThresh, ApMode mode);

struct RangeBin {
    double lo, hi;
    int nGt = 0;
    int nDet = 0;
    std::optional<double> apInterp40;    // absent when the bin has no GT
    std::optional<double> apContinuous;
};

// Evaluation restricted per bin to dets AND gts whose center range
// hypot(cx, cy) lies in [lo, hi).
std::vector<RangeBin> rangeBinnedEval(const std::vector<FrameBoxes>& frames,
                                      const std::vector<std::pair<double, double>>& bins,
                                      double iouThresh = 0.7);

// Mean |pred - gt| over masked pixels, per range bin of the pixel center.
// Empty bins are absent.
std::vector<std::pair<std::pair<double, double>, std::optional<double>>> groundErrorByRange(
    const std::vector<float>& pred, const std::vector<float>& gt,
    const std::vector<std::uint8_t>& mask, const bev::BevConfig& cfg,
    const std::vector<std::pair<double, double>>& bins);

struct SegMetrics {
    double pixelAccuracy = 0.0;
    std::optional<double> iou;  // absent when the union is empty
};

SegMetrics segmentationMetrics(const std::vector<float>& pred, const std::vector<float>& gt);

struct EvalReport {
    double apInterp40 = 0.0;   // percent
    double apContinuous = 0.0; // percent
    int nGt = 0;
    int nDet = 0;
    std::vector<std::pair<double, double>> prCurve;  // (recall, precision)
    std::vector<RangeBin> rangeBins;
    std::optional<double> roadAccuracy;
    std::optional<double> roadIoU;
    std::vector<std::pair<std::pair<double, double>, std::optional<double>>> groundL1ByRange;
};

EvalReport buildReport(const std::vector<FrameBoxes>& frames, double iouThresh,
                       const std::vector<std::pair<double, double>>& bins);

void emitReportJson(const EvalReport& report, const std::string& path);
EvalReport readReportJson(const std::string& path);
void emitReportCsv(const EvalReport& report, const std::string& path);
void emitReportSvg(const EvalReport& report, const std::string& path);

}  // namespace bevdet::evalkit
