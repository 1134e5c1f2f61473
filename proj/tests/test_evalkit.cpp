#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "bevdet/evalkit.hpp"

using namespace bevdet;
using namespace bevdet::evalkit;
using geom::OrientedBox;

namespace {

OrientedBox axisBox(double cx, double cy, double score = 1.0) {
    OrientedBox b(cx, cy, 4.0, 2.0, 0.0);
    b.score = score;
    return b;
}

}  // namespace

TEST_CASE("greedy matching pairs highest-score detections first") {
    // Two detections near one ground truth; the higher-scored one wins.
    std::vector<OrientedBox> gts = {axisBox(0, 0)};
    std::vector<OrientedBox> dets = {axisBox(0.1, 0, 0.4), axisBox(0.05, 0, 0.9)};
    auto m = matchDetections(dets, gts, 0.7);
    CHECK(!m.detIsTp[0]);
    CHECK(m.detIsTp[1]);
    CHECK(m.detMatchedGt[1] == 0);
    CHECK(m.gtMatched[0]);
}

TEST_CASE("matching respects the IoU threshold") {
    std::vector<OrientedBox> gts = {axisBox(0, 0)};
    std::vector<OrientedBox> dets = {axisBox(0, 1.2, 0.9)};  // IoU = 3.2/12.8 = 0.25
    CHECK(geom::rotatedIoU(dets[0], gts[0]) == doctest::Approx(0.25));
    CHECK(!matchDetections(dets, gts, 0.7).detIsTp[0]);
    CHECK(matchDetections(dets, gts, 0.2).detIsTp[0]);
}

TEST_CASE("each ground truth is matched at most once") {
    std::vector<OrientedBox> gts = {axisBox(0, 0)};
    std::vector<OrientedBox> dets = {axisBox(0, 0, 0.9), axisBox(0, 0, 0.8)};
    auto m = matchDetections(dets, gts, 0.7);
    CHECK(m.detIsTp[0]);
    CHECK(!m.detIsTp[1]);  // duplicate is a false positive
}

TEST_CASE("AP on the TP/FP/TP fixture") {
    // Scores 0.9 (TP), 0.8 (FP), 0.7 (TP); 3 ground truths total.
    std::vector<ScoredDet> dets = {{0.9, true}, {0.8, false}, {0.7, true}};

    // Continuous: envelope is 1 on (0,1/3], 2/3 on (1/3,2/3], 0 beyond.
    const double expectedCont = (1.0 / 3.0) * 1.0 + (1.0 / 3.0) * (2.0 / 3.0);
    CHECK(averagePrecision(dets, 3, ApMode::Continuous) ==
          doctest::Approx(expectedCont).epsilon(1e-12));
    CHECK(expectedCont == doctest::Approx(0.5556).epsilon(1e-3));

    // Interp40: recalls k/40 for k=1..13 see precision 1, k=14..26 see 2/3.
    const double expected40 = (13.0 * 1.0 + 13.0 * (2.0 / 3.0)) / 40.0;
    CHECK(averagePrecision(dets, 3, ApMode::Interp40) ==
          doctest::Approx(expected40).epsilon(1e-12));
}

TEST_CASE("perfect detector scores AP 1, pure-FP detector needs GT to score 0") {
    std::vector<ScoredDet> perfect = {{0.9, true}, {0.8, true}};
    CHECK(averagePrecision(perfect, 2, ApMode::Interp40) == doctest::Approx(1.0));
    CHECK(averagePrecision(perfect, 2, ApMode::Continuous) == doctest::Approx(1.0));

    std::vector<ScoredDet> junk = {{0.9, false}};
    CHECK(averagePrecision(junk, 2, ApMode::Interp40) == 0.0);
    CHECK(averagePrecision(junk, 2, ApMode::Continuous) == 0.0);
    CHECK_THROWS_AS(averagePrecision(junk, 0, ApMode::Interp40), NoGroundTruth);
}

TEST_CASE("removing a false positive never lowers AP") {
    std::vector<ScoredDet> withFp = {{0.9, true}, {0.8, false}, {0.7, true}, {0.6, false}};
    for (auto mode : {ApMode::Interp40, ApMode::Continuous}) {
        const double base = averagePrecision(withFp, 3, mode);
        for (std::size_t drop = 0; drop < withFp.size(); ++drop) {
            if (withFp[drop].tp) continue;
            auto reduced = withFp;
            reduced.erase(reduced.begin() + drop);
            CHECK(averagePrecision(reduced, 3, mode) >= base - 1e-12);
        }
    }
}

TEST_CASE("a trailing false positive leaves interp40 unchanged") {
    std::vector<ScoredDet> base = {{0.9, true}, {0.7, true}};
    auto extended = base;
    extended.push_back({0.1, false});
    CHECK(averagePrecision(base, 3, ApMode::Interp40) ==
          averagePrecision(extended, 3, ApMode::Interp40));
}

TEST_CASE("dataset AP pools matches across frames") {
    std::vector<FrameBoxes> frames(2);
    frames[0].gts = {axisBox(0, 0), axisBox(10, 0)};
    frames[0].dets = {axisBox(0, 0, 0.9), axisBox(30, 0, 0.8)};
    frames[1].gts = {axisBox(5, 5)};
    frames[1].dets = {axisBox(5, 5, 0.7)};
    // Pooled: TP@0.9, FP@0.8, TP@0.7 over 3 GT -> the fixture above.
    CHECK(datasetAp(frames, 0.7, ApMode::Continuous) == doctest::Approx(5.0 / 9.0));
}

TEST_CASE("single full-range bin reproduces the unbinned AP") {
    std::vector<FrameBoxes> frames(1);
    frames[0].gts = {axisBox(3, 4), axisBox(30, 0)};
    frames[0].dets = {axisBox(3, 4, 0.9), axisBox(30, 0.4, 0.6), axisBox(50, 2, 0.5)};
    auto bins = rangeBinnedEval(frames, {{0.0, 1000.0}}, 0.7);
    REQUIRE(bins.size() == 1);
    CHECK(bins[0].nGt == 2);
    CHECK(bins[0].nDet == 3);
    REQUIRE(bins[0].apInterp40.has_value());
    CHECK(*bins[0].apInterp40 ==
          doctest::Approx(datasetAp(frames, 0.7, ApMode::Interp40)));
    CHECK(*bins[0].apContinuous ==
          doctest::Approx(datasetAp(frames, 0.7, ApMode::Continuous)));
}

TEST_CASE("range bins split by center distance; empty bins have no AP") {
    std::vector<FrameBoxes> frames(1);
    frames[0].gts = {axisBox(3, 4), axisBox(30, 0)};   // ranges 5 and 30
    frames[0].dets = {axisBox(3, 4, 0.9), axisBox(30, 0, 0.8)};
    auto bins = rangeBinnedEval(frames, {{0, 10}, {10, 40}, {40, 80}}, 0.7);
    REQUIRE(bins.size() == 3);
    CHECK(bins[0].nGt == 1);
    CHECK(*bins[0].apInterp40 == doctest::Approx(1.0));
    CHECK(bins[1].nGt == 1);
    CHECK(*bins[1].apContinuous == doctest::Approx(1.0));
    CHECK(bins[2].nGt == 0);
    CHECK(!bins[2].apInterp40.has_value());
    CHECK(!bins[2].apContinuous.has_value());
}

TEST_CASE("ground error by range bins masked pixels at their center radius") {
    bev::BevConfig cfg(0.0, 4.0, 0.0, 4.0, -1.0, 3.0, 1.0, 1.0, 1.0);
    const std::size_t n = 16;
    std::vector<float> gt(n, 0.0f), pred(n, 0.0f);
    std::vector<std::uint8_t> mask(n, 1);
    // Pixel (0,0) center is (0.5,0.5), range ~0.707; (3,3) center (3.5,3.5) ~4.95.
    pred[0] = 0.2f;
    pred[15] = 0.5f;
    mask[1] = 0;  // excluded even though it has error
    pred[1] = 9.0f;
    auto bins = groundErrorByRange(pred, gt, mask, cfg, {{0.0, 2.0}, {2.0, 6.0}, {6.0, 9.0}});
    REQUIRE(bins.size() == 3);
    // Bin [0,2): pixels (0,0),(1,0),(0,1); (0,1) is masked out and (1,1)'s
    // center sits at radius 2.12, in the next bin.
    CHECK(*bins[0].second == doctest::Approx(0.2 / 2.0));
    REQUIRE(bins[1].second.has_value());
    CHECK(*bins[1].second == doctest::Approx(0.5 / 13.0));
    CHECK(!bins[2].second.has_value());
}

TEST_CASE("segmentation metrics: accuracy and IoU") {
    std::vector<float> gt = {1, 1, 0, 0};
    std::vector<float> pred = {1, 0, 1, 0};
    auto m = segmentationMetrics(pred, gt);
    CHECK(m.pixelAccuracy == doctest::Approx(0.5));
    REQUIRE(m.iou.has_value());
    CHECK(*m.iou == doctest::Approx(1.0 / 3.0));

    auto empty = segmentationMetrics(std::vector<float>(4, 0.0f), std::vector<float>(4, 0.0f));
    CHECK(empty.pixelAccuracy == doctest::Approx(1.0));
    CHECK(!empty.iou.has_value());
}

TEST_CASE("report emission: JSON round trip, CSV columns, SVG curve") {
    namespace fs = std::filesystem;
    std::vector<FrameBoxes> frames(1);
    frames[0].gts = {axisBox(3, 4), axisBox(30, 0)};
    frames[0].dets = {axisBox(3, 4, 0.9), axisBox(50, 2, 0.5)};
    EvalReport rep = buildReport(frames, 0.7, {{0, 10}, {10, 40}});
    rep.roadAccuracy = 0.93;
    rep.groundL1ByRange = {{{0.0, 10.0}, 0.07}, {{10.0, 40.0}, std::nullopt}};

    const auto dir = fs::temp_directory_path();
    const std::string jsonPath = (dir / "bevdet_report.json").string();
    emitReportJson(rep, jsonPath);
    EvalReport back = readReportJson(jsonPath);
    CHECK(back.apInterp40 == rep.apInterp40);
    CHECK(back.apContinuous == rep.apContinuous);
    CHECK(back.nGt == rep.nGt);
    CHECK(back.prCurve == rep.prCurve);
    REQUIRE(back.rangeBins.size() == 2);
    CHECK(back.rangeBins[0].apInterp40 == rep.rangeBins[0].apInterp40);
    CHECK(back.roadAccuracy == rep.roadAccuracy);
    CHECK(!back.roadIoU.has_value());
    CHECK(back.groundL1ByRange == rep.groundL1ByRange);

    const std::string csvPath = (dir / "bevdet_report.csv").string();
    emitReportCsv(rep, csvPath);
    std::ifstream csv(csvPath);
    std::string header;
    std::getline(csv, header);
    CHECK(header == "bin_lo,bin_hi,nGT,nDet,AP_interp40,AP_continuous");
    int rows = 0;
    for (std::string line; std::getline(csv, line);)
        if (!line.empty()) ++rows;
    CHECK(rows == 2);

    const std::string svgPath = (dir / "bevdet_report.svg").string();
    emitReportSvg(rep, svgPath);
    std::ifstream svg(svgPath);
    std::string all((std::istreambuf_iterator<char>(svg)), std::istreambuf_iterator<char>());
    CHECK(all.find("<svg") != std::string::npos);
    CHECK(all.find("polyline") != std::string::npos);
    CHECK(all.find("recall") != std::string::npos);
    fs::remove(jsonPath);
    fs::remove(csvPath);
    fs::remove(svgPath);
}
