#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "bevdet/mapnet.hpp"
#include "bevdet/rng.hpp"
#include "bevdet/synthworld.hpp"

using namespace bevdet;
using namespace bevdet::mapnet;
using nn::Tensor;

namespace {

// 32x32 cells, 8 z slices -> 11 channels.
bev::BevConfig smallGrid() { return bev::BevConfig(0, 12.8, -6.4, 6.4, -1, 3, 0.4, 0.4, 0.5); }

UNetConfig tinyUNet() {
    UNetConfig cfg;
    cfg.stageChannels = {4, 6, 8};
    cfg.convsPerStage = 1;
    return cfg;
}

// Points on the plane z = a*x + c, one per BEV cell over part of the grid.
bev::PointCloud planeCloud(const bev::BevConfig& cfg, double a, double c) {
    bev::PointCloud cloud;
    for (int i = 0; i < cfg.heightPx(); ++i) {
        for (int j = 0; j < cfg.widthPx(); ++j) {
            if ((i + j) % 2) continue;  // leave some columns empty
            const double x = cfg.xMin + (i + 0.5) * cfg.dL;
            const double y = cfg.yMin + (j + 0.5) * cfg.dW;
            cloud.push(float(x), float(y), float(a * x + c), 0.4f);
        }
    }
    return cloud;
}

std::vector<float> planeTarget(const bev::BevConfig& cfg, double a, double c) {
    std::vector<float> t(std::size_t(cfg.heightPx()) * cfg.widthPx());
    for (int i = 0; i < cfg.heightPx(); ++i)
        for (int j = 0; j < cfg.widthPx(); ++j)
            t[std::size_t(i) * cfg.widthPx() + j] =
                float(a * (cfg.xMin + (i + 0.5) * cfg.dL) + c);
    return t;
}

Tensor toTensor(const bev::BevTensor& b) {
    Tensor t({1, b.channels, b.height, b.width});
    t.data = b.data;
    return t;
}

}  // namespace

TEST_CASE("unet config validation") {
    CHECK_NOTHROW(UNetConfig{}.validate());
    UNetConfig bad;
    bad.stageChannels = {8};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = UNetConfig{};
    bad.convsPerStage = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("unet output matches the input resolution") {
    MapNet net = buildUNet(tinyUNet(), 5);
    auto shapes = net.graph.inferShapes({1, 5, 32, 32});
    CHECK(shapes[net.outputNode] == std::vector<int>{1, 1, 32, 32});
    // Non-power-of-two sizes survive the down/up path too.
    auto odd = net.graph.inferShapes({1, 5, 24, 20});
    CHECK(odd[net.outputNode] == std::vector<int>{1, 1, 24, 20});

    MapNet deep = buildUNet(UNetConfig{}, 11);  // default 4-stage config
    auto s4 = deep.graph.inferShapes({1, 11, 64, 64});
    CHECK(s4[deep.outputNode] == std::vector<int>{1, 1, 64, 64});
}

TEST_CASE("map input rasterization matches plain rasterize and reports the mask") {
    auto cfg = smallGrid();
    SUBCASE("empty cloud") {
        auto in = mapInputRasterize({}, cfg);
        for (float v : in.tensor.data) CHECK(v == 0.0f);
        for (auto m : in.hasPoints) CHECK(!m);
    }
    SUBCASE("agrees with rasterize, no ground query") {
        bev::PointCloud cloud = planeCloud(cfg, 0.05, 0.2);
        auto in = mapInputRasterize(cloud, cfg);
        auto plain = bev::rasterize(cloud, cfg, nullptr);
        CHECK(in.tensor.data == plain.data);
        // Column with points -> mask true there.
        int set = 0;
        for (auto m : in.hasPoints) set += m ? 1 : 0;
        CHECK(set == int(cloud.size()));  // one point per column in this cloud
    }
}

TEST_CASE("ground loss: masked L2 with zero gradient off-mask") {
    std::vector<float> gt = {0.0f, 1.0f, 2.0f, 3.0f};
    std::vector<std::uint8_t> mask = {1, 0, 1, 0};

    SUBCASE("perfect prediction") {
        std::vector<float> grad;
        CHECK(groundLoss(gt, gt, mask, &grad) == 0.0);
        for (float g : grad) CHECK(g == 0.0f);
    }
    SUBCASE("single masked error of 0.1 m") {
        std::vector<float> pred = gt;
        pred[2] += 0.1f;
        std::vector<float> grad;
        CHECK(groundLoss(pred, gt, mask, &grad) == doctest::Approx(0.01).epsilon(1e-5));
        CHECK(grad[2] == doctest::Approx(0.2).epsilon(1e-5));
    }
    SUBCASE("unmasked error is invisible") {
        std::vector<float> pred = gt;
        pred[1] += 5.0f;
        std::vector<float> grad;
        CHECK(groundLoss(pred, gt, mask, &grad) == 0.0);
        CHECK(grad[1] == 0.0f);
    }
    SUBCASE("shape mismatch") {
        std::vector<float> shortPred = {0.0f};
        CHECK_THROWS_AS(groundLoss(shortPred, gt, mask, nullptr), nn::ShapeMismatch);
    }
}

TEST_CASE("road loss: summed BCE") {
    const int hw = 12;
    std::vector<float> p(hw, 0.5f), gt(hw, 1.0f);
    CHECK(roadLoss(p, gt, nullptr) == doctest::Approx(hw * std::log(2.0)).epsilon(1e-6));

    std::vector<float> grad;
    std::vector<float> gt0(hw, 0.0f);
    roadLoss(p, gt0, &grad);
    for (float g : grad) CHECK(g > 0.0f);  // pushing p down where gt = 0

    std::vector<float> perfect(hw, 1.0f);
    CHECK(roadLoss(perfect, gt, nullptr) < 1e-5);
}

TEST_CASE("ground net overfits a plane to < 2 cm masked L1") {
    auto cfg = smallGrid();
    const double a = 0.05, c = 0.2;
    bev::PointCloud cloud = planeCloud(cfg, a, c);
    MapInput in = mapInputRasterize(cloud, cfg);

    std::vector<MapTrainFrame> frames(1);
    frames[0].input = toTensor(in.tensor);
    frames[0].target = planeTarget(cfg, a, c);
    frames[0].mask = in.hasPoints;

    MapNet ground = buildUNet(tinyUNet(), in.tensor.channels);
    ground.graph.initParams(3);
    MapHyper hyper;
    hyper.lr = 2e-4;  // L2 is summed over ~500 pixels; keep steps small
    hyper.epochs = 800;
    hyper.lrDecay = {{500, 0.3}};
    auto log = trainMapNet(ground, frames, MapTask::Ground, hyper, 11);
    CHECK(log.back().loss < log.front().loss);

    MapNet road = buildUNet(tinyUNet(), in.tensor.channels);
    road.graph.initParams(4);
    Priors priors = estimatePriors(cloud, cfg, ground, road);
    double l1 = 0.0;
    int cnt = 0;
    for (std::size_t i = 0; i < priors.ground.size(); ++i) {
        if (!in.hasPoints[i]) continue;
        l1 += std::fabs(priors.ground[i] - frames[0].target[i]);
        ++cnt;
    }
    REQUIRE(cnt > 0);
    CHECK(l1 / cnt < 0.02);

    SUBCASE("deterministic inference") {
        Priors again = estimatePriors(cloud, cfg, ground, road);
        CHECK(again.ground == priors.ground);
        CHECK(again.roadProb == priors.roadProb);
    }
    SUBCASE("empty cloud still yields defined output") {
        Priors empty = estimatePriors({}, cfg, ground, road);
        for (float v : empty.ground) CHECK(std::isfinite(v));
        for (float v : empty.roadProb) {
            CHECK(v > 0.0f);
            CHECK(v < 1.0f);
        }
    }
}

TEST_CASE("road net overfits a stripe mask") {
    auto cfg = smallGrid();
    bev::PointCloud cloud = planeCloud(cfg, 0.0, 0.0);
    MapInput in = mapInputRasterize(cloud, cfg);

    std::vector<MapTrainFrame> frames(1);
    frames[0].input = toTensor(in.tensor);
    frames[0].target.assign(std::size_t(32) * 32, 0.0f);
    for (int i = 0; i < 32; ++i)
        for (int j = 10; j < 22; ++j) frames[0].target[std::size_t(i) * 32 + j] = 1.0f;

    MapNet road = buildUNet(tinyUNet(), in.tensor.channels);
    road.graph.initParams(9);
    MapHyper hyper;
    hyper.lr = 1e-3;
    hyper.epochs = 200;
    trainMapNet(road, frames, MapTask::Road, hyper, 21);

    MapNet ground = buildUNet(tinyUNet(), in.tensor.channels);
    ground.graph.initParams(1);
    Priors priors = estimatePriors(cloud, cfg, ground, road);
    int correct = 0;
    for (std::size_t i = 0; i < priors.roadMask.size(); ++i)
        correct += (priors.roadMask[i] >= 0.5f) == (frames[0].target[i] >= 0.5f);
    CHECK(double(correct) / priors.roadMask.size() > 0.95);
}

TEST_CASE("map net training is deterministic per seed") {
    auto cfg = smallGrid();
    bev::PointCloud cloud = planeCloud(cfg, 0.02, -0.1);
    MapInput in = mapInputRasterize(cloud, cfg);
    std::vector<MapTrainFrame> frames(1);
    frames[0].input = toTensor(in.tensor);
    frames[0].target = planeTarget(cfg, 0.02, -0.1);
    frames[0].mask = in.hasPoints;

    MapHyper hyper;
    hyper.lr = 1e-4;
    hyper.epochs = 5;
    MapNet a = buildUNet(tinyUNet(), in.tensor.channels);
    MapNet b = buildUNet(tinyUNet(), in.tensor.channels);
    a.graph.initParams(6);
    b.graph.initParams(6);
    auto la = trainMapNet(a, frames, MapTask::Ground, hyper, 33);
    auto lb = trainMapNet(b, frames, MapTask::Ground, hyper, 33);
    for (std::size_t i = 0; i < la.size(); ++i) CHECK(la[i].loss == lb[i].loss);
    for (const auto& [name, p] : a.graph.params)
        CHECK(p.tensor.data == b.graph.params.at(name).tensor.data);
}

TEST_CASE("ground estimate raster queries back the predicted values") {
    auto cfg = smallGrid();
    std::vector<float> est(std::size_t(32) * 32);
    Rng rng(2);
    for (auto& v : est) v = float(rng.uniform(-1.0, 1.0));
    auto raster = groundEstimateToRaster(est, cfg);
    for (int i = 0; i < 32; i += 5) {
        for (int j = 0; j < 32; j += 7) {
            const double x = cfg.xMin + (i + 0.5) * cfg.dL;
            const double y = cfg.yMin + (j + 0.5) * cfg.dW;
            bool ooc = false;
            CHECK(mapdata::queryGroundHeight(raster, x, y, &ooc) ==
                  doctest::Approx(est[std::size_t(i) * 32 + j]).epsilon(1e-6));
            CHECK(!ooc);
        }
    }
}

TEST_CASE("road PGM round trip") {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "bevdet_road.pgm").string();
    std::vector<float> mask(6 * 4, 0.0f);
    mask[3] = 1.0f;
    mask[17] = 1.0f;
    writeRoadPgm(mask, 6, 4, path);
    int h = 0, w = 0;
    auto back = readRoadPgm(path, &h, &w);
    CHECK(h == 6);
    CHECK(w == 4);
    CHECK(back == mask);

    std::ifstream f(path, std::ios::binary);
    std::string magic;
    f >> magic;
    CHECK(magic == "P5");
    fs::remove(path);
}

TEST_CASE("detectWithPriors equals the hand-wired offline pipeline") {
    auto cfg = smallGrid();
    synth::SceneSpec spec;
    spec.seed = 5;
    spec.xMax = 12.8;
    spec.yMin = -6.4;
    spec.yMax = 6.4;
    spec.nVehicles = 1;
    spec.lidar = synth::defaultLidar(16);
    synth::Scene scene = synth::generateScene(spec);

    std::vector<float> roadMask(std::size_t(32) * 32, 0.0f);
    for (int i = 0; i < 32; ++i)
        for (int j = 0; j < 32; ++j) {
            const double x = cfg.xMin + (i + 0.5) * cfg.dL;
            const double y = cfg.yMin + (j + 0.5) * cfg.dW;
            if (mapdata::pointInRing(scene.map.road.polygons[0], x, y))
                roadMask[std::size_t(i) * 32 + j] = 1.0f;
        }

    det::DetectorConfig detCfg;
    detCfg.blockLayers = {1, 1, 1, 1};
    detCfg.blockFilters = {2, 3, 3, 4};
    detCfg.headerLayers = 1;
    detCfg.headerFilters = 4;
    const int inCh = cfg.channels() + 1;
    det::DetectorNet net = det::buildDetector(detCfg, inCh);
    net.graph.initParams(12);
    det::NormStats stats;

    auto viaHelper =
        detectWithPriors(scene.cloud, cfg, scene.map.ground, roadMask, net, stats, detCfg);

    bev::GroundQuery q = [&](double x, double y) {
        bool ooc = false;
        return mapdata::queryGroundHeight(scene.map.ground, x, y, &ooc);
    };
    auto bevT = bev::rasterize(scene.cloud, cfg, q);
    bevT = bev::concatRoadChannel(bevT, roadMask);
    Tensor input({1, bevT.channels, bevT.height, bevT.width});
    input.data = bevT.data;
    auto manual = det::runDetector(net, input, stats, detCfg, cfg);

    REQUIRE(viaHelper.size() == manual.size());
    for (std::size_t i = 0; i < manual.size(); ++i) {
        CHECK(viaHelper[i].cx == manual[i].cx);
        CHECK(viaHelper[i].theta == manual[i].theta);
        CHECK(*viaHelper[i].score == *manual[i].score);
    }
}

TEST_CASE("onlineDetect runs end to end on a synthetic frame") {
    auto cfg = smallGrid();
    synth::SceneSpec spec;
    spec.seed = 8;
    spec.xMax = 12.8;
    spec.yMin = -6.4;
    spec.yMax = 6.4;
    spec.nVehicles = 1;
    spec.lidar = synth::defaultLidar(16);
    synth::Scene scene = synth::generateScene(spec);

    MapNet ground = buildUNet(tinyUNet(), cfg.channels());
    MapNet road = buildUNet(tinyUNet(), cfg.channels());
    ground.graph.initParams(1);
    road.graph.initParams(2);

    det::DetectorConfig detCfg;
    detCfg.blockLayers = {1, 1, 1, 1};
    detCfg.blockFilters = {2, 3, 3, 4};
    detCfg.headerLayers = 1;
    detCfg.headerFilters = 4;
    det::DetectorNet net = det::buildDetector(detCfg, cfg.channels() + 1);
    net.graph.initParams(3);
    det::NormStats stats;

    auto dets = onlineDetect(scene.cloud, cfg, ground, road, net, stats, detCfg);
    for (const auto& d : dets) {
        CHECK(std::isfinite(d.cx));
        CHECK(d.valid());
    }
}
