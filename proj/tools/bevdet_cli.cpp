// bevdet command line: dataset generation, training, inference, evaluation.
//
// Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric divergence.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bevdet/bevgrid.hpp"
#include "bevdet/detector.hpp"
#include "bevdet/evalkit.hpp"
#include "bevdet/kitti.hpp"
#include "bevdet/mapdata.hpp"
#include "bevdet/mapnet.hpp"
#include "bevdet/synthworld.hpp"

using nlohmann::json;
using namespace bevdet;

namespace {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Experiment configuration: JSON file + presets + flag overrides (flags win).

enum class MapMode { None, Plane, Offline, Online };

struct ExperimentConfig {
    double xMin = 0.0, xMax = 70.4, yMin = -40.0, yMax = 40.0, zMin = -1.0, zMax = 3.0;
    double dL = 0.4, dW = 0.4, dH = 0.5;

    bool smallNet = true;  // detector + unet size preset
    double scoreThresh = 0.2;
    double nmsIoU = 0.1;

    double lr = 0.01;
    double momentum = 0.9;
    int epochs = 10;
    std::vector<std::pair<int, double>> lrDecay;
    double focalAlpha = 0.75;
    double focalGamma = 0.5;
    double dropoutProb = 0.0;
    double multiTaskWeight = 1.0;

    MapMode mapMode = MapMode::None;
    det::FusionMode fusion = det::FusionMode::InputFusion;

    std::string dataset;
    std::string detectorWeights;
    std::string groundWeights;
    std::string roadWeights;

    std::uint64_t seed = 1;
    int threads = 0;  // 0: HDNETBEV_THREADS or 1
};

MapMode parseMapMode(const std::string& s) {
    if (s == "none") return MapMode::None;
    if (s == "plane") return MapMode::Plane;
    if (s == "offline") return MapMode::Offline;
    if (s == "online") return MapMode::Online;
    throw ConfigError("mapMode: expected none|plane|offline|online, got '" + s + "'");
}

const char* mapModeName(MapMode m) {
    switch (m) {
        case MapMode::None: return "none";
        case MapMode::Plane: return "plane";
        case MapMode::Offline: return "offline";
        default: return "online";
    }
}

det::FusionMode parseFusion(const std::string& s) {
    if (s == "input") return det::FusionMode::InputFusion;
    if (s == "multitask") return det::FusionMode::MultiTask;
    if (s == "outputmask") return det::FusionMode::OutputMasking;
    throw ConfigError("fusion: expected input|multitask|outputmask, got '" + s + "'");
}

const char* fusionName(det::FusionMode f) {
    switch (f) {
        case det::FusionMode::InputFusion: return "input";
        case det::FusionMode::MultiTask: return "multitask";
        case det::FusionMode::OutputMasking: return "outputmask";
        default: return "none";
    }
}

void rejectUnknownKeys(const json& obj, const std::vector<std::string>& allowed,
                       const std::string& path) {
    for (const auto& [key, _] : obj.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw ConfigError("unknown config key '" + path + key + "'");
    }
}

void applyPreset(ExperimentConfig& c, const std::string& preset) {
    if (preset == "kitti") {
        c.lr = 0.01;
        c.lrDecay = {{30, 0.1}, {45, 0.1}};
        c.focalAlpha = 0.75;
        c.focalGamma = 0.5;
    } else if (preset == "tor4d-like") {
        c.lr = 0.02;
        c.dL = c.dW = 0.2;
    } else {
        throw ConfigError("unknown preset '" + preset + "' (kitti, tor4d-like)");
    }
}

void applyConfigJson(ExperimentConfig& c, const json& j) {
    rejectUnknownKeys(j, {"preset", "grid", "detector", "train", "mapMode", "fusion",
                          "paths", "seed", "threads"},
                      "");
    if (j.contains("preset")) applyPreset(c, j["preset"].get<std::string>());
    if (j.contains("grid")) {
        const auto& g = j["grid"];
        rejectUnknownKeys(g, {"xMin", "xMax", "yMin", "yMax", "zMin", "zMax", "dL", "dW", "dH"},
                          "grid.");
        if (g.contains("xMin")) c.xMin = g["xMin"].get<double>();
        if (g.contains("xMax")) c.xMax = g["xMax"].get<double>();
        if (g.contains("yMin")) c.yMin = g["yMin"].get<double>();
        if (g.contains("yMax")) c.yMax = g["yMax"].get<double>();
        if (g.contains("zMin")) c.zMin = g["zMin"].get<double>();
        if (g.contains("zMax")) c.zMax = g["zMax"].get<double>();
        if (g.contains("dL")) c.dL = g["dL"].get<double>();
        if (g.contains("dW")) c.dW = g["dW"].get<double>();
        if (g.contains("dH")) c.dH = g["dH"].get<double>();
    }
    if (j.contains("detector")) {
        const auto& d = j["detector"];
        rejectUnknownKeys(d, {"small", "scoreThresh", "nmsIoU"}, "detector.");
        if (d.contains("small")) c.smallNet = d["small"].get<bool>();
        if (d.contains("scoreThresh")) c.scoreThresh = d["scoreThresh"].get<double>();
        if (d.contains("nmsIoU")) c.nmsIoU = d["nmsIoU"].get<double>();
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        rejectUnknownKeys(t,
                          {"lr", "momentum", "epochs", "lrDecay", "focalAlpha", "focalGamma",
                           "dropoutProb", "multiTaskWeight"},
                          "train.");
        if (t.contains("lr")) c.lr = t["lr"].get<double>();
        if (t.contains("momentum")) c.momentum = t["momentum"].get<double>();
        if (t.contains("epochs")) c.epochs = t["epochs"].get<int>();
        if (t.contains("lrDecay")) {
            c.lrDecay.clear();
            for (const auto& e : t["lrDecay"])
                c.lrDecay.emplace_back(e.at(0).get<int>(), e.at(1).get<double>());
        }
        if (t.contains("focalAlpha")) c.focalAlpha = t["focalAlpha"].get<double>();
        if (t.contains("focalGamma")) c.focalGamma = t["focalGamma"].get<double>();
        if (t.contains("dropoutProb")) c.dropoutProb = t["dropoutProb"].get<double>();
        if (t.contains("multiTaskWeight")) c.multiTaskWeight = t["multiTaskWeight"].get<double>();
    }
    if (j.contains("mapMode")) c.mapMode = parseMapMode(j["mapMode"].get<std::string>());
    if (j.contains("fusion")) c.fusion = parseFusion(j["fusion"].get<std::string>());
    if (j.contains("paths")) {
        const auto& p = j["paths"];
        rejectUnknownKeys(p, {"dataset", "detectorWeights", "groundWeights", "roadWeights"},
                          "paths.");
        if (p.contains("dataset")) c.dataset = p["dataset"].get<std::string>();
        if (p.contains("detectorWeights"))
            c.detectorWeights = p["detectorWeights"].get<std::string>();
        if (p.contains("groundWeights")) c.groundWeights = p["groundWeights"].get<std::string>();
        if (p.contains("roadWeights")) c.roadWeights = p["roadWeights"].get<std::string>();
    }
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("threads")) c.threads = j["threads"].get<int>();
}

json configToJson(const ExperimentConfig& c) {
    json decay = json::array();
    for (const auto& [e, f] : c.lrDecay) decay.push_back({e, f});
    return {{"grid",
             {{"xMin", c.xMin}, {"xMax", c.xMax}, {"yMin", c.yMin}, {"yMax", c.yMax},
              {"zMin", c.zMin}, {"zMax", c.zMax}, {"dL", c.dL}, {"dW", c.dW}, {"dH", c.dH}}},
            {"detector",
             {{"small", c.smallNet}, {"scoreThresh", c.scoreThresh}, {"nmsIoU", c.nmsIoU}}},
            {"train",
             {{"lr", c.lr}, {"momentum", c.momentum}, {"epochs", c.epochs},
              {"lrDecay", decay}, {"focalAlpha", c.focalAlpha}, {"focalGamma", c.focalGamma},
              {"dropoutProb", c.dropoutProb}, {"multiTaskWeight", c.multiTaskWeight}}},
            {"mapMode", mapModeName(c.mapMode)},
            {"fusion", fusionName(c.fusion)},
            {"paths",
             {{"dataset", c.dataset}, {"detectorWeights", c.detectorWeights},
              {"groundWeights", c.groundWeights}, {"roadWeights", c.roadWeights}}},
            {"seed", c.seed},
            {"threads", c.threads}};
}

bev::BevConfig gridOf(const ExperimentConfig& c) {
    try {
        return bev::BevConfig(c.xMin, c.xMax, c.yMin, c.yMax, c.zMin, c.zMax, c.dL, c.dW, c.dH);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("grid: ") + e.what());
    }
}

det::DetectorConfig detectorConfigOf(const ExperimentConfig& c) {
    det::DetectorConfig cfg = c.smallNet ? det::smallDetectorConfig() : det::DetectorConfig{};
    cfg.scoreThresh = c.scoreThresh;
    cfg.nmsIoU = c.nmsIoU;
    cfg.validate();
    return cfg;
}

det::Hyper hyperOf(const ExperimentConfig& c) {
    det::Hyper h;
    h.lr = c.lr;
    h.momentum = c.momentum;
    h.epochs = c.epochs;
    h.lrDecay = c.lrDecay;
    h.dropoutProb = c.dropoutProb;
    h.focal.alpha = c.focalAlpha;
    h.focal.gamma = c.focalGamma;
    h.multiTaskWeight = c.multiTaskWeight;
    return h;
}

int resolveThreads(const ExperimentConfig& c) {
    if (c.threads > 0) return c.threads;
    if (const char* env = std::getenv("HDNETBEV_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    return 1;
}

// Shared CLI plumbing: every subcommand takes a config file, a run directory,
// and a set of override flags. Flags beat file values, which beat presets.
struct CommonOpts {
    std::string configPath;
    std::string preset;
    std::string runDir = "run";
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    std::optional<double> lr;
    std::optional<int> epochs;
    std::optional<double> resolution;
    std::optional<double> dropout;
    std::string mapMode, fusion;
    std::string dataset, detectorWeights, groundWeights, roadWeights;
};

void addCommonOpts(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.configPath, "JSON config file");
    cmd->add_option("--preset", o.preset, "Config preset: kitti or tor4d-like");
    cmd->add_option("--run-dir", o.runDir, "Output directory");
    cmd->add_option("--seed", o.seed, "RNG seed");
    cmd->add_option("--threads", o.threads, "Worker threads (never changes numerics)");
    cmd->add_option("--lr", o.lr, "Learning rate");
    cmd->add_option("--epochs", o.epochs, "Training epochs");
    cmd->add_option("--resolution", o.resolution, "BEV cell size in meters (sets dL and dW)");
    cmd->add_option("--dropout", o.dropout, "Road-channel data dropout probability");
    cmd->add_option("--map-mode", o.mapMode, "none|plane|offline|online");
    cmd->add_option("--fusion", o.fusion, "input|multitask|outputmask");
    cmd->add_option("--data", o.dataset, "Dataset directory");
    cmd->add_option("--detector-weights", o.detectorWeights, "Detector weights path");
    cmd->add_option("--ground-weights", o.groundWeights, "Ground U-Net weights path");
    cmd->add_option("--road-weights", o.roadWeights, "Road U-Net weights path");
}

ExperimentConfig resolveConfig(const CommonOpts& o) {
    ExperimentConfig c;
    if (!o.configPath.empty()) {
        std::ifstream f(o.configPath);
        if (!f) throw ConfigError("cannot open config file " + o.configPath);
        json j;
        try {
            f >> j;
        } catch (const json::exception& e) {
            throw ConfigError("config parse error: " + std::string(e.what()));
        }
        applyConfigJson(c, j);
    }
    if (!o.preset.empty()) applyPreset(c, o.preset);
    if (o.seed) c.seed = *o.seed;
    if (o.threads) c.threads = *o.threads;
    if (o.lr) c.lr = *o.lr;
    if (o.epochs) c.epochs = *o.epochs;
    if (o.resolution) c.dL = c.dW = *o.resolution;
    if (o.dropout) c.dropoutProb = *o.dropout;
    if (!o.mapMode.empty()) c.mapMode = parseMapMode(o.mapMode);
    if (!o.fusion.empty()) c.fusion = parseFusion(o.fusion);
    if (!o.dataset.empty()) c.dataset = o.dataset;
    if (!o.detectorWeights.empty()) c.detectorWeights = o.detectorWeights;
    if (!o.groundWeights.empty()) c.groundWeights = o.groundWeights;
    if (!o.roadWeights.empty()) c.roadWeights = o.roadWeights;
    return c;
}

void writeRunManifest(const std::string& runDir, const std::string& command,
                      const ExperimentConfig& cfg, const std::vector<std::string>& outputs) {
    json m = {{"command", command}, {"config", configToJson(cfg)}, {"outputs", outputs}};
    std::ofstream f(runDir + "/manifest.json");
    if (!f) throw std::runtime_error("cannot write " + runDir + "/manifest.json");
    f << m.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Dataset access (synthetic layout and kitti-import layout share a manifest).

struct Dataset {
    std::string dir;
    std::string source;  // "synthetic" or "kitti"
    int count = 0;
    int nTrain = 0;
    std::vector<std::string> stems;             // kitti only
    std::vector<double> fovHalfAngles;          // kitti only
};

Dataset openDataset(const std::string& dir) {
    if (dir.empty()) throw ConfigError("no dataset directory given (--data or paths.dataset)");
    std::ifstream f(dir + "/manifest.json");
    if (!f) throw std::runtime_error("cannot open " + dir + "/manifest.json");
    json m;
    f >> m;
    Dataset ds;
    ds.dir = dir;
    ds.source = m.value("source", "synthetic");
    if (ds.source == "kitti") {
        for (const auto& fr : m.at("frames")) {
            ds.stems.push_back(fr.at("stem").get<std::string>());
            ds.fovHalfAngles.push_back(fr.at("fovHalfAngleRad").get<double>());
        }
        ds.count = int(ds.stems.size());
        ds.nTrain = ds.count;  // no split; callers train on everything
    } else {
        ds.count = m.at("count").get<int>();
        ds.nTrain = m.at("nTrain").get<int>();
    }
    return ds;
}

struct Frame {
    bev::PointCloud cloud;
    std::vector<geom::OrientedBox> labels;
    std::optional<mapdata::HdMap> map;
    std::optional<double> fovHalfAngle;
};

Frame loadFrame(const Dataset& ds, int index) {
    Frame fr;
    if (ds.source == "kitti") {
        const std::string stem = ds.stems.at(index);
        fr.cloud = bev::readVelodyneBin(ds.dir + "/" + stem + ".bin");
        fr.labels = synth::loadLabels(ds.dir + "/" + stem + "_labels.json");
        fr.fovHalfAngle = ds.fovHalfAngles.at(index);
    } else {
        synth::StoredScene s = synth::loadScene(ds.dir, index);
        fr.cloud = std::move(s.cloud);
        fr.labels = std::move(s.labels);
        fr.map = std::move(s.map);
    }
    return fr;
}

// ---------------------------------------------------------------------------
// Map network weights carry a JSON sidecar with the architecture.

void saveMapNet(const mapnet::MapNet& net, const mapnet::UNetConfig& cfg, int inChannels,
                const std::string& path) {
    nn::saveWeights(net.graph.params, path);
    json side = {{"stageChannels", cfg.stageChannels},
                 {"convsPerStage", cfg.convsPerStage},
                 {"inChannels", inChannels}};
    std::ofstream f(path + ".json");
    if (!f) throw std::runtime_error("cannot write " + path + ".json");
    f << side.dump(2) << "\n";
}

mapnet::MapNet loadMapNet(const std::string& path) {
    std::ifstream f(path + ".json");
    if (!f) throw std::runtime_error("cannot open " + path + ".json");
    json side;
    f >> side;
    mapnet::UNetConfig cfg;
    cfg.stageChannels = side.at("stageChannels").get<std::vector<int>>();
    cfg.convsPerStage = side.at("convsPerStage").get<int>();
    mapnet::MapNet net = mapnet::buildUNet(cfg, side.at("inChannels").get<int>());
    nn::loadWeights(net.graph.params, path);
    return net;
}

// ---------------------------------------------------------------------------
// Prior construction per map mode, shared by training and inference.

std::vector<float> downsampleMask(const std::vector<float>& fine, int h, int w, int ds) {
    const int oh = h / ds, ow = w / ds;
    std::vector<float> out(std::size_t(oh) * ow, 0.0f);
    for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
            double sum = 0.0;
            for (int di = 0; di < ds; ++di)
                for (int dj = 0; dj < ds; ++dj)
                    sum += fine[std::size_t(i * ds + di) * w + (j * ds + dj)];
            out[std::size_t(i) * ow + j] = sum >= 0.5 * ds * ds ? 1.0f : 0.0f;
        }
    return out;
}

struct MapNets {
    std::optional<mapnet::MapNet> ground;
    std::optional<mapnet::MapNet> road;
};

MapNets loadMapNetsIfOnline(const ExperimentConfig& c) {
    MapNets nets;
    if (c.mapMode != MapMode::Online) return nets;
    if (c.groundWeights.empty() || c.roadWeights.empty())
        throw ConfigError("online map mode requires --ground-weights and --road-weights");
    nets.ground = loadMapNet(c.groundWeights);
    nets.road = loadMapNet(c.roadWeights);
    return nets;
}

struct BuiltInput {
    nn::Tensor input;
    std::vector<float> roadMaskFine;  // input grid; empty when the mode has no road prior
};

// Rasterizes one frame according to mapMode/fusion. Road channel is appended
// only under input fusion; other fusion variants consume the mask elsewhere.
BuiltInput buildDetectorInput(const Frame& fr, const bev::BevConfig& grid,
                              const ExperimentConfig& c, MapNets& nets, int threads) {
    BuiltInput out;
    bev::GroundQuery query = nullptr;
    if (c.mapMode == MapMode::Plane) {
        const mapdata::GroundPlane plane = mapdata::fitGroundPlane(fr.cloud, 200, 0.05, 7);
        query = [plane](double x, double y) { return plane.heightAt(x, y); };
    } else if (c.mapMode == MapMode::Offline) {
        if (!fr.map) throw std::runtime_error("offline map mode needs map data in the dataset");
        const mapdata::GroundRaster& g = fr.map->ground;
        query = [&g](double x, double y) { return mapdata::queryGroundHeight(g, x, y); };
        out.roadMaskFine = mapdata::rasterizeRoadMask(fr.map->road, grid);
    } else if (c.mapMode == MapMode::Online) {
        mapnet::Priors priors = mapnet::estimatePriors(fr.cloud, grid, *nets.ground, *nets.road);
        const mapdata::GroundRaster raster = mapnet::groundEstimateToRaster(priors.ground, grid);
        bev::BevTensor t = bev::rasterize(fr.cloud, grid,
                                          [&raster](double x, double y) {
                                              return mapdata::queryGroundHeight(raster, x, y);
                                          },
                                          threads);
        out.roadMaskFine = std::move(priors.roadMask);
        if (c.fusion == det::FusionMode::InputFusion)
            t = bev::concatRoadChannel(t, out.roadMaskFine);
        out.input = nn::Tensor({1, t.channels, t.height, t.width});
        out.input.data = std::move(t.data);
        return out;
    }
    bev::BevTensor t = bev::rasterize(fr.cloud, grid, query, threads);
    if (!out.roadMaskFine.empty() && c.fusion == det::FusionMode::InputFusion)
        t = bev::concatRoadChannel(t, out.roadMaskFine);
    out.input = nn::Tensor({1, t.channels, t.height, t.width});
    out.input.data = std::move(t.data);
    return out;
}

int detectorInChannels(const bev::BevConfig& grid, const ExperimentConfig& c) {
    const bool roadInput = (c.mapMode == MapMode::Offline || c.mapMode == MapMode::Online) &&
                           c.fusion == det::FusionMode::InputFusion;
    return grid.channels() + (roadInput ? 1 : 0);
}

det::FusionMode effectiveFusion(const ExperimentConfig& c) {
    if (c.mapMode == MapMode::Offline || c.mapMode == MapMode::Online) return c.fusion;
    return det::FusionMode::None;
}

// ---------------------------------------------------------------------------
// Subcommand bodies.

int cmdSynthGen(const CommonOpts& opts, int count, int nTrain, int nVehicles, double slopeDeg,
                double noiseAmp, int beams, double yExtent, double offRoadFraction) {
    ExperimentConfig c = resolveConfig(opts);
    std::filesystem::create_directories(opts.runDir);
    synth::SceneSpec spec;
    spec.xMin = c.xMin;
    spec.xMax = c.xMax;
    spec.yMin = -yExtent;
    spec.yMax = yExtent;
    spec.slopeDeg = slopeDeg;
    spec.terrainNoiseAmp = noiseAmp;
    spec.nVehicles = nVehicles;
    spec.offRoadFraction = offRoadFraction;
    spec.lidar = synth::defaultLidar(beams);
    synth::writeDataset(opts.runDir, count, c.seed, spec, nTrain);
    std::cout << "wrote " << count << " scenes (" << nTrain << " train) to " << opts.runDir
              << "\n";
    return 0;
}

std::vector<det::TrainFrame> buildTrainFrames(const Dataset& ds, const bev::BevConfig& grid,
                                              const ExperimentConfig& c, MapNets& nets,
                                              int threads, const det::DetectorConfig& detCfg) {
    std::vector<det::TrainFrame> frames;
    for (int i = 0; i < ds.nTrain; ++i) {
        Frame fr = loadFrame(ds, i);
        BuiltInput built = buildDetectorInput(fr, grid, c, nets, threads);
        det::TrainFrame tf;
        tf.input = std::move(built.input);
        tf.labels = std::move(fr.labels);
        if (!built.roadMaskFine.empty() && c.fusion == det::FusionMode::MultiTask)
            tf.roadMaskOut = downsampleMask(built.roadMaskFine, grid.heightPx(), grid.widthPx(),
                                            detCfg.downsample);
        if (fr.fovHalfAngle) tf.fovMask = bev::fovMask(grid, *fr.fovHalfAngle);
        frames.push_back(std::move(tf));
    }
    return frames;
}

int cmdTrainDetector(const CommonOpts& opts) {
    ExperimentConfig c = resolveConfig(opts);
    const bev::BevConfig grid = gridOf(c);
    const det::DetectorConfig detCfg = detectorConfigOf(c);
    const int threads = resolveThreads(c);
    MapNets nets = loadMapNetsIfOnline(c);
    Dataset ds = openDataset(c.dataset);

    std::vector<det::TrainFrame> frames = buildTrainFrames(ds, grid, c, nets, threads, detCfg);
    const det::FusionMode fusion = effectiveFusion(c);
    det::DetectorNet net = buildDetector(detCfg, detectorInChannels(grid, c),
                                         fusion == det::FusionMode::MultiTask);
    det::initDetectorParams(net, c.seed);

    det::Hyper hyper = hyperOf(c);
    if (c.dropoutProb > 0.0 && fusion == det::FusionMode::InputFusion)
        hyper.roadChannel = grid.channels();  // the appended road channel

    det::NormStats stats;
    auto log = det::trainDetector(net, frames, grid, detCfg, hyper, c.seed, &stats, fusion);

    std::filesystem::create_directories(opts.runDir);
    const std::string weightsPath = opts.runDir + "/detector.bevw";
    det::saveDetector(net, detCfg, stats, weightsPath);
    det::writeTrainLog(log, opts.runDir + "/train_log.csv");
    writeRunManifest(opts.runDir, "train-detector", c,
                     {"detector.bevw", "detector.bevw.json", "train_log.csv"});
    std::cout << "trained on " << frames.size() << " frames; weights at " << weightsPath << "\n";
    return 0;
}

int cmdTrainMapnet(const CommonOpts& opts, const std::string& taskName) {
    ExperimentConfig c = resolveConfig(opts);
    const bev::BevConfig grid = gridOf(c);
    const int threads = resolveThreads(c);
    mapnet::MapTask task;
    if (taskName == "ground")
        task = mapnet::MapTask::Ground;
    else if (taskName == "road")
        task = mapnet::MapTask::Road;
    else
        throw ConfigError("train-mapnet --task must be ground or road");
    Dataset ds = openDataset(c.dataset);
    if (ds.source == "kitti")
        throw ConfigError("train-mapnet needs map ground truth; kitti imports have none");

    const int h = grid.heightPx(), w = grid.widthPx();
    std::vector<mapnet::MapTrainFrame> frames;
    for (int i = 0; i < ds.nTrain; ++i) {
        Frame fr = loadFrame(ds, i);
        mapnet::MapInput in = mapnet::mapInputRasterize(fr.cloud, grid, threads);
        mapnet::MapTrainFrame tf;
        tf.input = nn::Tensor({1, in.tensor.channels, h, w});
        tf.input.data = std::move(in.tensor.data);
        if (task == mapnet::MapTask::Ground) {
            tf.target.resize(std::size_t(h) * w);
            for (int r = 0; r < h; ++r)
                for (int col = 0; col < w; ++col)
                    tf.target[std::size_t(r) * w + col] = float(mapdata::queryGroundHeight(
                        fr.map->ground, grid.xMin + (r + 0.5) * grid.dL,
                        grid.yMin + (col + 0.5) * grid.dW));
            tf.mask = std::move(in.hasPoints);
        } else {
            tf.target = mapdata::rasterizeRoadMask(fr.map->road, grid);
        }
        frames.push_back(std::move(tf));
    }

    const mapnet::UNetConfig uCfg = c.smallNet ? mapnet::smallUNetConfig() : mapnet::UNetConfig{};
    mapnet::MapNet net = mapnet::buildUNet(uCfg, grid.channels());
    net.graph.initParams(c.seed);
    mapnet::MapHyper hyper{c.lr, c.momentum, c.epochs, c.lrDecay};
    auto log = mapnet::trainMapNet(net, frames, task, hyper, c.seed);

    std::filesystem::create_directories(opts.runDir);
    const std::string weightsPath = opts.runDir + "/" + taskName + "net.bevw";
    saveMapNet(net, uCfg, grid.channels(), weightsPath);
    {
        std::ofstream f(opts.runDir + "/train_log.csv");
        f << "epoch,step,loss,lr\n";
        char buf[128];
        for (const auto& r : log) {
            std::snprintf(buf, sizeof buf, "%d,%d,%.9g,%.9g\n", r.epoch, r.step, r.loss, r.lr);
            f << buf;
        }
    }
    writeRunManifest(opts.runDir, "train-mapnet", c,
                     {taskName + "net.bevw", taskName + "net.bevw.json", "train_log.csv"});
    std::cout << "trained " << taskName << " net on " << frames.size() << " frames\n";
    return 0;
}

json boxesToJson(const std::vector<geom::OrientedBox>& boxes) {
    json arr = json::array();
    for (const auto& b : boxes) {
        json e = {{"cx", b.cx}, {"cy", b.cy}, {"l", b.l}, {"w", b.w}, {"theta", b.theta}};
        if (b.score) e["score"] = *b.score;
        arr.push_back(std::move(e));
    }
    return arr;
}

// Runs the configured pipeline over [begin, end) dataset frames.
std::vector<evalkit::FrameBoxes> inferRange(const Dataset& ds, const bev::BevConfig& grid,
                                            const ExperimentConfig& c, int begin, int end) {
    const int threads = resolveThreads(c);
    MapNets nets = loadMapNetsIfOnline(c);
    if (c.detectorWeights.empty())
        throw ConfigError("no detector weights given (--detector-weights)");
    det::DetectorConfig detCfg;
    det::NormStats stats;
    det::DetectorNet net = buildDetector(detectorConfigOf(c), detectorInChannels(grid, c),
                                         effectiveFusion(c) == det::FusionMode::MultiTask);
    det::loadDetector(net, detCfg, stats, c.detectorWeights);

    std::vector<evalkit::FrameBoxes> out;
    for (int i = begin; i < end; ++i) {
        Frame fr = loadFrame(ds, i);
        BuiltInput built = buildDetectorInput(fr, grid, c, nets, threads);
        const std::vector<float>* roadMask = nullptr;
        std::vector<float> maskOut;
        if (!built.roadMaskFine.empty() && c.fusion == det::FusionMode::OutputMasking) {
            maskOut = downsampleMask(built.roadMaskFine, grid.heightPx(), grid.widthPx(),
                                     detCfg.downsample);
            roadMask = &maskOut;
        }
        evalkit::FrameBoxes fb;
        fb.dets = det::runDetector(net, built.input, stats, detCfg, grid, roadMask);
        fb.gts = std::move(fr.labels);
        out.push_back(std::move(fb));
    }
    return out;
}

int cmdInfer(const CommonOpts& opts, int index) {
    ExperimentConfig c = resolveConfig(opts);
    const bev::BevConfig grid = gridOf(c);
    Dataset ds = openDataset(c.dataset);
    const int begin = index >= 0 ? index : 0;
    const int end = index >= 0 ? index + 1 : ds.count;
    if (begin >= ds.count) throw std::runtime_error("frame index out of range");
    auto frames = inferRange(ds, grid, c, begin, end);
    std::filesystem::create_directories(opts.runDir);
    std::vector<std::string> outputs;
    for (int i = begin; i < end; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "dets_%04d.json", i);
        std::ofstream f(opts.runDir + "/" + name);
        f << boxesToJson(frames[std::size_t(i) - begin].dets).dump(2) << "\n";
        outputs.push_back(name);
    }
    writeRunManifest(opts.runDir, "infer", c, outputs);
    std::cout << "wrote detections for " << end - begin << " frames to " << opts.runDir << "\n";
    return 0;
}

int cmdEval(const CommonOpts& opts, double iouThresh) {
    ExperimentConfig c = resolveConfig(opts);
    const bev::BevConfig grid = gridOf(c);
    Dataset ds = openDataset(c.dataset);
    if (ds.nTrain >= ds.count && ds.source != "kitti")
        throw std::runtime_error("dataset has no validation split");
    const int begin = ds.source == "kitti" ? 0 : ds.nTrain;
    auto frames = inferRange(ds, grid, c, begin, ds.count);

    std::vector<std::pair<double, double>> bins;
    for (double lo = 0.0; lo < 69.0; lo += 10.0) bins.emplace_back(lo, lo + 10.0);
    evalkit::EvalReport report = evalkit::buildReport(frames, iouThresh, bins);

    std::filesystem::create_directories(opts.runDir);
    evalkit::emitReportJson(report, opts.runDir + "/report.json");
    evalkit::emitReportCsv(report, opts.runDir + "/report.csv");
    evalkit::emitReportSvg(report, opts.runDir + "/pr_curve.svg");
    writeRunManifest(opts.runDir, "eval", c, {"report.json", "report.csv", "pr_curve.svg"});
    std::cout << "AP@" << iouThresh << " interp40 " << report.apInterp40 << "% continuous "
              << report.apContinuous << "% over " << frames.size() << " frames\n";
    return 0;
}

int cmdRasterizeDump(const CommonOpts& opts, const std::string& cloudPath, int index) {
    ExperimentConfig c = resolveConfig(opts);
    const bev::BevConfig grid = gridOf(c);
    bev::PointCloud cloud;
    if (!cloudPath.empty()) {
        cloud = bev::readVelodyneBin(cloudPath);
    } else {
        Dataset ds = openDataset(c.dataset);
        cloud = loadFrame(ds, index).cloud;
    }
    bev::BevTensor t = bev::rasterize(cloud, grid, nullptr, resolveThreads(c));
    std::filesystem::create_directories(opts.runDir);
    {
        std::ofstream f(opts.runDir + "/tensor.f32", std::ios::binary);
        f.write(reinterpret_cast<const char*>(t.data.data()),
                std::streamsize(t.data.size() * sizeof(float)));
    }
    json meta = {{"channels", t.channels}, {"height", t.height}, {"width", t.width},
                 {"points", cloud.size()}};
    std::ofstream(opts.runDir + "/tensor.json") << meta.dump(2) << "\n";
    writeRunManifest(opts.runDir, "rasterize-dump", c, {"tensor.f32", "tensor.json"});
    std::cout << "dumped " << t.channels << "x" << t.height << "x" << t.width << " tensor\n";
    return 0;
}

int cmdKittiImport(const CommonOpts& opts, const std::string& velo, const std::string& label,
                   const std::string& calib) {
    kitti::ImportResult res = kitti::kittiImport(velo, label, calib, opts.runDir);
    for (const auto& r : res.skipReasons) std::cerr << "skipped " << r << "\n";
    std::cout << "imported " << res.imported << " frames, skipped " << res.skipped << "\n";
    return 0;
}

double percentileMs(std::vector<double>& v, double q) {
    std::sort(v.begin(), v.end());
    return v[std::min(v.size() - 1, std::size_t(q * double(v.size())))];
}

int cmdBench(const CommonOpts& opts, int nPoints, int reps) {
    ExperimentConfig c = resolveConfig(opts);
    const bev::BevConfig grid = gridOf(c);
    const int threads = resolveThreads(c);
    Rng rng(c.seed);
    bev::PointCloud cloud;
    for (int i = 0; i < nPoints; ++i)
        cloud.push(float(rng.uniform(grid.xMin, grid.xMax)),
                   float(rng.uniform(grid.yMin, grid.yMax)),
                   float(rng.uniform(grid.zMin, grid.zMax)), float(rng.uniform()));

    std::vector<double> rasterMs;
    for (int r = 0; r < reps; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        bev::BevTensor t = bev::rasterize(cloud, grid, nullptr, threads);
        const auto t1 = std::chrono::steady_clock::now();
        rasterMs.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        if (t.data.empty()) std::abort();  // keep the call live
    }

    json out = {{"points", nPoints},
                {"threads", threads},
                {"rasterize_ms",
                 {{"p50", percentileMs(rasterMs, 0.5)}, {"p90", percentileMs(rasterMs, 0.9)},
                  {"max", rasterMs.back()}}}};

    if (!c.detectorWeights.empty()) {
        det::DetectorConfig detCfg;
        det::NormStats stats;
        det::DetectorNet net = buildDetector(detectorConfigOf(c), detectorInChannels(grid, c),
                                             false);
        det::loadDetector(net, detCfg, stats, c.detectorWeights);
        bev::BevTensor t = bev::rasterize(cloud, grid, nullptr, threads);
        nn::Tensor input({1, t.channels, t.height, t.width});
        input.data = t.data;
        std::vector<double> inferMs;
        for (int r = 0; r < reps; ++r) {
            const auto t0 = std::chrono::steady_clock::now();
            auto dets = det::runDetector(net, input, stats, detCfg, grid);
            const auto t1 = std::chrono::steady_clock::now();
            inferMs.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
        out["inference_ms"] = {{"p50", percentileMs(inferMs, 0.5)},
                               {"p90", percentileMs(inferMs, 0.9)},
                               {"max", inferMs.back()}};
    }

    std::filesystem::create_directories(opts.runDir);
    std::ofstream(opts.runDir + "/bench.json") << out.dump(2) << "\n";
    writeRunManifest(opts.runDir, "bench", c, {"bench.json"});
    std::cout << out.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Map-aware BEV LiDAR detector"};
    app.require_subcommand(1);

    CommonOpts opts;

    auto* synthGen = app.add_subcommand("synth-gen", "Generate a synthetic scene dataset");
    int sgCount = 10, sgTrain = 8, sgVehicles = 6, sgBeams = 32;
    double sgSlope = 2.0, sgNoise = 0.3, sgYExtent = 40.0, sgOffRoad = 0.0;
    addCommonOpts(synthGen, opts);
    synthGen->add_option("--count", sgCount, "Total scenes");
    synthGen->add_option("--train", sgTrain, "Scenes in the train split");
    synthGen->add_option("--vehicles", sgVehicles, "Vehicles per scene");
    synthGen->add_option("--slope", sgSlope, "Ground slope, degrees");
    synthGen->add_option("--noise", sgNoise, "Terrain noise amplitude, meters");
    synthGen->add_option("--beams", sgBeams, "LiDAR beam count");
    synthGen->add_option("--y-extent", sgYExtent, "Scene half-width, meters");
    synthGen->add_option("--off-road-fraction", sgOffRoad, "Fraction of vehicles parked off-road");

    auto* trainDet = app.add_subcommand("train-detector", "Train the BEV detector");
    addCommonOpts(trainDet, opts);

    auto* trainMap = app.add_subcommand("train-mapnet", "Train a map-estimation U-Net");
    std::string mapTask = "ground";
    addCommonOpts(trainMap, opts);
    trainMap->add_option("--task", mapTask, "ground or road");

    auto* infer = app.add_subcommand("infer", "Run detection over dataset frames");
    int inferIndex = -1;
    addCommonOpts(infer, opts);
    infer->add_option("--index", inferIndex, "Single frame index (default: all)");

    auto* eval = app.add_subcommand("eval", "Evaluate on the validation split");
    double iouThresh = 0.7;
    addCommonOpts(eval, opts);
    eval->add_option("--iou", iouThresh, "Matching IoU threshold");

    auto* rdump = app.add_subcommand("rasterize-dump", "Write one BEV tensor to disk");
    std::string rdCloud;
    int rdIndex = 0;
    addCommonOpts(rdump, opts);
    rdump->add_option("--cloud", rdCloud, "Velodyne .bin file (overrides --data/--index)");
    rdump->add_option("--index", rdIndex, "Dataset frame index");

    auto* kimport = app.add_subcommand("kitti-import", "Convert a KITTI split to the internal layout");
    std::string kVelo, kLabel, kCalib;
    addCommonOpts(kimport, opts);
    kimport->add_option("--velodyne", kVelo, "KITTI velodyne dir")->required();
    kimport->add_option("--labels", kLabel, "KITTI label_2 dir")->required();
    kimport->add_option("--calib", kCalib, "KITTI calib dir")->required();

    auto* bench = app.add_subcommand("bench", "Latency percentiles for rasterization/inference");
    int bPoints = 100000, bReps = 20;
    addCommonOpts(bench, opts);
    bench->add_option("--points", bPoints, "Synthetic cloud size");
    bench->add_option("--reps", bReps, "Repetitions");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (synthGen->parsed())
            return cmdSynthGen(opts, sgCount, sgTrain, sgVehicles, sgSlope, sgNoise, sgBeams,
                               sgYExtent, sgOffRoad);
        if (trainDet->parsed()) return cmdTrainDetector(opts);
        if (trainMap->parsed()) return cmdTrainMapnet(opts, mapTask);
        if (infer->parsed()) return cmdInfer(opts, inferIndex);
        if (eval->parsed()) return cmdEval(opts, iouThresh);
        if (rdump->parsed()) return cmdRasterizeDump(opts, rdCloud, rdIndex);
        if (kimport->parsed()) return cmdKittiImport(opts, kVelo, kLabel, kCalib);
        if (bench->parsed()) return cmdBench(opts, bPoints, bReps);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const det::Divergence& e) {
        std::cerr << "numeric divergence: " << e.what() << "\n";
        return 4;
    } catch (const nn::NonFinite& e) {
        std::cerr << "numeric divergence: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
