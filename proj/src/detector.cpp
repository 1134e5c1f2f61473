#include "bevdet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "bevdet/rng.hpp"

namespace bevdet::det {

using geom::OrientedBox;
using nn::Tensor;

void DetectorConfig::validate() const {
    if (blockLayers.size() != 4 || blockFilters.size() != 4)
        throw std::invalid_argument("DetectorConfig: expected 4 backbone blocks");
    for (int n : blockLayers)
        if (n < 1) throw std::invalid_argument("DetectorConfig: block layer count < 1");
    for (int f : blockFilters)
        if (f < 1) throw std::invalid_argument("DetectorConfig: block filter count < 1");
    if (headerLayers < 1 || headerFilters < 1)
        throw std::invalid_argument("DetectorConfig: bad header");
    if (outputChannels != 7)
        throw std::invalid_argument("DetectorConfig: output channels must be 7");
    if (downsample != 4)
        throw std::invalid_argument("DetectorConfig: downsample must be 4");
    if (scoreThresh <= 0.0 || scoreThresh >= 1.0)
        throw std::invalid_argument("DetectorConfig: scoreThresh outside (0,1)");
    if (nmsIoU < 0.0 || nmsIoU > 1.0)
        throw std::invalid_argument("DetectorConfig: nmsIoU outside [0,1]");
    if (lossWeight < 0.0) throw std::invalid_argument("DetectorConfig: negative lossWeight");
}

DetectorConfig smallDetectorConfig() {
    DetectorConfig cfg;
    cfg.blockLayers = {1, 1, 2, 2};
    cfg.blockFilters = {8, 12, 16, 24};
    cfg.headerLayers = 2;
    cfg.headerFilters = 32;
    return cfg;
}

DetectorNet buildDetector(const DetectorConfig& cfg, int inChannels, bool multiTaskRoadHead) {
    cfg.validate();
    if (inChannels < 1) throw std::invalid_argument("buildDetector: inChannels < 1");

    DetectorNet net;
    nn::Graph& g = net.graph;
    net.inputNode = g.addInput();

    int cur = net.inputNode;
    int curCh = inChannels;
    std::vector<int> blockOut(4, -1);
    for (int b = 0; b < 4; ++b) {
        for (int l = 0; l < cfg.blockLayers[b]; ++l) {
            const std::string name =
                "block" + std::to_string(b + 1) + ".conv" + std::to_string(l);
            cur = g.conv(cur, curCh, cfg.blockFilters[b], 3, name, /*bias=*/false);
            curCh = cfg.blockFilters[b];
            cur = g.batchnorm(cur, curCh,
                              "block" + std::to_string(b + 1) + ".bn" + std::to_string(l));
            cur = g.relu(cur);
        }
        blockOut[b] = cur;
        if (b < 3) cur = g.maxpool(cur);
    }

    // Blocks 2-4 fused at the stride-4 grid (block 3's resolution).
    const int fused = g.concat({g.resizeLike(blockOut[1], blockOut[2]), blockOut[2],
                                g.resizeLike(blockOut[3], blockOut[2])});
    int fusedCh = cfg.blockFilters[1] + cfg.blockFilters[2] + cfg.blockFilters[3];

    cur = fused;
    curCh = fusedCh;
    for (int l = 0; l < cfg.headerLayers; ++l) {
        cur = g.conv(cur, curCh, cfg.headerFilters, 3, "header.conv" + std::to_string(l),
                     /*bias=*/false);
        curCh = cfg.headerFilters;
        cur = g.batchnorm(cur, curCh, "header.bn" + std::to_string(l));
        cur = g.relu(cur);
    }
    const int lastHidden = cur;
    net.outputNode = g.conv(lastHidden, curCh, cfg.outputChannels, 3, "header.out");
    if (multiTaskRoadHead) {
        net.roadHeadNode = g.conv(lastHidden, curCh, 1, 3, "roadhead.out");
    }
    return net;
}

void initDetectorParams(DetectorNet& net, std::uint64_t seed, double priorLogit) {
    net.graph.initParams(seed);
    net.graph.params.at("header.out.bias").tensor.data[0] = float(priorLogit);
}

std::size_t TargetMaps::numPositives() const {
    return std::size_t(std::count(cls.begin(), cls.end(), std::int8_t(1)));
}

std::pair<double, double> outputPixelCenter(const bev::BevConfig& cfg, int downsample,
                                            int i, int j) {
    const double cellX = cfg.dL * downsample;
    const double cellY = cfg.dW * downsample;
    return {cfg.xMin + (i + 0.5) * cellX, cfg.yMin + (j + 0.5) * cellY};
}

TargetMaps assignTargets(const std::vector<OrientedBox>& labels, const bev::BevConfig& cfg,
                         int downsample, const std::vector<std::uint8_t>* fovMask) {
    if (cfg.heightPx() % downsample != 0 || cfg.widthPx() % downsample != 0)
        throw std::invalid_argument("assignTargets: grid not divisible by downsample");
    TargetMaps t;
    t.h = cfg.heightPx() / downsample;
    t.w = cfg.widthPx() / downsample;
    const std::size_t n = std::size_t(t.h) * t.w;
    t.cls.assign(n, 0);
    t.boxIndex.assign(n, -1);

    for (int i = 0; i < t.h; ++i) {
        for (int j = 0; j < t.w; ++j) {
            const auto [qx, qy] = outputPixelCenter(cfg, downsample, i, j);
            double bestD = 0.0;
            int best = -1;
            for (std::size_t k = 0; k < labels.size(); ++k) {
                const double d = std::hypot(qx - labels[k].cx, qy - labels[k].cy);
                if (best < 0 || d < bestD) {
                    bestD = d;
                    best = int(k);
                }
            }
            if (best < 0) continue;
            const double m = std::min(labels[best].w, labels[best].l);
            const std::size_t idx = std::size_t(i) * t.w + j;
            if (bestD <= 0.3 * m) {
                t.cls[idx] = 1;
                t.boxIndex[idx] = best;
            } else if (bestD <= 0.7 * m) {
                t.cls[idx] = -1;
            }
        }
    }

    // The pixel holding each GT center is always positive; otherwise coarse
    // grids can leave a box with no positive at all.
    const double cellX = cfg.dL * downsample;
    const double cellY = cfg.dW * downsample;
    for (std::size_t k = 0; k < labels.size(); ++k) {
        const int i = int(std::floor((labels[k].cx - cfg.xMin) / cellX));
        const int j = int(std::floor((labels[k].cy - cfg.yMin) / cellY));
        if (i < 0 || i >= t.h || j < 0 || j >= t.w) continue;
        const std::size_t idx = std::size_t(i) * t.w + j;
        if (t.cls[idx] != 1) {
            t.cls[idx] = 1;
            t.boxIndex[idx] = int(k);
        }
    }

    if (fovMask) {
        if (fovMask->size() != n)
            throw std::invalid_argument("assignTargets: fovMask size mismatch");
        for (std::size_t i = 0; i < n; ++i) {
            if (!(*fovMask)[i]) {
                t.cls[i] = -1;
                t.boxIndex[i] = -1;
            }
        }
    }
    return t;
}

void rawRegressionTargets(const OrientedBox& box, double qx, double qy,
                          double out[kRegChannels]) {
    out[0] = std::cos(2.0 * box.theta);
    out[1] = std::sin(2.0 * box.theta);
    out[2] = box.cx - qx;
    out[3] = box.cy - qy;
    out[4] = std::log(box.w);
    out[5] = std::log(box.l);
}

std::vector<float> encodeTargets(const std::vector<OrientedBox>& labels,
                                 const TargetMaps& targets, const bev::BevConfig& cfg,
                                 int downsample, const NormStats& stats) {
    const std::size_t n = std::size_t(targets.h) * targets.w;
    std::vector<float> reg(std::size_t(kRegChannels) * n, 0.0f);
    for (int i = 0; i < targets.h; ++i) {
        for (int j = 0; j < targets.w; ++j) {
            const std::size_t idx = std::size_t(i) * targets.w + j;
            if (targets.cls[idx] != 1) continue;
            const auto [qx, qy] = outputPixelCenter(cfg, downsample, i, j);
            double raw[kRegChannels];
            rawRegressionTargets(labels[targets.boxIndex[idx]], qx, qy, raw);
            for (int c = 0; c < kRegChannels; ++c)
                reg[std::size_t(c) * n + idx] =
                    float((raw[c] - stats.mean[c]) / stats.std[c]);
        }
    }
    return reg;
}

NormStats computeNormStats(const std::vector<TargetFrame>& frames, const bev::BevConfig& cfg,
                           int downsample) {
    double sum[kRegChannels] = {};
    double sumSq[kRegChannels] = {};
    std::int64_t count = 0;
    for (const auto& f : frames) {
        const TargetMaps& t = *f.targets;
        for (int i = 0; i < t.h; ++i) {
            for (int j = 0; j < t.w; ++j) {
                const std::size_t idx = std::size_t(i) * t.w + j;
                if (t.cls[idx] != 1) continue;
                const auto [qx, qy] = outputPixelCenter(cfg, downsample, i, j);
                double raw[kRegChannels];
                rawRegressionTargets((*f.labels)[t.boxIndex[idx]], qx, qy, raw);
                for (int c = 0; c < kRegChannels; ++c) {
                    sum[c] += raw[c];
                    sumSq[c] += raw[c] * raw[c];
                }
                ++count;
            }
        }
    }
    if (count == 0) throw NoPositives("computeNormStats: no positive pixels in set");
    NormStats s;
    for (int c = 0; c < kRegChannels; ++c) {
        s.mean[c] = sum[c] / double(count);
        const double var = std::max(0.0, sumSq[c] / double(count) - s.mean[c] * s.mean[c]);
        s.std[c] = std::max(std::sqrt(var), 1e-3);
    }
    return s;
}

void dataDropout(Tensor& input, int roadChannel, double prob, Rng& rng) {
    if (input.shape.size() != 4 || roadChannel < 0 || roadChannel >= input.shape[1])
        throw std::invalid_argument("dataDropout: bad channel");
    if (rng.uniform() >= prob) return;
    const std::size_t plane = std::size_t(input.shape[2]) * input.shape[3];
    std::fill_n(input.data.begin() + std::size_t(roadChannel) * plane, plane, 0.0f);
}

namespace {

inline double sigmoidD(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

LossValue detectionLoss(const Tensor& output, const TargetMaps& targets,
                        const std::vector<float>& regTarget, double lambda,
                        const nn::FocalLossParams& focal, Tensor* gradOut) {
    if (output.shape.size() != 4 || output.shape[0] != 1 || output.shape[1] != 7 ||
        output.shape[2] != targets.h || output.shape[3] != targets.w)
        throw nn::ShapeMismatch("detectionLoss: output/target shape mismatch");
    const std::size_t n = std::size_t(targets.h) * targets.w;
    if (regTarget.size() != std::size_t(kRegChannels) * n)
        throw nn::ShapeMismatch("detectionLoss: regression target size mismatch");

    LossValue loss;
    if (gradOut) {
        *gradOut = Tensor(output.shape);
    }

    // Classification: sigmoid on channel 0, then focal.
    std::vector<float> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = float(sigmoidD(output.data[i]));
    std::vector<float> dLdP(n);
    loss.cls = nn::focalLoss(p.data(), targets.cls.data(), n, focal, dLdP.data());
    if (gradOut) {
        for (std::size_t i = 0; i < n; ++i)
            gradOut->data[i] = float(double(dLdP[i]) * double(p[i]) * (1.0 - double(p[i])));
    }

    // Regression: smooth L1 on channels 1..6 at positives only.
    std::vector<std::uint8_t> mask(std::size_t(kRegChannels) * n);
    for (int c = 0; c < kRegChannels; ++c)
        for (std::size_t i = 0; i < n; ++i)
            mask[std::size_t(c) * n + i] = targets.cls[i] == 1;
    std::vector<float> regGrad(gradOut ? mask.size() : 0);
    loss.reg = lambda * nn::smoothL1(output.data.data() + n, regTarget.data(), mask.data(),
                                     mask.size(), gradOut ? regGrad.data() : nullptr);
    if (gradOut) {
        for (std::size_t i = 0; i < regGrad.size(); ++i)
            gradOut->data[n + i] = float(lambda * double(regGrad[i]));
    }
    return loss;
}

std::vector<OrientedBox> decodeDetections(const Tensor& output, const NormStats& stats,
                                          const DetectorConfig& cfg,
                                          const bev::BevConfig& bevCfg,
                                          const std::vector<float>* roadMask) {
    if (output.shape.size() != 4 || output.shape[0] != 1 || output.shape[1] != 7)
        throw nn::ShapeMismatch("decodeDetections: expected (1,7,h,w)");
    const int h = output.shape[2], w = output.shape[3];
    const std::size_t n = std::size_t(h) * w;
    if (roadMask && roadMask->size() != n)
        throw nn::ShapeMismatch("decodeDetections: road mask size mismatch");

    std::vector<OrientedBox> cands;
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            const std::size_t idx = std::size_t(i) * w + j;
            const double p = sigmoidD(output.data[idx]);
            if (p < cfg.scoreThresh) continue;
            double raw[kRegChannels];
            for (int c = 0; c < kRegChannels; ++c)
                raw[c] = double(output.data[std::size_t(c + 1) * n + idx]) * stats.std[c] +
                         stats.mean[c];
            const auto [qx, qy] = outputPixelCenter(bevCfg, cfg.downsample, i, j);
            OrientedBox b;
            b.cx = qx + raw[2];
            b.cy = qy + raw[3];
            b.w = std::exp(raw[4]);
            b.l = std::exp(raw[5]);
            b.theta = 0.5 * std::atan2(raw[1], raw[0]);
            b.score = p;
            if (roadMask) {
                const double cellX = bevCfg.dL * cfg.downsample;
                const double cellY = bevCfg.dW * cfg.downsample;
                const int bi = int(std::floor((b.cx - bevCfg.xMin) / cellX));
                const int bj = int(std::floor((b.cy - bevCfg.yMin) / cellY));
                if (bi < 0 || bi >= h || bj < 0 || bj >= w) continue;
                if ((*roadMask)[std::size_t(bi) * w + bj] < 0.5f) continue;
            }
            cands.push_back(b);
        }
    }
    return geom::nms(cands, cfg.nmsIoU);
}

std::vector<TrainLogRow> trainDetector(DetectorNet& net, std::vector<TrainFrame>& frames,
                                       const bev::BevConfig& bevCfg, const DetectorConfig& cfg,
                                       const Hyper& hyper, std::uint64_t seed,
                                       NormStats* statsOut, FusionMode mode) {
    if (frames.empty()) throw std::invalid_argument("trainDetector: empty dataset");

    // Targets and normalization statistics are fixed for the whole run.
    std::vector<TargetMaps> targets;
    targets.reserve(frames.size());
    for (const auto& f : frames)
        targets.push_back(assignTargets(f.labels, bevCfg, cfg.downsample,
                                        f.fovMask.empty() ? nullptr : &f.fovMask));
    std::vector<TargetFrame> tf;
    for (std::size_t i = 0; i < frames.size(); ++i)
        tf.push_back({&frames[i].labels, &targets[i]});
    const NormStats stats = computeNormStats(tf, bevCfg, cfg.downsample);
    if (statsOut) *statsOut = stats;
    std::vector<std::vector<float>> regTargets;
    for (std::size_t i = 0; i < frames.size(); ++i)
        regTargets.push_back(
            encodeTargets(frames[i].labels, targets[i], bevCfg, cfg.downsample, stats));

    const bool multiTask = mode == FusionMode::MultiTask && net.roadHeadNode >= 0;

    Rng shuffleRng = Rng(seed).substream(1);
    Rng dropRng = Rng(seed).substream(2);
    nn::OptimizerState opt;
    opt.lr = hyper.lr;
    opt.momentum = hyper.momentum;

    std::vector<TrainLogRow> log;
    std::vector<std::size_t> order(frames.size());
    std::iota(order.begin(), order.end(), 0);
    int step = 0;
    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        for (const auto& [decayEpoch, factor] : hyper.lrDecay)
            if (decayEpoch == epoch) opt.lr *= factor;
        // Fisher-Yates with the run's RNG keeps epochs deterministic.
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffleRng.uniformInt(std::uint64_t(i))]);

        for (std::size_t oi = 0; oi < order.size(); ++oi, ++step) {
            const std::size_t fi = order[oi];
            Tensor input = frames[fi].input;
            if (hyper.roadChannel >= 0 && hyper.dropoutProb > 0.0)
                dataDropout(input, hyper.roadChannel, hyper.dropoutProb, dropRng);

            nn::ExecState st;
            net.graph.forward(input, st, /*trainMode=*/true);
            Tensor grad;
            const LossValue loss =
                detectionLoss(st.act[net.outputNode], targets[fi], regTargets[fi],
                              cfg.lossWeight, hyper.focal, &grad);
            double total = loss.total();

            Tensor roadGrad;
            if (multiTask && !frames[fi].roadMaskOut.empty()) {
                const Tensor& roadOut = st.act[net.roadHeadNode];
                const std::size_t n = roadOut.numel();
                if (frames[fi].roadMaskOut.size() != n)
                    throw nn::ShapeMismatch("trainDetector: road mask size mismatch");
                std::vector<float> p(n), dLdP(n);
                for (std::size_t i = 0; i < n; ++i) p[i] = float(sigmoidD(roadOut.data[i]));
                const double roadLoss =
                    nn::bceLoss(p.data(), frames[fi].roadMaskOut.data(), n, dLdP.data());
                roadGrad = Tensor(roadOut.shape);
                for (std::size_t i = 0; i < n; ++i)
                    roadGrad.data[i] = float(hyper.multiTaskWeight * double(dLdP[i]) *
                                             double(p[i]) * (1.0 - double(p[i])));
                total += hyper.multiTaskWeight * roadLoss;
            }

            if (!std::isfinite(total))
                throw Divergence("trainDetector: non-finite loss at epoch " +
                                 std::to_string(epoch) + " step " + std::to_string(step));

            net.graph.zeroParamGrads();
            std::vector<std::pair<int, const Tensor*>> outGrads = {{net.outputNode, &grad}};
            if (roadGrad.numel() > 0) outGrads.push_back({net.roadHeadNode, &roadGrad});
            net.graph.backward(st, outGrads);
            nn::sgdMomentumStep(net.graph.params, opt);

            log.push_back({epoch, step, loss.cls, loss.reg, opt.lr});
        }
    }
    // Recalibrate BatchNorm running statistics against the final weights.
    // The stats accumulated during SGD describe stale parameters, which at
    // batch size 1 is the dominant train/eval gap.
    for (int pass = 0; pass < 2; ++pass)
        for (const auto& f : frames) {
            nn::ExecState st;
            net.graph.forward(f.input, st, /*trainMode=*/true);
        }
    return log;
}

void writeTrainLog(const std::vector<TrainLogRow>& log, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("writeTrainLog: cannot open " + path);
    f << "epoch,step,clsLoss,regLoss,lr\n";
    for (const auto& r : log)
        f << r.epoch << "," << r.step << "," << r.clsLoss << "," << r.regLoss << "," << r.lr
          << "\n";
}

void saveDetector(const DetectorNet& net, const DetectorConfig& cfg, const NormStats& stats,
                  const std::string& path) {
    nn::saveWeights(net.graph.params, path);
    nlohmann::json j;
    j["config"] = {{"blockLayers", cfg.blockLayers},
                   {"blockFilters", cfg.blockFilters},
                   {"headerLayers", cfg.headerLayers},
                   {"headerFilters", cfg.headerFilters},
                   {"outputChannels", cfg.outputChannels},
                   {"downsample", cfg.downsample},
                   {"lossWeight", cfg.lossWeight},
                   {"scoreThresh", cfg.scoreThresh},
                   {"nmsIoU", cfg.nmsIoU}};
    j["normStats"] = {{"mean", std::vector<double>(stats.mean, stats.mean + kRegChannels)},
                      {"std", std::vector<double>(stats.std, stats.std + kRegChannels)}};
    std::ofstream f(path + ".json");
    if (!f) throw std::runtime_error("saveDetector: cannot open " + path + ".json");
    f << j.dump(2) << "\n";
}

void loadDetector(DetectorNet& net, DetectorConfig& cfg, NormStats& stats,
                  const std::string& path) {
    std::ifstream f(path + ".json");
    if (!f) throw std::runtime_error("loadDetector: cannot open " + path + ".json");
    nlohmann::json j;
    f >> j;
    const auto& c = j.at("config");
    cfg.blockLayers = c.at("blockLayers").get<std::vector<int>>();
    cfg.blockFilters = c.at("blockFilters").get<std::vector<int>>();
    cfg.headerLayers = c.at("headerLayers").get<int>();
    cfg.headerFilters = c.at("headerFilters").get<int>();
    cfg.outputChannels = c.at("outputChannels").get<int>();
    cfg.downsample = c.at("downsample").get<int>();
    cfg.lossWeight = c.at("lossWeight").get<double>();
    cfg.scoreThresh = c.at("scoreThresh").get<double>();
    cfg.nmsIoU = c.at("nmsIoU").get<double>();
    const auto mean = j.at("normStats").at("mean").get<std::vector<double>>();
    const auto sd = j.at("normStats").at("std").get<std::vector<double>>();
    if (mean.size() != kRegChannels || sd.size() != kRegChannels)
        throw std::runtime_error("loadDetector: bad normStats in " + path + ".json");
    std::copy(mean.begin(), mean.end(), stats.mean);
    std::copy(sd.begin(), sd.end(), stats.std);
    nn::loadWeights(net.graph.params, path);
}

std::vector<OrientedBox> runDetector(DetectorNet& net, const Tensor& input,
                                     const NormStats& stats, const DetectorConfig& cfg,
                                     const bev::BevConfig& bevCfg,
                                     const std::vector<float>* roadMask) {
    nn::ExecState st;
    net.graph.forward(input, st, /*trainMode=*/false);
    return decodeDetections(st.act[net.outputNode], stats, cfg, bevCfg, roadMask);
}

}  // namespace bevdet::det
