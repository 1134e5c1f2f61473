#include "bevdet/mapnet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "bevdet/detector.hpp"
#include "bevdet/rng.hpp"

namespace bevdet::mapnet {

using nn::Tensor;

void UNetConfig::validate() const {
    if (stageChannels.size() < 2)
        throw std::invalid_argument("UNetConfig: need at least 2 stages");
    for (int c : stageChannels)
        if (c < 1) throw std::invalid_argument("UNetConfig: stage channels < 1");
    if (convsPerStage < 1) throw std::invalid_argument("UNetConfig: convsPerStage < 1");
}

UNetConfig smallUNetConfig() {
    UNetConfig cfg;
    cfg.stageChannels = {6, 8, 12, 16};
    return cfg;
}

namespace {

int convStack(nn::Graph& g, int in, int inCh, int outCh, int nConvs,
              const std::string& prefix) {
    int cur = in;
    int ch = inCh;
    for (int l = 0; l < nConvs; ++l) {
        cur = g.conv(cur, ch, outCh, 3, prefix + ".conv" + std::to_string(l), false);
        cur = g.batchnorm(cur, outCh, prefix + ".bn" + std::to_string(l));
        cur = g.relu(cur);
        ch = outCh;
    }
    return cur;
}

}  // namespace

MapNet buildUNet(const UNetConfig& cfg, int inChannels) {
    cfg.validate();
    if (inChannels < 1) throw std::invalid_argument("buildUNet: inChannels < 1");
    MapNet net;
    nn::Graph& g = net.graph;
    net.inputNode = g.addInput();

    const int nStages = int(cfg.stageChannels.size());
    std::vector<int> enc(nStages);
    int cur = net.inputNode;
    int ch = inChannels;
    for (int s = 0; s < nStages; ++s) {
        if (s > 0) cur = g.maxpool(cur);
        cur = convStack(g, cur, ch, cfg.stageChannels[s], cfg.convsPerStage,
                        "enc" + std::to_string(s));
        ch = cfg.stageChannels[s];
        enc[s] = cur;
    }
    for (int s = nStages - 2; s >= 0; --s) {
        cur = g.resizeLike(cur, enc[s]);
        cur = g.concat({cur, enc[s]});
        cur = convStack(g, cur, ch + cfg.stageChannels[s], cfg.stageChannels[s],
                        cfg.convsPerStage, "dec" + std::to_string(s));
        ch = cfg.stageChannels[s];
    }
    net.outputNode = g.conv(cur, ch, 1, 3, "out");
    return net;
}

MapInput mapInputRasterize(const bev::PointCloud& cloud, const bev::BevConfig& cfg,
                           int numThreads) {
    MapInput in;
    in.tensor = bev::rasterizeWithMask(cloud, cfg, nullptr, numThreads, &in.hasPoints);
    return in;
}

double groundLoss(const std::vector<float>& pred, const std::vector<float>& gt,
                  const std::vector<std::uint8_t>& mask, std::vector<float>* gradOut) {
    if (pred.size() != gt.size() || pred.size() != mask.size())
        throw nn::ShapeMismatch("groundLoss: size mismatch");
    if (gradOut) gradOut->assign(pred.size(), 0.0f);
    double loss = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!mask[i]) continue;
        const double d = double(pred[i]) - double(gt[i]);
        loss += d * d;
        if (gradOut) (*gradOut)[i] = float(2.0 * d);
    }
    return loss;
}

double roadLoss(const std::vector<float>& pred, const std::vector<float>& gt,
                std::vector<float>* gradOut) {
    if (pred.size() != gt.size()) throw nn::ShapeMismatch("roadLoss: size mismatch");
    if (gradOut) gradOut->assign(pred.size(), 0.0f);
    return nn::bceLoss(pred.data(), gt.data(), pred.size(),
                       gradOut ? gradOut->data() : nullptr);
}

namespace {

inline double sigmoidD(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

std::vector<MapTrainLogRow> trainMapNet(MapNet& net, std::vector<MapTrainFrame>& frames,
                                        MapTask task, const MapHyper& hyper,
                                        std::uint64_t seed) {
    if (frames.empty()) throw std::invalid_argument("trainMapNet: empty dataset");
    Rng shuffleRng = Rng(seed).substream(1);
    nn::OptimizerState opt;
    opt.lr = hyper.lr;
    opt.momentum = hyper.momentum;

    std::vector<MapTrainLogRow> log;
    std::vector<std::size_t> order(frames.size());
    std::iota(order.begin(), order.end(), 0);
    int step = 0;
    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        for (const auto& [decayEpoch, factor] : hyper.lrDecay)
            if (decayEpoch == epoch) opt.lr *= factor;
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffleRng.uniformInt(std::uint64_t(i))]);

        for (std::size_t oi = 0; oi < order.size(); ++oi, ++step) {
            const auto& f = frames[order[oi]];
            nn::ExecState st;
            net.graph.forward(f.input, st, true);
            const Tensor& out = st.act[net.outputNode];
            const std::size_t n = out.numel();
            if (f.target.size() != n)
                throw nn::ShapeMismatch("trainMapNet: target size mismatch");

            double loss;
            Tensor grad(out.shape);
            if (task == MapTask::Ground) {
                if (f.mask.size() != n)
                    throw nn::ShapeMismatch("trainMapNet: mask size mismatch");
                std::vector<float> g;
                loss = groundLoss(std::vector<float>(out.data.begin(), out.data.end()),
                                  f.target, f.mask, &g);
                std::copy(g.begin(), g.end(), grad.data.begin());
            } else {
                std::vector<float> p(n), dLdP(n);
                for (std::size_t k = 0; k < n; ++k) p[k] = float(sigmoidD(out.data[k]));
                loss = roadLoss(p, f.target, &dLdP);
                for (std::size_t k = 0; k < n; ++k)
                    grad.data[k] =
                        float(double(dLdP[k]) * double(p[k]) * (1.0 - double(p[k])));
            }
            if (!std::isfinite(loss))
                throw det::Divergence("trainMapNet: non-finite loss at step " +
                                      std::to_string(step));

            net.graph.zeroParamGrads();
            net.graph.backward(st, {{net.outputNode, &grad}});
            nn::sgdMomentumStep(net.graph.params, opt);
            log.push_back({epoch, step, loss, opt.lr});
        }
    }
    // Recalibrate BatchNorm running statistics against the final weights,
    // same as trainDetector.
    for (int pass = 0; pass < 2; ++pass)
        for (const auto& f : frames) {
            nn::ExecState st;
            net.graph.forward(f.input, st, /*trainMode=*/true);
        }
    return log;
}

Priors estimatePriors(const bev::PointCloud& cloud, const bev::BevConfig& cfg,
                      MapNet& groundNet, MapNet& roadNet) {
    MapInput in = mapInputRasterize(cloud, cfg);
    Tensor input({1, in.tensor.channels, in.tensor.height, in.tensor.width});
    input.data = in.tensor.data;

    Priors out;
    nn::ExecState st;
    groundNet.graph.forward(input, st, false);
    const Tensor& g = st.act[groundNet.outputNode];
    out.ground.assign(g.data.begin(), g.data.end());

    nn::ExecState st2;
    roadNet.graph.forward(input, st2, false);
    const Tensor& r = st2.act[roadNet.outputNode];
    out.roadProb.resize(r.numel());
    out.roadMask.resize(r.numel());
    for (std::size_t i = 0; i < r.numel(); ++i) {
        out.roadProb[i] = float(sigmoidD(r.data[i]));
        out.roadMask[i] = out.roadProb[i] >= 0.5f ? 1.0f : 0.0f;
    }
    return out;
}

mapdata::GroundRaster groundEstimateToRaster(const std::vector<float>& ground,
                                             const bev::BevConfig& cfg) {
    if (std::fabs(cfg.dL - cfg.dW) > 1e-12)
        throw std::invalid_argument("groundEstimateToRaster: anisotropic cells");
    if (ground.size() != std::size_t(cfg.heightPx()) * cfg.widthPx())
        throw std::invalid_argument("groundEstimateToRaster: size mismatch");
    mapdata::GroundRaster r;
    r.resolution = cfg.dL;
    r.originX = cfg.xMin;
    r.originY = cfg.yMin;
    r.nCols = cfg.heightPx();  // columns index x
    r.nRows = cfg.widthPx();
    r.heights.resize(std::size_t(r.nRows) * r.nCols);
    for (int i = 0; i < cfg.heightPx(); ++i)
        for (int j = 0; j < cfg.widthPx(); ++j)
            r.at(j, i) = ground[std::size_t(i) * cfg.widthPx() + j];
    return r;
}

std::vector<geom::OrientedBox> detectWithPriors(const bev::PointCloud& cloud,
                                                const bev::BevConfig& cfg,
                                                const mapdata::GroundRaster& ground,
                                                const std::vector<float>& roadMask,
                                                det::DetectorNet& detNet,
                                                const det::NormStats& stats,
                                                const det::DetectorConfig& detCfg,
                                                int numThreads) {
    bev::GroundQuery query = [&ground](double x, double y) {
        bool ooc = false;
        return mapdata::queryGroundHeight(ground, x, y, &ooc);
    };
    bev::BevTensor bevT = bev::rasterize(cloud, cfg, query, numThreads);
    bevT = bev::concatRoadChannel(bevT, roadMask);
    Tensor input({1, bevT.channels, bevT.height, bevT.width});
    input.data = bevT.data;
    return det::runDetector(detNet, input, stats, detCfg, cfg);
}

std::vector<geom::OrientedBox> onlineDetect(const bev::PointCloud& cloud,
                                            const bev::BevConfig& cfg, MapNet& groundNet,
                                            MapNet& roadNet, det::DetectorNet& detNet,
                                            const det::NormStats& stats,
                                            const det::DetectorConfig& detCfg,
                                            int numThreads) {
    Priors priors = estimatePriors(cloud, cfg, groundNet, roadNet);
    const mapdata::GroundRaster raster = groundEstimateToRaster(priors.ground, cfg);
    return detectWithPriors(cloud, cfg, raster, priors.roadMask, detNet, stats, detCfg,
                            numThreads);
}

void writeRoadPgm(const std::vector<float>& mask, int h, int w, const std::string& path) {
    if (mask.size() != std::size_t(h) * w)
        throw std::invalid_argument("writeRoadPgm: size mismatch");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("writeRoadPgm: cannot open " + path);
    f << "P5\n" << w << " " << h << "\n1\n";
    for (float v : mask) f.put(v >= 0.5f ? char(1) : char(0));
}

std::vector<float> readRoadPgm(const std::string& path, int* h, int* w) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("readRoadPgm: cannot open " + path);
    std::string magic;
    int maxval = 0;
    f >> magic >> *w >> *h >> maxval;
    if (magic != "P5" || maxval != 1 || *h <= 0 || *w <= 0)
        throw std::runtime_error("readRoadPgm: bad header in " + path);
    f.get();  // single whitespace after maxval
    std::vector<float> mask(std::size_t(*h) * *w);
    for (auto& v : mask) v = float(f.get());
    if (!f) throw std::runtime_error("readRoadPgm: truncated " + path);
    return mask;
}

}  // namespace bevdet::mapnet
