#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bevdet/bevgrid.hpp"
#include "bevdet/detector.hpp"
#include "bevdet/mapdata.hpp"
#include "bevdet/tensor.hpp"

namespace bevdet::mapnet {

struct UNetConfig {
    // Encoder stage channels; the decoder mirrors them. Stage 0 is full
    // resolution, each later stage halves it.
    std::vector<int> stageChannels = {32, 64, 128, 256};
    int convsPerStage = 2;

    void validate() const;
};

UNetConfig smallUNetConfig();

struct MapNet {
    nn::Graph graph;
    int inputNode = -1;
    int outputNode = -1;  // (1, 1, H, W) raw; road nets get the sigmoid in the loss
};

// Symmetric U-Net: maxpool down, bilinear-resize up, skip concat per stage,
// final 3x3 conv to one channel. Output resolution equals the input's.
MapNet buildUNet(const UNetConfig& cfg, int inChannels);

struct MapInput {
    bev::BevTensor tensor;                 // raw z, no ground subtraction
    std::vector<std::uint8_t> hasPoints;   // per BEV column
};

MapInput mapInputRasterize(const bev::PointCloud& cloud, const bev::BevConfig& cfg,
                           int numThreads = 1);

// Sum of squared error over masked pixels; gradient zero elsewhere.
double groundLoss(const std::vector<float>& pred, const std::vector<float>& gt,
                  const std::vector<std::uint8_t>& mask, std::vector<float>* gradOut);

// Binary cross-entropy summed over every pixel; pred must be post-sigmoid.
double roadLoss(const std::vector<float>& pred, const std::vector<float>& gt,
                std::vector<float>* gradOut);

enum class MapTask { Ground, Road };

struct MapTrainFrame {
    nn::Tensor input;                    // (1, C, H, W)
    std::vector<float> target;           // H*W: meters (ground) or {0,1} (road)
    std::vector<std::uint8_t> mask;      // ground task only; may be empty for road
};

struct MapHyper {
    double lr = 0.01;
    double momentum = 0.9;
    int epochs = 10;
    std::vector<std::pair<int, double>> lrDecay;
};

struct MapTrainLogRow {
    int epoch, step;
    double loss, lr;
};

// Same training contract as the detector: shuffled frames, SGD momentum,
// deterministic per seed, Divergence on non-finite loss.
std::vector<MapTrainLogRow> trainMapNet(MapNet& net, std::vector<MapTrainFrame>& frames,
                                        MapTask task, const MapHyper& hyper,
                                        std::uint64_t seed);

struct Priors {
    std::vector<float> ground;     // meters, H*W
    std::vector<float> roadProb;   // (0,1), H*W
    std::vector<float> roadMask;   // roadProb binarized at 0.5
};

Priors estimatePriors(const bev::PointCloud& cloud, const bev::BevConfig& cfg,
                      MapNet& groundNet, MapNet& roadNet);

// Predicted ground as a raster aligned with the BEV grid, for JSON dumps and
// for queryGroundHeight-based re-rasterization.
mapdata::GroundRaster groundEstimateToRaster(const std::vector<float>& ground,
                                             const bev::BevConfig& cfg);

// Shared back half of the offline and online pipelines: rasterize relative to
// the given ground, append the road channel, run the detector.
std::vector<geom::OrientedBox> detectWithPriors(const bev::PointCloud& cloud,
                                                const bev::BevConfig& cfg,
                                                const mapdata::GroundRaster& ground,
                                                const std::vector<float>& roadMask,
                                                det::DetectorNet& detNet,
                                                const det::NormStats& stats,
                                                const det::DetectorConfig& detCfg,
                                                int numThreads = 1);

// HDNET-online: estimatePriors, then detectWithPriors on the predictions.
std::vector<geom::OrientedBox> onlineDetect(const bev::PointCloud& cloud,
                                            const bev::BevConfig& cfg, MapNet& groundNet,
                                            MapNet& roadNet, det::DetectorNet& detNet,
                                            const det::NormStats& stats,
                                            const det::DetectorConfig& detCfg,
                                            int numThreads = 1);

// P5 PGM, maxval 1.
void writeRoadPgm(const std::vector<float>& mask, int h, int w, const std::string& path);
std::vector<float> readRoadPgm(const std::string& path, int* h, int* w);

}  // namespace bevdet::mapnet
