#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bevdet/bevgrid.hpp"
#include "bevdet/geom.hpp"
#include "bevdet/tensor.hpp"

namespace bevdet::det {

struct DetectorConfig {
    std::vector<int> blockLayers = {2, 2, 3, 6};
    std::vector<int> blockFilters = {32, 64, 128, 256};
    int headerLayers = 5;
    int headerFilters = 256;
    int outputChannels = 7;
    int downsample = 4;  // three /2 pools, fused at stride 4
    double lossWeight = 1.0;
    double scoreThresh = 0.2;
    double nmsIoU = 0.1;

    void validate() const;  // throws std::invalid_argument
};

// A reduced configuration that trains in minutes on one core.
DetectorConfig smallDetectorConfig();

enum class FusionMode { None, InputFusion, MultiTask, OutputMasking };

struct DetectorNet {
    nn::Graph graph;
    int inputNode = -1;
    int outputNode = -1;      // (N, 7, H/4, W/4), channel 0 is a logit
    int roadHeadNode = -1;    // multi-task only: (N, 1, H/4, W/4) logit
};

// Backbone blocks 1-4 (pools after 1-3), blocks 2-4 bilinear-resized to
// stride-4 and concatenated, then the header. Channel 0 stays a logit in the
// graph; the sigmoid lives in the loss/decoder.
DetectorNet buildDetector(const DetectorConfig& cfg, int inChannels,
                          bool multiTaskRoadHead = false);

// He init plus a classification prior: the score channel's bias starts at a
// large negative logit (p ~ 0.01) so early training is not dominated by the
// negative ocean.
void initDetectorParams(DetectorNet& net, std::uint64_t seed, double priorLogit = -4.6);

constexpr int kRegChannels = 6;  // cos2t, sin2t, dx, dy, log w, log l

struct TargetMaps {
    int h = 0, w = 0;  // output-grid resolution
    std::vector<std::int8_t> cls;  // +1 pos / 0 neg / -1 ignore
    std::vector<int> boxIndex;     // assigned label per positive pixel, else -1

    std::size_t numPositives() const;
};

struct NormStats {
    double mean[kRegChannels] = {0, 0, 0, 0, 0, 0};
    double std[kRegChannels] = {1, 1, 1, 1, 1, 1};  // floored at 1e-3
};

struct NoPositives : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Pixel distance rule against the nearest GT center, radii 0.3/0.7*min(w,l).
// The output pixel nearest each center is always positive so no box goes
// unassigned at coarse resolutions. Pixels outside fovMask become ignore.
TargetMaps assignTargets(const std::vector<geom::OrientedBox>& labels,
                         const bev::BevConfig& cfg, int downsample,
                         const std::vector<std::uint8_t>* fovMask = nullptr);

// Center of output pixel (i, j) in meters.
std::pair<double, double> outputPixelCenter(const bev::BevConfig& cfg, int downsample,
                                            int i, int j);

// Raw (unstandardized) 6-channel targets for one positive pixel.
void rawRegressionTargets(const geom::OrientedBox& box, double qx, double qy,
                          double out[kRegChannels]);

// Standardized regression target map, kRegChannels * h * w; defined only at
// positives (zero elsewhere).
std::vector<float> encodeTargets(const std::vector<geom::OrientedBox>& labels,
                                 const TargetMaps& targets, const bev::BevConfig& cfg,
                                 int downsample, const NormStats& stats);

struct TargetFrame {
    const std::vector<geom::OrientedBox>* labels;
    const TargetMaps* targets;
};

// Per-channel mean/std over every positive pixel in the set.
NormStats computeNormStats(const std::vector<TargetFrame>& frames,
                           const bev::BevConfig& cfg, int downsample);

// Zeroes the given channel with probability prob (one draw per call).
void dataDropout(nn::Tensor& input, int roadChannel, double prob, Rng& rng);

struct LossValue {
    double cls = 0.0;
    double reg = 0.0;
    double total() const { return cls + reg; }
};

// output: (1, 7, h, w) raw network output. Applies the channel-0 sigmoid
// internally; gradOut (same shape) receives d(total)/d(output) when non-null.
LossValue detectionLoss(const nn::Tensor& output, const TargetMaps& targets,
                        const std::vector<float>& regTarget, double lambda,
                        const nn::FocalLossParams& focal, nn::Tensor* gradOut);

// Threshold + de-standardize + NMS. roadMask (h*w, output grid) enables
// output-masking: detections centered off-road are dropped.
std::vector<geom::OrientedBox> decodeDetections(const nn::Tensor& output,
                                                const NormStats& stats,
                                                const DetectorConfig& cfg,
                                                const bev::BevConfig& bevCfg,
                                                const std::vector<float>* roadMask = nullptr);

struct TrainFrame {
    nn::Tensor input;  // (1, C, H, W)
    std::vector<geom::OrientedBox> labels;
    std::vector<float> roadMaskOut;  // output-grid road mask; empty if unused
    std::vector<std::uint8_t> fovMask;  // output-grid camera FOV; empty = all valid
};

struct Hyper {
    double lr = 0.01;
    double momentum = 0.9;
    int epochs = 10;
    // (epoch, factor): lr multiplied by factor at the start of that epoch.
    std::vector<std::pair<int, double>> lrDecay;
    double dropoutProb = 0.0;
    int roadChannel = -1;  // channel for dataDropout, -1 disables
    nn::FocalLossParams focal;
    double multiTaskWeight = 1.0;
};

struct TrainLogRow {
    int epoch, step;
    double clsLoss, regLoss, lr;
};

struct Divergence : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// SGD with momentum over frames, shuffled per epoch, one frame per step.
// Deterministic per seed. Throws Divergence on non-finite loss. Uses the
// multi-task road head iff net.roadHeadNode >= 0 and frames carry masks.
std::vector<TrainLogRow> trainDetector(DetectorNet& net, std::vector<TrainFrame>& frames,
                                       const bev::BevConfig& bevCfg,
                                       const DetectorConfig& cfg, const Hyper& hyper,
                                       std::uint64_t seed, NormStats* statsOut,
                                       FusionMode mode = FusionMode::None);

void writeTrainLog(const std::vector<TrainLogRow>& log, const std::string& path);

// Weights plus a JSON sidecar (path + ".json") with NormStats and config.
void saveDetector(const DetectorNet& net, const DetectorConfig& cfg,
                  const NormStats& stats, const std::string& path);
void loadDetector(DetectorNet& net, DetectorConfig& cfg, NormStats& stats,
                  const std::string& path);

// Inference: forward one frame and decode.
std::vector<geom::OrientedBox> runDetector(DetectorNet& net, const nn::Tensor& input,
                                           const NormStats& stats, const DetectorConfig& cfg,
                                           const bev::BevConfig& bevCfg,
                                           const std::vector<float>* roadMask = nullptr);

}  // namespace bevdet::det
