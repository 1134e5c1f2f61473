#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace bevdet::nn {

struct ShapeMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NonFinite : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// NCHW (or lower rank) float32 tensor with an optional gradient buffer.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;
    std::vector<float> grad;

    Tensor() = default;
    explicit Tensor(std::vector<int> s);

    std::size_t numel() const { return data.size(); }
    void zeroGrad();
    void ensureGrad();
};

std::size_t shapeNumel(const std::vector<int>& shape);

// When true, every primitive output is checked for NaN/Inf.
extern bool debugFiniteChecks;
void checkFinite(const Tensor& t, const char* where);

enum class LayerKind {
    Input,
    Conv2d,     // k=3 pad=1 or k=1 pad=0, stride 1
    BatchNorm,  // per-channel, momentum 0.99, eps 1e-5
    Relu,
    Sigmoid,
    MaxPool,    // k=3 s=2 pad=1
    Resize,     // bilinear, align-corners=false, explicit or node-relative target
    Concat,     // channel axis
};

struct LayerNode {
    LayerKind kind = LayerKind::Input;
    std::vector<int> inputs;
    // Conv2d
    int outChannels = 0;
    int kernel = 3;
    bool hasBias = true;
    std::string paramName;  // conv / batchnorm parameter prefix
    // Resize
    int targetH = -1, targetW = -1;  // explicit target, or
    int refNode = -1;                // match this node's spatial shape
};

struct Param {
    Tensor tensor;
    bool trainable = true;
};

using ParamStore = std::map<std::string, Param>;

struct BnCache {
    std::vector<double> mean, invStd;
};

// Per-forward activation state, kept for the backward pass.
struct ExecState {
    std::vector<Tensor> act;
    std::vector<std::vector<std::int32_t>> poolArg;
    std::vector<BnCache> bn;
    bool trainMode = false;
};

// A static DAG of the primitives above plus a named parameter store.
struct Graph {
    std::vector<LayerNode> nodes;
    ParamStore params;

    int addInput();
    int conv(int in, int inChannels, int outChannels, int kernel, const std::string& name,
             bool bias = true);
    int batchnorm(int in, int channels, const std::string& name);
    int relu(int in);
    int sigmoid(int in);
    int maxpool(int in);
    int resizeLike(int in, int ref);
    int resizeTo(int in, int h, int w);
    int concat(const std::vector<int>& ins);

    // He-normal conv weights, zero biases, identity batchnorm. Deterministic
    // per seed; parameters are visited in name order.
    void initParams(std::uint64_t seed);

    // Runs the whole graph; activations land in st.act (indexed by node id).
    void forward(const Tensor& input, ExecState& st, bool trainMode);

    // Propagates gradients from the listed (node, upstreamGrad) pairs down to
    // the input, accumulating parameter gradients in the store.
    void backward(ExecState& st, const std::vector<std::pair<int, const Tensor*>>& outGrads);

    void zeroParamGrads();
    std::size_t paramCount() const;

    // Static shape inference; throws ShapeMismatch on inconsistency.
    // Returns the per-node output shapes for input shape (N, C, H, W).
    std::vector<std::vector<int>> inferShapes(const std::vector<int>& inputShape) const;
};

struct FocalLossParams {
    double alpha = 0.75;
    double gamma = 0.5;
};

// targets: +1 positive, 0 negative, -1 ignore. p must be post-sigmoid; it is
// clamped to [1e-7, 1-1e-7] before the logs. Sum over pixels, not mean.
double focalLoss(const float* p, const std::int8_t* target, std::size_t n,
                 const FocalLossParams& params, float* gradOut);

// Sum over masked elements of 0.5 d^2 (|d| < 1) else |d| - 0.5.
double smoothL1(const float* pred, const float* target, const std::uint8_t* mask,
                std::size_t n, float* gradOut);

// Binary cross-entropy, summed. p post-sigmoid, clamped like focalLoss;
// targets in [0, 1].
double bceLoss(const float* p, const float* target, std::size_t n, float* gradOut);

struct OptimizerState {
    std::map<std::string, std::vector<float>> velocity;
    double lr = 0.01;
    double momentum = 0.9;
};

// Classical momentum: v <- momentum * v + g; p <- p - lr * v.
void sgdMomentumStep(ParamStore& params, OptimizerState& state);

// Binary weights file: magic "BEVW", u32 version, u32 tensor count, then per
// tensor: u16 name length, name, u8 rank, u32 dims, float32 data. All
// little-endian.
void saveWeights(const ParamStore& params, const std::string& path);
void loadWeights(ParamStore& params, const std::string& path);

}  // namespace bevdet::nn
