#include "bevdet/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "bevdet/rng.hpp"

namespace bevdet::nn {

bool debugFiniteChecks = false;

std::size_t shapeNumel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= std::size_t(d);
    return n;
}

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)), data(shapeNumel(shape), 0.0f) {}

void Tensor::zeroGrad() {
    grad.assign(data.size(), 0.0f);
}

void Tensor::ensureGrad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
}

void checkFinite(const Tensor& t, const char* where) {
    if (!debugFiniteChecks) return;
    for (float v : t.data) {
        if (!std::isfinite(v)) throw NonFinite(std::string("non-finite value in ") + where);
    }
}

namespace {

struct Dims {
    int n, c, h, w;
};

Dims dims4(const Tensor& t, const char* where) {
    if (t.shape.size() != 4) throw ShapeMismatch(std::string(where) + ": expected rank-4 tensor");
    return {t.shape[0], t.shape[1], t.shape[2], t.shape[3]};
}

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.99;

// ---- conv2d, stride 1, k=3/pad=1 or k=1/pad=0 -------------------------------

void convForward(const Tensor& in, const Tensor& weight, const Tensor* bias, int k,
                 Tensor& out) {
    const Dims d = dims4(in, "conv2d");
    const int cout = weight.shape[0];
    const int cin = weight.shape[1];
    if (cin != d.c) throw ShapeMismatch("conv2d: input channel mismatch");
    const int pad = (k == 3) ? 1 : 0;
    out = Tensor({d.n, cout, d.h, d.w});
    std::vector<double> row(std::size_t(d.w));
    const std::size_t inPlane = std::size_t(d.h) * d.w;
    for (int n = 0; n < d.n; ++n) {
        const float* inBase = in.data.data() + std::size_t(n) * d.c * inPlane;
        float* outBase = out.data.data() + std::size_t(n) * cout * inPlane;
        for (int co = 0; co < cout; ++co) {
            const float* wBase = weight.data.data() + std::size_t(co) * cin * k * k;
            const double b = bias ? double(bias->data[co]) : 0.0;
            for (int oy = 0; oy < d.h; ++oy) {
                std::fill(row.begin(), row.end(), b);
                for (int ci = 0; ci < cin; ++ci) {
                    const float* inCh = inBase + std::size_t(ci) * inPlane;
                    const float* wCh = wBase + std::size_t(ci) * k * k;
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = oy + ky - pad;
                        if (iy < 0 || iy >= d.h) continue;
                        const float* inRow = inCh + std::size_t(iy) * d.w;
                        for (int kx = 0; kx < k; ++kx) {
                            const double wv = wCh[ky * k + kx];
                            const int off = kx - pad;
                            const int x0 = std::max(0, -off);
                            const int x1 = std::min(d.w, d.w - off);
                            for (int ox = x0; ox < x1; ++ox) row[ox] += double(inRow[ox + off]) * wv;
                        }
                    }
                }
                float* outRow = outBase + std::size_t(co) * inPlane + std::size_t(oy) * d.w;
                for (int ox = 0; ox < d.w; ++ox) outRow[ox] = float(row[ox]);
            }
        }
    }
}

void convBackward(const Tensor& in, const Tensor& weight, int k, const Tensor& gradOut,
                  Tensor* gradIn, float* gradW, float* gradB) {
    const Dims d = dims4(in, "conv2d backward");
    const int cout = weight.shape[0];
    const int cin = weight.shape[1];
    const int pad = (k == 3) ? 1 : 0;
    const std::size_t plane = std::size_t(d.h) * d.w;

    if (gradIn) {
        std::vector<double> row(std::size_t(d.w));
        for (int n = 0; n < d.n; ++n) {
            const float* goBase = gradOut.data.data() + std::size_t(n) * cout * plane;
            float* giBase = gradIn->grad.data() + std::size_t(n) * cin * plane;
            for (int ci = 0; ci < cin; ++ci) {
                for (int iy = 0; iy < d.h; ++iy) {
                    std::fill(row.begin(), row.end(), 0.0);
                    for (int co = 0; co < cout; ++co) {
                        const float* goCh = goBase + std::size_t(co) * plane;
                        const float* wCh =
                            weight.data.data() + (std::size_t(co) * cin + ci) * k * k;
                        for (int ky = 0; ky < k; ++ky) {
                            const int oy = iy - ky + pad;
                            if (oy < 0 || oy >= d.h) continue;
                            const float* goRow = goCh + std::size_t(oy) * d.w;
                            for (int kx = 0; kx < k; ++kx) {
                                const double wv = wCh[ky * k + kx];
                                const int off = pad - kx;  // ox = ix + off
                                const int x0 = std::max(0, -off);
                                const int x1 = std::min(d.w, d.w - off);
                                for (int ix = x0; ix < x1; ++ix) {
                                    row[ix] += double(goRow[ix + off]) * wv;
                                }
                            }
                        }
                    }
                    float* giRow = giBase + std::size_t(ci) * plane + std::size_t(iy) * d.w;
                    for (int ix = 0; ix < d.w; ++ix) giRow[ix] += float(row[ix]);
                }
            }
        }
    }

    if (gradW) {
        for (int co = 0; co < cout; ++co) {
            for (int ci = 0; ci < cin; ++ci) {
                for (int ky = 0; ky < k; ++ky) {
                    for (int kx = 0; kx < k; ++kx) {
                        double acc = 0.0;
                        for (int n = 0; n < d.n; ++n) {
                            const float* goCh = gradOut.data.data() +
                                                (std::size_t(n) * cout + co) * plane;
                            const float* inCh =
                                in.data.data() + (std::size_t(n) * cin + ci) * plane;
                            for (int oy = 0; oy < d.h; ++oy) {
                                const int iy = oy + ky - pad;
                                if (iy < 0 || iy >= d.h) continue;
                                const float* goRow = goCh + std::size_t(oy) * d.w;
                                const float* inRow = inCh + std::size_t(iy) * d.w;
                                const int off = kx - pad;
                                const int x0 = std::max(0, -off);
                                const int x1 = std::min(d.w, d.w - off);
                                for (int ox = x0; ox < x1; ++ox) {
                                    acc += double(goRow[ox]) * double(inRow[ox + off]);
                                }
                            }
                        }
                        gradW[((std::size_t(co) * cin + ci) * k + ky) * k + kx] += float(acc);
                    }
                }
            }
        }
    }

    if (gradB) {
        for (int co = 0; co < cout; ++co) {
            double acc = 0.0;
            for (int n = 0; n < d.n; ++n) {
                const float* goCh = gradOut.data.data() + (std::size_t(n) * cout + co) * plane;
                for (std::size_t i = 0; i < plane; ++i) acc += double(goCh[i]);
            }
            gradB[co] += float(acc);
        }
    }
}

// ---- batchnorm --------------------------------------------------------------

void bnForward(const Tensor& in, const Tensor& gamma, const Tensor& beta,
               Tensor* runningMean, Tensor* runningVar, bool train, BnCache& cache,
               Tensor& out) {
    const Dims d = dims4(in, "batchnorm");
    const std::size_t plane = std::size_t(d.h) * d.w;
    const std::size_t m = std::size_t(d.n) * plane;
    out = Tensor({d.n, d.c, d.h, d.w});
    cache.mean.assign(d.c, 0.0);
    cache.invStd.assign(d.c, 0.0);
    for (int c = 0; c < d.c; ++c) {
        double mean, var;
        if (train) {
            double s = 0.0, s2 = 0.0;
            for (int n = 0; n < d.n; ++n) {
                const float* x = in.data.data() + (std::size_t(n) * d.c + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    s += double(x[i]);
                    s2 += double(x[i]) * double(x[i]);
                }
            }
            mean = s / double(m);
            var = std::max(0.0, s2 / double(m) - mean * mean);
            if (runningMean) {
                runningMean->data[c] =
                    float(kBnMomentum * runningMean->data[c] + (1.0 - kBnMomentum) * mean);
                runningVar->data[c] =
                    float(kBnMomentum * runningVar->data[c] + (1.0 - kBnMomentum) * var);
            }
        } else {
            mean = runningMean ? double(runningMean->data[c]) : 0.0;
            var = runningVar ? double(runningVar->data[c]) : 1.0;
        }
        const double invStd = 1.0 / std::sqrt(var + kBnEps);
        cache.mean[c] = mean;
        cache.invStd[c] = invStd;
        const double g = gamma.data[c];
        const double b = beta.data[c];
        for (int n = 0; n < d.n; ++n) {
            const float* x = in.data.data() + (std::size_t(n) * d.c + c) * plane;
            float* y = out.data.data() + (std::size_t(n) * d.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                y[i] = float((double(x[i]) - mean) * invStd * g + b);
            }
        }
    }
}

void bnBackward(const Tensor& in, const Tensor& gamma, const BnCache& cache, bool train,
                const Tensor& gradOut, Tensor* gradIn, float* gradGamma, float* gradBeta) {
    const Dims d = dims4(in, "batchnorm backward");
    const std::size_t plane = std::size_t(d.h) * d.w;
    const double m = double(std::size_t(d.n) * plane);
    for (int c = 0; c < d.c; ++c) {
        const double mean = cache.mean[c];
        const double invStd = cache.invStd[c];
        const double g = gamma.data[c];
        double sumDy = 0.0, sumDyXhat = 0.0;
        for (int n = 0; n < d.n; ++n) {
            const float* x = in.data.data() + (std::size_t(n) * d.c + c) * plane;
            const float* dy = gradOut.data.data() + (std::size_t(n) * d.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                const double xhat = (double(x[i]) - mean) * invStd;
                sumDy += double(dy[i]);
                sumDyXhat += double(dy[i]) * xhat;
            }
        }
        if (gradGamma) gradGamma[c] += float(sumDyXhat);
        if (gradBeta) gradBeta[c] += float(sumDy);
        if (gradIn) {
            for (int n = 0; n < d.n; ++n) {
                const float* x = in.data.data() + (std::size_t(n) * d.c + c) * plane;
                const float* dy = gradOut.data.data() + (std::size_t(n) * d.c + c) * plane;
                float* dx = gradIn->grad.data() + (std::size_t(n) * d.c + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    if (train) {
                        const double xhat = (double(x[i]) - mean) * invStd;
                        dx[i] += float(g * invStd *
                                       (double(dy[i]) - sumDy / m - xhat * sumDyXhat / m));
                    } else {
                        dx[i] += float(double(dy[i]) * g * invStd);
                    }
                }
            }
        }
    }
}

// ---- maxpool k=3 s=2 pad=1 ---------------------------------------------------

inline int pooledSize(int n) { return (n - 1) / 2 + 1; }

void poolForward(const Tensor& in, Tensor& out, std::vector<std::int32_t>& argmax) {
    const Dims d = dims4(in, "maxpool");
    const int oh = pooledSize(d.h);
    const int ow = pooledSize(d.w);
    out = Tensor({d.n, d.c, oh, ow});
    argmax.assign(out.numel(), -1);
    const std::size_t inPlane = std::size_t(d.h) * d.w;
    const std::size_t outPlane = std::size_t(oh) * ow;
    for (int n = 0; n < d.n; ++n) {
        for (int c = 0; c < d.c; ++c) {
            const float* x = in.data.data() + (std::size_t(n) * d.c + c) * inPlane;
            float* y = out.data.data() + (std::size_t(n) * d.c + c) * outPlane;
            std::int32_t* am = argmax.data() + (std::size_t(n) * d.c + c) * outPlane;
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    float best = -std::numeric_limits<float>::infinity();
                    std::int32_t bi = -1;
                    for (int ky = -1; ky <= 1; ++ky) {
                        const int iy = 2 * oy + ky;
                        if (iy < 0 || iy >= d.h) continue;
                        for (int kx = -1; kx <= 1; ++kx) {
                            const int ix = 2 * ox + kx;
                            if (ix < 0 || ix >= d.w) continue;
                            const float v = x[std::size_t(iy) * d.w + ix];
                            if (v > best) {
                                best = v;
                                bi = std::int32_t(iy) * d.w + ix;
                            }
                        }
                    }
                    y[std::size_t(oy) * ow + ox] = best;
                    am[std::size_t(oy) * ow + ox] = bi;
                }
            }
        }
    }
}

void poolBackward(const Tensor& in, const Tensor& gradOut,
                  const std::vector<std::int32_t>& argmax, Tensor& gradIn) {
    const Dims d = dims4(in, "maxpool backward");
    const int oh = pooledSize(d.h);
    const int ow = pooledSize(d.w);
    const std::size_t inPlane = std::size_t(d.h) * d.w;
    const std::size_t outPlane = std::size_t(oh) * ow;
    for (int n = 0; n < d.n; ++n) {
        for (int c = 0; c < d.c; ++c) {
            const std::size_t base = (std::size_t(n) * d.c + c);
            const float* dy = gradOut.data.data() + base * outPlane;
            const std::int32_t* am = argmax.data() + base * outPlane;
            float* dx = gradIn.grad.data() + base * inPlane;
            for (std::size_t i = 0; i < outPlane; ++i) {
                if (am[i] >= 0) dx[am[i]] += dy[i];
            }
        }
    }
}

// ---- bilinear resize, align-corners=false ------------------------------------

struct ResizeTap {
    int i0, i1;
    double f;  // weight of i1
};

std::vector<ResizeTap> resizeTaps(int inN, int outN) {
    std::vector<ResizeTap> taps(outN);
    const double scale = double(inN) / double(outN);
    for (int o = 0; o < outN; ++o) {
        double s = (o + 0.5) * scale - 0.5;
        s = std::clamp(s, 0.0, double(inN - 1));
        const int i0 = int(std::floor(s));
        const int i1 = std::min(i0 + 1, inN - 1);
        taps[o] = {i0, i1, s - i0};
    }
    return taps;
}

void resizeForward(const Tensor& in, int th, int tw, Tensor& out) {
    const Dims d = dims4(in, "resize");
    out = Tensor({d.n, d.c, th, tw});
    const auto ty = resizeTaps(d.h, th);
    const auto tx = resizeTaps(d.w, tw);
    const std::size_t inPlane = std::size_t(d.h) * d.w;
    const std::size_t outPlane = std::size_t(th) * tw;
    for (int n = 0; n < d.n; ++n) {
        for (int c = 0; c < d.c; ++c) {
            const float* x = in.data.data() + (std::size_t(n) * d.c + c) * inPlane;
            float* y = out.data.data() + (std::size_t(n) * d.c + c) * outPlane;
            for (int oy = 0; oy < th; ++oy) {
                const auto& ry = ty[oy];
                for (int ox = 0; ox < tw; ++ox) {
                    const auto& rx = tx[ox];
                    const double v00 = x[std::size_t(ry.i0) * d.w + rx.i0];
                    const double v01 = x[std::size_t(ry.i0) * d.w + rx.i1];
                    const double v10 = x[std::size_t(ry.i1) * d.w + rx.i0];
                    const double v11 = x[std::size_t(ry.i1) * d.w + rx.i1];
                    y[std::size_t(oy) * tw + ox] =
                        float((1 - ry.f) * ((1 - rx.f) * v00 + rx.f * v01) +
                              ry.f * ((1 - rx.f) * v10 + rx.f * v11));
                }
            }
        }
    }
}

void resizeBackward(const Tensor& in, const Tensor& gradOut, Tensor& gradIn) {
    const Dims d = dims4(in, "resize backward");
    const int th = gradOut.shape[2];
    const int tw = gradOut.shape[3];
    const auto ty = resizeTaps(d.h, th);
    const auto tx = resizeTaps(d.w, tw);
    const std::size_t inPlane = std::size_t(d.h) * d.w;
    const std::size_t outPlane = std::size_t(th) * tw;
    for (int n = 0; n < d.n; ++n) {
        for (int c = 0; c < d.c; ++c) {
            const float* dy = gradOut.data.data() + (std::size_t(n) * d.c + c) * outPlane;
            float* dx = gradIn.grad.data() + (std::size_t(n) * d.c + c) * inPlane;
            for (int oy = 0; oy < th; ++oy) {
                const auto& ry = ty[oy];
                for (int ox = 0; ox < tw; ++ox) {
                    const auto& rx = tx[ox];
                    const float g = dy[std::size_t(oy) * tw + ox];
                    dx[std::size_t(ry.i0) * d.w + rx.i0] += float((1 - ry.f) * (1 - rx.f) * g);
                    dx[std::size_t(ry.i0) * d.w + rx.i1] += float((1 - ry.f) * rx.f * g);
                    dx[std::size_t(ry.i1) * d.w + rx.i0] += float(ry.f * (1 - rx.f) * g);
                    dx[std::size_t(ry.i1) * d.w + rx.i1] += float(ry.f * rx.f * g);
                }
            }
        }
    }
}

}  // namespace

// ---- graph -------------------------------------------------------------------

int Graph::addInput() {
    nodes.push_back(LayerNode{});
    return int(nodes.size()) - 1;
}

int Graph::conv(int in, int inChannels, int outChannels, int kernel, const std::string& name,
                bool bias) {
    LayerNode n;
    n.kind = LayerKind::Conv2d;
    n.inputs = {in};
    n.outChannels = outChannels;
    n.kernel = kernel;
    n.hasBias = bias;
    n.paramName = name;
    params[name + ".weight"].tensor = Tensor({outChannels, inChannels, kernel, kernel});
    if (bias) params[name + ".bias"].tensor = Tensor({outChannels});
    nodes.push_back(std::move(n));
    return int(nodes.size()) - 1;
}

int Graph::batchnorm(int in, int channels, const std::string& name) {
    LayerNode n;
    n.kind = LayerKind::BatchNorm;
    n.inputs = {in};
    n.outChannels = channels;
    n.paramName = name;
    params[name + ".gamma"].tensor = Tensor({channels});
    params[name + ".beta"].tensor = Tensor({channels});
    params[name + ".running_mean"] = Param{Tensor({channels}), false};
    params[name + ".running_var"] = Param{Tensor({channels}), false};
    nodes.push_back(std::move(n));
    return int(nodes.size()) - 1;
}

int Graph::relu(int in) {
    LayerNode n;
    n.kind = LayerKind::Relu;
    n.inputs = {in};
    nodes.push_back(std::move(n));
    return int(nodes.size()) - 1;
}

int Graph::sigmoid(int in) {
    LayerNode n;
    n.kind = LayerKind::Sigmoid;
    n.inputs = {in};
    nodes.push_back(std::move(n));
    return int(nodes.size()) - 1;
}

int Graph::maxpool(int in) {
    LayerNode n;
    n.kind = LayerKind::MaxPool;
    n.inputs = {in};
    nodes.push_back(std::move(n));
    return int(nodes.size()) - 1;
}

int Graph::resizeLike(int in, int ref) {
    LayerNode n;
    n.kind = LayerKind::Resize;
    n.inputs = {in};
    n.refNode = ref;
    nodes.push_back(std::move(n));
    return int(nodes.size()) - 1;
}

int Graph::resizeTo(int in, int h, int w) {
    LayerNode n;
    n.kind = LayerKind::Resize;
    n.inputs = {in};
    n.targetH = h;
    n.targetW = w;
    nodes.push_back(std::move(n));
    return int(nodes.size()) - 1;
}

int Graph::concat(const std::vector<int>& ins) {
    LayerNode n;
    n.kind = LayerKind::Concat;
    n.inputs = ins;
    nodes.push_back(std::move(n));
    return int(nodes.size()) - 1;
}

void Graph::initParams(std::uint64_t seed) {
    Rng rng(Rng::mix(seed, 0x1217));
    for (auto& [name, param] : params) {
        Tensor& t = param.tensor;
        if (name.ends_with(".weight") && t.shape.size() == 4) {
            const int fanIn = t.shape[1] * t.shape[2] * t.shape[3];
            const double std = std::sqrt(2.0 / double(fanIn));
            for (float& v : t.data) v = float(rng.normal(0.0, std));
        } else if (name.ends_with(".gamma") || name.ends_with(".running_var")) {
            std::fill(t.data.begin(), t.data.end(), 1.0f);
        } else {
            std::fill(t.data.begin(), t.data.end(), 0.0f);
        }
    }
}

void Graph::zeroParamGrads() {
    for (auto& [name, param] : params) param.tensor.zeroGrad();
}

std::size_t Graph::paramCount() const {
    std::size_t n = 0;
    for (const auto& [name, param] : params) {
        if (param.trainable) n += param.tensor.numel();
    }
    return n;
}

void Graph::forward(const Tensor& input, ExecState& st, bool trainMode) {
    st.act.assign(nodes.size(), Tensor{});
    st.poolArg.assign(nodes.size(), {});
    st.bn.assign(nodes.size(), BnCache{});
    st.trainMode = trainMode;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        const LayerNode& node = nodes[i];
        switch (node.kind) {
            case LayerKind::Input:
                st.act[i] = input;
                break;
            case LayerKind::Conv2d: {
                const Tensor& w = params.at(node.paramName + ".weight").tensor;
                const Tensor* b =
                    node.hasBias ? &params.at(node.paramName + ".bias").tensor : nullptr;
                convForward(st.act[node.inputs[0]], w, b, node.kernel, st.act[i]);
                break;
            }
            case LayerKind::BatchNorm: {
                Tensor& rm = params.at(node.paramName + ".running_mean").tensor;
                Tensor& rv = params.at(node.paramName + ".running_var").tensor;
                bnForward(st.act[node.inputs[0]], params.at(node.paramName + ".gamma").tensor,
                          params.at(node.paramName + ".beta").tensor, &rm, &rv, trainMode,
                          st.bn[i], st.act[i]);
                break;
            }
            case LayerKind::Relu: {
                const Tensor& x = st.act[node.inputs[0]];
                st.act[i] = x;
                for (float& v : st.act[i].data) v = std::max(0.0f, v);
                break;
            }
            case LayerKind::Sigmoid: {
                const Tensor& x = st.act[node.inputs[0]];
                st.act[i] = x;
                for (float& v : st.act[i].data) v = float(1.0 / (1.0 + std::exp(-double(v))));
                break;
            }
            case LayerKind::MaxPool:
                poolForward(st.act[node.inputs[0]], st.act[i], st.poolArg[i]);
                break;
            case LayerKind::Resize: {
                int th = node.targetH, tw = node.targetW;
                if (node.refNode >= 0) {
                    th = st.act[node.refNode].shape[2];
                    tw = st.act[node.refNode].shape[3];
                }
                resizeForward(st.act[node.inputs[0]], th, tw, st.act[i]);
                break;
            }
            case LayerKind::Concat: {
                const Tensor& first = st.act[node.inputs[0]];
                const Dims d = dims4(first, "concat");
                int cTotal = 0;
                for (int idx : node.inputs) {
                    const Tensor& t = st.act[idx];
                    if (t.shape[0] != d.n || t.shape[2] != d.h || t.shape[3] != d.w) {
                        throw ShapeMismatch("concat: spatial/batch shape mismatch");
                    }
                    cTotal += t.shape[1];
                }
                st.act[i] = Tensor({d.n, cTotal, d.h, d.w});
                const std::size_t plane = std::size_t(d.h) * d.w;
                for (int n = 0; n < d.n; ++n) {
                    std::size_t cOff = 0;
                    for (int idx : node.inputs) {
                        const Tensor& t = st.act[idx];
                        const std::size_t cnt = std::size_t(t.shape[1]) * plane;
                        std::memcpy(st.act[i].data.data() +
                                        (std::size_t(n) * cTotal) * plane + cOff * plane,
                                    t.data.data() + std::size_t(n) * t.shape[1] * plane,
                                    cnt * sizeof(float));
                        cOff += std::size_t(t.shape[1]);
                    }
                }
                break;
            }
        }
        checkFinite(st.act[i], "graph node");
    }
}

void Graph::backward(ExecState& st, const std::vector<std::pair<int, const Tensor*>>& outGrads) {
    std::vector<Tensor> grads(nodes.size());
    auto ensure = [&](int idx) {
        if (grads[idx].grad.empty()) {
            grads[idx].shape = st.act[idx].shape;
            grads[idx].grad.assign(st.act[idx].numel(), 0.0f);
        }
    };
    for (const auto& [nodeId, g] : outGrads) {
        ensure(nodeId);
        for (std::size_t i = 0; i < g->data.size(); ++i) grads[nodeId].grad[i] += g->data[i];
    }
    for (int i = int(nodes.size()) - 1; i >= 0; --i) {
        if (grads[i].grad.empty()) continue;
        const LayerNode& node = nodes[i];
        switch (node.kind) {
            case LayerKind::Input:
                break;
            case LayerKind::Conv2d: {
                const int in = node.inputs[0];
                ensure(in);
                Tensor& w = params.at(node.paramName + ".weight").tensor;
                w.ensureGrad();
                float* gb = nullptr;
                if (node.hasBias) {
                    Tensor& b = params.at(node.paramName + ".bias").tensor;
                    b.ensureGrad();
                    gb = b.grad.data();
                }
                Tensor gradOut;
                gradOut.shape = grads[i].shape;
                gradOut.data = grads[i].grad;
                convBackward(st.act[in], w, node.kernel, gradOut, &grads[in], w.grad.data(), gb);
                break;
            }
            case LayerKind::BatchNorm: {
                const int in = node.inputs[0];
                ensure(in);
                Tensor& g = params.at(node.paramName + ".gamma").tensor;
                Tensor& b = params.at(node.paramName + ".beta").tensor;
                g.ensureGrad();
                b.ensureGrad();
                Tensor gradOut;
                gradOut.shape = grads[i].shape;
                gradOut.data = grads[i].grad;
                bnBackward(st.act[in], g, st.bn[i], st.trainMode, gradOut, &grads[in],
                           g.grad.data(), b.grad.data());
                break;
            }
            case LayerKind::Relu: {
                const int in = node.inputs[0];
                ensure(in);
                const Tensor& x = st.act[in];
                for (std::size_t j = 0; j < x.numel(); ++j) {
                    if (x.data[j] > 0.0f) grads[in].grad[j] += grads[i].grad[j];
                }
                break;
            }
            case LayerKind::Sigmoid: {
                const int in = node.inputs[0];
                ensure(in);
                const Tensor& y = st.act[i];
                for (std::size_t j = 0; j < y.numel(); ++j) {
                    grads[in].grad[j] += grads[i].grad[j] * y.data[j] * (1.0f - y.data[j]);
                }
                break;
            }
            case LayerKind::MaxPool: {
                const int in = node.inputs[0];
                ensure(in);
                Tensor gradOut;
                gradOut.shape = grads[i].shape;
                gradOut.data = grads[i].grad;
                poolBackward(st.act[in], gradOut, st.poolArg[i], grads[in]);
                break;
            }
            case LayerKind::Resize: {
                const int in = node.inputs[0];
                ensure(in);
                Tensor gradOut;
                gradOut.shape = grads[i].shape;
                gradOut.data = grads[i].grad;
                resizeBackward(st.act[in], gradOut, grads[in]);
                break;
            }
            case LayerKind::Concat: {
                const Dims d = dims4(st.act[i], "concat backward");
                const std::size_t plane = std::size_t(d.h) * d.w;
                for (int n = 0; n < d.n; ++n) {
                    std::size_t cOff = 0;
                    for (int idx : node.inputs) {
                        ensure(idx);
                        const int cIn = st.act[idx].shape[1];
                        for (std::size_t j = 0; j < std::size_t(cIn) * plane; ++j) {
                            grads[idx].grad[std::size_t(n) * cIn * plane + j] +=
                                grads[i].grad[(std::size_t(n) * d.c + cOff) * plane + j];
                        }
                        cOff += std::size_t(cIn);
                    }
                }
                break;
            }
        }
    }
    // Expose the input gradient for callers that need it.
    if (!grads.empty() && !grads[0].grad.empty()) st.act[0].grad = std::move(grads[0].grad);
}

std::vector<std::vector<int>> Graph::inferShapes(const std::vector<int>& inputShape) const {
    if (inputShape.size() != 4) throw ShapeMismatch("inferShapes: input must be rank 4");
    std::vector<std::vector<int>> shapes(nodes.size());
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        const LayerNode& node = nodes[i];
        for (int in : node.inputs) {
            if (in < 0 || in >= int(i)) throw ShapeMismatch("inferShapes: bad input ref (cycle?)");
        }
        switch (node.kind) {
            case LayerKind::Input:
                shapes[i] = inputShape;
                break;
            case LayerKind::Conv2d: {
                const auto& s = shapes[node.inputs[0]];
                const Tensor& w = params.at(node.paramName + ".weight").tensor;
                if (w.shape[1] != s[1]) {
                    throw ShapeMismatch("inferShapes: conv input channels " +
                                        std::to_string(s[1]) + " != weight " +
                                        std::to_string(w.shape[1]) + " (" + node.paramName + ")");
                }
                shapes[i] = {s[0], node.outChannels, s[2], s[3]};
                break;
            }
            case LayerKind::BatchNorm: {
                const auto& s = shapes[node.inputs[0]];
                if (s[1] != node.outChannels) throw ShapeMismatch("inferShapes: batchnorm channels");
                shapes[i] = s;
                break;
            }
            case LayerKind::Relu:
            case LayerKind::Sigmoid:
                shapes[i] = shapes[node.inputs[0]];
                break;
            case LayerKind::MaxPool: {
                const auto& s = shapes[node.inputs[0]];
                shapes[i] = {s[0], s[1], pooledSize(s[2]), pooledSize(s[3])};
                break;
            }
            case LayerKind::Resize: {
                const auto& s = shapes[node.inputs[0]];
                int th = node.targetH, tw = node.targetW;
                if (node.refNode >= 0) {
                    th = shapes[node.refNode][2];
                    tw = shapes[node.refNode][3];
                }
                shapes[i] = {s[0], s[1], th, tw};
                break;
            }
            case LayerKind::Concat: {
                const auto& s0 = shapes[node.inputs[0]];
                int c = 0;
                for (int in : node.inputs) {
                    const auto& s = shapes[in];
                    if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3]) {
                        throw ShapeMismatch("inferShapes: concat shape mismatch");
                    }
                    c += s[1];
                }
                shapes[i] = {s0[0], c, s0[2], s0[3]};
                break;
            }
        }
    }
    return shapes;
}

// ---- losses ------------------------------------------------------------------

double focalLoss(const float* p, const std::int8_t* target, std::size_t n,
                 const FocalLossParams& params, float* gradOut) {
    const double alpha = params.alpha;
    const double gamma = params.gamma;
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double grad = 0.0;
        if (target[i] > 0) {
            const double pc = std::clamp(double(p[i]), 1e-7, 1.0 - 1e-7);
            const double lg = std::log(pc);
            const double om = 1.0 - pc;
            const double omg = std::pow(om, gamma);
            loss += -alpha * omg * lg;
            const double omg1 = gamma > 0.0 ? std::pow(om, gamma - 1.0) : 0.0;
            grad = alpha * gamma * omg1 * lg - alpha * omg / pc;
        } else if (target[i] == 0) {
            const double pc = std::clamp(double(p[i]), 1e-7, 1.0 - 1e-7);
            const double lg = std::log(1.0 - pc);
            const double pg = std::pow(pc, gamma);
            loss += -(1.0 - alpha) * pg * lg;
            const double pg1 = gamma > 0.0 ? std::pow(pc, gamma - 1.0) : 0.0;
            grad = -(1.0 - alpha) * (gamma * pg1 * lg - pg / (1.0 - pc));
        }
        if (gradOut) gradOut[i] = float(grad);
    }
    return loss;
}

double smoothL1(const float* pred, const float* target, const std::uint8_t* mask,
                std::size_t n, float* gradOut) {
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double grad = 0.0;
        if (!mask || mask[i]) {
            const double d = double(pred[i]) - double(target[i]);
            const double ad = std::fabs(d);
            if (ad < 1.0) {
                loss += 0.5 * d * d;
                grad = d;
            } else {
                loss += ad - 0.5;
                grad = d > 0.0 ? 1.0 : -1.0;
            }
        }
        if (gradOut) gradOut[i] = float(grad);
    }
    return loss;
}

double bceLoss(const float* p, const float* target, std::size_t n, float* gradOut) {
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double pc = std::clamp(double(p[i]), 1e-7, 1.0 - 1e-7);
        const double t = double(target[i]);
        loss += -(t * std::log(pc) + (1.0 - t) * std::log(1.0 - pc));
        if (gradOut) gradOut[i] = float(-(t / pc) + (1.0 - t) / (1.0 - pc));
    }
    return loss;
}

void sgdMomentumStep(ParamStore& params, OptimizerState& state) {
    for (auto& [name, param] : params) {
        if (!param.trainable) continue;
        Tensor& t = param.tensor;
        if (t.grad.size() != t.data.size()) continue;  // never touched this step
        auto& v = state.velocity[name];
        if (v.size() != t.data.size()) v.assign(t.data.size(), 0.0f);
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            v[i] = float(state.momentum * double(v[i]) + double(t.grad[i]));
            t.data[i] -= float(state.lr * double(v[i]));
        }
    }
}

// ---- weights I/O --------------------------------------------------------------

namespace {

template <typename T>
void writeLe(std::ofstream& out, T v) {
    // Little-endian host assumed (x86/ARM); asserted at save time.
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T readLe(std::ifstream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

}  // namespace

void saveWeights(const ParamStore& params, const std::string& path) {
    static_assert(std::endian::native == std::endian::little, "weights format is little-endian");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("saveWeights: cannot open " + path);
    out.write("BEVW", 4);
    writeLe<std::uint32_t>(out, 1);
    writeLe<std::uint32_t>(out, std::uint32_t(params.size()));
    for (const auto& [name, param] : params) {
        const Tensor& t = param.tensor;
        writeLe<std::uint16_t>(out, std::uint16_t(name.size()));
        out.write(name.data(), std::streamsize(name.size()));
        writeLe<std::uint8_t>(out, std::uint8_t(t.shape.size()));
        for (int d : t.shape) writeLe<std::uint32_t>(out, std::uint32_t(d));
        out.write(reinterpret_cast<const char*>(t.data.data()),
                  std::streamsize(t.data.size() * sizeof(float)));
    }
    if (!out) throw std::runtime_error("saveWeights: write failed " + path);
}

void loadWeights(ParamStore& params, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("loadWeights: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "BEVW", 4) != 0) {
        throw std::runtime_error("loadWeights: bad magic in " + path);
    }
    const auto version = readLe<std::uint32_t>(in);
    if (version != 1) throw std::runtime_error("loadWeights: unsupported version in " + path);
    const auto count = readLe<std::uint32_t>(in);
    std::map<std::string, Tensor> loaded;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto nameLen = readLe<std::uint16_t>(in);
        std::string name(nameLen, '\0');
        in.read(name.data(), nameLen);
        const auto rank = readLe<std::uint8_t>(in);
        std::vector<int> shape(rank);
        for (auto& d : shape) d = int(readLe<std::uint32_t>(in));
        Tensor t(shape);
        in.read(reinterpret_cast<char*>(t.data.data()),
                std::streamsize(t.data.size() * sizeof(float)));
        if (!in) throw std::runtime_error("loadWeights: truncated file " + path);
        loaded.emplace(std::move(name), std::move(t));
    }
    std::string missing;
    for (auto& [name, param] : params) {
        auto it = loaded.find(name);
        if (it == loaded.end()) {
            missing += (missing.empty() ? "" : ", ") + name;
            continue;
        }
        if (it->second.shape != param.tensor.shape) {
            throw std::runtime_error("loadWeights: shape mismatch for " + name + " in " + path);
        }
        param.tensor.data = std::move(it->second.data);
    }
    if (!missing.empty()) {
        throw std::runtime_error("loadWeights: missing tensors in " + path + ": " + missing);
    }
}

}  // namespace bevdet::nn
