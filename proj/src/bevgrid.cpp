#include "bevdet/bevgrid.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <thread>

namespace bevdet::bev {

BevConfig::BevConfig(double xMin_, double xMax_, double yMin_, double yMax_,
                     double zMin_, double zMax_, double dL_, double dW_, double dH_)
    : xMin(xMin_), xMax(xMax_), yMin(yMin_), yMax(yMax_), zMin(zMin_), zMax(zMax_),
      dL(dL_), dW(dW_), dH(dH_) {
    if (xMax <= xMin || yMax <= yMin || zMax <= zMin) {
        throw std::invalid_argument("BevConfig: range max must exceed min");
    }
    if (dL <= 0 || dW <= 0 || dH <= 0) {
        throw std::invalid_argument("BevConfig: cell sizes must be positive");
    }
    auto cells = [](double span, double d, const char* axis) {
        const double q = span / d;
        const int n = int(std::lround(q));
        if (n < 1 || std::fabs(q - n) > 1e-6) {
            throw std::invalid_argument(std::string("BevConfig: extent not divisible by cell size on ") + axis);
        }
        return n;
    };
    hPx_ = cells(xMax - xMin, dL, "x");
    wPx_ = cells(yMax - yMin, dW, "y");
    zBins_ = cells(zMax - zMin, dH, "z");
}

namespace {

struct BinnedPoint {
    int row, col, slice;  // slice in [0, zBins+1]; zBins = below-range, zBins+1 = above-range
    float intensity;
};

// Per-point binning; shared between the sequential and sharded paths so both
// see identical arithmetic.
bool binPoint(const BevConfig& cfg, const GroundQuery& ground,
              float px, float py, float pz, float pi, BinnedPoint* out) {
    if (px < cfg.xMin || px >= cfg.xMax || py < cfg.yMin || py >= cfg.yMax) return false;
    const int row = int((px - cfg.xMin) / cfg.dL);
    const int col = int((py - cfg.yMin) / cfg.dW);
    if (row < 0 || row >= cfg.heightPx() || col < 0 || col >= cfg.widthPx()) return false;
    double zRel = pz;
    if (ground) zRel = pz - ground(px, py);
    int slice;
    if (zRel < cfg.zMin) {
        slice = cfg.zSlices();  // below range
    } else if (zRel >= cfg.zMax) {
        slice = cfg.zSlices() + 1;  // above range
    } else {
        // Small nudge so values mathematically on a bin boundary (e.g. 0.8
        // with dH = 0.2) bin per the half-open rule despite rounding.
        slice = int((zRel - cfg.zMin) / cfg.dH + 1e-9);
        if (slice >= cfg.zSlices()) slice = cfg.zSlices() + 1;
    }
    *out = BinnedPoint{row, col, slice, pi};
    return true;
}

}  // namespace

BevTensor rasterizeWithMask(const PointCloud& cloud, const BevConfig& cfg,
                            const GroundQuery& ground, int numThreads,
                            std::vector<std::uint8_t>* columnHasPoints) {
    const int h = cfg.heightPx();
    const int w = cfg.widthPx();
    const int zBins = cfg.zSlices();
    const int intensityCh = zBins + 2;
    BevTensor out(cfg.channels(), h, w);
    std::vector<double> sum(std::size_t(h) * w, 0.0);
    std::vector<std::uint32_t> count(std::size_t(h) * w, 0);
    if (columnHasPoints) columnHasPoints->assign(std::size_t(h) * w, 0);

    const std::size_t n = cloud.size();
    // Columns are owned by (cell index mod T); each worker scans all points
    // and touches only its own columns, so per-cell accumulation order equals
    // the sequential point order regardless of thread count.
    auto work = [&](int tid, int nThreads) {
        BinnedPoint bp;
        for (std::size_t p = 0; p < n; ++p) {
            if (!binPoint(cfg, ground, cloud.x[p], cloud.y[p], cloud.z[p],
                          cloud.intensity[p], &bp)) {
                continue;
            }
            const std::size_t cell = std::size_t(bp.row) * w + bp.col;
            if (nThreads > 1 && int(cell % std::size_t(nThreads)) != tid) continue;
            out.data[std::size_t(bp.slice) * h * w + cell] = 1.0f;
            sum[cell] += double(bp.intensity);
            count[cell] += 1;
            if (columnHasPoints) (*columnHasPoints)[cell] = 1;
        }
    };
    if (numThreads <= 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> threads;
        threads.reserve(numThreads);
        for (int t = 0; t < numThreads; ++t) threads.emplace_back(work, t, numThreads);
        for (auto& t : threads) t.join();
    }
    float* intensity = &out.data[std::size_t(intensityCh) * h * w];
    for (std::size_t cell = 0; cell < sum.size(); ++cell) {
        if (count[cell] > 0) intensity[cell] = float(sum[cell] / count[cell]);
    }
    return out;
}

BevTensor rasterize(const PointCloud& cloud, const BevConfig& cfg,
                    const GroundQuery& ground, int numThreads) {
    return rasterizeWithMask(cloud, cfg, ground, numThreads, nullptr);
}

BevTensor concatRoadChannel(const BevTensor& bevTensor, const std::vector<float>& roadMask) {
    if (roadMask.size() != std::size_t(bevTensor.height) * bevTensor.width) {
        throw std::invalid_argument("concatRoadChannel: mask shape mismatch");
    }
    BevTensor out(bevTensor.channels + 1, bevTensor.height, bevTensor.width);
    std::memcpy(out.data.data(), bevTensor.data.data(), bevTensor.data.size() * sizeof(float));
    std::memcpy(out.data.data() + bevTensor.data.size(), roadMask.data(),
                roadMask.size() * sizeof(float));
    return out;
}

std::vector<std::uint8_t> fovMask(const BevConfig& cfg, double halfAngle,
                                  double apexX, double apexY) {
    if (halfAngle <= 0.0 || halfAngle >= 3.14159265358979323846) {
        throw std::invalid_argument("fovMask: halfAngle must be in (0, pi)");
    }
    const int h = cfg.heightPx() / 4;
    const int w = cfg.widthPx() / 4;
    const double cellL = cfg.dL * 4.0;
    const double cellW = cfg.dW * 4.0;
    std::vector<std::uint8_t> mask(std::size_t(h) * w, 0);
    for (int i = 0; i < h; ++i) {
        const double cx = cfg.xMin + (i + 0.5) * cellL;
        for (int j = 0; j < w; ++j) {
            const double cy = cfg.yMin + (j + 0.5) * cellW;
            const double bearing = std::atan2(cy - apexY, cx - apexX);
            if (std::fabs(bearing) <= halfAngle) mask[std::size_t(i) * w + j] = 1;
        }
    }
    return mask;
}

AugmentParams sampleAugmentParams(Rng& rng) {
    AugmentParams p;
    p.scale = rng.uniform(0.9, 1.1);
    p.tx = rng.uniform(-5.0, 5.0);
    p.ty = rng.uniform(-5.0, 5.0);
    p.rotz = rng.uniform(-5.0, 5.0) * 3.14159265358979323846 / 180.0;
    return p;
}

void augment(PointCloud& cloud, std::vector<geom::OrientedBox>& labels,
             const AugmentParams& params) {
    const double c = std::cos(params.rotz);
    const double s = std::sin(params.rotz);
    const double sc = params.scale;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const double x = double(cloud.x[i]) * sc;
        const double y = double(cloud.y[i]) * sc;
        cloud.x[i] = float(c * x - s * y + params.tx);
        cloud.y[i] = float(s * x + c * y + params.ty);
        cloud.z[i] = float(double(cloud.z[i]) * sc);
    }
    for (auto& box : labels) {
        const double x = box.cx * sc;
        const double y = box.cy * sc;
        box.cx = c * x - s * y + params.tx;
        box.cy = s * x + c * y + params.ty;
        box.l *= sc;
        box.w *= sc;
        box.theta = geom::normalizeAngle(box.theta + params.rotz);
    }
}

PointCloud readVelodyneBin(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("readVelodyneBin: cannot open " + path);
    in.seekg(0, std::ios::end);
    const std::streamoff bytes = in.tellg();
    in.seekg(0);
    if (bytes % 16 != 0) throw std::runtime_error("readVelodyneBin: truncated file " + path);
    const std::size_t n = std::size_t(bytes) / 16;
    PointCloud cloud;
    cloud.x.resize(n);
    cloud.y.resize(n);
    cloud.z.resize(n);
    cloud.intensity.resize(n);
    std::vector<float> buf(n * 4);
    in.read(reinterpret_cast<char*>(buf.data()), bytes);
    if (!in) throw std::runtime_error("readVelodyneBin: read failed " + path);
    for (std::size_t i = 0; i < n; ++i) {
        cloud.x[i] = buf[i * 4 + 0];
        cloud.y[i] = buf[i * 4 + 1];
        cloud.z[i] = buf[i * 4 + 2];
        cloud.intensity[i] = buf[i * 4 + 3];
    }
    return cloud;
}

void writeVelodyneBin(const PointCloud& cloud, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("writeVelodyneBin: cannot open " + path);
    std::vector<float> buf(cloud.size() * 4);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        buf[i * 4 + 0] = cloud.x[i];
        buf[i * 4 + 1] = cloud.y[i];
        buf[i * 4 + 2] = cloud.z[i];
        buf[i * 4 + 3] = cloud.intensity[i];
    }
    out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size() * sizeof(float)));
    if (!out) throw std::runtime_error("writeVelodyneBin: write failed " + path);
}

}  // namespace bevdet::bev
