#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bevdet/geom.hpp"
#include "bevdet/rng.hpp"

namespace bevdet::bev {

struct PointCloud {
    std::vector<float> x, y, z;
    std::vector<float> intensity;  // in [0,1]

    std::size_t size() const { return x.size(); }
    void push(float px, float py, float pz, float pi) {
        x.push_back(px);
        y.push_back(py);
        z.push_back(pz);
        intensity.push_back(pi);
    }
};

// Scene extent and cell sizes. Cell counts must divide evenly; validated at
// construction. Rows index x (length axis), columns index y (width axis).
struct BevConfig {
    double xMin, xMax;
    double yMin, yMax;
    double zMin, zMax;
    double dL, dW, dH;

    BevConfig(double xMin_, double xMax_, double yMin_, double yMax_,
              double zMin_, double zMax_, double dL_, double dW_, double dH_);

    int heightPx() const { return hPx_; }   // x axis
    int widthPx() const { return wPx_; }    // y axis
    int zSlices() const { return zBins_; }
    // z slices + below-range + above-range + intensity.
    int channels() const { return zBins_ + 3; }

  private:
    int hPx_ = 0, wPx_ = 0, zBins_ = 0;
};

struct BevTensor {
    int channels = 0;
    int height = 0;  // H_px, x axis
    int width = 0;   // W_px, y axis
    std::vector<float> data;  // C * H * W, row-major per channel

    BevTensor() = default;
    BevTensor(int c, int h, int w) : channels(c), height(h), width(w), data(std::size_t(c) * h * w, 0.0f) {}

    float& at(int c, int i, int j) { return data[(std::size_t(c) * height + i) * width + j]; }
    float at(int c, int i, int j) const { return data[(std::size_t(c) * height + i) * width + j]; }
};

using GroundQuery = std::function<double(double x, double y)>;

// Discretizes a cloud into occupancy slices (+ below/above range) and a mean
// intensity channel. When a ground query is given, z is taken relative to the
// ground before binning. numThreads > 1 shards columns across workers; the
// result is bit-identical to the sequential pass.
BevTensor rasterize(const PointCloud& cloud, const BevConfig& cfg,
                    const GroundQuery& ground = nullptr, int numThreads = 1);

// Same as rasterize, additionally reporting which (row,col) columns contain
// at least one in-range point.
BevTensor rasterizeWithMask(const PointCloud& cloud, const BevConfig& cfg,
                            const GroundQuery& ground, int numThreads,
                            std::vector<std::uint8_t>* columnHasPoints);

// Appends the road mask as a new last channel.
BevTensor concatRoadChannel(const BevTensor& bevTensor, const std::vector<float>& roadMask);

// Binary wedge mask at the detector output resolution (H_px/4 x W_px/4).
// Cell set iff the bearing from apex to the cell center is within +-halfAngle
// of the +x axis.
std::vector<std::uint8_t> fovMask(const BevConfig& cfg, double halfAngle,
                                  double apexX = 0.0, double apexY = 0.0);

struct AugmentParams {
    double scale = 1.0;
    double tx = 0.0;
    double ty = 0.0;
    double rotz = 0.0;  // radians
};

AugmentParams sampleAugmentParams(Rng& rng);

// Applies scale -> rotate(z) -> translate to points and labels alike.
void augment(PointCloud& cloud, std::vector<geom::OrientedBox>& labels,
             const AugmentParams& params);

// KITTI velodyne layout: little-endian float32 (x, y, z, reflectance), no header.
PointCloud readVelodyneBin(const std::string& path);
void writeVelodyneBin(const PointCloud& cloud, const std::string& path);

}  // namespace bevdet::bev
