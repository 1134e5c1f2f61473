#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "bevdet/bevgrid.hpp"

namespace bevdet::mapdata {

struct GroundRaster {
    double originX = 0.0;
    double originY = 0.0;
    double resolution = 0.5;  // meters per cell
    int nCols = 0;
    int nRows = 0;
    std::vector<float> heights;  // row-major, nRows * nCols

    float& at(int row, int col) { return heights[std::size_t(row) * nCols + col]; }
    float at(int row, int col) const { return heights[std::size_t(row) * nCols + col]; }
};

struct RoadMap {
    // Simple rings, CCW, each >= 3 vertices.
    std::vector<std::vector<std::pair<double, double>>> polygons;
};

struct HdMap {
    GroundRaster ground;
    RoadMap road;
    std::string frame;
};

// z = a*x + b*y + c
struct GroundPlane {
    double a = 0.0, b = 0.0, c = 0.0;

    double heightAt(double x, double y) const { return a * x + b * y + c; }
};

struct DegenerateInput : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bilinear interpolation between the four surrounding cell centers. Queries
// outside coverage clamp to the edge; outOfCoverage (when non-null) reports
// whether clamping happened.
double queryGroundHeight(const GroundRaster& map, double x, double y,
                         bool* outOfCoverage = nullptr);

// Binary mask at the BEV grid resolution: cell set iff its center lies inside
// any road polygon (even-odd rule). Layout matches BevTensor channels
// (H_px rows over x, W_px cols over y).
std::vector<float> rasterizeRoadMask(const RoadMap& road, const bev::BevConfig& grid);

bool pointInRing(const std::vector<std::pair<double, double>>& ring, double x, double y);

// RANSAC over 3-point samples, then least-squares refit on the inlier set.
GroundPlane fitGroundPlane(const bev::PointCloud& cloud, int iterations,
                           double inlierThresh, std::uint64_t seed);

// JSON interchange: {"version":1,"frame":...,"ground":{...},"road":{...}}.
void saveMap(const HdMap& map, const std::string& path);
HdMap loadMap(const std::string& path);

}  // namespace bevdet::mapdata
