#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bevdet/bevgrid.hpp"
#include "bevdet/geom.hpp"
#include "bevdet/mapdata.hpp"

namespace bevdet::synth {

struct LidarSpec {
    double azimuthStepDeg = 0.5;
    std::vector<double> elevationAnglesDeg;  // sorted ascending
    double rangeNoiseSigma = 0.02;           // meters
    double maxRange = 80.0;
    double sensorHeight = 1.8;
};

// Default 32-beam fan from -24 to +2 degrees.
LidarSpec defaultLidar(int beams = 32);

struct SceneSpec {
    std::uint64_t seed = 0;
    double xMin = 0.0, xMax = 70.4;
    double yMin = -40.0, yMax = 40.0;
    double slopeDeg = 2.0;           // ground tilt along +x
    double terrainNoiseAmp = 0.3;    // meters
    double roadHalfWidth = 4.0;
    double curvature = 0.002;        // 1/m, centerline bend
    int nVehicles = 6;
    // Per-vehicle probability of parking beside the road instead of on it.
    // Road masks do not cover parked cars, which is what makes hard output
    // masking lossy.
    double offRoadFraction = 0.0;
    // Car-sized off-road obstacles (rocks, bushes). They are not labeled, so
    // they are exactly the far-range false positives a road prior rejects.
    int nClutter = 0;
    LidarSpec lidar = defaultLidar();
};

struct Vehicle {
    geom::OrientedBox box;
    double height = 1.6;
    double intensity = 0.8;  // base return strength of box hits
};

struct Scene {
    mapdata::HdMap map;
    std::vector<Vehicle> vehicles;
    std::vector<Vehicle> clutter;  // unlabeled obstacles, present in the cloud
    bev::PointCloud cloud;
};

struct PlacementFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Analytic ground surface of a scene: tan(slope)*x + band-limited noise that
// fades in with distance (full amplitude beyond 40 m, none inside 15 m).
// Deterministic per seed; the raster in Scene.map samples this.
class GroundSurface {
  public:
    GroundSurface(std::uint64_t seed, double slopeDeg, double noiseAmp);
    double heightAt(double x, double y) const;

  private:
    double slope_;
    double amp_;
    struct Wave {
        double kx, ky, phase, weight;
    };
    std::vector<Wave> waves_;
};

// Road centerline y(x) for the scene's curvature.
double roadCenterY(const SceneSpec& spec, double x);

Scene generateScene(const SceneSpec& spec);

// Ray-casts the given geometry. Each ray owns an RNG substream keyed by its
// index, so adding vehicles never perturbs the noise of unrelated rays.
bev::PointCloud simulateLidar(const GroundSurface& ground,
                              const std::vector<Vehicle>& vehicles,
                              const LidarSpec& lidar, std::uint64_t seed);

// Scene files under dir: NNNN.bin / NNNN_labels.json / NNNN_map.json and a
// manifest.json with per-file checksums. Scene i uses seed baseSeed+i.
void writeDataset(const std::string& dir, int n, std::uint64_t baseSeed,
                  const SceneSpec& specTemplate, int nTrain);

struct StoredScene {
    bev::PointCloud cloud;
    std::vector<geom::OrientedBox> labels;
    mapdata::HdMap map;
};

StoredScene loadScene(const std::string& dir, int index);

// Scene label list as JSON: [{"cx":..,"cy":..,"l":..,"w":..,"theta":..},...]
void saveLabels(const std::vector<geom::OrientedBox>& labels, const std::string& path);
std::vector<geom::OrientedBox> loadLabels(const std::string& path);

std::uint64_t fileChecksum(const std::string& path);

}  // namespace bevdet::synth
