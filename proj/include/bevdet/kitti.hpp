#pragma once

#include <string>
#include <vector>

#include "bevdet/geom.hpp"

namespace bevdet::kitti {

struct Calib {
    double r0[9];   // rect rotation, row-major 3x3
    double tr[12];  // velo-to-cam, row-major 3x4
    double fx = 0.0, cx = 0.0;  // from P2, for the camera FOV half-angle
    bool valid = false;
    std::string error;
};

Calib parseCalib(const std::string& path);

// Camera FOV half-angle (radians) assuming a centred principal point.
double fovHalfAngle(const Calib& calib);

// Car labels only, transformed from the rectified camera frame to the LiDAR
// frame (BEV footprint + heading).
std::vector<geom::OrientedBox> parseLabels(const std::string& path, const Calib& calib);

struct ImportResult {
    int imported = 0;
    int skipped = 0;
    std::vector<std::string> skipReasons;
};

// Reads KITTI velodyne/label_2/calib triples and writes the internal dataset
// layout (NNNN.bin, NNNN_labels.json, manifest.json with checksums and the
// per-frame FOV half-angle). Frames with bad calib are skipped and logged.
ImportResult kittiImport(const std::string& velodyneDir, const std::string& labelDir,
                         const std::string& calibDir, const std::string& outDir);

}  // namespace bevdet::kitti
