#include "bevdet/kitti.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "bevdet/bevgrid.hpp"
#include "bevdet/synthworld.hpp"

namespace bevdet::kitti {

namespace fs = std::filesystem;

Calib parseCalib(const std::string& path) {
    Calib c{};
    std::ifstream f(path);
    if (!f) {
        c.error = "cannot open " + path;
        return c;
    }
    bool haveR0 = false, haveTr = false, haveP2 = false;
    std::string line;
    while (std::getline(f, line)) {
        std::istringstream ss(line);
        std::string key;
        ss >> key;
        if (key == "R0_rect:" || key == "R_rect:") {
            for (int i = 0; i < 9; ++i) ss >> c.r0[i];
            haveR0 = bool(ss);
        } else if (key == "Tr_velo_to_cam:" || key == "Tr_velo_cam:") {
            for (int i = 0; i < 12; ++i) ss >> c.tr[i];
            haveTr = bool(ss);
        } else if (key == "P2:") {
            double p[12];
            for (int i = 0; i < 12; ++i) ss >> p[i];
            if (ss) {
                c.fx = p[0];
                c.cx = p[2];
                haveP2 = true;
            }
        }
    }
    if (!haveR0 || !haveTr || !haveP2) {
        c.error = "missing R0_rect / Tr_velo_to_cam / P2 in " + path;
        return c;
    }
    if (c.fx <= 0.0 || c.cx <= 0.0) {
        c.error = "non-positive P2 intrinsics in " + path;
        return c;
    }
    c.valid = true;
    return c;
}

double fovHalfAngle(const Calib& calib) { return std::atan2(calib.cx, calib.fx); }

namespace {

// Rectified-camera point to LiDAR frame: invert x_rect = R0 * (Tr * x_velo).
void rectToVelo(const Calib& c, const double rect[3], double velo[3]) {
    double cam[3];  // R0^T * rect (rotation inverse = transpose)
    for (int i = 0; i < 3; ++i)
        cam[i] = c.r0[0 * 3 + i] * rect[0] + c.r0[1 * 3 + i] * rect[1] +
                 c.r0[2 * 3 + i] * rect[2];
    double d[3];  // cam minus translation, then rotate back
    for (int i = 0; i < 3; ++i) d[i] = cam[i] - c.tr[i * 4 + 3];
    for (int i = 0; i < 3; ++i)
        velo[i] = c.tr[0 * 4 + i] * d[0] + c.tr[1 * 4 + i] * d[1] + c.tr[2 * 4 + i] * d[2];
}

// Direction vectors only use the rotation parts.
void rectDirToVelo(const Calib& c, const double rect[3], double velo[3]) {
    double cam[3];
    for (int i = 0; i < 3; ++i)
        cam[i] = c.r0[0 * 3 + i] * rect[0] + c.r0[1 * 3 + i] * rect[1] +
                 c.r0[2 * 3 + i] * rect[2];
    for (int i = 0; i < 3; ++i)
        velo[i] = c.tr[0 * 4 + i] * cam[0] + c.tr[1 * 4 + i] * cam[1] +
                  c.tr[2 * 4 + i] * cam[2];
}

}  // namespace

std::vector<geom::OrientedBox> parseLabels(const std::string& path, const Calib& calib) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("parseLabels: cannot open " + path);
    std::vector<geom::OrientedBox> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string type;
        double trunc, occ, alpha, bb[4], h, w, l, x, y, z, ry;
        ss >> type >> trunc >> occ >> alpha >> bb[0] >> bb[1] >> bb[2] >> bb[3] >> h >> w >>
            l >> x >> y >> z >> ry;
        if (!ss) throw std::runtime_error("parseLabels: malformed line in " + path);
        if (type != "Car") continue;
        const double rect[3] = {x, y, z};
        double velo[3];
        rectToVelo(calib, rect, velo);
        // Heading: box length runs along (cos ry, 0, -sin ry) in rect coords.
        const double dirRect[3] = {std::cos(ry), 0.0, -std::sin(ry)};
        double dirVelo[3];
        rectDirToVelo(calib, dirRect, dirVelo);
        out.emplace_back(velo[0], velo[1], l, w, std::atan2(dirVelo[1], dirVelo[0]));
    }
    return out;
}

ImportResult kittiImport(const std::string& velodyneDir, const std::string& labelDir,
                         const std::string& calibDir, const std::string& outDir) {
    ImportResult res;
    if (!fs::is_directory(velodyneDir))
        throw std::runtime_error("kittiImport: not a directory: " + velodyneDir);
    fs::create_directories(outDir);

    std::vector<std::string> stems;
    for (const auto& e : fs::directory_iterator(velodyneDir))
        if (e.path().extension() == ".bin") stems.push_back(e.path().stem().string());
    std::sort(stems.begin(), stems.end());

    nlohmann::json manifest;
    nlohmann::json files = nlohmann::json::array();
    for (const auto& stem : stems) {
        const std::string calibPath = calibDir + "/" + stem + ".txt";
        const Calib calib = parseCalib(calibPath);
        if (!calib.valid) {
            ++res.skipped;
            res.skipReasons.push_back(stem + ": " + calib.error);
            continue;
        }
        std::vector<geom::OrientedBox> labels;
        try {
            labels = parseLabels(labelDir + "/" + stem + ".txt", calib);
        } catch (const std::exception& e) {
            ++res.skipped;
            res.skipReasons.push_back(stem + ": " + e.what());
            continue;
        }
        const std::string cloudOut = outDir + "/" + stem + ".bin";
        fs::copy_file(velodyneDir + "/" + stem + ".bin", cloudOut,
                      fs::copy_options::overwrite_existing);
        const std::string labelOut = outDir + "/" + stem + "_labels.json";
        synth::saveLabels(labels, labelOut);
        files.push_back({{"stem", stem},
                         {"cloud", stem + ".bin"},
                         {"labels", stem + "_labels.json"},
                         {"fovHalfAngleRad", fovHalfAngle(calib)},
                         {"cloudChecksum", synth::fileChecksum(cloudOut)},
                         {"labelChecksum", synth::fileChecksum(labelOut)}});
        ++res.imported;
    }
    manifest["source"] = "kitti";
    manifest["frames"] = std::move(files);
    manifest["skipped"] = res.skipReasons;
    std::ofstream out(outDir + "/manifest.json");
    if (!out) throw std::runtime_error("kittiImport: cannot write manifest in " + outDir);
    out << manifest.dump(2) << "\n";
    return res;
}

}  // namespace bevdet::kitti
