#include "bevdet/mapdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace bevdet::mapdata {

double queryGroundHeight(const GroundRaster& map, double x, double y, bool* outOfCoverage) {
    // Columns index x, rows index y; cell (r, c) center is at
    // (originX + (c + 0.5) * res, originY + (r + 0.5) * res).
    const double res = map.resolution;
    double u = (x - map.originX) / res - 0.5;  // fractional col
    double v = (y - map.originY) / res - 0.5;  // fractional row
    bool clamped = false;
    auto clampf = [&clamped](double t, double lo, double hi) {
        if (t < lo) {
            clamped = true;
            return lo;
        }
        if (t > hi) {
            clamped = true;
            return hi;
        }
        return t;
    };
    u = clampf(u, 0.0, double(map.nCols - 1));
    v = clampf(v, 0.0, double(map.nRows - 1));
    const int c0 = std::min(int(std::floor(u)), map.nCols - 2 >= 0 ? map.nCols - 2 : 0);
    const int r0 = std::min(int(std::floor(v)), map.nRows - 2 >= 0 ? map.nRows - 2 : 0);
    const int c1 = std::min(c0 + 1, map.nCols - 1);
    const int r1 = std::min(r0 + 1, map.nRows - 1);
    const double fu = u - c0;
    const double fv = v - r0;
    const double h00 = map.at(r0, c0);
    const double h01 = map.at(r0, c1);
    const double h10 = map.at(r1, c0);
    const double h11 = map.at(r1, c1);
    if (outOfCoverage) *outOfCoverage = clamped;
    return (1.0 - fv) * ((1.0 - fu) * h00 + fu * h01) + fv * ((1.0 - fu) * h10 + fu * h11);
}

bool pointInRing(const std::vector<std::pair<double, double>>& ring, double x, double y) {
    bool inside = false;
    const std::size_t n = ring.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const double xi = ring[i].first, yi = ring[i].second;
        const double xj = ring[j].first, yj = ring[j].second;
        if ((yi > y) != (yj > y)) {
            const double xCross = xj + (y - yj) / (yi - yj) * (xi - xj);
            if (x < xCross) inside = !inside;
        }
    }
    return inside;
}

std::vector<float> rasterizeRoadMask(const RoadMap& road, const bev::BevConfig& grid) {
    const int h = grid.heightPx();
    const int w = grid.widthPx();
    std::vector<float> mask(std::size_t(h) * w, 0.0f);
    for (const auto& ring : road.polygons) {
        if (ring.size() < 3) continue;
        double rxMin = ring[0].first, rxMax = rxMin, ryMin = ring[0].second, ryMax = ryMin;
        for (const auto& [px, py] : ring) {
            rxMin = std::min(rxMin, px);
            rxMax = std::max(rxMax, px);
            ryMin = std::min(ryMin, py);
            ryMax = std::max(ryMax, py);
        }
        for (int i = 0; i < h; ++i) {
            const double cx = grid.xMin + (i + 0.5) * grid.dL;
            if (cx < rxMin || cx > rxMax) continue;
            for (int j = 0; j < w; ++j) {
                const double cy = grid.yMin + (j + 0.5) * grid.dW;
                if (cy < ryMin || cy > ryMax) continue;
                if (mask[std::size_t(i) * w + j] == 0.0f && pointInRing(ring, cx, cy)) {
                    mask[std::size_t(i) * w + j] = 1.0f;
                }
            }
        }
    }
    return mask;
}

GroundPlane fitGroundPlane(const bev::PointCloud& cloud, int iterations,
                           double inlierThresh, std::uint64_t seed) {
    const std::size_t n = cloud.size();
    if (n < 3) throw DegenerateInput("fitGroundPlane: need at least 3 points");

    auto planeFrom3 = [&](std::size_t i, std::size_t j, std::size_t k, GroundPlane* out) {
        // Solve z = a*x + b*y + c through three points.
        const double x1 = cloud.x[i], y1 = cloud.y[i], z1 = cloud.z[i];
        const double x2 = cloud.x[j], y2 = cloud.y[j], z2 = cloud.z[j];
        const double x3 = cloud.x[k], y3 = cloud.y[k], z3 = cloud.z[k];
        const double det = (x2 - x1) * (y3 - y1) - (x3 - x1) * (y2 - y1);
        if (std::fabs(det) < 1e-12) return false;
        out->a = ((z2 - z1) * (y3 - y1) - (z3 - z1) * (y2 - y1)) / det;
        out->b = ((x2 - x1) * (z3 - z1) - (x3 - x1) * (z2 - z1)) / det;
        out->c = z1 - out->a * x1 - out->b * y1;
        return true;
    };

    Rng rng(Rng::mix(seed, 0x7a5e));
    GroundPlane best;
    std::size_t bestInliers = 0;
    bool found = false;
    for (int it = 0; it < iterations; ++it) {
        const std::size_t i = rng.uniformInt(n);
        const std::size_t j = rng.uniformInt(n);
        const std::size_t k = rng.uniformInt(n);
        if (i == j || j == k || i == k) continue;
        GroundPlane cand;
        if (!planeFrom3(i, j, k, &cand)) continue;
        std::size_t inliers = 0;
        for (std::size_t p = 0; p < n; ++p) {
            const double d = std::fabs(cloud.z[p] - cand.heightAt(cloud.x[p], cloud.y[p]));
            if (d <= inlierThresh) ++inliers;
        }
        if (inliers > bestInliers) {
            bestInliers = inliers;
            best = cand;
            found = true;
        }
    }
    if (!found) throw DegenerateInput("fitGroundPlane: all samples degenerate (collinear points?)");

    // Least-squares refit on inliers: minimize sum (a*x + b*y + c - z)^2.
    double sxx = 0, sxy = 0, sx = 0, syy = 0, sy = 0, s1 = 0, sxz = 0, syz = 0, sz = 0;
    for (std::size_t p = 0; p < n; ++p) {
        const double d = std::fabs(cloud.z[p] - best.heightAt(cloud.x[p], cloud.y[p]));
        if (d > inlierThresh) continue;
        const double x = cloud.x[p], y = cloud.y[p], z = cloud.z[p];
        sxx += x * x;
        sxy += x * y;
        sx += x;
        syy += y * y;
        sy += y;
        s1 += 1.0;
        sxz += x * z;
        syz += y * z;
        sz += z;
    }
    // 3x3 normal equations, Cramer's rule.
    const double det = sxx * (syy * s1 - sy * sy) - sxy * (sxy * s1 - sy * sx) +
                       sx * (sxy * sy - syy * sx);
    if (std::fabs(det) > 1e-12) {
        const double da = sxz * (syy * s1 - sy * sy) - sxy * (syz * s1 - sy * sz) +
                          sx * (syz * sy - syy * sz);
        const double db = sxx * (syz * s1 - sz * sy) - sxz * (sxy * s1 - sy * sx) +
                          sx * (sxy * sz - syz * sx);
        const double dc = sxx * (syy * sz - syz * sy) - sxy * (sxy * sz - syz * sx) +
                          sxz * (sxy * sy - syy * sx);
        best.a = da / det;
        best.b = db / det;
        best.c = dc / det;
    }
    return best;
}

void saveMap(const HdMap& map, const std::string& path) {
    nlohmann::json j;
    j["version"] = 1;
    j["frame"] = map.frame;
    j["ground"]["origin"] = {map.ground.originX, map.ground.originY};
    j["ground"]["res"] = map.ground.resolution;
    j["ground"]["shape"] = {map.ground.nRows, map.ground.nCols};
    // double-valued JSON numbers round-trip float32 exactly
    nlohmann::json heights = nlohmann::json::array();
    for (float h : map.ground.heights) heights.push_back(double(h));
    j["ground"]["heights"] = std::move(heights);
    nlohmann::json polys = nlohmann::json::array();
    for (const auto& ring : map.road.polygons) {
        nlohmann::json r = nlohmann::json::array();
        for (const auto& [x, y] : ring) r.push_back({x, y});
        polys.push_back(std::move(r));
    }
    j["road"]["polygons"] = std::move(polys);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("saveMap: cannot open " + path);
    out << j.dump();
    if (!out) throw std::runtime_error("saveMap: write failed: " + path);
}

HdMap loadMap(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("loadMap: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("loadMap: parse error in " + path + ": " + e.what());
    }
    if (!j.contains("version") || j["version"].get<int>() != 1) {
        throw std::runtime_error("loadMap: unsupported version in " + path);
    }
    HdMap map;
    map.frame = j.value("frame", std::string{});
    const auto& g = j.at("ground");
    map.ground.originX = g.at("origin")[0].get<double>();
    map.ground.originY = g.at("origin")[1].get<double>();
    map.ground.resolution = g.at("res").get<double>();
    map.ground.nRows = g.at("shape")[0].get<int>();
    map.ground.nCols = g.at("shape")[1].get<int>();
    const auto& hs = g.at("heights");
    if (int(hs.size()) != map.ground.nRows * map.ground.nCols) {
        throw std::runtime_error("loadMap: height array size mismatch in " + path);
    }
    map.ground.heights.reserve(hs.size());
    for (const auto& h : hs) map.ground.heights.push_back(float(h.get<double>()));
    for (const auto& r : j.at("road").at("polygons")) {
        std::vector<std::pair<double, double>> ring;
        for (const auto& v : r) ring.emplace_back(v[0].get<double>(), v[1].get<double>());
        map.road.polygons.push_back(std::move(ring));
    }
    return map;
}

}  // namespace bevdet::mapdata
