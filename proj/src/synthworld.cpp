#include "bevdet/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "bevdet/rng.hpp"

namespace bevdet::synth {

namespace {
constexpr double kPi = 3.14159265358979323846;
constexpr double kDeg = kPi / 180.0;

// RNG substream tags
constexpr std::uint64_t kStreamTerrain = 1;
constexpr std::uint64_t kStreamPlacement = 2;
constexpr std::uint64_t kStreamLidar = 3;
constexpr std::uint64_t kStreamClutter = 4;
}  // namespace

LidarSpec defaultLidar(int beams) {
    LidarSpec spec;
    for (int i = 0; i < beams; ++i) {
        spec.elevationAnglesDeg.push_back(-24.0 + 26.0 * double(i) / double(beams - 1));
    }
    return spec;
}

GroundSurface::GroundSurface(std::uint64_t seed, double slopeDeg, double noiseAmp)
    : slope_(std::tan(slopeDeg * kDeg)), amp_(noiseAmp) {
    Rng rng = Rng(seed).substream(kStreamTerrain);
    double total = 0.0;
    for (int i = 0; i < 6; ++i) {
        Wave w;
        const double wavelength = rng.uniform(12.0, 45.0);
        const double dir = rng.uniform(0.0, 2.0 * kPi);
        w.kx = 2.0 * kPi / wavelength * std::cos(dir);
        w.ky = 2.0 * kPi / wavelength * std::sin(dir);
        w.phase = rng.uniform(0.0, 2.0 * kPi);
        w.weight = rng.uniform(0.3, 1.0);
        total += w.weight;
        waves_.push_back(w);
    }
    for (auto& w : waves_) w.weight /= total;  // sum of |amplitudes| = 1
}

double GroundSurface::heightAt(double x, double y) const {
    double noise = 0.0;
    for (const auto& w : waves_) {
        noise += w.weight * std::sin(w.kx * x + w.ky * y + w.phase);
    }
    // The noise fades in with distance: sensor-local ground stays close to
    // the slope plane, like real terrain that deviates from a local plane
    // fit mostly at range.
    const double envelope = std::clamp((x - 15.0) / 25.0, 0.0, 1.0);
    return slope_ * x + amp_ * envelope * noise;
}

double roadCenterY(const SceneSpec& spec, double x) {
    if (std::fabs(spec.curvature) < 1e-12) return 0.0;
    return (1.0 - std::cos(spec.curvature * x)) / spec.curvature;
}

namespace {

std::vector<std::pair<double, double>> roadRibbon(const SceneSpec& spec) {
    // Two offset polylines joined into one CCW ring. Offsets are vertical;
    // fine for the gentle curvatures used here.
    std::vector<std::pair<double, double>> ring;
    const double x0 = spec.xMin - 5.0;
    const double x1 = spec.xMax + 5.0;
    const double step = 2.0;
    for (double x = x0; x <= x1 + 1e-9; x += step) {
        ring.emplace_back(x, roadCenterY(spec, x) - spec.roadHalfWidth);
    }
    for (double x = x1; x >= x0 - 1e-9; x -= step) {
        ring.emplace_back(x, roadCenterY(spec, x) + spec.roadHalfWidth);
    }
    return ring;
}

mapdata::GroundRaster sampleGroundRaster(const SceneSpec& spec, const GroundSurface& surface) {
    mapdata::GroundRaster g;
    g.resolution = 0.5;
    g.originX = spec.xMin - 2.0;
    g.originY = spec.yMin - 2.0;
    g.nCols = int(std::ceil((spec.xMax - spec.xMin + 4.0) / g.resolution));
    g.nRows = int(std::ceil((spec.yMax - spec.yMin + 4.0) / g.resolution));
    g.heights.resize(std::size_t(g.nRows) * g.nCols);
    for (int r = 0; r < g.nRows; ++r) {
        for (int c = 0; c < g.nCols; ++c) {
            const double x = g.originX + (c + 0.5) * g.resolution;
            const double y = g.originY + (r + 0.5) * g.resolution;
            g.at(r, c) = float(surface.heightAt(x, y));
        }
    }
    return g;
}

struct RayHit {
    double range = -1.0;
    double intensity = 0.3;  // ground return
};

bool rayBoxIntersect(double ox, double oy, double oz, double dx, double dy, double dz,
                     const Vehicle& vehicle, double groundZ, double maxRange, double* tHit) {
    // Slab test in the box frame.
    const auto& b = vehicle.box;
    const double c = std::cos(b.theta);
    const double s = std::sin(b.theta);
    const double lox = c * (ox - b.cx) + s * (oy - b.cy);
    const double loy = -s * (ox - b.cx) + c * (oy - b.cy);
    const double ldx = c * dx + s * dy;
    const double ldy = -s * dx + c * dy;
    double t0 = 0.0, t1 = maxRange;
    auto slab = [&](double o, double d, double lo, double hi) {
        if (std::fabs(d) < 1e-12) return o >= lo && o <= hi;
        double ta = (lo - o) / d;
        double tb = (hi - o) / d;
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
        return t0 <= t1;
    };
    if (!slab(lox, ldx, -0.5 * b.l, 0.5 * b.l)) return false;
    if (!slab(loy, ldy, -0.5 * b.w, 0.5 * b.w)) return false;
    if (!slab(oz, dz, groundZ, groundZ + vehicle.height)) return false;
    if (t0 <= 0.0) return false;
    *tHit = t0;
    return true;
}

}  // namespace

bev::PointCloud simulateLidar(const GroundSurface& ground,
                              const std::vector<Vehicle>& vehicles,
                              const LidarSpec& lidar, std::uint64_t seed) {
    bev::PointCloud cloud;
    const Rng base = Rng(seed).substream(kStreamLidar);
    const int nAz = int(std::lround(360.0 / lidar.azimuthStepDeg));
    // Per-vehicle ground heights are sampled once at the box center.
    std::vector<double> vehicleGround(vehicles.size());
    for (std::size_t i = 0; i < vehicles.size(); ++i) {
        vehicleGround[i] = ground.heightAt(vehicles[i].box.cx, vehicles[i].box.cy);
    }
    std::uint64_t rayIndex = 0;
    for (double elevDeg : lidar.elevationAnglesDeg) {
        const double elev = elevDeg * kDeg;
        const double cosE = std::cos(elev);
        const double sinE = std::sin(elev);
        for (int ai = 0; ai < nAz; ++ai, ++rayIndex) {
            const double az = ai * lidar.azimuthStepDeg * kDeg;
            const double dx = cosE * std::cos(az);
            const double dy = cosE * std::sin(az);
            const double dz = sinE;
            const double oz = lidar.sensorHeight;

            RayHit hit;
            // Vehicles first (closest wins below).
            for (std::size_t v = 0; v < vehicles.size(); ++v) {
                double t;
                if (rayBoxIntersect(0, 0, oz, dx, dy, dz, vehicles[v], vehicleGround[v],
                                    lidar.maxRange, &t)) {
                    if (hit.range < 0.0 || t < hit.range) {
                        hit.range = t;
                        hit.intensity = vehicles[v].intensity;
                    }
                }
            }
            // Ground: march for a sign change of z(t) - ground(x,y), bisect.
            const double tMax = hit.range > 0.0 ? hit.range : lidar.maxRange;
            double tPrev = 0.5;
            double fPrev = oz + tPrev * dz - ground.heightAt(tPrev * dx, tPrev * dy);
            for (double t = 1.5; t <= tMax; t += 1.0) {
                double f = oz + t * dz - ground.heightAt(t * dx, t * dy);
                if (fPrev > 0.0 && f <= 0.0) {
                    double lo = tPrev, hi = t;
                    for (int it = 0; it < 30; ++it) {
                        const double mid = 0.5 * (lo + hi);
                        const double fm =
                            oz + mid * dz - ground.heightAt(mid * dx, mid * dy);
                        if (fm > 0.0) {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    const double tGround = 0.5 * (lo + hi);
                    if (hit.range < 0.0 || tGround < hit.range) {
                        hit.range = tGround;
                        hit.intensity = 0.3;
                    }
                    break;
                }
                tPrev = t;
                fPrev = f;
            }

            if (hit.range <= 0.0 || hit.range > lidar.maxRange) continue;
            Rng noise = base.substream(rayIndex);
            const double r = hit.range + noise.normal(0.0, lidar.rangeNoiseSigma);
            if (r <= 0.0) continue;
            const double baseIntensity = hit.intensity;
            const double intensity =
                std::clamp(baseIntensity + noise.normal(0.0, 0.05), 0.0, 1.0);
            cloud.push(float(r * dx), float(r * dy), float(oz + r * dz), float(intensity));
        }
    }
    return cloud;
}

Scene generateScene(const SceneSpec& spec) {
    GroundSurface surface(spec.seed, spec.slopeDeg, spec.terrainNoiseAmp);
    Scene scene;
    scene.map.frame = "synth";
    scene.map.ground = sampleGroundRaster(spec, surface);
    scene.map.road.polygons.push_back(roadRibbon(spec));

    Rng place = Rng(spec.seed).substream(kStreamPlacement);
    const auto& ring = scene.map.road.polygons[0];
    for (int v = 0; v < spec.nVehicles; ++v) {
        // Short-circuit keeps the placement stream untouched at fraction 0.
        const bool offRoad =
            spec.offRoadFraction > 0.0 && place.uniform() < spec.offRoadFraction;
        bool placed = false;
        for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
            const double x = place.uniform(spec.xMin + 6.0, spec.xMax - 4.0);
            const double yc = roadCenterY(spec, x);
            const double margin = 1.2;
            // Off-road vehicles park in a band just past the road edge.
            const double y = offRoad
                                 ? yc + (place.uniform() < 0.5 ? -1.0 : 1.0) *
                                            (spec.roadHalfWidth + place.uniform(1.5, 4.0))
                                 : yc + place.uniform(-(spec.roadHalfWidth - margin),
                                                      spec.roadHalfWidth - margin);
            const double tangent = std::atan(std::sin(spec.curvature * x));
            const double heading = tangent + place.normal(0.0, 5.0 * kDeg);
            Vehicle cand;
            cand.box = geom::OrientedBox(x, y, place.normal(4.5, 0.3), place.normal(1.8, 0.1),
                                         heading);
            cand.box.l = std::clamp(cand.box.l, 3.5, 5.5);
            cand.box.w = std::clamp(cand.box.w, 1.5, 2.1);
            cand.height = std::clamp(place.normal(1.6, 0.1), 1.3, 1.9);
            if (mapdata::pointInRing(ring, x, y) == offRoad) continue;
            // Non-overlap with a safety margin.
            geom::OrientedBox inflated = cand.box;
            inflated.l += 0.6;
            inflated.w += 0.6;
            bool overlaps = false;
            for (const auto& other : scene.vehicles) {
                if (geom::rotatedIoU(inflated, other.box) > 0.0) overlaps = true;
            }
            if (overlaps) continue;
            scene.vehicles.push_back(cand);
            placed = true;
        }
        if (!placed) {
            throw PlacementFailure("generateScene: could not place vehicle " +
                                   std::to_string(v) + " in 1000 attempts");
        }
    }

    Rng clutterRng = Rng(spec.seed).substream(kStreamClutter);
    for (int c = 0; c < spec.nClutter; ++c) {
        for (int attempt = 0; attempt < 1000; ++attempt) {
            const double x = clutterRng.uniform(spec.xMin + 6.0, spec.xMax - 4.0);
            const double yc = roadCenterY(spec, x);
            const double side = clutterRng.uniform() < 0.5 ? -1.0 : 1.0;
            const double y = yc + side * (spec.roadHalfWidth + clutterRng.uniform(1.0, 10.0));
            if (y < spec.yMin + 2.0 || y > spec.yMax - 2.0) continue;
            if (mapdata::pointInRing(ring, x, y)) continue;
            Vehicle rock;
            rock.box = geom::OrientedBox(x, y, clutterRng.uniform(1.0, 2.6),
                                         clutterRng.uniform(0.8, 2.0),
                                         clutterRng.uniform(0.0, kPi));
            rock.height = clutterRng.uniform(0.5, 1.4);
            // Between ground (0.3) and vehicle (0.8) returns, so the
            // intensity channel alone cannot separate rocks from cars.
            rock.intensity = clutterRng.uniform(0.35, 0.65);
            geom::OrientedBox inflated = rock.box;
            inflated.l += 0.6;
            inflated.w += 0.6;
            bool overlaps = false;
            for (const auto& other : scene.vehicles)
                if (geom::rotatedIoU(inflated, other.box) > 0.0) overlaps = true;
            for (const auto& other : scene.clutter)
                if (geom::rotatedIoU(inflated, other.box) > 0.0) overlaps = true;
            if (overlaps) continue;
            scene.clutter.push_back(rock);
            break;
        }
    }

    std::vector<Vehicle> solid = scene.vehicles;
    solid.insert(solid.end(), scene.clutter.begin(), scene.clutter.end());
    scene.cloud = simulateLidar(surface, solid, spec.lidar, spec.seed);
    return scene;
}

void saveLabels(const std::vector<geom::OrientedBox>& labels, const std::string& path) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& b : labels) {
        arr.push_back({{"cx", b.cx}, {"cy", b.cy}, {"l", b.l}, {"w", b.w}, {"theta", b.theta}});
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("saveLabels: cannot open " + path);
    out << arr.dump();
}

std::vector<geom::OrientedBox> loadLabels(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("loadLabels: cannot open " + path);
    nlohmann::json arr;
    in >> arr;
    std::vector<geom::OrientedBox> labels;
    for (const auto& j : arr) {
        labels.emplace_back(j.at("cx").get<double>(), j.at("cy").get<double>(),
                            j.at("l").get<double>(), j.at("w").get<double>(),
                            j.at("theta").get<double>());
    }
    return labels;
}

std::uint64_t fileChecksum(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("fileChecksum: cannot open " + path);
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    char buf[8192];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= std::uint8_t(buf[i]);
            h *= 0x100000001b3ULL;
        }
        if (in.eof()) break;
    }
    return h;
}

namespace {

std::string sceneStem(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d", index);
    return buf;
}

}  // namespace

void writeDataset(const std::string& dir, int n, std::uint64_t baseSeed,
                  const SceneSpec& specTemplate, int nTrain) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["count"] = n;
    manifest["baseSeed"] = baseSeed;
    manifest["nTrain"] = nTrain;
    nlohmann::json files = nlohmann::json::array();
    for (int i = 0; i < n; ++i) {
        SceneSpec spec = specTemplate;
        spec.seed = baseSeed + std::uint64_t(i);
        Scene scene = generateScene(spec);
        const std::string stem = sceneStem(i);
        const std::string cloudPath = dir + "/" + stem + ".bin";
        const std::string labelPath = dir + "/" + stem + "_labels.json";
        const std::string mapPath = dir + "/" + stem + "_map.json";
        bev::writeVelodyneBin(scene.cloud, cloudPath);
        std::vector<geom::OrientedBox> labels;
        for (const auto& v : scene.vehicles) labels.push_back(v.box);
        saveLabels(labels, labelPath);
        mapdata::saveMap(scene.map, mapPath);
        files.push_back({{"index", i},
                         {"split", i < nTrain ? "train" : "val"},
                         {"cloud", stem + ".bin"},
                         {"labels", stem + "_labels.json"},
                         {"map", stem + "_map.json"},
                         {"cloudChecksum", fileChecksum(cloudPath)},
                         {"labelChecksum", fileChecksum(labelPath)},
                         {"mapChecksum", fileChecksum(mapPath)}});
    }
    manifest["scenes"] = std::move(files);
    std::ofstream out(dir + "/manifest.json");
    out << manifest.dump(2);
}

StoredScene loadScene(const std::string& dir, int index) {
    const std::string stem = sceneStem(index);
    StoredScene s;
    s.cloud = bev::readVelodyneBin(dir + "/" + stem + ".bin");
    s.labels = loadLabels(dir + "/" + stem + "_labels.json");
    s.map = mapdata::loadMap(dir + "/" + stem + "_map.json");
    return s;
}

}  // namespace bevdet::synth
