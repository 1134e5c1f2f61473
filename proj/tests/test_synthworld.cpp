#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "bevdet/mapdata.hpp"
#include "bevdet/synthworld.hpp"

using namespace bevdet;
using namespace bevdet::synth;

namespace {
constexpr double kDeg = 3.14159265358979323846 / 180.0;

SceneSpec quietSpec(std::uint64_t seed) {
    SceneSpec spec;
    spec.seed = seed;
    spec.nVehicles = 3;
    spec.lidar = defaultLidar(16);
    spec.lidar.azimuthStepDeg = 2.0;
    return spec;
}
}  // namespace

TEST_CASE("ground surface reproduces pure slope: 1 deg, 70 m -> 1.22 m rise") {
    GroundSurface g(7, 1.0, 0.0);
    const double expected = 70.0 * std::tan(1.0 * kDeg);
    CHECK(g.heightAt(70.0, 0.0) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(expected == doctest::Approx(1.22).epsilon(0.01));
    CHECK(g.heightAt(0.0, 12.0) == doctest::Approx(0.0));
}

TEST_CASE("terrain noise is bounded by its amplitude and seed-stable") {
    GroundSurface g(42, 0.0, 0.3);
    GroundSurface g2(42, 0.0, 0.3);
    double maxAbs = 0.0;
    for (int i = 0; i < 200; ++i) {
        const double x = i * 0.37, y = std::sin(i) * 20.0;
        CHECK(g.heightAt(x, y) == g2.heightAt(x, y));
        maxAbs = std::max(maxAbs, std::fabs(g.heightAt(x, y)));
    }
    CHECK(maxAbs <= 0.3 + 1e-12);
    CHECK(maxAbs > 0.05);  // not degenerate
}

TEST_CASE("flat ground, -10 deg beam, 1.8 m sensor: hit range 1.8/tan(10deg)") {
    GroundSurface flat(1, 0.0, 0.0);
    LidarSpec lidar;
    lidar.elevationAnglesDeg = {-10.0};
    lidar.rangeNoiseSigma = 0.0;
    auto cloud = simulateLidar(flat, {}, lidar, 5);
    const double expected = 1.8 / std::tan(10.0 * kDeg);  // ~10.21
    CHECK(expected == doctest::Approx(10.21).epsilon(1e-3));
    REQUIRE(cloud.size() == 720);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const double r = std::hypot(cloud.x[i], cloud.y[i]);
        CHECK(r == doctest::Approx(expected).epsilon(1e-5));
        CHECK(cloud.z[i] == doctest::Approx(0.0).epsilon(1e-4));
    }
}

TEST_CASE("upward beams never return ground on flat terrain") {
    GroundSurface flat(1, 0.0, 0.0);
    LidarSpec lidar;
    lidar.elevationAnglesDeg = {0.5, 2.0};
    lidar.rangeNoiseSigma = 0.0;
    auto cloud = simulateLidar(flat, {}, lidar, 5);
    CHECK(cloud.size() == 0);
}

TEST_CASE("point density per range bin decreases with range") {
    GroundSurface flat(1, 0.0, 0.0);
    auto cloud = simulateLidar(flat, {}, defaultLidar(), 11);
    int bins[3] = {0, 0, 0};
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const double r = std::hypot(cloud.x[i], cloud.y[i]);
        if (r < 10.0)
            ++bins[0];
        else if (r < 20.0)
            ++bins[1];
        else if (r < 30.0)
            ++bins[2];
    }
    CHECK(bins[0] > bins[1]);
    CHECK(bins[1] > bins[2]);
    CHECK(bins[2] > 0);
}

TEST_CASE("a vehicle casts an occlusion shadow on the ground behind it") {
    GroundSurface flat(1, 0.0, 0.0);
    Vehicle car;
    car.box = geom::OrientedBox(10.0, 0.0, 4.5, 1.8, 0.0);
    car.height = 1.6;
    LidarSpec lidar = defaultLidar();
    lidar.rangeNoiseSigma = 0.0;
    auto cloud = simulateLidar(flat, {car}, lidar, 9);

    int vehiclePts = 0;
    int shadowGroundPts = 0;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const bool onVehicle = cloud.intensity[i] > 0.55f;
        if (onVehicle) ++vehiclePts;
        // Ground directly behind the car (its rear face is at x = 12.25).
        if (!onVehicle && std::fabs(cloud.y[i]) < 0.3 && cloud.x[i] > 15.0 &&
            cloud.x[i] < 60.0)
            ++shadowGroundPts;
    }
    CHECK(vehiclePts > 20);
    CHECK(shadowGroundPts == 0);

    // Same rays without the car do land there.
    auto open = simulateLidar(flat, {}, lidar, 9);
    int openPts = 0;
    for (std::size_t i = 0; i < open.size(); ++i) {
        if (std::fabs(open.y[i]) < 0.3 && open.x[i] > 15.0 && open.x[i] < 60.0) ++openPts;
    }
    CHECK(openPts > 0);
}

TEST_CASE("adding a vehicle does not perturb unrelated rays") {
    GroundSurface flat(3, 0.0, 0.0);
    Vehicle car;
    car.box = geom::OrientedBox(10.0, 0.0, 4.5, 1.8, 0.0);
    LidarSpec lidar = defaultLidar(8);
    auto a = simulateLidar(flat, {}, lidar, 21);
    auto b = simulateLidar(flat, {car}, lidar, 21);
    // Points far from the car's bearing must be bit-identical across runs.
    int checked = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a.x[i] > -5.0) continue;  // keep only rays pointing away from the car
        bool found = false;
        for (std::size_t j = 0; j < b.size(); ++j) {
            if (a.x[i] == b.x[j] && a.y[i] == b.y[j] && a.z[i] == b.z[j] &&
                a.intensity[i] == b.intensity[j]) {
                found = true;
                break;
            }
        }
        CHECK(found);
        ++checked;
    }
    CHECK(checked > 100);
}

TEST_CASE("generateScene is deterministic per seed and seed-sensitive") {
    SceneSpec spec = quietSpec(100);
    Scene a = generateScene(spec);
    Scene b = generateScene(spec);
    REQUIRE(a.cloud.size() == b.cloud.size());
    CHECK(a.cloud.x == b.cloud.x);
    CHECK(a.cloud.z == b.cloud.z);
    CHECK(a.cloud.intensity == b.cloud.intensity);
    REQUIRE(a.vehicles.size() == b.vehicles.size());
    for (std::size_t i = 0; i < a.vehicles.size(); ++i) {
        CHECK(a.vehicles[i].box.cx == b.vehicles[i].box.cx);
        CHECK(a.vehicles[i].box.theta == b.vehicles[i].box.theta);
    }

    SceneSpec other = quietSpec(101);
    Scene c = generateScene(other);
    CHECK((a.cloud.size() != c.cloud.size() || a.cloud.x != c.cloud.x));
}

TEST_CASE("scene vehicles sit on the road and do not overlap") {
    SceneSpec spec = quietSpec(7);
    spec.nVehicles = 5;
    Scene scene = generateScene(spec);
    REQUIRE(scene.vehicles.size() == 5);
    const auto& ring = scene.map.road.polygons.at(0);
    for (std::size_t i = 0; i < scene.vehicles.size(); ++i) {
        const auto& b = scene.vehicles[i].box;
        CHECK(mapdata::pointInRing(ring, b.cx, b.cy));
        for (std::size_t j = i + 1; j < scene.vehicles.size(); ++j)
            CHECK(geom::rotatedIoU(b, scene.vehicles[j].box) == 0.0);
    }
}

TEST_CASE("each vehicle is observed by at least one high-intensity point") {
    SceneSpec spec = quietSpec(31);
    spec.lidar = defaultLidar();  // full density for coverage
    Scene scene = generateScene(spec);
    for (const auto& v : scene.vehicles) {
        geom::OrientedBox inflated = v.box;
        inflated.l += 0.5;
        inflated.w += 0.5;
        auto poly = geom::boxToPolygon(inflated);
        int hits = 0;
        for (std::size_t i = 0; i < scene.cloud.size(); ++i) {
            if (scene.cloud.intensity[i] < 0.55f) continue;
            geom::OrientedBox pt(scene.cloud.x[i], scene.cloud.y[i], 1e-3, 1e-3, 0.0);
            if (geom::rotatedIoU(pt, inflated) > 0.0) ++hits;
        }
        CHECK(hits >= 1);
    }
}

TEST_CASE("scene map raster agrees with the cloud's ground returns") {
    SceneSpec spec = quietSpec(55);
    spec.nVehicles = 0;
    Scene scene = generateScene(spec);
    CHECK(scene.vehicles.empty());
    REQUIRE(scene.cloud.size() > 500);
    int checked = 0;
    for (std::size_t i = 0; i < scene.cloud.size(); ++i) {
        const double x = scene.cloud.x[i], y = scene.cloud.y[i];
        if (x < spec.xMin + 1.0 || x > spec.xMax - 1.0) continue;
        if (y < spec.yMin + 1.0 || y > spec.yMax - 1.0) continue;
        bool ooc = false;
        const double h = mapdata::queryGroundHeight(scene.map.ground, x, y, &ooc);
        CHECK(!ooc);
        // Range noise plus 0.5 m raster quantization.
        CHECK(std::fabs(scene.cloud.z[i] - h) < 0.15);
        ++checked;
    }
    CHECK(checked > 300);
}

TEST_CASE("placement failure raises after exhausting attempts") {
    SceneSpec spec = quietSpec(1);
    // Vehicles can only be dropped in a 2 m window of x, so five cars of
    // ~4.5 m length cannot avoid overlapping.
    spec.xMax = spec.xMin + 12.0;
    spec.nVehicles = 5;
    CHECK_THROWS_AS(generateScene(spec), PlacementFailure);
}

TEST_CASE("dataset writer emits manifest, checksums, and loadable scenes") {
    namespace fs = std::filesystem;
    const std::string dir = (fs::temp_directory_path() / "bevdet_synth_ds").string();
    fs::remove_all(dir);
    SceneSpec spec = quietSpec(0);
    writeDataset(dir, 3, 900, spec, 2);

    std::ifstream mf(dir + "/manifest.json");
    REQUIRE(mf.good());
    nlohmann::json manifest;
    mf >> manifest;
    CHECK(manifest.at("count").get<int>() == 3);
    REQUIRE(manifest.at("scenes").size() == 3);
    CHECK(manifest["scenes"][0].at("split") == "train");
    CHECK(manifest["scenes"][2].at("split") == "val");
    for (const auto& entry : manifest["scenes"]) {
        const auto path = dir + "/" + entry.at("cloud").get<std::string>();
        CHECK(fileChecksum(path) == entry.at("cloudChecksum").get<std::uint64_t>());
        CHECK(fileChecksum(dir + "/" + entry.at("labels").get<std::string>()) ==
              entry.at("labelChecksum").get<std::uint64_t>());
    }

    StoredScene s1 = loadScene(dir, 1);
    SceneSpec regen = spec;
    regen.seed = 901;
    Scene fresh = generateScene(regen);
    REQUIRE(s1.cloud.size() == fresh.cloud.size());
    CHECK(s1.cloud.x == fresh.cloud.x);
    REQUIRE(s1.labels.size() == fresh.vehicles.size());
    for (std::size_t i = 0; i < s1.labels.size(); ++i)
        CHECK(s1.labels[i].cx == doctest::Approx(fresh.vehicles[i].box.cx).epsilon(1e-12));
    CHECK(s1.map.ground.nCols == fresh.map.ground.nCols);
    fs::remove_all(dir);
}

TEST_CASE("label file round trip") {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "bevdet_labels.json").string();
    std::vector<geom::OrientedBox> labels = {geom::OrientedBox(3.5, -2.0, 4.5, 1.8, 0.4),
                                             geom::OrientedBox(20.0, 1.0, 4.0, 1.7, -1.2)};
    saveLabels(labels, path);
    auto back = loadLabels(path);
    REQUIRE(back.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(back[i].cx == labels[i].cx);
        CHECK(back[i].w == labels[i].w);
        CHECK(back[i].theta == labels[i].theta);
    }
    fs::remove(path);
}
