#pragma once

#include <cstdint>
#include <optional>
#include <vector>

namespace bevdet::geom {

// BEV box: center (cx, cy) in meters, length l along heading, width w,
// heading theta in radians. Heading has period pi for all geometry here
// (the polygon is identical under theta -> theta + pi).
struct OrientedBox {
    double cx = 0.0;
    double cy = 0.0;
    double l = 1.0;
    double w = 1.0;
    double theta = 0.0;
    std::optional<double> score;

    OrientedBox() = default;
    OrientedBox(double cx_, double cy_, double l_, double w_, double theta_);
    OrientedBox(double cx_, double cy_, double l_, double w_, double theta_, double score_);

    bool valid() const { return l > 0.0 && w > 0.0; }
};

// Normalizes an angle into [-pi, pi).
double normalizeAngle(double a);

struct ConvexPolygon {
    // CCW vertex order, signed area > 0.
    std::vector<std::pair<double, double>> vertices;

    double area() const;
};

ConvexPolygon boxToPolygon(const OrientedBox& box);

// Area of intersection of two convex polygons (Sutherland-Hodgman).
// Degenerate contact (shared edge or vertex) counts as zero.
double convexIntersectionArea(const ConvexPolygon& a, const ConvexPolygon& b);

double rotatedIoU(const OrientedBox& a, const OrientedBox& b);

// Greedy NMS. Sort by score descending (ties: input index ascending), keep a
// box iff its IoU with every kept box is <= iouThresh. Returns kept boxes in
// kept order.
std::vector<OrientedBox> nms(const std::vector<OrientedBox>& dets, double iouThresh);

// Same contract as nms() but returns indices into dets.
std::vector<std::size_t> nmsIndices(const std::vector<OrientedBox>& dets, double iouThresh);

// Rejection-sampling IoU estimate over the joint bounding AABB.
// Deterministic per seed.
double monteCarloIoU(const OrientedBox& a, const OrientedBox& b,
                     std::uint64_t samples, std::uint64_t seed);

}  // namespace bevdet::geom
