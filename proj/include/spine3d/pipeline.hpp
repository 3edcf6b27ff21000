#pragma once

#include "spine3d/cobb.hpp"
#include "spine3d/curve.hpp"
#include "spine3d/tensor.hpp"

namespace spine3d {

/// Everything the geometric back end derives from a pair of curve maps.
struct GeometryReport {
    Curve2D pa_curve;
    Curve2D lat_curve;
    PolyCurve pa_fit;
    PolyCurve lat_fit;
    Curve3D curve;
    CobbResult cobb;       // 3D result, graded
    CobbResult cobb_pa2d;  // single-view comparison baseline
};

/// extract -> fit -> fuse -> landmark -> angle, from two orthogonal maps.
GeometryReport geometry_from_maps(const Tensor& pa_map, const Tensor& lat_map,
                                  Real threshold = 0.5, int degree = 6, int n = 256);

}  // namespace spine3d
