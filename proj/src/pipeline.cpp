#include "spine3d/pipeline.hpp"

namespace spine3d {

GeometryReport geometry_from_maps(const Tensor& pa_map, const Tensor& lat_map, Real threshold,
                                  int degree, int n) {
    GeometryReport r;
    r.pa_curve = extract_curve(pa_map, threshold, View::PA);
    r.lat_curve = extract_curve(lat_map, threshold, View::LAT);
    r.pa_fit = fit_curve(r.pa_curve, degree);
    r.lat_fit = fit_curve(r.lat_curve, degree);
    r.curve = reconstruct3d(r.pa_fit, r.lat_fit, n);
    // PA inflections are found over the PA fit's full range; keep only those
    // inside the fused (intersection) range the 3D curve actually covers
    const Real lo = r.curve.points.front()[2];
    const Real hi = r.curve.points.back()[2];
    std::vector<Real> landmarks;
    for (Real z : inflection_points(r.pa_fit))
        if (z >= lo && z <= hi) landmarks.push_back(z);
    r.cobb = cobb3d(r.curve, landmarks);
    r.cobb_pa2d = cobb2d(r.pa_fit, landmarks);
    return r;
}

}  // namespace spine3d
