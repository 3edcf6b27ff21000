#pragma once

#include <array>
#include <string>
#include <vector>

#include "spine3d/common.hpp"
#include "spine3d/tensor.hpp"

namespace spine3d {

/// One extracted midline sample: z = normalized row (height), u = normalized column.
struct CurveSample {
    Real z = 0;
    Real u = 0;
};

/// Per-row curve extracted from a single-view map. z strictly increasing, u in [0,1].
struct Curve2D {
    View view = View::PA;
    std::vector<CurveSample> samples;
};

/// Least-squares polynomial u(z) = sum_i coeffs[i] * z^i over [z_min, z_max].
struct PolyCurve {
    std::vector<Real> coeffs;  // ascending powers of z
    int degree = 0;
    Real residual_rms = 0;
    Real z_min = 0;
    Real z_max = 1;

    Real eval(Real z) const;
    Real deriv(Real z) const;
    Real deriv2(Real z) const;
};

/// Fused biplanar curve: x from the PA fit, y from the LAT fit, shared z axis.
struct Curve3D {
    std::vector<std::array<Real, 3>> points;  // (x, y, z), z strictly increasing
    PolyCurve pa;
    PolyCurve lat;
};

/// Per-row intensity-weighted centroid of every row whose max exceeds `threshold`.
/// Coordinates are normalized by (H-1) and (W-1). Accepts (h,w) or (h,w,1) maps.
Curve2D extract_curve(const Tensor& map, Real threshold = 0.5, View view = View::PA);

/// Least-squares polynomial fit of u over z (internally solved in a rescaled
/// basis for conditioning; coefficients reported in plain powers of z).
PolyCurve fit_curve(const Curve2D& curve, int degree = 6);

/// Sample n points uniformly over the intersection of the two valid z-ranges.
/// The ranges must overlap by at least 0.25 of normalized height.
Curve3D reconstruct3d(const PolyCurve& pa, const PolyCurve& lat, int n = 256);

/// Unit tangents normalize((dx/dz, dy/dz, 1)) from the fitted polynomials,
/// evaluated at each sample z. Always well defined (z component never vanishes).
std::vector<std::array<Real, 3>> tangents(const Curve3D& curve);

std::string curve2d_to_json(const Curve2D& c);
std::string curve3d_to_json(const Curve3D& c);

}  // namespace spine3d
