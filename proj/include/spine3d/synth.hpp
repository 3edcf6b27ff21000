#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "spine3d/cobb.hpp"
#include "spine3d/common.hpp"
#include "spine3d/tensor.hpp"

namespace spine3d {

/// One coronal sinusoid term: amplitude * sin(2 pi cycles z + phase).
struct CoronalTerm {
    Real amplitude = 0;
    Real cycles = 0.5;
    Real phase = 0;
};

/// Parametric ground-truth spine over z in [0,1] with closed-form derivatives:
/// coronal x(z) as a sum of sinusoids, sagittal y(z) as a polynomial.
struct AnalyticSpine {
    std::vector<CoronalTerm> coronal;
    std::vector<Real> sagittal;  // ascending polynomial coefficients of y(z)
    std::uint64_t seed = 0;

    Real x(Real z) const;
    Real dx(Real z) const;
    Real ddx(Real z) const;
    Real y(Real z) const;
    Real dy(Real z) const;
};

/// Validate user-supplied parameters (at least one coronal term, deviations
/// within +-0.4 so the curve stays inside the image) and pass them through.
AnalyticSpine make_spine(AnalyticSpine params);

/// Severity-stratified preset: deterministic in the seed, scaled so the
/// analytic 3D angle lands in the band's target range (NormalMild 5-15,
/// Moderate 25-35, Severe 45-60 degrees — a safe margin from the 20/40
/// grading boundaries).
AnalyticSpine make_spine(std::uint64_t seed, Severity band);

/// Independent oracle for the 3D angle: exact derivatives, inflections of
/// x'' by dense scan (4096 nodes) plus bisection, max adjacent-pair
/// arccos-dot angle over {0, roots, 1}. Degrees.
Real analytic_cobb(const AnalyticSpine& s);

enum class StripeProfile { Gaussian, Nearest };

/// Render one view as an (h,w,1) map: per row, a stripe centred on the
/// projected curve column. Gaussian profile uses sigma = thickness/2;
/// Nearest paints hard pixels (thickness 1 gives exactly one per row).
Tensor rasterize(const AnalyticSpine& s, View view, int h, int w, Real thickness_px = 5.0,
                 StripeProfile profile = StripeProfile::Gaussian);

/// Deterministic pseudo-trunk RGB image (h,w,3) in [0,1]: torso silhouette
/// whose midline, shading and median groove displace with the view's curve,
/// plus seeded low-amplitude noise. Training stand-in, not a renderer.
Tensor make_trunk_image(const AnalyticSpine& s, View view, int h, int w, std::uint64_t seed);

/// Spine parameters plus the oracle angle and its grade.
std::string spine_truth_json(const AnalyticSpine& s, Severity band);

/// Write n cases under dir/case_0000... each with pa.pgm, lat.pgm,
/// pa_rgb.ppm, lat_rgb.ppm and truth.json. Bands cycle mild/moderate/severe
/// unless pinned. Returns the case directory names. Cases are independent
/// (per-case seeds are pure functions of seed and index), so `threads` > 1
/// splits them across workers without changing any output byte.
std::vector<std::string> write_dataset(const std::string& dir, int n, std::uint64_t seed,
                                       std::optional<Severity> band = std::nullopt, int h = 320,
                                       int w = 160, Real thickness_px = 5.0, int threads = 1);

}  // namespace spine3d
