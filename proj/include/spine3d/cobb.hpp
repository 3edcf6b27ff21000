#pragma once

#include <string>
#include <vector>

#include "spine3d/common.hpp"
#include "spine3d/curve.hpp"

namespace spine3d {

enum class Severity { NormalMild, Moderate, Severe };

const char* severity_name(Severity s);

/// Inverse of severity_name; throws ShapeError on an unknown label.
Severity severity_from_name(const std::string& name);

/// Landmarks, per-adjacent-pair plane angles, and the graded maximum.
struct CobbResult {
    std::vector<Real> landmarks_z;          // endpoints plus interior landmarks, sorted
    std::vector<Real> segment_angles_deg;   // one per adjacent landmark pair
    Real max_angle_deg = 0;
    Severity severity = Severity::NormalMild;
    bool boundary_case = false;             // max angle sits exactly on a grade boundary
};

/// Interior z where the polynomial's second derivative changes sign, found by
/// sign-scanning a 1024-point grid over the valid range and bisecting each
/// bracketed root to |dz| < 1e-6. Sorted ascending; may be empty.
std::vector<Real> inflection_points(const PolyCurve& poly);

/// Dihedral angles between the curve-normal planes at adjacent landmarks.
/// The normal of a plane perpendicular to the curve is the unit tangent, so each
/// angle is arccos(clamp(t_i . t_j, -1, 1)) in degrees. Landmarks are augmented
/// with both curve endpoints.
CobbResult cobb3d(const Curve3D& curve, const std::vector<Real>& landmarks);

/// Single-view baseline: same landmarking, tangents normalize((du/dz, 1)) in the
/// plane of one projection only.
CobbResult cobb2d(const PolyCurve& poly, const std::vector<Real>& landmarks);

/// [0,20) normal-mild, [20,40] moderate, (40,inf) severe. Negative angles refused.
Severity grade(Real angle_deg);

/// True when the angle sits on a grading boundary (20 or 40 degrees) exactly
/// enough that the closed/open side choice decided the grade.
bool boundary_case_angle(Real angle_deg);

std::string cobb_to_json(const CobbResult& r);

}  // namespace spine3d
