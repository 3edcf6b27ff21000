#include "spine3d/cobb.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include <json.hpp>

namespace spine3d {

namespace {

constexpr int kScanNodes = 1024;
constexpr Real kRootTol = 1e-6;
constexpr Real kBoundaryTol = 1e-9;

Real bisect(const PolyCurve& poly, Real a, Real b, Real fa) {
    while (b - a > kRootTol) {
        const Real mid = 0.5 * (a + b);
        const Real fm = poly.deriv2(mid);
        if (fm == 0.0) return mid;
        if ((fm > 0) == (fa > 0)) {
            a = mid;
            fa = fm;
        } else {
            b = mid;
        }
    }
    return 0.5 * (a + b);
}

std::vector<Real> merged_landmarks(Real lo, Real hi, std::vector<Real> interior) {
    std::sort(interior.begin(), interior.end());
    std::vector<Real> zs{lo};
    for (Real z : interior) {
        check(z >= lo && z <= hi, "landmark z " + std::to_string(z) + " outside curve range");
        if (z - zs.back() > kBoundaryTol && hi - z > kBoundaryTol) zs.push_back(z);
    }
    zs.push_back(hi);
    return zs;
}

CobbResult angles_between(const std::vector<Real>& zs,
                          const std::function<std::array<Real, 3>(Real)>& tangent_at) {
    CobbResult r;
    r.landmarks_z = zs;
    std::array<Real, 3> prev = tangent_at(zs[0]);
    for (std::size_t i = 1; i < zs.size(); ++i) {
        const std::array<Real, 3> cur = tangent_at(zs[i]);
        const Real dot = std::clamp<Real>(
            prev[0] * cur[0] + prev[1] * cur[1] + prev[2] * cur[2], -1.0, 1.0);
        r.segment_angles_deg.push_back(static_cast<Real>(deg_from_rad(std::acos(dot))));
        prev = cur;
    }
    r.max_angle_deg = *std::max_element(r.segment_angles_deg.begin(), r.segment_angles_deg.end());
    r.severity = grade(r.max_angle_deg);
    r.boundary_case = boundary_case_angle(r.max_angle_deg);
    return r;
}

}  // namespace

const char* severity_name(Severity s) {
    switch (s) {
        case Severity::NormalMild: return "normal-mild";
        case Severity::Moderate: return "moderate";
        default: return "severe";
    }
}

Severity severity_from_name(const std::string& name) {
    if (name == "normal-mild") return Severity::NormalMild;
    if (name == "moderate") return Severity::Moderate;
    if (name == "severe") return Severity::Severe;
    throw ShapeError("unknown severity label: " + name);
}

std::vector<Real> inflection_points(const PolyCurve& poly) {
    std::vector<Real> roots;
    const Real lo = poly.z_min, hi = poly.z_max;
    const Real step = (hi - lo) / static_cast<Real>(kScanNodes - 1);
    std::array<Real, kScanNodes> f;
    for (int i = 0; i < kScanNodes; ++i) f[i] = poly.deriv2(lo + step * static_cast<Real>(i));

    auto opposite = [](Real a, Real b) { return (a > 0 && b < 0) || (a < 0 && b > 0); };
    for (int i = 0; i + 1 < kScanNodes; ++i) {
        if (opposite(f[i], f[i + 1])) {
            roots.push_back(
                bisect(poly, lo + step * static_cast<Real>(i), lo + step * static_cast<Real>(i + 1), f[i]));
        } else if (f[i] == 0.0 && i > 0) {
            // Grid node lands exactly on a root: count it only if the nearest
            // nonzero neighbours straddle zero (an actual sign change).
            int j = i - 1;
            while (j > 0 && f[j] == 0.0) --j;
            int k = i + 1;
            while (k + 1 < kScanNodes && f[k] == 0.0) ++k;
            if (opposite(f[j], f[k])) roots.push_back(lo + step * static_cast<Real>(i));
        }
    }
    return roots;
}

CobbResult cobb3d(const Curve3D& curve, const std::vector<Real>& landmarks) {
    check(!curve.points.empty(), "cobb3d needs a sampled curve");
    const Real lo = curve.points.front()[2];
    const Real hi = curve.points.back()[2];
    const std::vector<Real> zs = merged_landmarks(lo, hi, landmarks);
    return angles_between(zs, [&](Real z) -> std::array<Real, 3> {
        const Real dx = curve.pa.deriv(z);
        const Real dy = curve.lat.deriv(z);
        const Real inv = 1.0 / std::sqrt(dx * dx + dy * dy + 1.0);
        return {dx * inv, dy * inv, inv};
    });
}

CobbResult cobb2d(const PolyCurve& poly, const std::vector<Real>& landmarks) {
    const std::vector<Real> zs = merged_landmarks(poly.z_min, poly.z_max, landmarks);
    return angles_between(zs, [&](Real z) -> std::array<Real, 3> {
        const Real du = poly.deriv(z);
        const Real inv = 1.0 / std::sqrt(du * du + 1.0);
        return {du * inv, 0.0, inv};
    });
}

Severity grade(Real angle_deg) {
    check(angle_deg >= 0.0, "grade needs a non-negative angle, got " + std::to_string(angle_deg));
    if (angle_deg < 20.0) return Severity::NormalMild;
    if (angle_deg <= 40.0) return Severity::Moderate;
    return Severity::Severe;
}

bool boundary_case_angle(Real angle_deg) {
    return std::abs(angle_deg - 20.0) < kBoundaryTol || std::abs(angle_deg - 40.0) < kBoundaryTol;
}

std::string cobb_to_json(const CobbResult& r) {
    nlohmann::ordered_json j;
    j["landmarks_z"] = r.landmarks_z;
    j["segment_angles_deg"] = r.segment_angles_deg;
    j["max_angle_deg"] = r.max_angle_deg;
    j["severity"] = severity_name(r.severity);
    j["boundary_case"] = r.boundary_case;
    return j.dump();
}

}  // namespace spine3d
