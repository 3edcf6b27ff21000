#include "spine3d/curve.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace spine3d {

namespace {

Real horner(const std::vector<Real>& c, Real z) {
    Real acc = 0;
    for (std::size_t i = c.size(); i-- > 0;) acc = acc * z + c[i];
    return acc;
}

// Solve the SPD system A x = b by Cholesky, in long double for headroom.
std::vector<long double> cholesky_solve(std::vector<long double> a,
                                        std::vector<long double> b, int m) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j <= i; ++j) {
            long double s = a[i * m + j];
            for (int k = 0; k < j; ++k) s -= a[i * m + k] * a[j * m + k];
            if (i == j) {
                if (s <= 0.0L)
                    throw PipelineError("polynomial fit: normal equations not positive definite");
                a[i * m + i] = std::sqrt(s);
            } else {
                a[i * m + j] = s / a[j * m + j];
            }
        }
    }
    for (int i = 0; i < m; ++i) {  // L y = b
        long double s = b[i];
        for (int k = 0; k < i; ++k) s -= a[i * m + k] * b[k];
        b[i] = s / a[i * m + i];
    }
    for (int i = m - 1; i >= 0; --i) {  // L^T x = y
        long double s = b[i];
        for (int k = i + 1; k < m; ++k) s -= a[k * m + i] * b[k];
        b[i] = s / a[i * m + i];
    }
    return b;
}

}  // namespace

Real PolyCurve::eval(Real z) const { return horner(coeffs, z); }

Real PolyCurve::deriv(Real z) const {
    Real acc = 0;
    for (std::size_t i = coeffs.size(); i-- > 1;)
        acc = acc * z + coeffs[i] * static_cast<Real>(i);
    return acc;
}

Real PolyCurve::deriv2(Real z) const {
    Real acc = 0;
    for (std::size_t i = coeffs.size(); i-- > 2;)
        acc = acc * z + coeffs[i] * static_cast<Real>(i * (i - 1));
    return acc;
}

Curve2D extract_curve(const Tensor& map, Real threshold, View view) {
    check(map.rank() == 2 || (map.rank() == 3 && map.dim(2) == 1),
          "extract_curve needs an (h,w) or (h,w,1) map, got " + map.shape_str());
    check(threshold > 0.0 && threshold < 1.0, "extract_curve threshold must lie in (0,1)");
    const int h = map.dim(0), w = map.dim(1);
    check(h >= 2 && w >= 2, "extract_curve needs at least a 2x2 map, got " + map.shape_str());

    const Tensor& m = map;
    std::span<const Real> v = m.values();
    Curve2D out;
    out.view = view;
    for (int r = 0; r < h; ++r) {
        const Real* row = v.data() + static_cast<std::size_t>(r) * w;
        Real mx = row[0];
        for (int c = 1; c < w; ++c) mx = std::max(mx, row[c]);
        if (!(mx > threshold)) continue;
        Real mass = 0, moment = 0;
        for (int c = 0; c < w; ++c) {
            mass += row[c];
            moment += row[c] * static_cast<Real>(c);
        }
        out.samples.push_back({static_cast<Real>(r) / static_cast<Real>(h - 1),
                               (moment / mass) / static_cast<Real>(w - 1)});
    }
    if (out.samples.size() < 2)
        throw PipelineError("curve extraction found " + std::to_string(out.samples.size()) +
                            " rows above threshold; need at least 2");
    return out;
}

PolyCurve fit_curve(const Curve2D& curve, int degree) {
    check(degree >= 1, "fit_curve degree must be >= 1");
    const std::size_t n = curve.samples.size();
    if (n <= static_cast<std::size_t>(degree))
        throw ShapeError("fit_curve underdetermined: " + std::to_string(n) + " samples, degree " +
                         std::to_string(degree));
    for (std::size_t i = 1; i < n; ++i)
        check(curve.samples[i].z > curve.samples[i - 1].z, "fit_curve z must be strictly increasing");

    const Real zlo = curve.samples.front().z;
    const Real zhi = curve.samples.back().z;
    // Fit in t = a z + b mapped onto [-1, 1]; monomials there keep the normal
    // equations well conditioned at the degrees used here.
    const long double a = 2.0L / (static_cast<long double>(zhi) - zlo);
    const long double b = -(static_cast<long double>(zhi) + zlo) / (static_cast<long double>(zhi) - zlo);
    const int m = degree + 1;

    std::vector<long double> gram(static_cast<std::size_t>(m) * m, 0.0L);
    std::vector<long double> rhs(m, 0.0L);
    std::vector<long double> basis(m);
    for (const CurveSample& s : curve.samples) {
        const long double t = a * s.z + b;
        basis[0] = 1.0L;
        for (int i = 1; i < m; ++i) basis[i] = basis[i - 1] * t;
        for (int i = 0; i < m; ++i) {
            rhs[i] += basis[i] * s.u;
            for (int j = 0; j <= i; ++j) gram[i * m + j] += basis[i] * basis[j];
        }
    }
    for (int i = 0; i < m; ++i)
        for (int j = i + 1; j < m; ++j) gram[i * m + j] = gram[j * m + i];

    std::vector<long double> ct = cholesky_solve(gram, rhs, m);

    // Expand p(t(z)) back into plain powers of z by repeated multiply-accumulate
    // with the linear map t = a z + b.
    std::vector<long double> cz{ct[degree]};
    for (int i = degree - 1; i >= 0; --i) {
        std::vector<long double> next(cz.size() + 1, 0.0L);
        for (std::size_t j = 0; j < cz.size(); ++j) {
            next[j] += b * cz[j];
            next[j + 1] += a * cz[j];
        }
        next[0] += ct[i];
        cz = std::move(next);
    }

    PolyCurve out;
    out.degree = degree;
    out.z_min = zlo;
    out.z_max = zhi;
    out.coeffs.resize(cz.size());
    for (std::size_t i = 0; i < cz.size(); ++i) out.coeffs[i] = static_cast<Real>(cz[i]);

    long double sse = 0.0L;
    for (const CurveSample& s : curve.samples) {
        const long double t = a * s.z + b;
        long double p = 0.0L;
        for (int i = degree; i >= 0; --i) p = p * t + ct[i];
        const long double r = s.u - p;
        sse += r * r;
    }
    out.residual_rms = static_cast<Real>(std::sqrt(sse / static_cast<long double>(n)));
    return out;
}

Curve3D reconstruct3d(const PolyCurve& pa, const PolyCurve& lat, int n) {
    check(n >= 16, "reconstruct3d needs n >= 16, got " + std::to_string(n));
    const Real lo = std::max(pa.z_min, lat.z_min);
    const Real hi = std::min(pa.z_max, lat.z_max);
    if (!(hi - lo >= 0.25))
        throw PipelineError("insufficient biplanar overlap: [" + std::to_string(lo) + ", " +
                            std::to_string(hi) + "] covers less than 0.25 of height");
    Curve3D out;
    out.pa = pa;
    out.lat = lat;
    out.points.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        // convex combination keeps both endpoints exact (tau is 0 and 1 exactly)
        const Real tau = static_cast<Real>(i) / static_cast<Real>(n - 1);
        const Real z = lo * (1.0 - tau) + hi * tau;
        out.points.push_back({pa.eval(z), lat.eval(z), z});
    }
    return out;
}

std::vector<std::array<Real, 3>> tangents(const Curve3D& curve) {
    std::vector<std::array<Real, 3>> out;
    out.reserve(curve.points.size());
    for (const auto& p : curve.points) {
        const Real dx = curve.pa.deriv(p[2]);
        const Real dy = curve.lat.deriv(p[2]);
        const Real inv = 1.0 / std::sqrt(dx * dx + dy * dy + 1.0);
        out.push_back({dx * inv, dy * inv, inv});
    }
    return out;
}

std::string curve2d_to_json(const Curve2D& c) {
    nlohmann::ordered_json j;
    j["view"] = view_name(c.view);
    auto& s = j["samples"] = nlohmann::ordered_json::array();
    for (const CurveSample& p : c.samples) s.push_back({p.z, p.u});
    return j.dump();
}

std::string curve3d_to_json(const Curve3D& c) {
    nlohmann::ordered_json j;
    auto& pts = j["points"] = nlohmann::ordered_json::array();
    for (const auto& p : c.points) pts.push_back({p[0], p[1], p[2]});
    j["degree"] = c.pa.degree;
    return j.dump();
}

}  // namespace spine3d
