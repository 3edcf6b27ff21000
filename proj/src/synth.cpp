#include "spine3d/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <mutex>
#include <thread>

#include <json.hpp>

#include "spine3d/image.hpp"

namespace spine3d {

namespace {

constexpr Real kDeviationBound = 0.4;
constexpr int kOracleScanNodes = 4096;

Real band_lo(Severity b) {
    switch (b) {
        case Severity::NormalMild: return 5.0;
        case Severity::Moderate: return 25.0;
        default: return 45.0;
    }
}

Real band_hi(Severity b) {
    switch (b) {
        case Severity::NormalMild: return 15.0;
        case Severity::Moderate: return 35.0;
        default: return 60.0;
    }
}

bool within_bounds(const AnalyticSpine& s) {
    for (int i = 0; i <= 512; ++i) {
        const Real z = static_cast<Real>(i) / 512.0;
        if (std::abs(s.x(z)) > kDeviationBound || std::abs(s.y(z)) > kDeviationBound) return false;
    }
    return true;
}

// The drawn shape of one preset before severity scaling is applied.
struct PresetDraw {
    Real phi1, rho, phi2;
    Real c1, c2, c3;
    Real target_deg;
};

AnalyticSpine scaled_spine(const PresetDraw& d, Real s, std::uint64_t seed) {
    AnalyticSpine sp;
    sp.seed = seed;
    sp.coronal = {{0.12 * s, 0.5, d.phi1}, {0.12 * s * d.rho, 1.0, d.phi2}};
    sp.sagittal = {0.0, s * d.c1, s * d.c2, s * d.c3};
    return sp;
}

}  // namespace

Real AnalyticSpine::x(Real z) const {
    Real acc = 0;
    for (const CoronalTerm& t : coronal)
        acc += t.amplitude * std::sin(2.0 * M_PI * t.cycles * z + t.phase);
    return acc;
}

Real AnalyticSpine::dx(Real z) const {
    Real acc = 0;
    for (const CoronalTerm& t : coronal) {
        const Real w = 2.0 * M_PI * t.cycles;
        acc += t.amplitude * w * std::cos(w * z + t.phase);
    }
    return acc;
}

Real AnalyticSpine::ddx(Real z) const {
    Real acc = 0;
    for (const CoronalTerm& t : coronal) {
        const Real w = 2.0 * M_PI * t.cycles;
        acc -= t.amplitude * w * w * std::sin(w * z + t.phase);
    }
    return acc;
}

Real AnalyticSpine::y(Real z) const {
    Real acc = 0;
    for (std::size_t i = sagittal.size(); i-- > 0;) acc = acc * z + sagittal[i];
    return acc;
}

Real AnalyticSpine::dy(Real z) const {
    Real acc = 0;
    for (std::size_t i = sagittal.size(); i-- > 1;)
        acc = acc * z + sagittal[i] * static_cast<Real>(i);
    return acc;
}

AnalyticSpine make_spine(AnalyticSpine params) {
    check(!params.coronal.empty(), "spine needs at least one coronal term");
    if (!within_bounds(params))
        throw PipelineError("spine deviation exceeds the +-0.4 in-image bound");
    return params;
}

AnalyticSpine make_spine(std::uint64_t seed, Severity band) {
    Rng rng(seed);
    for (int attempt = 0; attempt < 64; ++attempt) {
        PresetDraw d;
        d.phi1 = rng.uniform(0.15 * M_PI, 0.85 * M_PI);
        d.rho = rng.uniform(0.0, 0.10);
        d.phi2 = rng.uniform(0.0, 2.0 * M_PI);
        d.c1 = rng.uniform(-0.04, 0.04);
        d.c2 = rng.uniform(-0.06, 0.06);
        d.c3 = rng.uniform(-0.05, 0.05);
        d.target_deg = rng.uniform(band_lo(band), band_hi(band));

        auto angle_at = [&](Real s) { return analytic_cobb(scaled_spine(d, s, seed)); };

        Real hi = 0.5;
        bool bracketed = false;
        for (int g = 0; g < 6; ++g) {
            if (angle_at(hi) > d.target_deg) {
                bracketed = true;
                break;
            }
            hi *= 2.0;
        }
        if (!bracketed) continue;  // redraw: shape too flat to reach the band

        Real lo = 0.0;
        for (int it = 0; it < 60; ++it) {
            const Real mid = 0.5 * (lo + hi);
            (angle_at(mid) < d.target_deg ? lo : hi) = mid;
        }
        AnalyticSpine sp = scaled_spine(d, 0.5 * (lo + hi), seed);
        if (within_bounds(sp)) return sp;
    }
    throw PipelineError("no in-bounds spine found for the requested band (seed " +
                        std::to_string(seed) + ")");
}

Real analytic_cobb(const AnalyticSpine& s) {
    // interior sign changes of the exact coronal curvature
    std::array<Real, kOracleScanNodes> f;
    const Real step = 1.0 / static_cast<Real>(kOracleScanNodes - 1);
    for (int i = 0; i < kOracleScanNodes; ++i) f[i] = s.ddx(step * static_cast<Real>(i));
    auto opposite = [](Real a, Real b) { return (a > 0 && b < 0) || (a < 0 && b > 0); };

    std::vector<Real> zs{0.0};
    for (int i = 0; i + 1 < kOracleScanNodes; ++i) {
        if (!opposite(f[i], f[i + 1])) continue;
        Real a = step * static_cast<Real>(i), b = step * static_cast<Real>(i + 1), fa = f[i];
        while (b - a > 1e-9) {
            const Real mid = 0.5 * (a + b);
            const Real fm = s.ddx(mid);
            if (fm == 0.0) {
                a = b = mid;
                break;
            }
            if ((fm > 0) == (fa > 0)) {
                a = mid;
                fa = fm;
            } else {
                b = mid;
            }
        }
        zs.push_back(0.5 * (a + b));
    }
    zs.push_back(1.0);

    auto tangent = [&](Real z) -> std::array<Real, 3> {
        const Real gx = s.dx(z), gy = s.dy(z);
        const Real inv = 1.0 / std::sqrt(gx * gx + gy * gy + 1.0);
        return {gx * inv, gy * inv, inv};
    };
    Real best = 0.0;
    std::array<Real, 3> prev = tangent(zs[0]);
    for (std::size_t i = 1; i < zs.size(); ++i) {
        const std::array<Real, 3> cur = tangent(zs[i]);
        const Real dot = std::clamp<Real>(
            prev[0] * cur[0] + prev[1] * cur[1] + prev[2] * cur[2], -1.0, 1.0);
        best = std::max(best, static_cast<Real>(deg_from_rad(std::acos(dot))));
        prev = cur;
    }
    return best;
}

Tensor rasterize(const AnalyticSpine& s, View view, int h, int w, Real thickness_px,
                 StripeProfile profile) {
    check(h >= 16 && w >= 16, "rasterize needs h, w >= 16");
    check(thickness_px >= 1.0, "rasterize needs thickness >= 1 px");
    std::vector<Real> v(static_cast<std::size_t>(h) * w, 0.0);
    const Real sigma = thickness_px / 2.0;
    for (int r = 0; r < h; ++r) {
        const Real z = static_cast<Real>(r) / static_cast<Real>(h - 1);
        const Real u = (view == View::PA ? s.x(z) : s.y(z)) + 0.5;
        const Real center = u * static_cast<Real>(w - 1);
        Real* row = v.data() + static_cast<std::size_t>(r) * w;
        if (profile == StripeProfile::Gaussian) {
            for (int c = 0; c < w; ++c) {
                const Real d = static_cast<Real>(c) - center;
                row[c] = std::exp(-(d * d) / (2.0 * sigma * sigma));
            }
        } else {
            const int c0 = static_cast<int>(std::lround(center));
            const int reach = static_cast<int>(std::floor((thickness_px - 1.0) / 2.0));
            for (int c = std::max(0, c0 - reach); c <= std::min(w - 1, c0 + reach); ++c)
                row[c] = 1.0;
        }
    }
    return Tensor({h, w, 1}, std::move(v));
}

Tensor make_trunk_image(const AnalyticSpine& s, View view, int h, int w, std::uint64_t seed) {
    check(h >= 16 && w >= 16, "trunk image needs h, w >= 16");
    Rng rng(seed);
    std::vector<Real> v(static_cast<std::size_t>(h) * w * 3, 0.0);
    const Real groove_sigma = std::max(1.0, 0.02 * w);
    for (int r = 0; r < h; ++r) {
        const Real z = static_cast<Real>(r) / static_cast<Real>(h - 1);
        const Real dev = view == View::PA ? s.x(z) : s.y(z);
        const Real mid = (0.5 + dev) * static_cast<Real>(w - 1);
        // silhouette: wide shoulders and hips, narrow waist
        const Real halfw = (0.26 + 0.05 * std::cos(2.0 * M_PI * z)) * static_cast<Real>(w - 1);
        for (int c = 0; c < w; ++c) {
            Real* px = v.data() + (static_cast<std::size_t>(r) * w + c) * 3;
            const Real t = (static_cast<Real>(c) - mid) / halfw;
            if (std::abs(t) < 1.0) {
                // cylinder-style lateral shading plus a dark median groove
                const Real shade = 0.72 + 0.28 * std::sqrt(1.0 - t * t);
                const Real d = static_cast<Real>(c) - mid;
                const Real groove =
                    1.0 - 0.38 * std::exp(-(d * d) / (2.0 * groove_sigma * groove_sigma));
                const Real k = shade * groove;
                px[0] = 0.74 * k;
                px[1] = 0.56 * k;
                px[2] = 0.47 * k;
            } else {
                const Real bg = 0.07 + 0.03 * z;
                px[0] = bg;
                px[1] = bg;
                px[2] = bg + 0.02;
            }
        }
    }
    for (Real& x : v) x = std::clamp<Real>(x + 0.01 * rng.uniform(-1.0, 1.0), 0.0, 1.0);
    return Tensor({h, w, 3}, std::move(v));
}

std::string spine_truth_json(const AnalyticSpine& s, Severity band) {
    const Real angle = analytic_cobb(s);
    nlohmann::ordered_json j;
    j["seed"] = s.seed;
    j["band"] = severity_name(band);
    j["analytic_angle_deg"] = angle;
    j["grade"] = severity_name(grade(angle));
    auto& terms = j["coronal"] = nlohmann::ordered_json::array();
    for (const CoronalTerm& t : s.coronal) {
        nlohmann::ordered_json jt;
        jt["amplitude"] = t.amplitude;
        jt["cycles"] = t.cycles;
        jt["phase"] = t.phase;
        terms.push_back(std::move(jt));
    }
    j["sagittal"] = s.sagittal;
    return j.dump();
}

std::vector<std::string> write_dataset(const std::string& dir, int n, std::uint64_t seed,
                                       std::optional<Severity> band, int h, int w,
                                       Real thickness_px, int threads) {
    check(n >= 1, "dataset needs n >= 1 cases");
    const Severity cycle[3] = {Severity::NormalMild, Severity::Moderate, Severity::Severe};
    const Rng root(seed);
    std::vector<std::string> cases(n);

    auto emit = [&](int i) {
        const Severity b = band.value_or(cycle[i % 3]);
        const std::uint64_t si = root.fork(static_cast<std::uint64_t>(i) + 1000).next_u64();
        const AnalyticSpine sp = make_spine(si, b);

        char name[32];
        std::snprintf(name, sizeof(name), "case_%04d", i);
        const std::filesystem::path cdir = std::filesystem::path(dir) / name;
        std::filesystem::create_directories(cdir);

        write_pgm((cdir / "pa.pgm").string(), rasterize(sp, View::PA, h, w, thickness_px));
        write_pgm((cdir / "lat.pgm").string(), rasterize(sp, View::LAT, h, w, thickness_px));
        Rng trunk(si);
        write_ppm((cdir / "pa_rgb.ppm").string(),
                  make_trunk_image(sp, View::PA, h, w, trunk.fork(7).next_u64()));
        write_ppm((cdir / "lat_rgb.ppm").string(),
                  make_trunk_image(sp, View::LAT, h, w, trunk.fork(8).next_u64()));
        atomic_write_file((cdir / "truth.json").string(), spine_truth_json(sp, b));
        cases[i] = name;
    };

    const int workers = std::min(std::max(threads, 1), n);
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) emit(i);
        return cases;
    }
    std::vector<std::thread> pool;
    std::exception_ptr first_error;
    std::mutex error_mu;
    for (int t = 0; t < workers; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (int i = t; i < n; i += workers) emit(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
    return cases;
}

}  // namespace spine3d
