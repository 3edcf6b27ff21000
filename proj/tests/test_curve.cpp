#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "spine3d/curve.hpp"

using namespace spine3d;

namespace {

Tensor map_from_rows(int h, int w, const std::vector<std::vector<Real>>& rows) {
    std::vector<Real> v(static_cast<std::size_t>(h) * w, 0.0);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) v[static_cast<std::size_t>(r) * w + c] = rows[r][c];
    return Tensor({h, w}, std::move(v));
}

Curve2D sampled(const std::vector<Real>& zs, const std::vector<Real>& us) {
    Curve2D c;
    for (std::size_t i = 0; i < zs.size(); ++i) c.samples.push_back({zs[i], us[i]});
    return c;
}

PolyCurve poly_of(std::vector<Real> coeffs, Real lo = 0.0, Real hi = 1.0) {
    PolyCurve p;
    p.coeffs = std::move(coeffs);
    p.degree = static_cast<int>(p.coeffs.size()) - 1;
    p.z_min = lo;
    p.z_max = hi;
    return p;
}

}  // namespace

TEST_CASE("extract_curve: one bright pixel per row at a fixed column") {
    const int h = 6, w = 11;
    std::vector<Real> v(static_cast<std::size_t>(h) * w, 0.0);
    for (int r = 0; r < h; ++r) v[static_cast<std::size_t>(r) * w + 5] = 1.0;
    Tensor m({h, w, 1}, std::move(v));

    Curve2D c = extract_curve(m, 0.5);
    REQUIRE(c.samples.size() == 6);
    for (int r = 0; r < h; ++r) {
        CHECK(c.samples[r].u == 0.5);
        CHECK(c.samples[r].z == doctest::Approx(r / 5.0).epsilon(1e-15));
    }
}

TEST_CASE("extract_curve: symmetric blob centroid lands on its centre") {
    // (0.5, 1, 0.5) centred at column 4 of 9
    std::vector<std::vector<Real>> rows(3, std::vector<Real>(9, 0.0));
    for (auto& row : rows) {
        row[3] = 0.5;
        row[4] = 1.0;
        row[5] = 0.5;
    }
    Curve2D c = extract_curve(map_from_rows(3, 9, rows), 0.5);
    REQUIRE(c.samples.size() == 3);
    for (const auto& s : c.samples) CHECK(s.u == doctest::Approx(4.0 / 8.0).epsilon(1e-15));
}

TEST_CASE("extract_curve: weighted-mean arithmetic") {
    // row [0, 1, 3] -> centroid (0*0 + 1*1 + 2*3) / 4 = 1.75 -> u = 1.75 / 2
    std::vector<std::vector<Real>> rows(2, std::vector<Real>{0.0, 1.0, 3.0});
    Curve2D c = extract_curve(map_from_rows(2, 3, rows), 0.5);
    REQUIRE(c.samples.size() == 2);
    CHECK(c.samples[0].u == doctest::Approx(0.875).epsilon(1e-15));
    CHECK(c.samples[1].u == doctest::Approx(0.875).epsilon(1e-15));
}

TEST_CASE("extract_curve: dim rows are skipped, z stays strictly increasing") {
    std::vector<std::vector<Real>> rows(5, std::vector<Real>(4, 0.0));
    rows[0][1] = 1.0;
    rows[1][2] = 0.3;  // below threshold
    rows[2][2] = 1.0;
    rows[3][3] = 0.9;
    rows[4][0] = 0.2;  // below threshold
    Curve2D c = extract_curve(map_from_rows(5, 4, rows), 0.5);
    REQUIRE(c.samples.size() == 3);
    CHECK(c.samples[0].z == 0.0);
    CHECK(c.samples[1].z == 0.5);
    CHECK(c.samples[2].z == 0.75);
    for (std::size_t i = 1; i < c.samples.size(); ++i)
        CHECK(c.samples[i].z > c.samples[i - 1].z);
}

TEST_CASE("extract_curve: errors") {
    Tensor dark = Tensor::full({4, 4}, 0.1);
    CHECK_THROWS_AS(extract_curve(dark, 0.5), PipelineError);

    // a single passing row is not a curve
    std::vector<std::vector<Real>> rows(3, std::vector<Real>(3, 0.0));
    rows[1][1] = 1.0;
    CHECK_THROWS_AS(extract_curve(map_from_rows(3, 3, rows), 0.5), PipelineError);

    Tensor bright = Tensor::full({4, 4}, 0.9);
    CHECK_THROWS_AS(extract_curve(bright, 0.0), ShapeError);
    CHECK_THROWS_AS(extract_curve(bright, 1.0), ShapeError);
    CHECK_THROWS_AS(extract_curve(Tensor::full({4, 4, 3}, 0.9), 0.5), ShapeError);
}

TEST_CASE("fit_curve: collinear samples at degree 1 are exact") {
    std::vector<Real> zs, us;
    for (int i = 0; i <= 10; ++i) {
        const Real z = i / 10.0;
        zs.push_back(z);
        us.push_back(0.2 + 0.5 * z);
    }
    PolyCurve p = fit_curve(sampled(zs, us), 1);
    CHECK(p.residual_rms < 1e-10);
    CHECK(p.coeffs[0] == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(p.coeffs[1] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(p.z_min == 0.0);
    CHECK(p.z_max == 1.0);
}

TEST_CASE("fit_curve: recovers u = z^2 at degree 2") {
    std::vector<Real> zs, us;
    for (int i = 0; i <= 20; ++i) {
        const Real z = i / 20.0;
        zs.push_back(z);
        us.push_back(z * z);
    }
    PolyCurve p = fit_curve(sampled(zs, us), 2);
    REQUIRE(p.coeffs.size() == 3);
    CHECK(std::abs(p.coeffs[0]) < 1e-8);
    CHECK(std::abs(p.coeffs[1]) < 1e-8);
    CHECK(p.coeffs[2] == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("fit_curve: underdetermined systems are refused") {
    Curve2D three = sampled({0.0, 0.5, 1.0}, {0.1, 0.2, 0.3});
    CHECK_THROWS_AS(fit_curve(three, 5), ShapeError);
    CHECK_THROWS_AS(fit_curve(three, 3), ShapeError);
    CHECK_NOTHROW(fit_curve(three, 2));
    CHECK_THROWS_AS(fit_curve(three, 0), ShapeError);
}

TEST_CASE("fit_curve: normal equations hold (residual orthogonal to basis)") {
    Rng rng(41);
    std::vector<Real> zs, us;
    for (int i = 0; i <= 60; ++i) {
        const Real z = 0.05 + 0.9 * i / 60.0;
        zs.push_back(z);
        us.push_back(0.5 + 0.1 * std::sin(2.0 * M_PI * z) + 0.01 * rng.uniform(-1.0, 1.0));
    }
    Curve2D c = sampled(zs, us);
    PolyCurve p = fit_curve(c, 6);
    // least-squares characterization: sum_i r_i z_i^k = 0 for every basis power
    for (int k = 0; k <= 6; ++k) {
        long double dot = 0.0L;
        for (const auto& s : c.samples) {
            const long double r = s.u - p.eval(s.z);
            dot += r * std::pow(static_cast<long double>(s.z), k);
        }
        CHECK(std::abs(static_cast<double>(dot)) < 1e-8);
    }
    // reported residual matches a direct recomputation
    long double sse = 0.0L;
    for (const auto& s : c.samples) {
        const long double r = s.u - p.eval(s.z);
        sse += r * r;
    }
    CHECK(p.residual_rms ==
          doctest::Approx(std::sqrt(static_cast<double>(sse) / c.samples.size())).epsilon(1e-9));
}

TEST_CASE("fit_curve: residual is non-increasing in degree") {
    Rng rng(7);
    std::vector<Real> zs, us;
    for (int i = 0; i <= 40; ++i) {
        const Real z = i / 40.0;
        zs.push_back(z);
        us.push_back(0.5 + 0.15 * std::sin(2.0 * M_PI * z + 0.4) + 0.02 * rng.uniform(-1.0, 1.0));
    }
    Curve2D c = sampled(zs, us);
    Real prev = fit_curve(c, 1).residual_rms;
    for (int d = 2; d <= 8; ++d) {
        const Real cur = fit_curve(c, d).residual_rms;
        CHECK(cur <= prev + 1e-12);
        prev = cur;
    }
}

TEST_CASE("reconstruct3d: constant curves fuse to a straight vertical line") {
    PolyCurve pa = poly_of({0.5});
    PolyCurve lat = poly_of({0.5});
    Curve3D c = reconstruct3d(pa, lat, 32);
    REQUIRE(c.points.size() == 32);
    for (const auto& p : c.points) {
        CHECK(p[0] == 0.5);
        CHECK(p[1] == 0.5);
    }
    CHECK(c.points.front()[2] == 0.0);
    CHECK(c.points.back()[2] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("reconstruct3d: constant lateral view gives a planar curve") {
    PolyCurve pa = poly_of({0.5, -0.2, 0.3});
    PolyCurve lat = poly_of({0.37});
    Curve3D c = reconstruct3d(pa, lat, 64);
    for (const auto& p : c.points) {
        CHECK(p[1] == 0.37);
        CHECK(p[0] == doctest::Approx(pa.eval(p[2])).epsilon(1e-15));
    }
}

TEST_CASE("reconstruct3d: point evaluation at a grid z") {
    PolyCurve pa = poly_of({0.0, 1.0});   // pa(z) = z
    PolyCurve lat = poly_of({1.0, -1.0});  // lat(z) = 1 - z
    Curve3D c = reconstruct3d(pa, lat, 17);  // z grid i/16 includes 0.25
    const auto& p = c.points[4];
    CHECK(p[2] == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(p[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("reconstruct3d: z spacing is uniform and strictly increasing") {
    PolyCurve pa = poly_of({0.4, 0.1}, 0.1, 0.9);
    PolyCurve lat = poly_of({0.5, 0.05}, 0.2, 1.0);
    Curve3D c = reconstruct3d(pa, lat, 256);
    REQUIRE(c.points.size() == 256);
    CHECK(c.points.front()[2] == doctest::Approx(0.2).epsilon(1e-15));
    CHECK(c.points.back()[2] == doctest::Approx(0.9).epsilon(1e-15));
    const Real step = (0.9 - 0.2) / 255.0;
    for (std::size_t i = 1; i < c.points.size(); ++i) {
        CHECK(c.points[i][2] > c.points[i - 1][2]);
        CHECK(c.points[i][2] - c.points[i - 1][2] == doctest::Approx(step).epsilon(1e-9));
    }
}

TEST_CASE("reconstruct3d: errors") {
    PolyCurve a = poly_of({0.5}, 0.0, 0.4);
    PolyCurve b = poly_of({0.5}, 0.3, 1.0);
    CHECK_THROWS_AS(reconstruct3d(a, b, 32), PipelineError);  // overlap 0.1 < 0.25
    PolyCurve c = poly_of({0.5}, 0.0, 0.6);
    CHECK_NOTHROW(reconstruct3d(c, b, 32));  // overlap 0.3
    CHECK_THROWS_AS(reconstruct3d(c, b, 8), ShapeError);  // n too small
    PolyCurve d = poly_of({0.5}, 0.7, 1.0);
    CHECK_THROWS_AS(reconstruct3d(c, d, 32), PipelineError);  // disjoint
}

TEST_CASE("tangents: straight line and constant slopes") {
    Curve3D straight = reconstruct3d(poly_of({0.5}), poly_of({0.5}), 32);
    for (const auto& t : tangents(straight)) {
        CHECK(t[0] == 0.0);
        CHECK(t[1] == 0.0);
        CHECK(t[2] == 1.0);
    }

    // x(z) = z, y constant -> (1, 0, 1)/sqrt(2) everywhere
    Curve3D slope = reconstruct3d(poly_of({0.0, 1.0}), poly_of({0.3}), 32);
    const Real inv_sqrt2 = 1.0 / std::sqrt(2.0);
    for (const auto& t : tangents(slope)) {
        CHECK(t[0] == doctest::Approx(inv_sqrt2).epsilon(1e-15));
        CHECK(t[1] == 0.0);
        CHECK(t[2] == doctest::Approx(inv_sqrt2).epsilon(1e-15));
    }
}

TEST_CASE("tangents: closed-form slope 0.1*pi at z = 0") {
    // derivative of 0.05*sin(2 pi z) at 0 is 0.1*pi; a linear poly with that
    // slope reproduces the closed form exactly
    const Real s = 0.1 * M_PI;
    Curve3D c = reconstruct3d(poly_of({0.5, s}), poly_of({0.5}), 32);
    const auto t0 = tangents(c).front();
    const Real norm = std::sqrt(s * s + 1.0);
    CHECK(t0[0] == doctest::Approx(s / norm).epsilon(1e-15));
    CHECK(t0[1] == 0.0);
    CHECK(t0[2] == doctest::Approx(1.0 / norm).epsilon(1e-15));

    // same slope recovered through an actual fit of the sinusoid; degree 9
    // keeps the endpoint derivative error of the fit below the tolerance
    std::vector<Real> zs, us;
    for (int i = 0; i <= 100; ++i) {
        const Real z = i / 100.0;
        zs.push_back(z);
        us.push_back(0.5 + 0.05 * std::sin(2.0 * M_PI * z));
    }
    PolyCurve fitted = fit_curve(sampled(zs, us), 9);
    CHECK(fitted.deriv(0.0) == doctest::Approx(s).epsilon(1e-3));
}

TEST_CASE("tangents: unit norm and positive z component on random polynomials") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<Real> ca(7), cb(7);
        for (auto& x : ca) x = rng.uniform(-0.5, 0.5);
        for (auto& x : cb) x = rng.uniform(-0.5, 0.5);
        Curve3D c = reconstruct3d(poly_of(std::move(ca)), poly_of(std::move(cb)), 64);
        for (const auto& t : tangents(c)) {
            const Real norm = std::sqrt(t[0] * t[0] + t[1] * t[1] + t[2] * t[2]);
            CHECK(std::abs(norm - 1.0) < 1e-9);
            CHECK(t[2] > 0.0);
        }
    }
}

TEST_CASE("json serialization shapes") {
    Curve2D c2 = sampled({0.0, 1.0}, {0.25, 0.75});
    c2.view = View::LAT;
    const std::string j2 = curve2d_to_json(c2);
    CHECK(j2 == R"({"view":"LAT","samples":[[0.0,0.25],[1.0,0.75]]})");

    Curve3D c3 = reconstruct3d(poly_of({0.5}), poly_of({0.5}), 16);
    const std::string j3 = curve3d_to_json(c3);
    CHECK(j3.find("\"points\":[[0.5,0.5,0.0]") != std::string::npos);
    CHECK(j3.find("\"degree\":0") != std::string::npos);
}
