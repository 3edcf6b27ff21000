#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "spine3d/euformer.hpp"

using namespace spine3d;

namespace {

Tensor random_tensor(std::vector<int> dims, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::size_t n = 1;
    for (int d : dims) n *= static_cast<std::size_t>(d);
    std::vector<Real> v(n);
    for (auto& x : v) x = static_cast<Real>(rng.uniform(lo, hi));
    return Tensor(std::move(dims), std::move(v));
}

void zero_(Tensor& t) { t = Tensor(t.dims()); }

// Brute-force CMHA oracle: plain loops, no tensor ops.
std::vector<double> cmha_oracle(const Tensor& x, const CmhaParams& p) {
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    const int heads = p.heads, d = c / heads, hw = h * w;
    auto pw = [&](const Tensor& in, const Tensor& wgt) {
        std::vector<double> out(static_cast<std::size_t>(hw) * c, 0.0);
        for (int pxi = 0; pxi < hw; ++pxi)
            for (int oc = 0; oc < c; ++oc)
                for (int ic = 0; ic < c; ++ic)
                    out[static_cast<std::size_t>(pxi) * c + oc] +=
                        in.values()[pxi * c + ic] * wgt.values()[ic * c + oc];
        return out;
    };
    auto dw = [&](const std::vector<double>& in, const Tensor& wgt) {
        std::vector<double> out(static_cast<std::size_t>(hw) * c, 0.0);
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                for (int ch = 0; ch < c; ++ch)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const int iy = y - 1 + ky, ix = xx - 1 + kx;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                            out[(static_cast<std::size_t>(y) * w + xx) * c + ch] +=
                                in[(static_cast<std::size_t>(iy) * w + ix) * c + ch] *
                                wgt.values()[(ky * 3 + kx) * c + ch];
                        }
        return out;
    };
    auto q = dw(pw(x, p.wq_point), p.wq_depth);
    auto k = dw(pw(x, p.wk_point), p.wk_depth);
    auto v = dw(pw(x, p.wv_point), p.wv_depth);
    std::vector<double> out(static_cast<std::size_t>(hw) * c, 0.0);
    for (int hi = 0; hi < heads; ++hi) {
        const double alpha = p.alpha.values()[hi];
        std::vector<double> a(static_cast<std::size_t>(d) * d, 0.0);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) {
                double acc = 0;
                for (int pxi = 0; pxi < hw; ++pxi)
                    acc += k[static_cast<std::size_t>(pxi) * c + hi * d + i] *
                           q[static_cast<std::size_t>(pxi) * c + hi * d + j];
                a[static_cast<std::size_t>(i) * d + j] = acc / alpha;
            }
        for (int i = 0; i < d; ++i) {  // row softmax
            double mx = a[static_cast<std::size_t>(i) * d];
            for (int j = 1; j < d; ++j) mx = std::max(mx, a[static_cast<std::size_t>(i) * d + j]);
            double den = 0;
            for (int j = 0; j < d; ++j) {
                a[static_cast<std::size_t>(i) * d + j] =
                    std::exp(a[static_cast<std::size_t>(i) * d + j] - mx);
                den += a[static_cast<std::size_t>(i) * d + j];
            }
            for (int j = 0; j < d; ++j) a[static_cast<std::size_t>(i) * d + j] /= den;
        }
        for (int pxi = 0; pxi < hw; ++pxi)
            for (int j = 0; j < d; ++j) {
                double acc = 0;
                for (int i = 0; i < d; ++i)
                    acc += v[static_cast<std::size_t>(pxi) * c + hi * d + i] *
                           a[static_cast<std::size_t>(i) * d + j];
                out[static_cast<std::size_t>(pxi) * c + hi * d + j] =
                    acc + x.values()[pxi * c + hi * d + j];
            }
    }
    return out;
}

}  // namespace

TEST_CASE("cmha: zero value branch is the identity") {
    Rng rng(2);
    Tensor x = random_tensor({3, 4, 4}, rng);
    CmhaParams p = CmhaParams::init(4, 2, rng);
    zero_(p.wv_point);
    zero_(p.wv_depth);
    Tensor y = cmha_forward(x, p);
    REQUIRE(y.dims() == x.dims());
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("cmha: c=1 closed form V + x") {
    Rng rng(3);
    Tensor x = random_tensor({2, 3, 1}, rng);
    CmhaParams p = CmhaParams::init(1, 1, rng);
    Tensor v = conv2d(conv2d(x, p.wv_point, 1, 0, 1), p.wv_depth, 1, 1, 1);
    Tensor y = cmha_forward(x, p);
    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(y.values()[i] == doctest::Approx(v.values()[i] + x.values()[i]).epsilon(1e-12));
}

TEST_CASE("cmha: zero Q,K with identity V gives channel-mean mixing") {
    Rng rng(4);
    Tensor x = random_tensor({2, 2, 4}, rng);
    CmhaParams p = CmhaParams::init(4, 1, rng);
    zero_(p.wq_point);
    zero_(p.wq_depth);
    zero_(p.wk_point);
    zero_(p.wk_depth);
    // identity 1x1
    std::vector<Real> eye(16, 0.0);
    for (int i = 0; i < 4; ++i) eye[static_cast<std::size_t>(i) * 4 + i] = 1.0;
    p.wv_point = Tensor({1, 1, 4, 4}, eye);
    // delta 3x3 depthwise
    std::vector<Real> delta(9 * 4, 0.0);
    for (int ch = 0; ch < 4; ++ch) delta[(1 * 3 + 1) * 4 + static_cast<std::size_t>(ch)] = 1.0;
    p.wv_depth = Tensor({3, 3, 1, 4}, delta);

    CmhaInspection insp;
    Tensor y = cmha_forward(x, p, &insp);
    REQUIRE(insp.attention.size() == 1);
    for (Real a : insp.attention[0].values()) CHECK(a == doctest::Approx(0.25));
    for (int px = 0; px < 4; ++px) {
        double mean = 0;
        for (int ch = 0; ch < 4; ++ch) mean += x.values()[px * 4 + ch];
        mean /= 4.0;
        for (int ch = 0; ch < 4; ++ch)
            CHECK(y.values()[px * 4 + ch] ==
                  doctest::Approx(mean + x.values()[px * 4 + ch]).epsilon(1e-12));
    }
}

TEST_CASE("cmha: matches brute-force oracle and attention rows sum to 1") {
    Rng rng(5);
    for (int heads : {1, 2, 4}) {
        Tensor x = random_tensor({3, 2, 8}, rng);
        CmhaParams p = CmhaParams::init(8, heads, rng);
        CmhaInspection insp;
        Tensor y = cmha_forward(x, p, &insp);
        auto oracle = cmha_oracle(x, p);
        REQUIRE(y.size() == oracle.size());
        for (std::size_t i = 0; i < y.size(); ++i)
            CHECK(y.values()[i] == doctest::Approx(oracle[i]).epsilon(1e-10));
        REQUIRE(static_cast<int>(insp.attention.size()) == heads);
        const int d = 8 / heads;
        for (const Tensor& a : insp.attention) {
            REQUIRE(a.dims() == std::vector<int>{d, d});
            for (int i = 0; i < d; ++i) {
                double row = 0;
                for (int j = 0; j < d; ++j) row += a.values()[static_cast<std::size_t>(i) * d + j];
                CHECK(row == doctest::Approx(1.0).epsilon(1e-6));
            }
        }
    }
    CHECK_THROWS_AS(CmhaParams::init(6, 4, rng), ShapeError);
}

TEST_CASE("cmha/leff preserve shape on randomized dims") {
    Rng rng(6);
    for (int trial = 0; trial < 10; ++trial) {
        const int h = rng.uniform_int(1, 6), w = rng.uniform_int(1, 6);
        const int heads = 1 << rng.uniform_int(0, 2);
        const int c = heads * rng.uniform_int(1, 4);
        Tensor x = random_tensor({h, w, c}, rng);
        CmhaParams cp = CmhaParams::init(c, heads, rng);
        LeffParams lp = LeffParams::init(c, rng);
        Tensor yc = cmha_forward(x, cp);
        Tensor yl = leff_forward(x, lp);
        CHECK(yc.dims() == x.dims());
        CHECK(yl.dims() == x.dims());
    }
}

TEST_CASE("leff: zero projection is the identity") {
    Rng rng(7);
    Tensor x = random_tensor({3, 3, 2}, rng);
    LeffParams p = LeffParams::init(2, rng);
    zero_(p.w_project);
    Tensor y = leff_forward(x, p);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("leff: matches hand-composed chain") {
    Rng rng(8);
    Tensor x = random_tensor({2, 2, 2}, rng);
    LeffParams p = LeffParams::init(2, rng);
    Tensor expect =
        add(x, conv2d(gelu(conv2d(gelu(conv2d(x, p.w_expand, 1, 0, 1)), p.w_depth, 1, 1, 8)),
                      p.w_project, 1, 0, 1));
    Tensor y = leff_forward(x, p);
    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(y.values()[i] == doctest::Approx(expect.values()[i]).epsilon(1e-12));
}

TEST_CASE("etb: shape preservation, zero-weight passthrough, staged composition") {
    Rng rng(9);
    for (int trial = 0; trial < 5; ++trial) {
        const int h = rng.uniform_int(2, 5), w = rng.uniform_int(2, 5);
        const int heads = 1 << rng.uniform_int(0, 1);
        const int c = heads * rng.uniform_int(1, 3);
        Tensor x = random_tensor({h, w, c}, rng);
        EtbParams p = EtbParams::init(c, heads, rng);
        CHECK(etb_forward(x, p).dims() == x.dims());
    }
    {
        Tensor x = random_tensor({4, 2, 4}, rng);
        EtbParams p = EtbParams::init(4, 2, rng);
        zero_(p.cmha.wv_point);
        zero_(p.cmha.wv_depth);
        zero_(p.leff.w_project);
        Tensor y = etb_forward(x, p);
        for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.values()[i] == x.values()[i]);
    }
    {
        Tensor x = random_tensor({4, 2, 4}, rng);
        EtbParams p = EtbParams::init(4, 2, rng);
        Tensor a = add(x, cmha_attention(layer_norm_channels(x, p.ln1.gamma, p.ln1.beta), p.cmha));
        Tensor expect = add(a, leff_body(layer_norm_channels(a, p.ln2.gamma, p.ln2.beta), p.leff));
        Tensor y = etb_forward(x, p);
        for (std::size_t i = 0; i < x.size(); ++i)
            CHECK(y.values()[i] == doctest::Approx(expect.values()[i]).epsilon(1e-12));
    }
}

TEST_CASE("downsample/upsample shapes and delta-kernel index map") {
    Rng rng(10);
    Tensor x = random_tensor({8, 8, 4}, rng);
    DownParams dp = DownParams::init(4, rng);
    Tensor dn = downsample(x, dp);
    REQUIRE(dn.dims() == std::vector<int>{4, 4, 8});
    UpParams up_p = UpParams::init(8, rng);
    Tensor up_t = upsample(dn, up_p);
    REQUIRE(up_t.dims() == std::vector<int>{8, 8, 4});
    CHECK_THROWS_AS(downsample(random_tensor({7, 8, 4}, rng), dp), ShapeError);

    // delta conv (center tap, channel ci -> ci for ci < c/2): downsample output
    // follows out[oy,ox, ci*4 + dy*2 + dx] = x[2oy+dy, 2ox+dx, ci]
    std::vector<Real> delta(3 * 3 * 4 * 2, 0.0);
    for (int ci = 0; ci < 2; ++ci) delta[((1 * 3 + 1) * 4 + ci) * 2 + static_cast<std::size_t>(ci)] = 1.0;
    DownParams dd{Tensor({3, 3, 4, 2}, delta)};
    Tensor dn2 = downsample(x, dd);
    for (int oy = 0; oy < 4; ++oy)
        for (int ox = 0; ox < 4; ++ox)
            for (int ci = 0; ci < 2; ++ci)
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx)
                        CHECK(dn2.values()[(oy * 4 + ox) * 8 + ci * 4 + dy * 2 + dx] ==
                              x.values()[((2 * oy + dy) * 8 + (2 * ox + dx)) * 4 + ci]);
}

TEST_CASE("generator: shape, range, determinism, divisibility") {
    Rng rng(11);
    EUFormerConfig cfg;  // defaults: scales 3, base 16, heads 1/2/4
    GeneratorParams gp = GeneratorParams::init(cfg, rng);
    Tensor rgb = random_tensor({8, 8, 3}, rng, 0.0, 1.0);
    Tensor m1 = generator_forward(rgb, cfg, gp);
    REQUIRE(m1.dims() == std::vector<int>{8, 8, 1});
    for (Real v : m1.values()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
    Tensor m2 = generator_forward(rgb, cfg, gp);
    for (std::size_t i = 0; i < m1.size(); ++i) CHECK(m1.values()[i] == m2.values()[i]);
    // h must be divisible by 2^(scales-1) = 4
    CHECK_THROWS_AS(generator_forward(random_tensor({22, 8, 3}, rng), cfg, gp), ShapeError);
}

TEST_CASE("generator: every parameter passes the gradient check on a tiny config") {
    Rng rng(12);
    EUFormerConfig cfg;
    cfg.scales = 2;
    cfg.base_channels = 2;
    cfg.etbs_per_scale = {1, 1};
    cfg.heads_per_scale = {1, 2};
    GeneratorParams gp = GeneratorParams::init(cfg, rng);
    Tensor rgb = random_tensor({4, 4, 3}, rng, 0.0, 1.0);
    Tensor coeffs = random_tensor({4, 4, 1}, rng);
    ParamRefs refs = gp.entries();
    std::vector<Tensor> params;
    for (auto& [name, t] : refs) params.push_back(*t);
    auto f = [&](const std::vector<Tensor>& ps) {
        GeneratorParams local = gp;
        ParamRefs lrefs = local.entries();
        for (std::size_t i = 0; i < lrefs.size(); ++i) *lrefs[i].second = ps[i];
        return sum(mul(generator_forward(rgb, cfg, local), coeffs));
    };
    GradReport rep = grad_check(f, params, 1e-4, 1e-3);
    INFO("worst ", rep.worst, " rel=", rep.max_rel_err);
    CHECK(rep.pass);
}

TEST_CASE("discriminator: logit grid shapes follow the conv recurrence") {
    Rng rng(13);
    DiscriminatorParams small = DiscriminatorParams::init(rng, 4, 4);
    Tensor rgb = random_tensor({320, 160, 3}, rng, 0.0, 1.0);
    Tensor map = random_tensor({320, 160, 1}, rng, 0.0, 1.0);
    Tensor logits = discriminator_forward(rgb, map, small);
    // per-layer extents: 320 -> 160 -> 80 -> 40 -> 39 -> 38 ; 160 -> ... -> 18
    REQUIRE(logits.dims() == std::vector<int>{38, 18, 1});

    Tensor rgb2 = random_tensor({64, 32, 3}, rng, 0.0, 1.0);
    Tensor map2 = random_tensor({64, 32, 1}, rng, 0.0, 1.0);
    Tensor logits2 = discriminator_forward(rgb2, map2, small);
    REQUIRE(logits2.dims() == std::vector<int>{6, 2, 1});

    CHECK_THROWS_AS(discriminator_forward(rgb, map2, small), ShapeError);

    // stated width plan at base 64
    DiscriminatorParams full = DiscriminatorParams::init(rng, 4, 64);
    CHECK(full.conv[0].dims() == std::vector<int>{4, 4, 4, 64});
    CHECK(full.conv[1].dims() == std::vector<int>{4, 4, 64, 128});
    CHECK(full.conv[2].dims() == std::vector<int>{4, 4, 128, 256});
    CHECK(full.conv[3].dims() == std::vector<int>{4, 4, 256, 512});
    CHECK(full.conv[4].dims() == std::vector<int>{4, 4, 512, 1});
}

TEST_CASE("discriminator: zero weights give 0.5 patch probabilities") {
    Rng rng(14);
    DiscriminatorParams p = DiscriminatorParams::init(rng, 4, 4);
    for (auto& w : p.conv) zero_(w);
    Tensor rgb = random_tensor({64, 32, 3}, rng, 0.0, 1.0);
    Tensor map = random_tensor({64, 32, 1}, rng, 0.0, 1.0);
    Tensor logits = discriminator_forward(rgb, map, p);
    Tensor kappa = sigmoid(logits);
    for (Real v : logits.values()) CHECK(v == 0.0);
    for (Real v : kappa.values()) CHECK(v == doctest::Approx(0.5));
}

TEST_CASE("losses: closed forms") {
    {
        Tensor lg = loss_generator(Tensor({1}, {1.0 - 1e-7}), Tensor({1}, {1.0}));
        CHECK(lg.value() == doctest::Approx(0.0).epsilon(1e-6));
        CHECK(lg.value() >= 0.0);
    }
    {
        Tensor lg = loss_generator(Tensor({1}, {0.5}), Tensor({1}, {1.0}));
        CHECK(lg.value() == doctest::Approx(0.6931).epsilon(1e-4));
    }
    {
        Tensor lg = loss_generator(Tensor({2}, {0.5, 0.5}), Tensor({2}, {1.0, 0.0}));
        CHECK(lg.value() == doctest::Approx(1.3863).epsilon(1e-4));
    }
    Rng rng(15);
    Tensor a = random_tensor({2, 3, 1}, rng, 0.0, 1.0);
    Tensor b = random_tensor({2, 3, 1}, rng, 0.0, 1.0);
    CHECK(loss_mse(a, a).value() == 0.0);
    Tensor a1 = add_scalar(a, 1.0);
    CHECK(loss_mse(a1, a).value() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(loss_mse(a, b).value() == doctest::Approx(loss_mse(b, a).value()).epsilon(1e-15));
    Tensor d({2, 1}, {0.5, 0.0});
    CHECK(loss_mse(Tensor({2, 1}, {0.5, 0.0}), Tensor({2, 1}, {0.0, 0.0})).value() ==
          doctest::Approx(0.125).epsilon(1e-12));

    CHECK(loss_total(Tensor::scalar(1.0), Tensor::scalar(0.0), 0.01).value() ==
          doctest::Approx(0.01).epsilon(1e-15));
    CHECK(loss_total(Tensor::scalar(0.0), Tensor::scalar(0.0), 0.01).value() == 0.0);
    CHECK(loss_total(Tensor::scalar(2.0), Tensor::scalar(0.5), 0.01).value() ==
          doctest::Approx(0.52).epsilon(1e-12));

    Tensor kr = random_tensor({3, 3}, rng, 0.01, 0.99);
    Tensor yr({3, 3}, {1, 0, 1, 0, 1, 0, 1, 0, 1});
    CHECK(loss_generator(kr, yr).value() >= 0.0);
}

TEST_CASE("flops_attention: counting formula and quadratic spatial growth") {
    CHECK(flops_attention(16, 16, 32, 1, FlopsMode::Channel) == doctest::Approx(524288.0));
    const double c1 = flops_attention(16, 16, 32, 4, FlopsMode::Channel);
    const double c2 = flops_attention(32, 16, 32, 4, FlopsMode::Channel);
    CHECK(c2 / c1 == doctest::Approx(2.0).epsilon(1e-12));
    const double s1 = flops_attention(16, 16, 32, 4, FlopsMode::Spatial);
    const double s2 = flops_attention(32, 16, 32, 4, FlopsMode::Spatial);
    CHECK(s2 / s1 == doctest::Approx(4.0).epsilon(1e-12));
    // channel cheaper whenever c < hw
    for (int c : {8, 16, 32, 64})
        for (int side : {8, 16, 32}) {
            if (c >= side * side) continue;
            CHECK(flops_attention(side, side, c, 1, FlopsMode::Channel) <
                  flops_attention(side, side, c, 1, FlopsMode::Spatial));
        }
}
