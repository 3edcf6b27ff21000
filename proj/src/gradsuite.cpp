#include "spine3d/gradsuite.hpp"

#include <chrono>
#include <functional>
#include <ostream>

#include "spine3d/euformer.hpp"

namespace spine3d {

namespace {

Tensor random_tensor(std::vector<int> dims, Rng& rng, double lo = 0.0, double hi = 1.0) {
    std::size_t n = 1;
    for (int d : dims) n *= static_cast<std::size_t>(d);
    std::vector<Real> v(n);
    for (auto& x : v) x = static_cast<Real>(rng.uniform(lo, hi));
    return Tensor(std::move(dims), std::move(v));
}

// fixed-coefficient weighted sum: turns any output into a scalar loss that
// exercises every output element
Tensor wsum(const Tensor& t, const Tensor& coeffs) { return sum(mul(t, coeffs)); }

using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

}  // namespace

std::vector<GradSuiteEntry> run_gradient_suite() {
    std::vector<GradSuiteEntry> out;
    Rng rng(1234);
    const double h = 1e-4, tol = 1e-3;

    auto run = [&](const std::string& name, const LossFn& f, const std::vector<Tensor>& params) {
        const auto t0 = std::chrono::steady_clock::now();
        GradSuiteEntry e;
        e.name = name;
        e.report = grad_check(f, params, h, tol);
        e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out.push_back(std::move(e));
    };

    {
        Tensor a = random_tensor({2, 3}, rng), b = random_tensor({2, 3}, rng);
        Tensor c = random_tensor({2, 3}, rng);
        run("add", [&](const std::vector<Tensor>& p) { return wsum(add(p[0], p[1]), c); }, {a, b});
        run("sub", [&](const std::vector<Tensor>& p) { return wsum(sub(p[0], p[1]), c); }, {a, b});
        run("mul", [&](const std::vector<Tensor>& p) { return wsum(mul(p[0], p[1]), c); }, {a, b});
        run("add_scalar",
            [&](const std::vector<Tensor>& p) { return wsum(add_scalar(p[0], 0.7), c); }, {a});
        run("mul_scalar",
            [&](const std::vector<Tensor>& p) { return wsum(mul_scalar(p[0], -1.3), c); }, {a});
        Tensor s({1}, {1.7});
        run("div_scalar",
            [&](const std::vector<Tensor>& p) { return wsum(div_scalar(p[0], p[1]), c); }, {a, s});
    }
    {
        Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
        Tensor c = random_tensor({3, 2}, rng);
        run("matmul", [&](const std::vector<Tensor>& p) { return wsum(matmul(p[0], p[1]), c); },
            {a, b});
    }
    {
        Tensor x = random_tensor({4, 4, 2}, rng);
        Tensor w = random_tensor({3, 3, 2, 3}, rng);
        Tensor c1 = random_tensor({4, 4, 3}, rng);
        run("conv2d",
            [&](const std::vector<Tensor>& p) { return wsum(conv2d(p[0], p[1], 1, 1, 1), c1); },
            {x, w});
        Tensor c2 = random_tensor({2, 2, 3}, rng);
        run("conv2d stride2",
            [&](const std::vector<Tensor>& p) { return wsum(conv2d(p[0], p[1], 2, 1, 1), c2); },
            {x, w});
        Tensor wd = random_tensor({3, 3, 1, 2}, rng);
        Tensor c3 = random_tensor({4, 4, 2}, rng);
        run("conv2d depthwise",
            [&](const std::vector<Tensor>& p) { return wsum(conv2d(p[0], p[1], 1, 1, 2), c3); },
            {x, wd});
    }
    {
        Tensor x = random_tensor({4, 4, 4}, rng);
        Tensor cu = random_tensor({2, 2, 16}, rng);
        Tensor cs = random_tensor({8, 8, 1}, rng);
        run("pixel_unshuffle",
            [&](const std::vector<Tensor>& p) { return wsum(pixel_unshuffle(p[0], 2), cu); }, {x});
        run("pixel_shuffle",
            [&](const std::vector<Tensor>& p) { return wsum(pixel_shuffle(p[0], 2), cs); }, {x});
    }
    {
        Tensor x = random_tensor({2, 4}, rng, -2.0, 2.0);
        Tensor c = random_tensor({2, 4}, rng);
        run("softmax axis0",
            [&](const std::vector<Tensor>& p) { return wsum(softmax(p[0], 0), c); }, {x});
        run("softmax axis1",
            [&](const std::vector<Tensor>& p) { return wsum(softmax(p[0], 1), c); }, {x});
        run("gelu", [&](const std::vector<Tensor>& p) { return wsum(gelu(p[0]), c); }, {x});
        run("sigmoid", [&](const std::vector<Tensor>& p) { return wsum(sigmoid(p[0]), c); }, {x});
        run("reshape",
            [&](const std::vector<Tensor>& p) { return wsum(reshape(p[0], {4, 2}), reshape(c, {4, 2})); },
            {x});
        run("transpose",
            [&](const std::vector<Tensor>& p) { return wsum(transpose(p[0]), reshape(c, {4, 2})); },
            {x});
    }
    {
        // keep inputs away from the kink at 0 so central differences are clean
        Tensor x({2, 3}, {0.5, -0.7, 1.2, -1.4, 0.9, -0.3});
        Tensor c = random_tensor({2, 3}, rng);
        run("leaky_relu",
            [&](const std::vector<Tensor>& p) { return wsum(leaky_relu(p[0], 0.2), c); }, {x});
    }
    {
        Tensor x = random_tensor({2, 3, 4}, rng);
        Tensor gamma = random_tensor({4}, rng, 0.5, 1.5);
        Tensor beta = random_tensor({4}, rng);
        Tensor c = random_tensor({2, 3, 4}, rng);
        run("layer_norm",
            [&](const std::vector<Tensor>& p) { return wsum(layer_norm_channels(p[0], p[1], p[2]), c); },
            {x, gamma, beta});
        run("instance_norm",
            [&](const std::vector<Tensor>& p) { return wsum(instance_norm(p[0], p[1], p[2]), c); },
            {x, gamma, beta});
    }
    {
        Tensor x = random_tensor({3, 4}, rng);
        Tensor y = random_tensor({3, 2}, rng);
        Tensor c1 = random_tensor({3, 2}, rng);
        Tensor c2 = random_tensor({3, 6}, rng);
        run("slice_last",
            [&](const std::vector<Tensor>& p) { return wsum(slice_last(p[0], 1, 3), c1); }, {x});
        run("concat_last",
            [&](const std::vector<Tensor>& p) { return wsum(concat_last({p[0], p[1]}), c2); },
            {x, y});
    }
    {
        Tensor a = random_tensor({2, 3}, rng), b = random_tensor({2, 3}, rng);
        run("sum", [&](const std::vector<Tensor>& p) { return sum(p[0]); }, {a});
        run("mean", [&](const std::vector<Tensor>& p) { return mean(p[0]); }, {a});
        run("mse_loss", [&](const std::vector<Tensor>& p) { return mse_loss(p[0], p[1]); }, {a, b});
        Tensor k = random_tensor({2, 3}, rng, 0.05, 0.95);
        Tensor y({2, 3}, {1, 0, 1, 0, 1, 0});
        run("bce_sum", [&](const std::vector<Tensor>& p) { return bce_sum(p[0], y); }, {k});
        run("bce_mean", [&](const std::vector<Tensor>& p) { return bce_mean(p[0], y); }, {k});
    }

    {
        // attention / feed-forward / transformer blocks at c = 4, two heads
        EUFormerConfig cfg;
        cfg.scales = 1;
        cfg.base_channels = 4;
        cfg.etbs_per_scale = {1};
        cfg.heads_per_scale = {2};
        Tensor x = random_tensor({3, 3, 4}, rng, -0.5, 0.5);
        Tensor c = random_tensor({3, 3, 4}, rng);

        CmhaParams base_cmha = CmhaParams::init(4, 2, rng);
        std::vector<Tensor> cmha_params;
        {
            ParamRefs refs;
            base_cmha.collect("cmha", refs);
            for (auto& [name, t] : refs) cmha_params.push_back(*t);
        }
        run("cmha_forward",
            [&](const std::vector<Tensor>& p) {
                CmhaParams cp = base_cmha;
                ParamRefs refs;
                cp.collect("cmha", refs);
                for (std::size_t i = 0; i < refs.size(); ++i) *refs[i].second = p[i];
                return wsum(cmha_forward(x, cp), c);
            },
            cmha_params);

        LeffParams base_leff = LeffParams::init(4, rng);
        std::vector<Tensor> leff_params;
        {
            ParamRefs refs;
            base_leff.collect("leff", refs);
            for (auto& [name, t] : refs) leff_params.push_back(*t);
        }
        run("leff_forward",
            [&](const std::vector<Tensor>& p) {
                LeffParams lp = base_leff;
                ParamRefs refs;
                lp.collect("leff", refs);
                for (std::size_t i = 0; i < refs.size(); ++i) *refs[i].second = p[i];
                return wsum(leff_forward(x, lp), c);
            },
            leff_params);

        EtbParams base_etb = EtbParams::init(4, 2, rng);
        std::vector<Tensor> etb_params;
        {
            ParamRefs refs;
            base_etb.collect("etb", refs);
            for (auto& [name, t] : refs) etb_params.push_back(*t);
        }
        run("etb_forward",
            [&](const std::vector<Tensor>& p) {
                EtbParams ep = base_etb;
                ParamRefs refs;
                ep.collect("etb", refs);
                for (std::size_t i = 0; i < refs.size(); ++i) *refs[i].second = p[i];
                return wsum(etb_forward(x, ep), c);
            },
            etb_params);
    }

    {
        // discriminator + adversarial/reconstruction losses on a small pair;
        // fixed streams chosen so no leaky_relu pre-activation sits within the
        // finite-difference step of its kink
        Rng drng(77), irng(11);
        DiscriminatorParams base_disc = DiscriminatorParams::init(drng, 4, 4);
        Tensor rgb = random_tensor({24, 24, 3}, irng);
        Tensor fake = random_tensor({24, 24, 1}, irng, 0.05, 0.95);
        Tensor truth = random_tensor({24, 24, 1}, irng);
        std::vector<Tensor> disc_params;
        for (auto& [name, t] : base_disc.entries()) disc_params.push_back(*t);
        run("discriminator+losses",
            [&](const std::vector<Tensor>& p) {
                DiscriminatorParams dp = base_disc;
                ParamRefs refs = dp.entries();
                for (std::size_t i = 0; i < refs.size(); ++i) *refs[i].second = p[i];
                Tensor logits = discriminator_forward(rgb, fake, dp);
                Tensor kappa = sigmoid(logits);
                Tensor labels = Tensor::full(kappa.dims(), 1.0);
                return loss_total(loss_generator(kappa, labels), loss_mse(fake, truth), 0.01);
            },
            disc_params);
    }

    {
        // the full generator, scales 2, base 8 channels, on a 16x8 input
        EUFormerConfig cfg;
        cfg.scales = 2;
        cfg.base_channels = 8;
        cfg.etbs_per_scale = {1, 1};
        cfg.heads_per_scale = {1, 2};
        Rng grng(5);
        GeneratorParams base_gen = GeneratorParams::init(cfg, grng);
        Tensor rgb = random_tensor({16, 8, 3}, rng);
        Tensor c = random_tensor({16, 8, 1}, rng);
        std::vector<Tensor> gen_params;
        for (auto& [name, t] : base_gen.entries()) gen_params.push_back(*t);
        run("generator 16x8",
            [&](const std::vector<Tensor>& p) {
                GeneratorParams gp = base_gen;
                ParamRefs refs = gp.entries();
                for (std::size_t i = 0; i < refs.size(); ++i) *refs[i].second = p[i];
                return wsum(generator_forward(rgb, cfg, gp), c);
            },
            gen_params);
    }

    return out;
}

bool gradient_suite_passed(const std::vector<GradSuiteEntry>& entries) {
    for (const GradSuiteEntry& e : entries)
        if (!e.report.pass) return false;
    return !entries.empty();
}

void print_gradient_suite(std::ostream& os, const std::vector<GradSuiteEntry>& entries) {
    for (const GradSuiteEntry& e : entries) {
        os << (e.report.pass ? "  ok   " : "  FAIL ") << e.name << "  rel_err "
           << e.report.max_rel_err << "  (" << e.seconds << " s";
        if (!e.report.pass) os << ", worst " << e.report.worst;
        os << ")\n";
    }
}

}  // namespace spine3d
