#include "spine3d/euformer.hpp"

#include <cmath>

namespace spine3d {

namespace {

/// Gaussian fan-in initialization for a conv kernel (kh,kw,cin_g,cout).
Tensor conv_init(std::vector<int> dims, Rng& rng) {
    const double fan_in = static_cast<double>(dims[0]) * dims[1] * dims[2];
    const double sigma = std::sqrt(1.0 / fan_in);
    std::size_t n = 1;
    for (int d : dims) n *= static_cast<std::size_t>(d);
    std::vector<Real> v(n);
    for (auto& x : v) x = static_cast<Real>(sigma * rng.normal());
    return Tensor(std::move(dims), std::move(v));
}

}  // namespace

// ---------------------------------------------------------------- params

LayerNormParams LayerNormParams::init(int c) {
    return {Tensor::full({c}, Real(1)), Tensor({c})};
}

void LayerNormParams::collect(const std::string& prefix, ParamRefs& out) {
    out.emplace_back(prefix + ".gamma", &gamma);
    out.emplace_back(prefix + ".beta", &beta);
}

CmhaParams CmhaParams::init(int c, int heads, Rng& rng) {
    check(heads >= 1 && c % heads == 0,
          "heads=" + std::to_string(heads) + " must divide channels=" + std::to_string(c));
    CmhaParams p;
    p.heads = heads;
    p.wq_point = conv_init({1, 1, c, c}, rng);
    p.wk_point = conv_init({1, 1, c, c}, rng);
    p.wv_point = conv_init({1, 1, c, c}, rng);
    p.wq_depth = conv_init({3, 3, 1, c}, rng);
    p.wk_depth = conv_init({3, 3, 1, c}, rng);
    p.wv_depth = conv_init({3, 3, 1, c}, rng);
    p.alpha = Tensor::full({heads}, static_cast<Real>(std::sqrt(static_cast<double>(c) / heads)));
    return p;
}

void CmhaParams::collect(const std::string& prefix, ParamRefs& out) {
    out.emplace_back(prefix + ".wq_point", &wq_point);
    out.emplace_back(prefix + ".wk_point", &wk_point);
    out.emplace_back(prefix + ".wv_point", &wv_point);
    out.emplace_back(prefix + ".wq_depth", &wq_depth);
    out.emplace_back(prefix + ".wk_depth", &wk_depth);
    out.emplace_back(prefix + ".wv_depth", &wv_depth);
    out.emplace_back(prefix + ".alpha", &alpha);
}

LeffParams LeffParams::init(int c, Rng& rng) {
    LeffParams p;
    p.w_expand = conv_init({1, 1, c, 4 * c}, rng);
    p.w_depth = conv_init({3, 3, 1, 4 * c}, rng);
    p.w_project = conv_init({1, 1, 4 * c, c}, rng);
    return p;
}

void LeffParams::collect(const std::string& prefix, ParamRefs& out) {
    out.emplace_back(prefix + ".w_expand", &w_expand);
    out.emplace_back(prefix + ".w_depth", &w_depth);
    out.emplace_back(prefix + ".w_project", &w_project);
}

EtbParams EtbParams::init(int c, int heads, Rng& rng) {
    EtbParams p;
    p.ln1 = LayerNormParams::init(c);
    p.ln2 = LayerNormParams::init(c);
    p.cmha = CmhaParams::init(c, heads, rng);
    p.leff = LeffParams::init(c, rng);
    return p;
}

void EtbParams::collect(const std::string& prefix, ParamRefs& out) {
    ln1.collect(prefix + ".ln1", out);
    ln2.collect(prefix + ".ln2", out);
    cmha.collect(prefix + ".cmha", out);
    leff.collect(prefix + ".leff", out);
}

void EUFormerConfig::validate() const {
    check(scales >= 2, "scales must be >= 2");
    check(base_channels >= 2 && base_channels % 2 == 0, "base_channels must be even and >= 2");
    check(static_cast<int>(etbs_per_scale.size()) == scales,
          "etbs_per_scale must list one entry per scale (last = bottleneck)");
    check(static_cast<int>(heads_per_scale.size()) == scales,
          "heads_per_scale must list one entry per scale");
    for (int s = 0; s < scales; ++s) {
        check(etbs_per_scale[static_cast<std::size_t>(s)] >= 1, "each scale needs >= 1 block");
        const int c = channels_at(s);
        const int h = heads_per_scale[static_cast<std::size_t>(s)];
        check(h >= 1 && c % h == 0, "heads must divide channels at scale " + std::to_string(s));
    }
    check(input_channels >= 1 && output_channels >= 1, "channel counts must be positive");
}

DownParams DownParams::init(int c, Rng& rng) {
    check(c % 2 == 0, "downsample needs an even channel count");
    return {conv_init({3, 3, c, c / 2}, rng)};
}

void DownParams::collect(const std::string& prefix, ParamRefs& out) {
    out.emplace_back(prefix + ".conv", &conv);
}

UpParams UpParams::init(int c, Rng& rng) { return {conv_init({3, 3, c, 2 * c}, rng)}; }

void UpParams::collect(const std::string& prefix, ParamRefs& out) {
    out.emplace_back(prefix + ".conv", &conv);
}

GeneratorParams GeneratorParams::init(const EUFormerConfig& cfg, Rng& rng) {
    cfg.validate();
    GeneratorParams p;
    p.input_proj = conv_init({3, 3, cfg.input_channels, cfg.base_channels}, rng);
    for (int s = 0; s < cfg.scales - 1; ++s) {
        const int c = cfg.channels_at(s);
        const int heads = cfg.heads_per_scale[static_cast<std::size_t>(s)];
        std::vector<EtbParams> stack;
        for (int i = 0; i < cfg.etbs_per_scale[static_cast<std::size_t>(s)]; ++i)
            stack.push_back(EtbParams::init(c, heads, rng));
        p.encoder.push_back(std::move(stack));
        p.down.push_back(DownParams::init(c, rng));
    }
    {
        const int c = cfg.channels_at(cfg.scales - 1);
        const int heads = cfg.heads_per_scale[static_cast<std::size_t>(cfg.scales - 1)];
        for (int i = 0; i < cfg.etbs_per_scale[static_cast<std::size_t>(cfg.scales - 1)]; ++i)
            p.bottleneck.push_back(EtbParams::init(c, heads, rng));
    }
    for (int s = cfg.scales - 2; s >= 0; --s) {
        const int c = cfg.channels_at(s);
        p.up.push_back(UpParams::init(2 * c, rng));
        p.fuse.push_back(conv_init({1, 1, 2 * c, c}, rng));
        const int heads = cfg.heads_per_scale[static_cast<std::size_t>(s)];
        std::vector<EtbParams> stack;
        for (int i = 0; i < cfg.etbs_per_scale[static_cast<std::size_t>(s)]; ++i)
            stack.push_back(EtbParams::init(c, heads, rng));
        p.decoder.push_back(std::move(stack));
    }
    p.output_proj = conv_init({3, 3, cfg.base_channels, cfg.output_channels}, rng);
    return p;
}

ParamRefs GeneratorParams::entries() {
    ParamRefs out;
    out.emplace_back("gen.input_proj", &input_proj);
    for (std::size_t s = 0; s < encoder.size(); ++s) {
        for (std::size_t i = 0; i < encoder[s].size(); ++i)
            encoder[s][i].collect("gen.enc" + std::to_string(s) + ".etb" + std::to_string(i), out);
        down[s].collect("gen.down" + std::to_string(s), out);
    }
    for (std::size_t i = 0; i < bottleneck.size(); ++i)
        bottleneck[i].collect("gen.bottleneck.etb" + std::to_string(i), out);
    for (std::size_t d = 0; d < decoder.size(); ++d) {
        up[d].collect("gen.up" + std::to_string(d), out);
        out.emplace_back("gen.fuse" + std::to_string(d), &fuse[d]);
        for (std::size_t i = 0; i < decoder[d].size(); ++i)
            decoder[d][i].collect("gen.dec" + std::to_string(d) + ".etb" + std::to_string(i), out);
    }
    out.emplace_back("gen.output_proj", &output_proj);
    return out;
}

DiscriminatorParams DiscriminatorParams::init(Rng& rng, int in_channels, int base_channels) {
    check(in_channels >= 1 && base_channels >= 1, "discriminator channel counts must be positive");
    DiscriminatorParams p;
    p.base_channels = base_channels;
    const int widths[5] = {base_channels, 2 * base_channels, 4 * base_channels,
                           8 * base_channels, 1};
    int cin = in_channels;
    for (int l = 0; l < 5; ++l) {
        p.conv.push_back(conv_init({4, 4, cin, widths[l]}, rng));
        if (l >= 1 && l <= 3) p.norm.push_back(LayerNormParams::init(widths[l]));
        cin = widths[l];
    }
    return p;
}

ParamRefs DiscriminatorParams::entries() {
    ParamRefs out;
    for (std::size_t l = 0; l < conv.size(); ++l)
        out.emplace_back("disc.conv" + std::to_string(l + 1), &conv[l]);
    for (std::size_t i = 0; i < norm.size(); ++i)
        norm[i].collect("disc.norm" + std::to_string(i + 2), out);
    return out;
}

// ---------------------------------------------------------------- forward

Tensor cmha_attention(const Tensor& x, const CmhaParams& p, CmhaInspection* insp) {
    check(x.rank() == 3, "cmha input must be (h,w,c), got " + x.shape_str());
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    check(c == p.channels(), "cmha channel mismatch: input " + std::to_string(c) +
                                 " vs params " + std::to_string(p.channels()));
    check(c % p.heads == 0, "heads must divide channels");
    const int d = c / p.heads;
    const int hw = h * w;

    Tensor q = conv2d(conv2d(x, p.wq_point, 1, 0, 1), p.wq_depth, 1, 1, c);
    Tensor k = conv2d(conv2d(x, p.wk_point, 1, 0, 1), p.wk_depth, 1, 1, c);
    Tensor v = conv2d(conv2d(x, p.wv_point, 1, 0, 1), p.wv_depth, 1, 1, c);

    std::vector<Tensor> heads_out;
    heads_out.reserve(static_cast<std::size_t>(p.heads));
    for (int i = 0; i < p.heads; ++i) {
        Tensor qh = reshape(slice_last(q, i * d, (i + 1) * d), {hw, d});
        Tensor kh = transpose(reshape(slice_last(k, i * d, (i + 1) * d), {hw, d}));
        Tensor vh = reshape(slice_last(v, i * d, (i + 1) * d), {hw, d});
        Tensor alpha_i = slice_last(p.alpha, i, i + 1);
        Tensor a = softmax(div_scalar(matmul(kh, qh), alpha_i), 1);  // d x d, rows sum to 1
        if (insp) insp->attention.push_back(Tensor(a.dims(), {a.values().begin(), a.values().end()}));
        heads_out.push_back(matmul(vh, a));
    }
    Tensor merged = p.heads == 1 ? heads_out[0] : concat_last(heads_out);
    return reshape(merged, {h, w, c});
}

Tensor cmha_forward(const Tensor& x, const CmhaParams& p, CmhaInspection* insp) {
    return add(x, cmha_attention(x, p, insp));
}

Tensor leff_body(const Tensor& x, const LeffParams& p) {
    check(x.rank() == 3, "leff input must be (h,w,c), got " + x.shape_str());
    const int c4 = p.w_depth.dim(3);
    Tensor t = gelu(conv2d(x, p.w_expand, 1, 0, 1));
    t = gelu(conv2d(t, p.w_depth, 1, 1, c4));
    return conv2d(t, p.w_project, 1, 0, 1);
}

Tensor leff_forward(const Tensor& x, const LeffParams& p) { return add(x, leff_body(x, p)); }

Tensor etb_forward(const Tensor& x, const EtbParams& p) {
    Tensor a = add(x, cmha_attention(layer_norm_channels(x, p.ln1.gamma, p.ln1.beta), p.cmha));
    return add(a, leff_body(layer_norm_channels(a, p.ln2.gamma, p.ln2.beta), p.leff));
}

Tensor downsample(const Tensor& x, const DownParams& p) {
    return pixel_unshuffle(conv2d(x, p.conv, 1, 1, 1), 2);
}

Tensor upsample(const Tensor& x, const UpParams& p) {
    return pixel_shuffle(conv2d(x, p.conv, 1, 1, 1), 2);
}

Tensor generator_forward(const Tensor& rgb, const EUFormerConfig& cfg, const GeneratorParams& p) {
    cfg.validate();
    check(rgb.rank() == 3 && rgb.dim(2) == cfg.input_channels,
          "generator input must be (h,w," + std::to_string(cfg.input_channels) + "), got " +
              rgb.shape_str());
    const int div = cfg.divisor();
    check(rgb.dim(0) % div == 0 && rgb.dim(1) % div == 0,
          "input " + rgb.shape_str() + " not divisible by " + std::to_string(div));

    Tensor cur = conv2d(rgb, p.input_proj, 1, 1, 1);
    std::vector<Tensor> skips;
    for (int s = 0; s < cfg.scales - 1; ++s) {
        for (const auto& etb : p.encoder[static_cast<std::size_t>(s)]) cur = etb_forward(cur, etb);
        skips.push_back(cur);
        cur = downsample(cur, p.down[static_cast<std::size_t>(s)]);
    }
    for (const auto& etb : p.bottleneck) cur = etb_forward(cur, etb);
    for (int s = cfg.scales - 2; s >= 0; --s) {
        const std::size_t di = static_cast<std::size_t>(cfg.scales - 2 - s);
        cur = upsample(cur, p.up[di]);
        cur = conv2d(concat_last({cur, skips[static_cast<std::size_t>(s)]}), p.fuse[di], 1, 0, 1);
        for (const auto& etb : p.decoder[di]) cur = etb_forward(cur, etb);
    }
    return sigmoid(conv2d(cur, p.output_proj, 1, 1, 1));
}

Tensor discriminator_forward(const Tensor& rgb, const Tensor& map, const DiscriminatorParams& p) {
    check(rgb.rank() == 3 && map.rank() == 3, "discriminator inputs must be (h,w,c)");
    check(rgb.dim(0) == map.dim(0) && rgb.dim(1) == map.dim(1),
          "rgb " + rgb.shape_str() + " and map " + map.shape_str() + " differ in h,w");
    check(rgb.dim(2) + map.dim(2) == p.conv[0].dim(2),
          "discriminator expects " + std::to_string(p.conv[0].dim(2)) + " input channels");
    Tensor cur = concat_last({rgb, map});
    const int strides[5] = {2, 2, 2, 1, 1};
    std::size_t norm_idx = 0;
    for (int l = 0; l < 5; ++l) {
        cur = conv2d(cur, p.conv[static_cast<std::size_t>(l)], strides[l], 1, 1);
        if (l >= 1 && l <= 3) {
            const auto& nrm = p.norm[norm_idx++];
            cur = instance_norm(cur, nrm.gamma, nrm.beta);
        }
        if (l < 4) cur = leaky_relu(cur, Real(0.2));
    }
    return cur;
}

// ---------------------------------------------------------------- losses / flops

Tensor loss_generator(const Tensor& kappa, const Tensor& y) { return bce_sum(kappa, y); }

Tensor loss_mse(const Tensor& gen, const Tensor& gt) { return mse_loss(gen, gt); }

Tensor loss_total(const Tensor& lg, const Tensor& l2, Real w) {
    return add(mul_scalar(lg, w), l2);
}

double flops_attention(int h, int w, int c, int heads, FlopsMode mode) {
    check(heads >= 1 && c % heads == 0, "heads must divide channels");
    const double hw = static_cast<double>(h) * w;
    const double cd = static_cast<double>(c);
    if (mode == FlopsMode::Channel) return 2.0 * cd * cd * hw / heads;
    return 2.0 * hw * hw * cd / heads;
}

}  // namespace spine3d
