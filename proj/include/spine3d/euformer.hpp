#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "spine3d/tensor.hpp"

namespace spine3d {

/// Named mutable views of a parameter set, for optimizers and checkpoints.
using ParamRefs = std::vector<std::pair<std::string, Tensor*>>;

struct LayerNormParams {
    Tensor gamma, beta;

    static LayerNormParams init(int c);
    void collect(const std::string& prefix, ParamRefs& out);
};

/// Channel-wise multi-head attention weights. Each of Q/K/V is projected by a
/// pointwise (1x1) conv c->c followed by a depthwise 3x3 conv; alpha is one
/// learnable temperature per head.
struct CmhaParams {
    Tensor wq_point, wk_point, wv_point;  // (1,1,c,c)
    Tensor wq_depth, wk_depth, wv_depth;  // (3,3,1,c)
    Tensor alpha;                         // (heads)
    int heads = 1;

    static CmhaParams init(int c, int heads, Rng& rng);
    void collect(const std::string& prefix, ParamRefs& out);
    int channels() const { return wq_point.dim(3); }
};

struct LeffParams {
    Tensor w_expand;   // (1,1,c,4c)
    Tensor w_depth;    // (3,3,1,4c)
    Tensor w_project;  // (1,1,4c,c)

    static LeffParams init(int c, Rng& rng);
    void collect(const std::string& prefix, ParamRefs& out);
};

struct EtbParams {
    LayerNormParams ln1, ln2;
    CmhaParams cmha;
    LeffParams leff;

    static EtbParams init(int c, int heads, Rng& rng);
    void collect(const std::string& prefix, ParamRefs& out);
};

struct EUFormerConfig {
    int scales = 3;
    std::vector<int> etbs_per_scale = {1, 2, 2};  // last entry is the bottleneck
    int base_channels = 16;
    std::vector<int> heads_per_scale = {1, 2, 4};
    int input_channels = 3;
    int output_channels = 1;

    void validate() const;
    int channels_at(int scale) const { return base_channels << scale; }
    /// Input h and w must be divisible by this.
    int divisor() const { return 1 << (scales - 1); }
};

struct DownParams {
    Tensor conv;  // (3,3,c,c/2); unshuffle r=2 afterwards -> 2c channels
    static DownParams init(int c, Rng& rng);
    void collect(const std::string& prefix, ParamRefs& out);
};

struct UpParams {
    Tensor conv;  // (3,3,c,2c); shuffle r=2 afterwards -> c/2 channels
    static UpParams init(int c, Rng& rng);
    void collect(const std::string& prefix, ParamRefs& out);
};

struct GeneratorParams {
    Tensor input_proj;                            // (3,3,in,base)
    std::vector<std::vector<EtbParams>> encoder;  // scales-1 stacks
    std::vector<DownParams> down;                 // scales-1
    std::vector<EtbParams> bottleneck;
    std::vector<UpParams> up;                     // scales-1, deepest first
    std::vector<Tensor> fuse;                     // (1,1,2c,c) per decoder scale
    std::vector<std::vector<EtbParams>> decoder;  // scales-1 stacks, deepest first
    Tensor output_proj;                           // (3,3,base,out)

    static GeneratorParams init(const EUFormerConfig& cfg, Rng& rng);
    ParamRefs entries();
};

/// Five-layer patch discriminator over the channel-concatenated (rgb, map)
/// pair: 4x4 convs, strides 2,2,2,1,1, widths b,2b,4b,8b,1, pad 1,
/// leaky_relu(0.2) after layers 1-4, per-channel normalization on layers 2-4.
struct DiscriminatorParams {
    std::vector<Tensor> conv;            // 5 kernels
    std::vector<LayerNormParams> norm;   // layers 2-4
    int base_channels = 64;

    static DiscriminatorParams init(Rng& rng, int in_channels = 4, int base_channels = 64);
    ParamRefs entries();
};

/// Per-head channel attention maps (d x d, rows summing to 1) captured during
/// a forward pass.
struct CmhaInspection {
    std::vector<Tensor> attention;
};

/// Attention branch only (V . softmax(K . Q / alpha)), no residual.
Tensor cmha_attention(const Tensor& x, const CmhaParams& p, CmhaInspection* insp = nullptr);
/// Full module: x + attention branch.
Tensor cmha_forward(const Tensor& x, const CmhaParams& p, CmhaInspection* insp = nullptr);

/// Feed-forward branch only (pointwise expand, GELU, depthwise, GELU,
/// pointwise project), no residual.
Tensor leff_body(const Tensor& x, const LeffParams& p);
/// Full module: x + feed-forward branch.
Tensor leff_forward(const Tensor& x, const LeffParams& p);

/// Pre-normalized transformer block: residual attention over ln1, then
/// residual feed-forward over ln2.
Tensor etb_forward(const Tensor& x, const EtbParams& p);

Tensor downsample(const Tensor& x, const DownParams& p);  // (h,w,c) -> (h/2,w/2,2c)
Tensor upsample(const Tensor& x, const UpParams& p);      // (h,w,c) -> (2h,2w,c/2)

Tensor generator_forward(const Tensor& rgb, const EUFormerConfig& cfg, const GeneratorParams& p);
/// Returns the patch logit grid (h',w',1); probabilities are sigmoid(logits).
Tensor discriminator_forward(const Tensor& rgb, const Tensor& map, const DiscriminatorParams& p);

/// Adversarial generator term: sum over entries of the binary cross-entropy
/// between patch probabilities kappa and labels y.
Tensor loss_generator(const Tensor& kappa, const Tensor& y);
/// Reconstruction term: mean squared error over pixels and samples.
Tensor loss_mse(const Tensor& gen, const Tensor& gt);
/// Combined objective: w * lg + l2.
Tensor loss_total(const Tensor& lg, const Tensor& l2, Real w);

enum class FlopsMode { Channel, Spatial };

/// Multiply-accumulate count of the two attention matmuls. Channel mode:
/// 2 * c^2 * hw / heads. Spatial mode (traditional attention reference):
/// 2 * (hw)^2 * c / heads.
double flops_attention(int h, int w, int c, int heads, FlopsMode mode);

}  // namespace spine3d
