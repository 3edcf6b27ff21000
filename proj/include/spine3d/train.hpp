#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "spine3d/euformer.hpp"

namespace spine3d {

struct TrainingPair {
    Tensor rgb;  // (h,w,3) in [0,1]
    Tensor map;  // (h,w,1) in [0,1]
    View view = View::PA;
};

struct TrainConfig {
    double learning_rate = 1e-4;
    double lr_decay_factor = 0.1;
    int lr_decay_every = 50;  // epochs
    int epochs = 1;
    int steps = 0;  // if > 0, explicit optimizer-step budget overriding epochs
    double loss_weight_g = 0.01;
    int batch_size = 4;
    std::uint64_t seed = 1;
    bool augment_rotation = true;
    double rotation_max_deg = 10.0;
    bool augment_hflip = true;
    int disc_base_channels = 64;
    double adam_beta1 = 0.5;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
};

/// Stepwise decay: learning_rate scaled by lr_decay_factor^(epoch /
/// lr_decay_every). The default 0.1 factor is computed as division by an
/// integer power of ten so the decade values are exact doubles.
double lr_at_epoch(const TrainConfig& cfg, int epoch);

struct TrainLogRow {
    int step;
    double lr, loss_g, loss_mse, loss_total, loss_d;
};

struct TrainResult {
    EUFormerConfig config;
    GeneratorParams gen;
    DiscriminatorParams disc;
    std::vector<TrainLogRow> history;
};

/// Alternating discriminator/generator optimization with Adam, seeded
/// augmentation (rotation, horizontal flip), and per-epoch lr decay.
TrainResult train(const std::vector<TrainingPair>& pairs, const EUFormerConfig& gcfg,
                  const TrainConfig& tcfg);

class Adam {
public:
    Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    /// Applies one update to every watched parameter in `refs` from the
    /// gradients recorded on `tape`, replacing each with a plain tensor.
    void step(const ParamRefs& refs, const Tape& tape, double lr);

private:
    struct Slot {
        std::vector<double> m, v;
    };
    std::vector<Slot> slots_;
    int t_ = 0;
    double beta1_, beta2_, eps_;
};

// ---- checkpoints & history ----

struct Checkpoint {
    EUFormerConfig config;
    std::map<std::string, Tensor> tensors;
};

/// Single-file format: magic, version, a JSON header (config + manifest of
/// name/dims/element offset), then all values as little-endian 64-bit floats.
void save_checkpoint(const std::string& path, const EUFormerConfig& cfg, const ParamRefs& named);
Checkpoint load_checkpoint(const std::string& path);
/// Assigns checkpoint tensors into `refs` by name; throws on missing names or
/// shape mismatches.
void load_into(const ParamRefs& refs, const Checkpoint& ckpt);

void write_history_csv(const std::string& path, const std::vector<TrainLogRow>& rows);

}  // namespace spine3d
