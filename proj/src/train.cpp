#include "spine3d/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "spine3d/image.hpp"

namespace spine3d {

double lr_at_epoch(const TrainConfig& cfg, int epoch) {
    check(cfg.learning_rate >= 0, "learning_rate must be non-negative");
    check(cfg.lr_decay_every > 0, "lr_decay_every must be positive");
    const int k = epoch / cfg.lr_decay_every;
    if (k == 0) return cfg.learning_rate;
    if (std::abs(cfg.lr_decay_factor - 0.1) < 1e-15)
        return cfg.learning_rate / std::pow(10.0, k);  // exact decades
    return cfg.learning_rate * std::pow(cfg.lr_decay_factor, k);
}

void Adam::step(const ParamRefs& refs, const Tape& tape, double lr) {
    if (slots_.empty()) slots_.resize(refs.size());
    check(slots_.size() == refs.size(), "optimizer state does not match parameter list");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < refs.size(); ++i) {
        Tensor* p = refs[i].second;
        Tensor grad = tape.grad(*p);
        auto& s = slots_[i];
        const std::size_t n = p->size();
        if (s.m.empty()) {
            s.m.assign(n, 0.0);
            s.v.assign(n, 0.0);
        }
        std::vector<Real> nv(p->values().begin(), p->values().end());
        auto gv = grad.values();
        for (std::size_t j = 0; j < n; ++j) {
            const double g = gv[j];
            s.m[j] = beta1_ * s.m[j] + (1.0 - beta1_) * g;
            s.v[j] = beta2_ * s.v[j] + (1.0 - beta2_) * g * g;
            nv[j] -= static_cast<Real>(lr * (s.m[j] / bc1) / (std::sqrt(s.v[j] / bc2) + eps_));
        }
        *p = Tensor(p->dims(), std::move(nv));
    }
}

namespace {

TrainingPair augment(const TrainingPair& pair, const TrainConfig& cfg, Rng& rng) {
    TrainingPair out = pair;
    if (cfg.augment_rotation) {
        const double deg = rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg);
        out.rgb = rotate_bilinear(out.rgb, deg);
        out.map = rotate_bilinear(out.map, deg);
    }
    if (cfg.augment_hflip && rng.uniform() < 0.5) {
        out.rgb = hflip(out.rgb);
        out.map = hflip(out.map);
    }
    return out;
}

}  // namespace

TrainResult train(const std::vector<TrainingPair>& pairs, const EUFormerConfig& gcfg,
                  const TrainConfig& tcfg) {
    if (pairs.empty()) throw PipelineError("training requires at least one pair");
    gcfg.validate();
    check(tcfg.batch_size >= 1, "batch_size must be positive");
    for (const auto& p : pairs)
        check(p.rgb.rank() == 3 && p.map.rank() == 3 && p.rgb.dim(0) == p.map.dim(0) &&
                  p.rgb.dim(1) == p.map.dim(1),
              "rgb and map must agree in h,w");

    const int n = static_cast<int>(pairs.size());
    const int steps_per_epoch = (n + tcfg.batch_size - 1) / tcfg.batch_size;
    const int total_steps =
        tcfg.steps > 0 ? tcfg.steps : std::max(1, tcfg.epochs) * steps_per_epoch;

    Rng root(tcfg.seed);
    Rng init_rng = root.fork(1);
    Rng order_rng = root.fork(2);
    Rng aug_rng = root.fork(3);

    TrainResult result;
    result.config = gcfg;
    result.gen = GeneratorParams::init(gcfg, init_rng);
    result.disc = DiscriminatorParams::init(init_rng, gcfg.input_channels + gcfg.output_channels,
                                            tcfg.disc_base_channels);

    Adam adam_g(tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps);
    Adam adam_d(tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps);

    std::vector<int> order(pairs.size());
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::size_t cursor = order.size();  // forces a shuffle before the first draw

    for (int step = 0; step < total_steps; ++step) {
        const int epoch = step / steps_per_epoch;
        const double lr = lr_at_epoch(tcfg, epoch);

        std::vector<TrainingPair> batch;
        batch.reserve(static_cast<std::size_t>(tcfg.batch_size));
        for (int b = 0; b < tcfg.batch_size; ++b) {
            if (cursor >= order.size()) {
                for (int i = n - 1; i > 0; --i)
                    std::swap(order[static_cast<std::size_t>(i)],
                              order[static_cast<std::size_t>(order_rng.uniform_int(0, i))]);
                cursor = 0;
            }
            batch.push_back(augment(pairs[static_cast<std::size_t>(order[cursor++])], tcfg, aug_rng));
        }

        // ---- discriminator step: real pairs -> 1, generated pairs -> 0
        double loss_d_val;
        {
            std::vector<Tensor> fakes;
            fakes.reserve(batch.size());
            for (const auto& s : batch) fakes.push_back(generator_forward(s.rgb, gcfg, result.gen));

            Tape tape;
            ParamRefs drefs = result.disc.entries();
            for (auto& [name, t] : drefs) *t = tape.watch(*t);
            Tensor acc = Tensor::scalar(0);
            for (std::size_t i = 0; i < batch.size(); ++i) {
                Tensor kr = sigmoid(discriminator_forward(batch[i].rgb, batch[i].map, result.disc));
                Tensor kf = sigmoid(discriminator_forward(batch[i].rgb, fakes[i], result.disc));
                acc = add(acc, bce_mean(kr, Tensor::full(kr.dims(), Real(1))));
                acc = add(acc, bce_mean(kf, Tensor(kf.dims())));
            }
            Tensor loss_d = mul_scalar(acc, Real(0.5) / static_cast<Real>(batch.size()));
            tape.backward(loss_d);
            adam_d.step(drefs, tape, lr);
            loss_d_val = loss_d.value();
        }

        // ---- generator step: adversarial sum + reconstruction mean
        double lg_val, l2_val, total_val;
        {
            Tape tape;
            ParamRefs grefs = result.gen.entries();
            for (auto& [name, t] : grefs) *t = tape.watch(*t);
            Tensor lg = Tensor::scalar(0);
            Tensor l2_acc = Tensor::scalar(0);
            for (const auto& s : batch) {
                Tensor fake = generator_forward(s.rgb, gcfg, result.gen);
                Tensor kappa = sigmoid(discriminator_forward(s.rgb, fake, result.disc));
                lg = add(lg, loss_generator(kappa, Tensor::full(kappa.dims(), Real(1))));
                l2_acc = add(l2_acc, loss_mse(fake, s.map));
            }
            Tensor l2 = mul_scalar(l2_acc, Real(1) / static_cast<Real>(batch.size()));
            Tensor total = loss_total(lg, l2, static_cast<Real>(tcfg.loss_weight_g));
            tape.backward(total);
            adam_g.step(grefs, tape, lr);
            lg_val = lg.value();
            l2_val = l2.value();
            total_val = total.value();
        }

        result.history.push_back({step + 1, lr, lg_val, l2_val, total_val, loss_d_val});
    }
    return result;
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[8] = {'S', '3', 'D', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
    return v;
}

void put_f64le(std::string& out, double d) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double get_f64le(const std::string& in, std::size_t at) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i)
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
    return std::bit_cast<double>(bits);
}

nlohmann::json config_to_json(const EUFormerConfig& cfg) {
    return {{"scales", cfg.scales},
            {"etbs_per_scale", cfg.etbs_per_scale},
            {"base_channels", cfg.base_channels},
            {"heads_per_scale", cfg.heads_per_scale},
            {"input_channels", cfg.input_channels},
            {"output_channels", cfg.output_channels}};
}

EUFormerConfig config_from_json(const nlohmann::json& j) {
    EUFormerConfig cfg;
    cfg.scales = j.at("scales").get<int>();
    cfg.etbs_per_scale = j.at("etbs_per_scale").get<std::vector<int>>();
    cfg.base_channels = j.at("base_channels").get<int>();
    cfg.heads_per_scale = j.at("heads_per_scale").get<std::vector<int>>();
    cfg.input_channels = j.at("input_channels").get<int>();
    cfg.output_channels = j.at("output_channels").get<int>();
    return cfg;
}

}  // namespace

void save_checkpoint(const std::string& path, const EUFormerConfig& cfg, const ParamRefs& named) {
    nlohmann::json manifest = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& [name, t] : named) {
        manifest.push_back({{"name", name}, {"dims", t->dims()}, {"offset", offset}});
        offset += t->size();
    }
    const std::string header =
        nlohmann::json{{"config", config_to_json(cfg)}, {"tensors", manifest}}.dump();

    std::string out;
    out.reserve(16 + header.size() + offset * 8);
    out.append(kMagic, sizeof(kMagic));
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(header.size()));
    out += header;
    for (const auto& [name, t] : named)
        for (Real v : t->values()) put_f64le(out, static_cast<double>(v));
    atomic_write_file(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PipelineError("cannot open checkpoint " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string buf = ss.str();
    if (buf.size() < 16 || std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0)
        throw PipelineError(path + ": not a checkpoint file");
    if (get_u32(buf, 8) != kVersion) throw PipelineError(path + ": unsupported checkpoint version");
    const std::size_t hlen = get_u32(buf, 12);
    if (buf.size() < 16 + hlen) throw PipelineError(path + ": truncated header");
    nlohmann::json header = nlohmann::json::parse(buf.substr(16, hlen));

    Checkpoint ckpt;
    ckpt.config = config_from_json(header.at("config"));
    const std::size_t payload = 16 + hlen;
    for (const auto& entry : header.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const std::vector<int> dims = entry.at("dims").get<std::vector<int>>();
        const std::size_t offset = entry.at("offset").get<std::size_t>();
        std::size_t count = 1;
        for (int d : dims) count *= static_cast<std::size_t>(d);
        const std::size_t at = payload + offset * 8;
        if (buf.size() < at + count * 8) throw PipelineError(path + ": truncated tensor " + name);
        std::vector<Real> vals(count);
        for (std::size_t i = 0; i < count; ++i)
            vals[i] = static_cast<Real>(get_f64le(buf, at + i * 8));
        ckpt.tensors.emplace(name, Tensor(dims, std::move(vals)));
    }
    return ckpt;
}

void load_into(const ParamRefs& refs, const Checkpoint& ckpt) {
    for (const auto& [name, t] : refs) {
        auto it = ckpt.tensors.find(name);
        if (it == ckpt.tensors.end()) throw PipelineError("checkpoint missing tensor " + name);
        check(it->second.dims() == t->dims(), "checkpoint tensor " + name + " has dims " +
                                                  it->second.shape_str() + ", expected " +
                                                  t->shape_str());
        *t = it->second;
    }
}

void write_history_csv(const std::string& path, const std::vector<TrainLogRow>& rows) {
    std::ostringstream os;
    os << "step,lr,loss_g,loss_mse,loss_total,loss_d\n";
    os.precision(12);
    for (const auto& r : rows)
        os << r.step << "," << r.lr << "," << r.loss_g << "," << r.loss_mse << "," << r.loss_total
           << "," << r.loss_d << "\n";
    atomic_write_file(path, os.str());
}

}  // namespace spine3d
