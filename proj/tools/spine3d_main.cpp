// spine3d command-line tool: dataset synthesis, biplanar assessment,
// grading, evaluation, training, and self-checks.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "spine3d/cobb.hpp"
#include "spine3d/common.hpp"
#include "spine3d/euformer.hpp"
#include "spine3d/gradsuite.hpp"
#include "spine3d/image.hpp"
#include "spine3d/metrics.hpp"
#include "spine3d/pipeline.hpp"
#include "spine3d/synth.hpp"
#include "spine3d/train.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace spine3d;

namespace {

/// Flag misuse that CLI11 cannot see (e.g. mutually dependent options).
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

int env_threads() {
    const char* s = std::getenv("SPINE3D_THREADS");
    if (!s) return 1;
    char* end = nullptr;
    const long v = std::strtol(s, &end, 10);
    if (end == s || v < 1) return 1;
    return static_cast<int>(std::min<long>(v, 256));
}

template <typename Fn>
void parallel_for(int n, int threads, Fn&& fn) {
    const int workers = std::min(std::max(threads, 1), n);
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::exception_ptr first_error;
    std::mutex error_mu;
    for (int t = 0; t < workers; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (int i = t; i < n; i += workers) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw PipelineError("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

std::vector<fs::path> case_dirs_under(const fs::path& root, const std::string& marker) {
    if (!fs::is_directory(root)) throw PipelineError("not a directory: " + root.string());
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory() && fs::exists(e.path() / marker)) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty())
        throw PipelineError("no case directories with " + marker + " under " + root.string());
    return dirs;
}

ordered_json metric_json(const MetricValue& v) {
    if (!v.defined) return nullptr;
    return v.value;
}

// ---- subcommands ----

struct SynthArgs {
    int n = 0;
    std::uint64_t seed = 1;
    std::string out;
    std::string band;
    int height = 320, width = 160;
    double thickness = 5.0;
};

void cmd_synth(const SynthArgs& a) {
    std::optional<Severity> band;
    if (!a.band.empty()) band = severity_from_name(a.band);
    const auto cases =
        write_dataset(a.out, a.n, a.seed, band, a.height, a.width, a.thickness, env_threads());
    ordered_json j;
    j["out"] = a.out;
    j["cases"] = cases.size();
    j["seed"] = a.seed;
    j["band"] = a.band.empty() ? ordered_json(nullptr) : ordered_json(a.band);
    std::cout << j.dump() << "\n";
}

struct AssessArgs {
    std::string pa, lat, params, out;
    bool maps_only = false;
    int height = 320, width = 160;
    double threshold = 0.5;
    int degree = 6;
    int samples = 256;
};

void cmd_assess(const AssessArgs& a) {
    if (!a.maps_only && a.params.empty())
        throw UsageError("assess needs --params CKPT unless --maps-only is given");
    const double t_start = now_seconds();

    Tensor pa_map, lat_map;
    double network_seconds = 0.0;
    if (a.maps_only) {
        pa_map = resize_nearest(read_pgm(a.pa), a.height, a.width);
        lat_map = resize_nearest(read_pgm(a.lat), a.height, a.width);
    } else {
        const Checkpoint ckpt = load_checkpoint(a.params);
        Rng rng(0);
        GeneratorParams gp = GeneratorParams::init(ckpt.config, rng);
        load_into(gp.entries(), ckpt);
        const Tensor pa_rgb = resize_bilinear(read_ppm(a.pa), a.height, a.width);
        const Tensor lat_rgb = resize_bilinear(read_ppm(a.lat), a.height, a.width);
        const double t_net = now_seconds();
        pa_map = generator_forward(pa_rgb, ckpt.config, gp);
        lat_map = generator_forward(lat_rgb, ckpt.config, gp);
        network_seconds = now_seconds() - t_net;
    }

    const double t_geo = now_seconds();
    const GeometryReport rep = geometry_from_maps(pa_map, lat_map, a.threshold, a.degree,
                                                  a.samples);
    const double geometry_seconds = now_seconds() - t_geo;

    fs::create_directories(a.out);
    const fs::path out_pa = fs::path(a.out) / "pa.pgm";
    const fs::path out_lat = fs::path(a.out) / "lat.pgm";
    write_pgm(out_pa.string(), pa_map);
    write_pgm(out_lat.string(), lat_map);

    ordered_json j;
    j["inputs"] = {{"pa", a.pa}, {"lat", a.lat}};
    j["maps"] = {{"pa", out_pa.string()}, {"lat", out_lat.string()}};
    j["maps_only"] = a.maps_only;
    j["fit"] = {{"degree", a.degree},
                {"pa_residual_rms", rep.pa_fit.residual_rms},
                {"lat_residual_rms", rep.lat_fit.residual_rms}};
    j["cobb3d"] = ordered_json::parse(cobb_to_json(rep.cobb));
    j["cobb2d_pa"] = ordered_json::parse(cobb_to_json(rep.cobb_pa2d));
    j["timing_s"] = {{"network", network_seconds},
                     {"geometry", geometry_seconds},
                     {"total", now_seconds() - t_start}};
    const std::string text = j.dump(2) + "\n";
    atomic_write_file((fs::path(a.out) / "report.json").string(), text);
    std::cout << text;
}

void cmd_grade(double angle) {
    ordered_json j;
    j["severity"] = severity_name(grade(angle));
    std::cout << j.dump() << "\n";
}

struct EvalArgs {
    std::string pred, truth, out;
    bool csv = false;
};

void cmd_eval(const EvalArgs& a) {
    const auto cases = case_dirs_under(a.truth, "truth.json");
    const int n = static_cast<int>(cases.size());

    struct Row {
        std::string name;
        double angle_pred = 0, angle_truth = 0;
        std::string grade_pred, grade_truth;
        double iou = 0, dice = 0;
    };
    std::vector<Row> rows(n);

    parallel_for(n, env_threads(), [&](int i) {
        Row& r = rows[i];
        r.name = cases[i].filename().string();
        const fs::path pred_case = fs::path(a.pred) / r.name;
        const ordered_json report = ordered_json::parse(read_file(pred_case / "report.json"));
        const ordered_json truth = ordered_json::parse(read_file(cases[i] / "truth.json"));
        r.angle_pred = report.at("cobb3d").at("max_angle_deg").get<double>();
        r.grade_pred = report.at("cobb3d").at("severity").get<std::string>();
        r.angle_truth = truth.at("analytic_angle_deg").get<double>();
        r.grade_truth = truth.at("grade").get<std::string>();

        double iou_sum = 0, dice_sum = 0;
        for (const char* stem : {"pa.pgm", "lat.pgm"}) {
            Tensor pred_map = read_pgm((pred_case / stem).string());
            const Tensor truth_map = read_pgm((cases[i] / stem).string());
            if (pred_map.dims() != truth_map.dims())
                pred_map = resize_nearest(pred_map, truth_map.dim(0), truth_map.dim(1));
            const IouDice d = iou_dice(pred_map, truth_map, 0.5);
            iou_sum += d.iou;
            dice_sum += d.dice;
        }
        r.iou = iou_sum / 2.0;
        r.dice = dice_sum / 2.0;
    });

    if (a.csv) {
        std::ostringstream csv;
        csv << "case,angle_pred,angle_truth,grade_pred,grade_truth,iou,dice\n";
        for (const Row& r : rows)
            csv << r.name << "," << r.angle_pred << "," << r.angle_truth << "," << r.grade_pred
                << "," << r.grade_truth << "," << r.iou << "," << r.dice << "\n";
        std::cout << csv.str();
        if (!a.out.empty()) atomic_write_file(a.out, csv.str());
        return;
    }

    std::vector<int> pred_labels(n), truth_labels(n);
    for (int i = 0; i < n; ++i) {
        pred_labels[i] = static_cast<int>(severity_from_name(rows[i].grade_pred));
        truth_labels[i] = static_cast<int>(severity_from_name(rows[i].grade_truth));
    }
    const ConfusionMatrix cm = confusion(pred_labels, truth_labels, 3);

    auto mean_sd = [](auto&& get) {
        return [get](const std::vector<Row>& rs) {
            double m = 0;
            for (const Row& r : rs) m += get(r);
            m /= static_cast<double>(rs.size());
            double ss = 0;
            for (const Row& r : rs) ss += (get(r) - m) * (get(r) - m);
            const double sd =
                rs.size() > 1 ? std::sqrt(ss / static_cast<double>(rs.size() - 1)) : 0.0;
            return std::pair<double, double>(m, sd);
        };
    };
    const auto [iou_mean, iou_sd] = mean_sd([](const Row& r) { return r.iou; })(rows);
    const auto [dice_mean, dice_sd] = mean_sd([](const Row& r) { return r.dice; })(rows);
    double angle_mae = 0;
    for (const Row& r : rows) angle_mae += std::abs(r.angle_pred - r.angle_truth);
    angle_mae /= static_cast<double>(n);

    ordered_json j;
    j["cases"] = ordered_json::array();
    for (const Row& r : rows)
        j["cases"].push_back({{"case", r.name},
                              {"angle_pred", r.angle_pred},
                              {"angle_truth", r.angle_truth},
                              {"grade_pred", r.grade_pred},
                              {"grade_truth", r.grade_truth},
                              {"iou", r.iou},
                              {"dice", r.dice}});
    j["iou"] = {{"mean", iou_mean}, {"sd", iou_sd}};
    j["dice"] = {{"mean", dice_mean}, {"sd", dice_sd}};
    j["angle_mae_deg"] = angle_mae;
    j["labels"] = {"normal-mild", "moderate", "severe"};
    j["confusion"] = ordered_json::array();
    for (int g = 0; g < 3; ++g) {
        ordered_json row = ordered_json::array();
        for (int p = 0; p < 3; ++p) row.push_back(cm.at(g, p));
        j["confusion"].push_back(row);
    }
    j["per_class"] = ordered_json::object();
    for (int c = 0; c < 3; ++c) {
        const ClassMetrics m = class_metrics(cm, c);
        j["per_class"][severity_name(static_cast<Severity>(c))] = {
            {"sensitivity", metric_json(m.sensitivity)},
            {"specificity", metric_json(m.specificity)},
            {"precision", metric_json(m.precision)},
            {"npv", metric_json(m.npv)},
            {"accuracy", metric_json(m.accuracy)}};
    }
    try {
        j["macro_sensitivity"] = macro_avg_sensitivity(cm);
    } catch (const ShapeError&) {
        j["macro_sensitivity"] = nullptr;
    }
    const std::string text = j.dump(2) + "\n";
    std::cout << text;
    if (!a.out.empty()) atomic_write_file(a.out, text);
}

struct TrainArgs {
    std::string data, out, history;
    int steps = 0;
    std::uint64_t seed = 1;
    double lr = 1e-4;
    int batch = 4;
    int disc_base = 16;
    int scales = 2;
    int base_channels = 8;
    std::vector<int> etbs = {1};
    std::vector<int> heads = {1};
    int height = 0, width = 0;
    bool no_augment = false;
};

std::vector<int> broadcast_per_scale(std::vector<int> v, int scales, const char* what) {
    if (static_cast<int>(v.size()) == 1) v.assign(scales, v[0]);
    if (static_cast<int>(v.size()) != scales)
        throw UsageError(std::string(what) + " needs 1 or scales entries");
    return v;
}

void cmd_train(const TrainArgs& a) {
    const auto cases = case_dirs_under(a.data, "truth.json");
    std::vector<TrainingPair> pairs;
    for (const fs::path& cdir : cases) {
        for (const auto& [rgb_name, map_name, view] :
             {std::tuple{"pa_rgb.ppm", "pa.pgm", View::PA},
              std::tuple{"lat_rgb.ppm", "lat.pgm", View::LAT}}) {
            TrainingPair p;
            p.rgb = read_ppm((cdir / rgb_name).string());
            p.map = read_pgm((cdir / map_name).string());
            p.view = view;
            if (a.height > 0 && a.width > 0) {
                p.rgb = resize_bilinear(p.rgb, a.height, a.width);
                p.map = resize_nearest(p.map, a.height, a.width);
            }
            pairs.push_back(std::move(p));
        }
    }

    EUFormerConfig cfg;
    cfg.scales = a.scales;
    cfg.base_channels = a.base_channels;
    cfg.etbs_per_scale = broadcast_per_scale(a.etbs, a.scales, "--etbs");
    cfg.heads_per_scale = broadcast_per_scale(a.heads, a.scales, "--heads");

    TrainConfig tc;
    tc.steps = a.steps;
    tc.seed = a.seed;
    tc.learning_rate = a.lr;
    tc.batch_size = a.batch;
    tc.disc_base_channels = a.disc_base;
    tc.augment_rotation = !a.no_augment;
    tc.augment_hflip = !a.no_augment;

    const double t0 = now_seconds();
    TrainResult res = train(pairs, cfg, tc);
    const double seconds = now_seconds() - t0;

    save_checkpoint(a.out, cfg, res.gen.entries());
    if (!a.history.empty()) write_history_csv(a.history, res.history);

    ordered_json j;
    j["pairs"] = pairs.size();
    j["steps"] = a.steps;
    j["seconds"] = seconds;
    j["checkpoint"] = a.out;
    if (!res.history.empty()) {
        const TrainLogRow& last = res.history.back();
        j["final"] = {{"step", last.step},
                      {"lr", last.lr},
                      {"loss_g", last.loss_g},
                      {"loss_mse", last.loss_mse},
                      {"loss_total", last.loss_total},
                      {"loss_d", last.loss_d}};
    }
    std::cout << j.dump(2) << "\n";
}

int cmd_gradcheck() {
    const auto entries = run_gradient_suite();
    print_gradient_suite(std::cout, entries);
    double total = 0;
    for (const auto& e : entries) total += e.seconds;
    const bool ok = gradient_suite_passed(entries);
    std::cout << (ok ? "gradient suite passed" : "gradient suite FAILED") << " ("
              << entries.size() << " checks, " << total << " s)\n";
    return ok ? 0 : 1;
}

void cmd_flops(int h, int w, int c, int heads) {
    ordered_json j;
    j["h"] = h;
    j["w"] = w;
    j["c"] = c;
    j["heads"] = heads;
    j["channel"] = flops_attention(h, w, c, heads, FlopsMode::Channel);
    j["spatial"] = flops_attention(h, w, c, heads, FlopsMode::Spatial);
    std::cout << j.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"spine3d: biplanar trunk images to 3D spinal curve, Cobb angle, and severity"};
    app.require_subcommand(1);

    SynthArgs synth_args;
    auto* synth = app.add_subcommand("synth", "write a synthetic biplanar dataset");
    synth->add_option("--n", synth_args.n, "number of cases")->required()->check(CLI::PositiveNumber);
    synth->add_option("--seed", synth_args.seed, "root seed (default 1)");
    synth->add_option("--out", synth_args.out, "output directory")->required();
    synth->add_option("--severity", synth_args.band, "pin every case to one band")
        ->check(CLI::IsMember({"normal-mild", "moderate", "severe"}));
    synth->add_option("--height", synth_args.height, "map height (default 320)")
        ->check(CLI::PositiveNumber);
    synth->add_option("--width", synth_args.width, "map width (default 160)")
        ->check(CLI::PositiveNumber);
    synth->add_option("--thickness", synth_args.thickness, "stripe thickness in px (default 5)");

    AssessArgs assess_args;
    auto* assess = app.add_subcommand("assess", "biplanar images to 3D angle and severity");
    assess->add_option("--pa", assess_args.pa, "posteroanterior image")->required();
    assess->add_option("--lat", assess_args.lat, "lateral image")->required();
    assess->add_option("--params", assess_args.params, "generator checkpoint");
    assess->add_option("--out", assess_args.out, "output directory")->required();
    assess->add_flag("--maps-only", assess_args.maps_only,
                     "inputs are already curve maps; skip the network");
    assess->add_option("--height", assess_args.height, "working height (default 320)")
        ->check(CLI::PositiveNumber);
    assess->add_option("--width", assess_args.width, "working width (default 160)")
        ->check(CLI::PositiveNumber);
    assess->add_option("--threshold", assess_args.threshold, "curve-map row gate (default 0.5)");
    assess->add_option("--degree", assess_args.degree, "polynomial degree (default 6)")
        ->check(CLI::PositiveNumber);
    assess->add_option("--samples", assess_args.samples, "3D curve samples (default 256)")
        ->check(CLI::PositiveNumber);

    double grade_angle = 0;
    auto* grade_cmd = app.add_subcommand("grade", "map an angle in degrees to a severity");
    grade_cmd->add_option("--angle", grade_angle, "3D Cobb angle in degrees")->required();

    EvalArgs eval_args;
    auto* eval = app.add_subcommand("eval", "score predictions against a truth dataset");
    eval->add_option("--pred", eval_args.pred, "directory of per-case assess outputs")->required();
    eval->add_option("--truth", eval_args.truth, "dataset directory with truth.json cases")
        ->required();
    eval->add_option("--out", eval_args.out, "also write the report to this file");
    eval->add_flag("--csv", eval_args.csv, "emit per-case CSV rows instead of the JSON report");

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "desk-scale adversarial training");
    train_cmd->add_option("--data", train_args.data, "dataset directory")->required();
    train_cmd->add_option("--out", train_args.out, "checkpoint path")->required();
    train_cmd->add_option("--steps", train_args.steps, "optimizer steps")
        ->required()
        ->check(CLI::PositiveNumber);
    train_cmd->add_option("--seed", train_args.seed, "training seed (default 1)");
    train_cmd->add_option("--lr", train_args.lr, "initial learning rate (default 1e-4)");
    train_cmd->add_option("--batch", train_args.batch, "batch size (default 4)")
        ->check(CLI::PositiveNumber);
    train_cmd->add_option("--disc-base", train_args.disc_base,
                          "discriminator base width (default 16)")
        ->check(CLI::PositiveNumber);
    train_cmd->add_option("--scales", train_args.scales, "generator scales (default 2)")
        ->check(CLI::PositiveNumber);
    train_cmd->add_option("--base-channels", train_args.base_channels,
                          "generator base channels (default 8)")
        ->check(CLI::PositiveNumber);
    train_cmd->add_option("--etbs", train_args.etbs, "transformer blocks per scale")
        ->delimiter(',');
    train_cmd->add_option("--heads", train_args.heads, "attention heads per scale")
        ->delimiter(',');
    train_cmd->add_option("--height", train_args.height, "resize height (default: keep)");
    train_cmd->add_option("--width", train_args.width, "resize width (default: keep)");
    train_cmd->add_flag("--no-augment", train_args.no_augment, "disable rotation/flip augmentation");
    train_cmd->add_option("--history", train_args.history, "also write a loss-history CSV");

    auto* gradcheck = app.add_subcommand("gradcheck", "run the full gradient self-check suite");

    int fh = 0, fw = 0, fc = 0, fm = 0;
    auto* flops = app.add_subcommand("flops", "attention multiply-accumulate counts");
    flops->set_help_flag("--help", "print help");  // frees -h for the height option
    flops->add_option("--h", fh, "feature height")->required()->check(CLI::PositiveNumber);
    flops->add_option("--w", fw, "feature width")->required()->check(CLI::PositiveNumber);
    flops->add_option("--c", fc, "channels")->required()->check(CLI::PositiveNumber);
    flops->add_option("--heads", fm, "attention heads")->required()->check(CLI::PositiveNumber);

    int exit_code = 0;
    synth->callback([&] { cmd_synth(synth_args); });
    assess->callback([&] { cmd_assess(assess_args); });
    grade_cmd->callback([&] { cmd_grade(grade_angle); });
    eval->callback([&] { cmd_eval(eval_args); });
    train_cmd->callback([&] { cmd_train(train_args); });
    gradcheck->callback([&] { exit_code = cmd_gradcheck(); });
    flops->callback([&] { cmd_flops(fh, fw, fc, fm); });

    try {
        app.parse(argc, argv);
        return exit_code;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help() << std::flush;
        return 2;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help() << std::flush;
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
