// wrapnet-cli — calibrate / train / infer / bench / carry-sim / report.
//
// Exit codes: 0 ok, 2 config error, 3 numerical divergence or unreachable
// target, 4 I/O error.

#include "wrapnet/kernels.hpp"
#include "wrapnet/netgraph.hpp"
#include "wrapnet/packing.hpp"
#include "wrapnet/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace wrapnet;

namespace {

constexpr int EXIT_CONFIG = 2;
constexpr int EXIT_DIVERGED = 3;
constexpr int EXIT_IO = 4;

uint64_t seed_fallback() {
    if (const char* env = std::getenv("WRAPNET_SEED")) {
        try {
            return std::stoull(env);
        } catch (...) {
            throw std::invalid_argument("WRAPNET_SEED is not an integer");
        }
    }
    return 1;
}

void write_text(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path().empty() ? "." : p.parent_path());
    std::ofstream f(p);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f << text;
}

// every run records its resolved parameters next to its outputs
void write_provenance(const std::string& out_dir, const std::string& cmd,
                      const json& params) {
    json j;
    j["subcommand"] = cmd;
    j["params"] = params;
    write_text(fs::path(out_dir) / "run.json", j.dump(2) + "\n");
}

// Chain forward_block over a manifest for one sample, collecting each
// quantized layer's integer input so carry statistics can be computed.
struct QuantTrace {
    std::vector<size_t> layer_idx;
    std::vector<std::vector<int32_t>> x_q;  // per quantized layer
};

QuantTrace trace_sample(const ModelManifest& m, std::span<const double> x) {
    QuantTrace t;
    std::vector<double> cur_real(x.begin(), x.end());
    std::vector<int32_t> cur_q;
    ForwardOptions opts;
    opts.mode = AccMode::exact();
    for (size_t li = 0; li < m.layers.size(); ++li) {
        const auto& l = m.layers[li];
        if (!l.full_precision) {
            t.layer_idx.push_back(li);
            t.x_q.push_back(cur_q);
        }
        auto r = forward_block(cur_q, cur_real, l, m.acc_bits, opts);
        cur_real = std::move(r.real_out);
        cur_q = std::move(r.next_q);
    }
    return t;
}

json train_config_to_json(const TrainConfig& c) {
    return json{{"epochs_pretrain", c.epochs_pretrain},
                {"epochs_warmup", c.epochs_warmup},
                {"epochs_finetune", c.epochs_finetune},
                {"epochs_schedule", c.epochs_schedule},
                {"lr", c.lr},
                {"lr_decay", c.lr_decay},
                {"lr_step", c.lr_step},
                {"momentum", c.momentum},
                {"batch_size", c.batch_size},
                {"seed", c.seed},
                {"hidden", c.hidden},
                {"quantized_layers", c.quantized_layers},
                {"acc_bits", c.acc_bits},
                {"weight_bits", c.weight_bits},
                {"use_cyclic", c.use_cyclic},
                {"cyclic_kind", to_string(c.cyclic_kind)},
                {"slope", std::isinf(c.slope) ? json("inf") : json(c.slope)},
                {"p_target", c.p_target},
                {"shared_delta", c.shared_delta},
                {"lambda_overflow", c.lambda_overflow},
                {"lambda_carry", c.lambda_carry},
                {"carry_temperature", c.carry_temperature},
                {"simulate_carry", c.simulate_carry},
                {"fp_baseline", c.fp_baseline},
                {"conventional", c.conventional},
                {"conventional_bits", c.conventional_bits},
                {"dataset_n", 4000},
                {"dataset_seed", 42}};
}

void apply_json_config(TrainConfig& c, const json& j, size_t& dataset_n,
                       uint64_t& dataset_seed) {
    std::vector<std::string> bad;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        try {
            if (k == "epochs_pretrain") c.epochs_pretrain = it.value();
            else if (k == "epochs_warmup") c.epochs_warmup = it.value();
            else if (k == "epochs_finetune") c.epochs_finetune = it.value();
            else if (k == "epochs_schedule") c.epochs_schedule = it.value();
            else if (k == "lr") c.lr = it.value();
            else if (k == "lr_decay") c.lr_decay = it.value();
            else if (k == "lr_step") c.lr_step = it.value();
            else if (k == "momentum") c.momentum = it.value();
            else if (k == "batch_size") c.batch_size = it.value();
            else if (k == "seed") c.seed = it.value();
            else if (k == "hidden") c.hidden = it.value();
            else if (k == "quantized_layers") c.quantized_layers = it.value();
            else if (k == "acc_bits") c.acc_bits = it.value();
            else if (k == "weight_bits") c.weight_bits = it.value();
            else if (k == "use_cyclic") c.use_cyclic = it.value();
            else if (k == "cyclic_kind")
                c.cyclic_kind = cyclic_kind_from_string(it.value());
            else if (k == "slope")
                c.slope = it.value().is_string()
                              ? std::numeric_limits<double>::infinity()
                              : double(it.value());
            else if (k == "p_target") c.p_target = it.value();
            else if (k == "shared_delta") c.shared_delta = it.value();
            else if (k == "lambda_overflow") c.lambda_overflow = it.value();
            else if (k == "lambda_carry") c.lambda_carry = it.value();
            else if (k == "carry_temperature") c.carry_temperature = it.value();
            else if (k == "simulate_carry") c.simulate_carry = it.value();
            else if (k == "fp_baseline") c.fp_baseline = it.value();
            else if (k == "conventional") c.conventional = it.value();
            else if (k == "conventional_bits") c.conventional_bits = it.value();
            else if (k == "dataset_n") dataset_n = it.value();
            else if (k == "dataset_seed") dataset_seed = it.value();
            else bad.push_back(k + " (unknown key)");
        } catch (const json::exception&) {
            bad.push_back(k + " (wrong type)");
        }
    }
    if (!bad.empty()) {
        std::string msg = "invalid config fields:";
        for (const auto& b : bad) msg += " " + b;
        throw std::invalid_argument(msg);
    }
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              int64_t seed_flag, bool schedule) {
    TrainConfig cfg;
    cfg.seed = seed_fallback();
    size_t dataset_n = 4000;
    uint64_t dataset_seed = 42;
    if (!config_path.empty()) {
        std::ifstream f(config_path);
        if (!f) throw std::runtime_error("cannot open config " + config_path);
        json j;
        try {
            f >> j;
        } catch (const json::exception& e) {
            throw std::invalid_argument(std::string("config parse: ") +
                                        e.what());
        }
        apply_json_config(cfg, j, dataset_n, dataset_seed);
    }
    if (seed_flag >= 0) cfg.seed = uint64_t(seed_flag);
    cfg.validate();

    json prov = train_config_to_json(cfg);
    prov["dataset_n"] = dataset_n;
    prov["dataset_seed"] = dataset_seed;
    prov["schedule"] = schedule;
    write_provenance(out_dir, schedule ? "train+schedule" : "train", prov);

    const auto data = make_synthetic_dataset(dataset_seed, dataset_n);
    // with --schedule, the carry-adaptation schedule takes over the
    // fine-tuning budget
    TrainConfig pipe_cfg = cfg;
    if (schedule) pipe_cfg.epochs_finetune = 0;
    auto res = train_pipeline(pipe_cfg, data);
    if (schedule && !res.diverged) {
        auto sr = carry_adaptation_schedule(cfg, data, res.network);
        for (auto& m : sr.result.metrics) res.metrics.push_back(m);
        json modes = json::array();
        for (auto& s : sr.modes) modes.push_back(s);
        write_text(fs::path(out_dir) / "schedule.json", modes.dump() + "\n");
        res.model = sr.result.model;
        res.final_val_acc = sr.result.final_val_acc;
        res.final_test_acc = sr.result.final_test_acc;
        res.final_carry_std = sr.result.final_carry_std;
        res.final_overflow_rate = sr.result.final_overflow_rate;
    }

    std::string jsonl;
    for (const auto& m : res.metrics) jsonl += metrics_jsonl_row(m) + "\n";
    write_text(fs::path(out_dir) / "metrics.jsonl", jsonl);
    json summary{{"diverged", res.diverged},
                 {"final_val_acc", res.final_val_acc},
                 {"final_test_acc", res.final_test_acc},
                 {"final_overflow_rate", res.final_overflow_rate},
                 {"final_carry_std", res.final_carry_std}};
    write_text(fs::path(out_dir) / "summary.json", summary.dump(2) + "\n");
    save_model(res.model, (fs::path(out_dir) / "model").string());
    std::cout << summary.dump(2) << "\n";
    return res.diverged ? EXIT_DIVERGED : 0;
}

int cmd_calibrate(const std::string& model_dir, const std::string& out_dir,
                  double p, uint64_t dataset_seed, size_t n) {
    write_provenance(out_dir, "calibrate",
                     json{{"model", model_dir},
                          {"p_target", p},
                          {"dataset_seed", dataset_seed},
                          {"n", n}});
    auto model = load_model(model_dir);
    const auto data = make_synthetic_dataset(dataset_seed, n);

    // gather each quantized layer's real input activations over the
    // training split
    const size_t ns = std::min(data.train_idx.size(), size_t(512));
    std::vector<std::vector<double>> acts(model.layers.size());
    for (size_t s = 0; s < ns; ++s) {
        std::vector<double> cur(
            data.x.begin() + data.train_idx[s] * data.features,
            data.x.begin() + (data.train_idx[s] + 1) * data.features);
        std::vector<int32_t> cur_q;
        ForwardOptions opts;
        for (size_t li = 0; li < model.layers.size(); ++li) {
            if (!model.layers[li].full_precision)
                acts[li].insert(acts[li].end(), cur.begin(), cur.end());
            auto r =
                forward_block(cur_q, cur, model.layers[li], model.acc_bits, opts);
            cur = std::move(r.real_out);
            cur_q = std::move(r.next_q);
        }
    }

    std::string csv = "layer,delta_x,bits,measured_rate_pct,reachable\n";
    bool all_reachable = true;
    for (size_t li = 0; li < model.layers.size(); ++li) {
        auto& l = model.layers[li];
        if (l.full_precision) continue;
        const auto cal =
            calibrate_step_size(l, acts[li], ns, p, model.acc_bits);
        csv += std::to_string(li) + "," + std::to_string(cal.delta_x) + "," +
               std::to_string(cal.bits) + "," +
               std::to_string(cal.measured_rate) + "," +
               (cal.reachable ? "1" : "0") + "\n";
        if (!cal.reachable) {
            std::cerr << "layer " << li << ": target rate " << p
                      << "% unreachable (closest " << cal.measured_rate
                      << "%)\n";
            all_reachable = false;
        }
        l.input_scheme =
            QuantScheme{cal.delta_x, cal.bits, false, QuantKind::uniform};
        if (li > 0) model.layers[li - 1].output_scheme = l.input_scheme;
    }
    write_text(fs::path(out_dir) / "calibration.csv", csv);
    save_model(model, (fs::path(out_dir) / "model").string());
    std::cout << csv;
    return all_reachable ? 0 : EXIT_DIVERGED;
}

int cmd_infer(const std::string& model_dir, const std::string& input_path,
              const std::string& acc_mode, double input_step,
              const std::string& out_path) {
    auto model = load_model(model_dir);
    std::ifstream f(input_path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open input " + input_path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    QuantScheme in_scheme{input_step, 16, true, QuantKind::uniform};
    const auto tensor = deserialize_tensor(bytes, in_scheme);
    if (tensor.shape.size() != 2)
        throw std::invalid_argument("input blob must be 2-D (samples x features)");
    const size_t n = size_t(tensor.shape[0]), feat = size_t(tensor.shape[1]);

    ForwardOptions opts;
    opts.mode = acc_mode_from_string(acc_mode);
    opts.carry_correction = opts.mode.kind == AccKind::packed_contaminated;
    const auto reals = dequantize(tensor);
    std::string csv;
    for (size_t i = 0; i < n; ++i) {
        auto r = forward_model(
            model, std::span<const double>(reals.data() + i * feat, feat), opts);
        for (size_t c = 0; c < r.output.size(); ++c)
            csv += (c ? "," : "") + std::to_string(r.output[c]);
        csv += "\n";
    }
    if (out_path.empty()) {
        std::cout << csv;
    } else {
        write_text(out_path, csv);
        write_provenance(fs::path(out_path).parent_path().string(), "infer",
                         json{{"model", model_dir},
                              {"input", input_path},
                              {"acc_mode", acc_mode},
                              {"input_step", input_step}});
    }
    return 0;
}

int cmd_bench(const std::string& preset, const std::string& shape,
              const std::string& modes_csv, int reps, uint64_t seed,
              const std::string& out_dir) {
    // presets named after typical 3x3-convolution layer shapes, lowered to
    // im2col GEMM dimensions
    static const std::map<std::string, std::array<int, 3>> presets{
        {"resnet-64x56x56", {3136, 576, 64}},
        {"resnet-128x28x28", {784, 1152, 128}},
        {"resnet-256x14x14", {196, 2304, 256}},
        {"resnet-512x7x7", {49, 4608, 512}},
    };
    std::vector<std::array<int, 3>> shapes;
    std::vector<std::string> names;
    if (!shape.empty()) {
        int m, k, n;
        if (std::sscanf(shape.c_str(), "%dx%dx%d", &m, &k, &n) != 3)
            throw std::invalid_argument("--shape must be MxKxN");
        shapes.push_back({m, k, n});
        names.push_back(shape);
    } else if (preset == "all") {
        for (const auto& [nm, s] : presets) {
            shapes.push_back(s);
            names.push_back(nm);
        }
    } else {
        auto it = presets.find(preset);
        if (it == presets.end())
            throw std::invalid_argument("unknown preset " + preset);
        shapes.push_back(it->second);
        names.push_back(preset);
    }
    std::vector<std::string> modes;
    {
        std::stringstream ss(modes_csv);
        std::string tok;
        while (std::getline(ss, tok, ',')) modes.push_back(tok);
    }

    std::string csv = bench_csv_header() + ",ratio_vs_wrapped32\n";
    std::string jsonl;
    for (size_t si = 0; si < shapes.size(); ++si) {
        const auto [m, k, n] = shapes[si];
        double base_ns = 0.0;
        std::vector<BenchRecord> recs;
        for (const auto& ms : modes) {
            auto rec = bench_gemm(m, k, n, acc_mode_from_string(ms), reps, seed);
            rec.name = names[si];
            if (ms == "wrapped:32") base_ns = double(rec.median_ns);
            recs.push_back(rec);
        }
        for (const auto& rec : recs) {
            const double ratio =
                base_ns > 0.0 ? base_ns / double(rec.median_ns) : 0.0;
            csv += bench_csv_row(rec) + "," + std::to_string(ratio) + "\n";
            jsonl += bench_jsonl_row(rec) + "\n";
        }
    }
    std::cout << csv;
    if (!out_dir.empty()) {
        write_text(fs::path(out_dir) / "bench.csv", csv);
        write_text(fs::path(out_dir) / "bench.jsonl", jsonl);
        write_provenance(out_dir, "bench",
                         json{{"preset", preset},
                              {"shape", shape},
                              {"modes", modes_csv},
                              {"reps", reps},
                              {"seed", seed}});
    }
    return 0;
}

int cmd_carry_sim(const std::string& model_dir, uint64_t dataset_seed,
                  size_t n, const std::string& out_dir) {
    auto model = load_model(model_dir);
    for (const auto& l : model.layers)
        if (!l.full_precision && l.weights.scheme.kind == QuantKind::uniform)
            throw std::invalid_argument(
                "carry-sim requires binary or ternary weights");
    const auto data = make_synthetic_dataset(dataset_seed, n);
    const size_t ns = std::min(data.val_idx.size(), size_t(256));

    // per (layer, neuron) carry statistics over the val split
    struct Acc {
        std::vector<double> sum, sumsq;
    };
    std::map<size_t, Acc> stats;
    for (size_t s = 0; s < ns; ++s) {
        const auto tr = trace_sample(
            model, std::span<const double>(
                       data.x.data() + data.val_idx[s] * data.features,
                       size_t(data.features)));
        for (size_t qi = 0; qi < tr.layer_idx.size(); ++qi) {
            const auto& l = model.layers[tr.layer_idx[qi]];
            const int out = l.out_features(), in = l.in_features();
            const int bits = l.pack_mode == "buffer_bit" ? model.acc_bits - 1
                                                         : model.acc_bits;
            auto& a = stats[tr.layer_idx[qi]];
            if (a.sum.empty()) {
                a.sum.assign(out, 0.0);
                a.sumsq.assign(out, 0.0);
            }
            std::vector<int32_t> v(in);
            for (int o = 0; o < out; ++o) {
                for (int j = 0; j < in; ++j)
                    v[j] = int32_t(wrap(
                        int64_t(l.weights.values[size_t(o) * in + j]) *
                            int64_t(tr.x_q[qi][j]),
                        bits));
                const double c = double(carry_count(v, bits).carries);
                a.sum[o] += c;
                a.sumsq[o] += c * c;
            }
        }
    }

    std::string csv = "neuron_id,layer,mean,var\n";
    double total_mean = 0.0, total_std = 0.0;
    size_t neurons = 0;
    for (const auto& [li, a] : stats) {
        for (size_t o = 0; o < a.sum.size(); ++o) {
            const double mean = a.sum[o] / double(ns);
            const double var =
                std::max(a.sumsq[o] / double(ns) - mean * mean, 0.0);
            csv += std::to_string(o) + "," + std::to_string(li) + "," +
                   std::to_string(mean) + "," + std::to_string(var) + "\n";
            total_mean += mean;
            total_std += std::sqrt(var);
            ++neurons;
        }
    }
    json summary{{"neurons", neurons},
                 {"mean_carry", neurons ? total_mean / neurons : 0.0},
                 {"mean_carry_std", neurons ? total_std / neurons : 0.0}};
    std::cout << summary.dump(2) << "\n";
    if (!out_dir.empty()) {
        write_text(fs::path(out_dir) / "carries.csv", csv);
        write_text(fs::path(out_dir) / "carry_summary.json",
                   summary.dump(2) + "\n");
        write_provenance(out_dir, "carry-sim",
                         json{{"model", model_dir},
                              {"dataset_seed", dataset_seed},
                              {"n", n}});
    } else {
        std::cout << csv;
    }
    return 0;
}

int cmd_report(const std::vector<std::string>& run_dirs) {
    std::cout << "run,final_val_acc,final_test_acc,overflow_rate,carry_std,"
                 "status\n";
    for (const auto& dir : run_dirs) {
        std::ifstream f(fs::path(dir) / "summary.json");
        if (!f) throw std::runtime_error("no summary.json in " + dir);
        json j;
        f >> j;
        std::cout << dir << "," << double(j["final_val_acc"]) << ","
                  << double(j["final_test_acc"]) << ","
                  << double(j["final_overflow_rate"]) << ","
                  << double(j["final_carry_std"]) << ","
                  << (bool(j["diverged"]) ? "diverged" : "ok") << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"wrap-around fixed-point inference toolkit"};
    app.require_subcommand(1);

    // train
    auto* train = app.add_subcommand("train", "run the training pipeline");
    std::string cfg_path, out_dir = "run";
    int64_t seed_flag = -1;
    bool schedule = false;
    train->add_option("--config", cfg_path, "JSON config file");
    train->add_option("--out", out_dir, "output directory");
    train->add_option("--seed", seed_flag, "RNG seed (overrides config)");
    train->add_flag("--schedule", schedule,
                    "run the carry-adaptation schedule after fine-tuning");

    // calibrate
    auto* cal = app.add_subcommand("calibrate", "re-fit activation step sizes");
    std::string cal_model, cal_out = "calibrated";
    double cal_p = 5.0;
    uint64_t cal_seed = 42;
    size_t cal_n = 4000;
    cal->add_option("--model", cal_model, "model directory")->required();
    cal->add_option("--out", cal_out, "output directory");
    cal->add_option("-p,--p-target", cal_p, "overflow-rate target, percent");
    cal->add_option("--data-seed", cal_seed, "dataset seed");
    cal->add_option("-n", cal_n, "dataset size");

    // infer
    auto* inf = app.add_subcommand("infer", "forward pass, logits as CSV");
    std::string inf_model, inf_input, inf_mode = "exact32", inf_out;
    double inf_step = 1.0;
    inf->add_option("--model", inf_model, "model directory")->required();
    inf->add_option("--input", inf_input, "tensor blob (samples x features)")
        ->required();
    inf->add_option("--acc-mode", inf_mode,
                    "exact32 | wrapped:B | packed_{isolated,buffered,"
                    "contaminated}:B:W");
    inf->add_option("--input-step", inf_step, "input tensor step size");
    inf->add_option("--out", inf_out, "output CSV (default stdout)");

    // bench
    auto* bench = app.add_subcommand("bench", "GEMM timing table");
    std::string b_preset = "all", b_shape,
                b_modes = "wrapped:32,packed_isolated:8:64";
    int b_reps = 9;
    uint64_t b_seed = 7;
    std::string b_out;
    int b_threads = 1;
    bench->add_option("--preset", b_preset, "layer-shape preset or 'all'");
    bench->add_option("--shape", b_shape, "explicit MxKxN (overrides preset)");
    bench->add_option("--modes", b_modes, "comma-separated accumulator modes");
    bench->add_option("--reps", b_reps, "timed repetitions");
    bench->add_option("--seed", b_seed, "input seed");
    bench->add_option("--out", b_out, "output directory");
    bench->add_option("--threads", b_threads, "worker threads (default 1)");

    // carry-sim
    auto* cs = app.add_subcommand("carry-sim", "per-neuron carry statistics");
    std::string cs_model, cs_out;
    uint64_t cs_seed = 42;
    size_t cs_n = 4000;
    cs->add_option("--model", cs_model, "model directory")->required();
    cs->add_option("--data-seed", cs_seed, "dataset seed");
    cs->add_option("-n", cs_n, "dataset size");
    cs->add_option("--out", cs_out, "output directory");

    // report
    auto* rep = app.add_subcommand("report", "summarize training runs");
    std::vector<std::string> rep_dirs;
    rep->add_option("runs", rep_dirs, "run directories")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : EXIT_CONFIG;
    }

    try {
        if (*train) return cmd_train(cfg_path, out_dir, seed_flag, schedule);
        if (*cal) return cmd_calibrate(cal_model, cal_out, cal_p, cal_seed, cal_n);
        if (*inf) return cmd_infer(inf_model, inf_input, inf_mode, inf_step, inf_out);
        if (*bench) return cmd_bench(b_preset, b_shape, b_modes, b_reps, b_seed, b_out);
        if (*cs) return cmd_carry_sim(cs_model, cs_seed, cs_n, cs_out);
        if (*rep) return cmd_report(rep_dirs);
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return EXIT_CONFIG;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return EXIT_IO;
    }
    return 0;
}
