// train.hpp — desk-scale training harness: synthetic task, STE-quantized
// MLP, the four-stage pipeline, both regularizers, and the carry-adaptation
// schedule.

#pragma once

#include "wrapnet/cyclic.hpp"
#include "wrapnet/fxp.hpp"
#include "wrapnet/netgraph.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace wrapnet {

struct Dataset {
    int features = 8;
    int classes = 4;
    std::vector<double> x;  // n x features, row-major
    std::vector<int> y;
    std::vector<size_t> train_idx, val_idx, test_idx;

    size_t size() const { return y.size(); }
    double chance() const { return 1.0 / classes; }
};

// Deterministic multi-class spiral, lifted to 8 features by a fixed random
// linear map (independent of `seed`). difficulty scales the label noise.
Dataset make_synthetic_dataset(uint64_t seed, size_t n, double difficulty = 1.0);

struct TrainConfig {
    int epochs_pretrain = 40;
    int epochs_warmup = 15;
    int epochs_finetune = 40;
    int epochs_schedule = 8;  // per layer in the carry-adaptation schedule
    double lr = 0.08;
    double lr_decay = 0.5;
    int lr_step = 20;
    double momentum = 0.9;
    int batch_size = 128;
    uint64_t seed = 1;

    int hidden = 64;
    int quantized_layers = 2;
    int acc_bits = 8;
    int weight_bits = 1;  // 1 binary, 2 ternary, 3..5 uniform

    bool use_cyclic = true;
    CyclicKind cyclic_kind = CyclicKind::smooth_modulo;
    double slope = 2.0;  // k; may be +inf

    double p_target = 5.0;        // calibration overflow-rate target, percent
    bool shared_delta = false;    // one step size for all quantized layers
    double lambda_overflow = 0.0;
    double lambda_carry = 0.0;
    double carry_temperature = 1.0;
    double carry_momentum = 0.99;
    bool simulate_carry = false;  // carry-sim forward on all quantized layers

    // baselines
    bool fp_baseline = false;    // no quantization anywhere
    bool conventional = false;   // no cyclic; range-based activation steps
    int conventional_bits = 6;

    void validate() const;
};

struct EpochMetrics {
    std::string stage;
    int epoch = 0;
    double acc = 0.0;           // validation accuracy
    double overflow_rate = 0.0; // fraction, at acc_bits
    double carry_std = 0.0;     // mean per-neuron carry std
    double r_o = 0.0;
    double r_c = 0.0;
};
std::string metrics_jsonl_row(const EpochMetrics& m);

// Trainer-side network state (latent weights), kept so fine-tuning can
// resume after the pipeline (carry-adaptation schedule).
struct TrainLayer {
    int in = 0, out = 0;
    bool full_precision = false;
    bool relu = true;
    std::vector<double> w, vw;            // latent weights + momentum
    std::vector<double> gamma, beta, vgamma, vbeta;
    double delta_x = 1.0;
    int act_bits = 3;
    std::string pack_mode;                // "", "carry_sim", "buffer_bit"
    std::vector<double> carry_moving_mean;
};

struct Network {
    std::vector<TrainLayer> layers;
    int acc_bits = 8;
    bool use_cyclic = false;
    CyclicKind cyclic_kind = CyclicKind::smooth_modulo;
    double slope = 2.0;
    bool calibrated = false;
    bool acts_quantized = false;
    bool carry_sim_active = false;
};

struct TrainResult {
    ModelManifest model;
    Network network;  // for resuming (carry schedule)
    std::vector<EpochMetrics> metrics;
    bool diverged = false;
    double final_val_acc = 0.0;
    double final_test_acc = 0.0;
    double final_overflow_rate = 0.0;
    double final_carry_std = 0.0;
};

TrainResult train_pipeline(const TrainConfig& cfg, const Dataset& data);

ModelManifest export_model(const Network& net, const TrainConfig& cfg);

// Validation/test accuracy through the inference path.
double eval_accuracy(const ModelManifest& model, const Dataset& data,
                     const std::vector<size_t>& idx, const ForwardOptions& opts);

// STE quantizer node: forward = dequantized quantizer output,
// backward = identity inside the clamp range, 0 outside.
struct SteValue {
    double value = 0.0;
    double grad = 0.0;
};
SteValue ste_quantize(double x, const QuantScheme& scheme);

// Hybrid pack-mode assignment: enable carry simulation layer by layer,
// least carry-variance first; fall back to buffer bits on a > 3% accuracy
// drop.
struct ScheduleResult {
    std::vector<std::string> modes;  // per quantized layer
    TrainResult result;
};
ScheduleResult carry_adaptation_schedule(const TrainConfig& cfg,
                                         const Dataset& data,
                                         const Network& base);

}  // namespace wrapnet
