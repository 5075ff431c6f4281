// netgraph.hpp — the quantized convolutional/linear block pipeline,
// step-size calibration, overflow measurement, and model (de)serialization.

#pragma once

#include "wrapnet/cyclic.hpp"
#include "wrapnet/fxp.hpp"
#include "wrapnet/kernels.hpp"

#include <optional>
#include <string>
#include <vector>

namespace wrapnet {

enum class LayerOp { linear, conv };

// Per-channel affine (folded BatchNorm): y = scale * x + shift.
struct AffineParams {
    std::vector<double> scale, shift;
};

struct LayerSpec {
    LayerOp op = LayerOp::linear;
    bool full_precision = false;
    FixedTensor weights;  // linear: out x in; conv: oc x (c*kh*kw)
    ConvGeom geom;        // conv only
    QuantScheme input_scheme;
    std::optional<CyclicSpec> cyclic;
    AffineParams affine;
    bool relu = true;
    std::optional<QuantScheme> output_scheme;  // requantization for the next layer
    // bit-packing assignment from the hybrid schedule: "", "carry_sim",
    // or "buffer_bit"
    std::string pack_mode;
    std::vector<double> carry_mean;  // per-neuron moving-average carry count

    int out_features() const { return int(weights.shape.at(0)); }
    int in_features() const;
    // delta_z = delta_w * delta_x, always derived
    double delta_z() const {
        return weights.scheme.step_size * input_scheme.step_size;
    }
};

struct ModelManifest {
    std::string version = "1";
    int acc_bits = 8;
    uint64_t seed = 0;
    std::vector<LayerSpec> layers;

    void validate() const;  // adjacent scheme consistency and invariants
};

// One block: z_q = gemm -> (carry correction) -> cyclic -> *delta_z ->
// affine -> relu -> requantize. Full-precision layers run on real values.
struct BlockResult {
    std::vector<double> real_out;    // post-activation, pre-requantization
    std::vector<int32_t> next_q;     // requantized output (if output_scheme)
    std::vector<int64_t> exact_z;    // exact wide pre-activations (taps)
    std::vector<int64_t> z;          // pre-activations under `mode`
    uint64_t dropped_carries = 0;
};

struct ForwardOptions {
    AccMode mode = AccMode::exact();
    bool collect_taps = false;
    // subtract the stored per-neuron mean carry under contaminated modes
    bool carry_correction = false;
};

BlockResult forward_block(std::span<const int32_t> x_q,
                          std::span<const double> x_real,
                          const LayerSpec& layer, int acc_bits,
                          const ForwardOptions& opts);

struct ForwardResult {
    std::vector<double> output;  // final real activations (logits)
    std::vector<std::vector<int64_t>> exact_preacts;  // per quantized layer
    uint64_t dropped_carries = 0;
};
ForwardResult forward_model(const ModelManifest& model,
                            std::span<const double> input,
                            const ForwardOptions& opts);

int argmax(std::span<const double> v);

// Fraction of neuron evaluations whose exact pre-activation falls outside
// the signed b-bit range, per quantized layer, averaged over neurons and
// samples. `inputs` is row-major n_samples x input_dim.
std::vector<double> overflow_rate(const ModelManifest& model,
                                  std::span<const double> inputs,
                                  size_t n_samples, int bits);

// Hinge penalty R^o = (1/N) sum max(|z| - 2^(b-1), 0), with subgradient 0
// at the hinge point.
struct OverflowPenalty {
    double value = 0.0;
    std::vector<double> grad;
};
OverflowPenalty overflow_penalty(std::span<const double> z, int bits);

struct CalibrationResult {
    double delta_x = 1.0;
    int bits = 1;
    double measured_rate = 0.0;  // percent
    bool reachable = true;
};

// Binary search over delta_x so the layer's overflow rate hits p_target
// percent; activation bits from the 99.9th-percentile post-ReLU range.
// `acts` is n_samples x in_features, real, post-ReLU.
CalibrationResult calibrate_step_size(const LayerSpec& layer,
                                      std::span<const double> acts,
                                      size_t n_samples, double p_target,
                                      int bits);

void save_model(const ModelManifest& model, const std::string& dir);
ModelManifest load_model(const std::string& dir);

}  // namespace wrapnet
