#include "wrapnet/netgraph.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace wrapnet {

using nlohmann::json;
namespace fs = std::filesystem;

int LayerSpec::in_features() const {
    if (op == LayerOp::linear) return int(weights.shape.at(1));
    return geom.channels * geom.height * geom.width;
}

void ModelManifest::validate() const {
    if (acc_bits < 4 || acc_bits > 32)
        throw std::invalid_argument("manifest: acc_bits out of range");
    for (size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        l.weights.validate();
        if (!l.full_precision) {
            l.input_scheme.validate();
            if (l.cyclic) {
                l.cyclic->validate();
                const int expected =
                    l.pack_mode == "buffer_bit" ? acc_bits - 1 : acc_bits;
                if (l.cyclic->bits != expected)
                    throw std::invalid_argument(
                        "manifest: cyclic bits disagree with accumulator bits");
            }
        }
        if (l.affine.scale.size() != l.affine.shift.size())
            throw std::invalid_argument("manifest: affine size mismatch");
        if (i + 1 < layers.size() && !layers[i + 1].full_precision) {
            if (!l.output_scheme)
                throw std::invalid_argument(
                    "manifest: missing requantization scheme before a "
                    "quantized layer");
            const auto& out = *l.output_scheme;
            const auto& in = layers[i + 1].input_scheme;
            if (out.step_size != in.step_size || out.bits != in.bits ||
                out.is_signed != in.is_signed || out.kind != in.kind)
                throw std::invalid_argument(
                    "manifest: adjacent layer schemes inconsistent");
        }
    }
}

namespace {

void apply_affine_relu(std::vector<double>& v, const LayerSpec& layer,
                       int out_channels) {
    const size_t spatial = v.size() / out_channels;
    if (!layer.affine.scale.empty()) {
        if (int(layer.affine.scale.size()) != out_channels)
            throw std::invalid_argument("affine size != out channels");
        for (int c = 0; c < out_channels; ++c)
            for (size_t s = 0; s < spatial; ++s) {
                double& x = v[size_t(c) * spatial + s];
                x = layer.affine.scale[c] * x + layer.affine.shift[c];
            }
    }
    if (layer.relu)
        for (double& x : v) x = std::max(x, 0.0);
}

std::vector<int32_t> requantize(const std::vector<double>& v,
                                const QuantScheme& scheme) {
    auto t = quantize_uniform(v, {int64_t(v.size())}, scheme);
    return std::move(t.values);
}

GemmResult run_layer_gemm(std::span<const int32_t> x_q, const LayerSpec& layer,
                          const AccMode& mode) {
    if (layer.op == LayerOp::linear) {
        const int out = layer.out_features();
        const int in = layer.in_features();
        if (int(x_q.size()) != in)
            throw std::invalid_argument("forward_block: input size mismatch");
        if (mode.is_packed()) {
            // packed kernels want the ternary operand on the right; feed the
            // activations as a 1 x in row against the transposed weights
            std::vector<int32_t> wt(size_t(in) * out);
            for (int o = 0; o < out; ++o)
                for (int i = 0; i < in; ++i)
                    wt[size_t(i) * out + o] =
                        layer.weights.values[size_t(o) * in + i];
            return gemm(x_q, wt, 1, in, out, mode);
        }
        return gemm(layer.weights.values, x_q, out, in, 1, mode);
    }
    return conv2d(x_q, layer.weights.values, layer.out_features(), layer.geom,
                  mode);
}

}  // namespace

BlockResult forward_block(std::span<const int32_t> x_q,
                          std::span<const double> x_real,
                          const LayerSpec& layer, int acc_bits,
                          const ForwardOptions& opts) {
    BlockResult res;
    const int out_channels = layer.out_features();

    if (layer.full_precision) {
        if (x_real.empty())
            throw std::invalid_argument("full-precision layer needs real input");
        const auto w = dequantize(layer.weights);
        const int in = layer.in_features();
        if (int(x_real.size()) != in)
            throw std::invalid_argument("forward_block: input size mismatch");
        res.real_out.assign(out_channels, 0.0);
        for (int o = 0; o < out_channels; ++o) {
            double acc = 0.0;
            for (int i = 0; i < in; ++i)
                acc += w[size_t(o) * in + i] * x_real[i];
            res.real_out[o] = acc;
        }
        apply_affine_relu(res.real_out, layer, out_channels);
        if (layer.output_scheme)
            res.next_q = requantize(res.real_out, *layer.output_scheme);
        return res;
    }

    // quantized path
    const int ebits = layer.cyclic
                          ? layer.cyclic->bits
                          : (layer.pack_mode == "buffer_bit" ? acc_bits - 1
                                                             : acc_bits);
    AccMode mode = opts.mode;
    if (mode.kind != AccKind::exact32) {
        mode.bits = layer.pack_mode == "buffer_bit" && mode.is_packed()
                        ? ebits + 1
                        : ebits;
        if (layer.pack_mode == "buffer_bit" && mode.is_packed())
            mode.kind = AccKind::packed_buffered;
        if (mode.is_packed() && mode.width % mode.bits != 0)
            throw std::invalid_argument("forward_block: bits do not pack");
    }

    auto g = run_layer_gemm(x_q, layer, mode);
    res.z = std::move(g.values);
    res.dropped_carries = g.dropped_carries;
    if (opts.collect_taps || mode.kind == AccKind::exact32) {
        if (mode.kind == AccKind::exact32) {
            res.exact_z = res.z;
        } else {
            auto e = run_layer_gemm(x_q, layer, AccMode::exact());
            res.exact_z = std::move(e.values);
        }
    }

    if (opts.carry_correction && mode.kind == AccKind::packed_contaminated &&
        !layer.carry_mean.empty()) {
        const size_t spatial = res.z.size() / out_channels;
        for (size_t i = 0; i < res.z.size(); ++i) {
            const double mean = layer.carry_mean[i / spatial];
            res.z[i] = wrap(res.z[i] - round_half_away(mean), ebits);
        }
    }

    res.real_out.resize(res.z.size());
    const double dz = layer.delta_z();
    if (layer.cyclic) {
        for (size_t i = 0; i < res.z.size(); ++i)
            res.real_out[i] = cyclic_apply(double(res.z[i]), *layer.cyclic) * dz;
    } else {
        for (size_t i = 0; i < res.z.size(); ++i)
            res.real_out[i] = double(res.z[i]) * dz;
    }
    apply_affine_relu(res.real_out, layer, out_channels);
    if (layer.output_scheme)
        res.next_q = requantize(res.real_out, *layer.output_scheme);
    return res;
}

ForwardResult forward_model(const ModelManifest& model,
                            std::span<const double> input,
                            const ForwardOptions& opts) {
    ForwardResult res;
    std::vector<double> cur_real(input.begin(), input.end());
    std::vector<int32_t> cur_q;
    for (size_t li = 0; li < model.layers.size(); ++li) {
        const auto& layer = model.layers[li];
        if (!layer.full_precision && cur_q.empty())
            cur_q = requantize(cur_real, layer.input_scheme);
        auto block = forward_block(cur_q, cur_real, layer, model.acc_bits, opts);
        if (!layer.full_precision && opts.collect_taps)
            res.exact_preacts.push_back(std::move(block.exact_z));
        res.dropped_carries += block.dropped_carries;
        cur_real = std::move(block.real_out);
        cur_q = std::move(block.next_q);
    }
    res.output = std::move(cur_real);
    return res;
}

int argmax(std::span<const double> v) {
    return int(std::max_element(v.begin(), v.end()) - v.begin());
}

std::vector<double> overflow_rate(const ModelManifest& model,
                                  std::span<const double> inputs,
                                  size_t n_samples, int bits) {
    if (n_samples == 0)
        throw std::invalid_argument("overflow_rate: empty calibration set");
    const size_t dim = inputs.size() / n_samples;
    ForwardOptions opts;
    opts.mode = AccMode::exact();
    opts.collect_taps = true;
    const int64_t limit = (int64_t(1) << (bits - 1)) - 1;
    std::vector<double> over;
    std::vector<double> total;
    for (size_t s = 0; s < n_samples; ++s) {
        auto r = forward_model(model, inputs.subspan(s * dim, dim), opts);
        if (over.empty()) {
            over.assign(r.exact_preacts.size(), 0.0);
            total.assign(r.exact_preacts.size(), 0.0);
        }
        for (size_t l = 0; l < r.exact_preacts.size(); ++l)
            for (int64_t z : r.exact_preacts[l]) {
                over[l] += std::llabs(z) > limit ? 1.0 : 0.0;
                total[l] += 1.0;
            }
    }
    for (size_t l = 0; l < over.size(); ++l) over[l] /= total[l];
    return over;
}

OverflowPenalty overflow_penalty(std::span<const double> z, int bits) {
    OverflowPenalty p;
    p.grad.assign(z.size(), 0.0);
    if (z.empty()) return p;
    const double limit = double(int64_t(1) << (bits - 1));
    const double n = double(z.size());
    for (size_t i = 0; i < z.size(); ++i) {
        const double excess = std::fabs(z[i]) - limit;
        if (excess > 0.0) {
            p.value += excess / n;
            p.grad[i] = (z[i] > 0.0 ? 1.0 : -1.0) / n;
        }
    }
    return p;
}

namespace {

double layer_rate_percent(const LayerSpec& layer,
                          std::span<const double> acts, size_t n_samples,
                          double delta, int bits) {
    const int in = layer.in_features();
    const int out = layer.out_features();
    const int64_t limit = (int64_t(1) << (bits - 1)) - 1;
    std::vector<int32_t> xq(in);
    size_t over = 0;
    for (size_t s = 0; s < n_samples; ++s) {
        const double* a = acts.data() + s * in;
        for (int i = 0; i < in; ++i)
            xq[i] = int32_t(round_half_away(a[i] / delta));
        for (int o = 0; o < out; ++o) {
            int64_t z = 0;
            for (int i = 0; i < in; ++i)
                z += int64_t(layer.weights.values[size_t(o) * in + i]) * xq[i];
            if (std::llabs(z) > limit) ++over;
        }
    }
    return 100.0 * double(over) / (double(n_samples) * out);
}

}  // namespace

CalibrationResult calibrate_step_size(const LayerSpec& layer,
                                      std::span<const double> acts,
                                      size_t n_samples, double p_target,
                                      int bits) {
    if (n_samples == 0 || acts.empty())
        throw std::invalid_argument("calibrate: empty calibration set");
    if (p_target < 0.0 || p_target > 50.0)
        throw std::invalid_argument("calibrate: p_target must be in [0, 50]");

    std::vector<double> sorted(acts.begin(), acts.end());
    std::sort(sorted.begin(), sorted.end());
    const double q999 =
        sorted[std::min(sorted.size() - 1,
                        size_t(std::ceil(0.999 * double(sorted.size()))))];
    const double amax = sorted.back();
    if (amax <= 0.0) {
        // dead calibration set: any step size gives zero overflow
        return {1.0, 1, 0.0, true};
    }

    double lo = amax / (1 << bits) / 1024.0;  // overflow-heavy
    double hi = amax * 4.0;                   // everything quantizes to ~0
    // make sure the bracket actually brackets the target
    while (layer_rate_percent(layer, acts, n_samples, lo, bits) < p_target &&
           lo > 1e-300)
        lo /= 4.0;

    CalibrationResult res;
    res.reachable = false;
    double best = hi, best_err = 1e300;
    for (int it = 0; it < 40; ++it) {
        const double mid = 0.5 * (lo + hi);
        const double rate = layer_rate_percent(layer, acts, n_samples, mid, bits);
        const double err = std::fabs(rate - p_target);
        if (err < best_err || (err == best_err && mid > best)) {
            best = mid;
            best_err = err;
        }
        if (p_target == 0.0) {
            // smallest delta with zero overflow
            if (rate > 0.0) lo = mid; else hi = mid;
        } else {
            if (err <= 0.5) res.reachable = true;
            if (rate > p_target) lo = mid; else hi = mid;
        }
    }
    if (p_target == 0.0) {
        best = hi;
        best_err = layer_rate_percent(layer, acts, n_samples, hi, bits);
        res.reachable = best_err == 0.0;
    } else if (best_err > 0.5) {
        res.reachable = false;
    }
    res.delta_x = best;
    res.measured_rate =
        layer_rate_percent(layer, acts, n_samples, best, bits);
    const double levels = std::ceil(q999 / res.delta_x) + 1.0;
    res.bits = std::clamp(int(std::ceil(std::log2(levels))), 1, 16);
    return res;
}

// ---------------------------------------------------------------------------
// serialization

namespace {

std::string real_to_string(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

json scheme_to_json(const QuantScheme& s) {
    return json{{"step_size", real_to_string(s.step_size)},
                {"bits", s.bits},
                {"signed", s.is_signed},
                {"kind", to_string(s.kind)}};
}

QuantScheme scheme_from_json(const json& j) {
    QuantScheme s;
    s.step_size = std::stod(j.at("step_size").get<std::string>());
    s.bits = j.at("bits").get<int>();
    s.is_signed = j.at("signed").get<bool>();
    s.kind = quant_kind_from_string(j.at("kind").get<std::string>());
    return s;
}

json cyclic_to_json(const CyclicSpec& c) {
    return json{{"bits", c.bits},
                {"slope", c.infinite_slope() ? "inf" : real_to_string(c.slope)},
                {"kind", to_string(c.kind)}};
}

CyclicSpec cyclic_from_json(const json& j) {
    CyclicSpec c;
    c.bits = j.at("bits").get<int>();
    const auto slope = j.at("slope").get<std::string>();
    c.slope = slope == "inf" ? std::numeric_limits<double>::infinity()
                             : std::stod(slope);
    c.kind = cyclic_kind_from_string(j.at("kind").get<std::string>());
    return c;
}

}  // namespace

void save_model(const ModelManifest& model, const std::string& dir) {
    model.validate();
    fs::create_directories(dir);
    json j;
    j["version"] = model.version;
    j["acc_bits"] = model.acc_bits;
    j["seed"] = model.seed;
    j["layers"] = json::array();
    for (size_t i = 0; i < model.layers.size(); ++i) {
        const auto& l = model.layers[i];
        const std::string blob_name = "layer" + std::to_string(i) + "_weights.bin";
        const auto blob = serialize_tensor(l.weights);
        std::ofstream bf(fs::path(dir) / blob_name, std::ios::binary);
        bf.write(reinterpret_cast<const char*>(blob.data()),
                 std::streamsize(blob.size()));
        if (!bf) throw std::runtime_error("save_model: blob write failed");

        json lj;
        lj["op"] = l.op == LayerOp::linear ? "linear" : "conv";
        lj["full_precision"] = l.full_precision;
        lj["weights"] = json{{"file", blob_name},
                             {"checksum", fnv1a(blob)},
                             {"scheme", scheme_to_json(l.weights.scheme)}};
        if (l.op == LayerOp::conv)
            lj["geom"] = json{{"channels", l.geom.channels},
                              {"height", l.geom.height},
                              {"width", l.geom.width},
                              {"kernel_h", l.geom.kernel_h},
                              {"kernel_w", l.geom.kernel_w},
                              {"stride", l.geom.stride},
                              {"pad", l.geom.pad}};
        if (!l.full_precision) lj["input_scheme"] = scheme_to_json(l.input_scheme);
        if (l.cyclic) lj["cyclic"] = cyclic_to_json(*l.cyclic);
        if (l.output_scheme)
            lj["output_scheme"] = scheme_to_json(*l.output_scheme);
        lj["affine"] = json{{"scale", l.affine.scale}, {"shift", l.affine.shift}};
        lj["relu"] = l.relu;
        if (!l.pack_mode.empty()) lj["pack_mode"] = l.pack_mode;
        if (!l.carry_mean.empty()) lj["carry_mean"] = l.carry_mean;
        j["layers"].push_back(std::move(lj));
    }
    std::ofstream mf(fs::path(dir) / "manifest.json");
    mf << j.dump(2) << "\n";
    if (!mf) throw std::runtime_error("save_model: manifest write failed");
}

ModelManifest load_model(const std::string& dir) {
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw std::runtime_error("load_model: cannot open manifest");
    json j;
    mf >> j;
    ModelManifest model;
    model.version = j.at("version").get<std::string>();
    if (model.version != "1")
        throw std::runtime_error("load_model: unsupported manifest version " +
                                 model.version);
    model.acc_bits = j.at("acc_bits").get<int>();
    model.seed = j.at("seed").get<uint64_t>();
    for (const auto& lj : j.at("layers")) {
        LayerSpec l;
        l.op = lj.at("op").get<std::string>() == "conv" ? LayerOp::conv
                                                        : LayerOp::linear;
        l.full_precision = lj.at("full_precision").get<bool>();
        const auto& wj = lj.at("weights");
        const auto blob_path = fs::path(dir) / wj.at("file").get<std::string>();
        std::ifstream bf(blob_path, std::ios::binary);
        if (!bf) throw std::runtime_error("load_model: missing blob");
        std::vector<uint8_t> blob((std::istreambuf_iterator<char>(bf)),
                                  std::istreambuf_iterator<char>());
        if (fnv1a(blob) != wj.at("checksum").get<uint64_t>())
            throw std::runtime_error("load_model: checksum failure for " +
                                     wj.at("file").get<std::string>());
        l.weights = deserialize_tensor(blob, scheme_from_json(wj.at("scheme")));
        if (lj.contains("geom")) {
            const auto& gj = lj.at("geom");
            l.geom = ConvGeom{gj.at("channels"), gj.at("height"),
                              gj.at("width"),    gj.at("kernel_h"),
                              gj.at("kernel_w"), gj.at("stride"),
                              gj.at("pad")};
        }
        if (lj.contains("input_scheme"))
            l.input_scheme = scheme_from_json(lj.at("input_scheme"));
        if (lj.contains("cyclic")) l.cyclic = cyclic_from_json(lj.at("cyclic"));
        if (lj.contains("output_scheme"))
            l.output_scheme = scheme_from_json(lj.at("output_scheme"));
        l.affine.scale = lj.at("affine").at("scale").get<std::vector<double>>();
        l.affine.shift = lj.at("affine").at("shift").get<std::vector<double>>();
        l.relu = lj.at("relu").get<bool>();
        if (lj.contains("pack_mode"))
            l.pack_mode = lj.at("pack_mode").get<std::string>();
        if (lj.contains("carry_mean"))
            l.carry_mean = lj.at("carry_mean").get<std::vector<double>>();
        model.layers.push_back(std::move(l));
    }
    model.validate();
    return model;
}

}  // namespace wrapnet
