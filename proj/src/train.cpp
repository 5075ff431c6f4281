#include "wrapnet/train.hpp"

#include "wrapnet/packing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace wrapnet {

void TrainConfig::validate() const {
    if (lambda_overflow < 0.0 || lambda_carry < 0.0)
        throw std::invalid_argument("TrainConfig: lambda must be >= 0");
    if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: lr > 0");
    if (lr_step < 1 || hidden < 1 || quantized_layers < 1)
        throw std::invalid_argument("TrainConfig: sizes must be positive");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size");
    if (weight_bits < 1 || weight_bits > 5)
        throw std::invalid_argument("TrainConfig: weight_bits in [1,5]");
    if (acc_bits < 4 || acc_bits > 32)
        throw std::invalid_argument("TrainConfig: acc_bits in [4,32]");
    if (!(slope >= 1.0))
        throw std::invalid_argument("TrainConfig: slope >= 1 or inf");
    if (p_target < 0.0 || p_target > 50.0)
        throw std::invalid_argument("TrainConfig: p_target in [0,50]");
}

// ---------------------------------------------------------------------------
// synthetic dataset

Dataset make_synthetic_dataset(uint64_t seed, size_t n, double difficulty) {
    Dataset d;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 0.08 * difficulty);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    // lifting map is fixed, independent of the dataset seed
    std::mt19937_64 lift_rng(0x5EEDF00Dull);
    std::normal_distribution<double> lift_dist(0.0, 1.0);
    std::array<double, 16> lift{};
    for (auto& v : lift) v = lift_dist(lift_rng);

    d.x.resize(n * d.features);
    d.y.resize(n);
    // exactly balanced classes so chance accuracy is exactly 1/classes
    for (size_t i = 0; i < n; ++i) {
        const int c = int(i % size_t(d.classes));
        const double t = unit(rng);
        const double r = 0.15 + 0.85 * t;
        const double theta = c * (2.0 * M_PI / d.classes) + 2.5 * t;
        const double px = r * std::cos(theta) + noise(rng);
        const double py = r * std::sin(theta) + noise(rng);
        for (int f = 0; f < d.features; ++f)
            d.x[i * d.features + f] = lift[f * 2] * px + lift[f * 2 + 1] * py;
        d.y[i] = c;
    }
    // stratified 70/15/15 split: each split is itself class-balanced
    for (int c = 0; c < d.classes; ++c) {
        std::vector<size_t> idx;
        for (size_t i = 0; i < n; ++i)
            if (d.y[i] == c) idx.push_back(i);
        std::shuffle(idx.begin(), idx.end(), rng);
        const size_t n_train = idx.size() * 70 / 100;
        const size_t n_val = idx.size() * 15 / 100;
        d.train_idx.insert(d.train_idx.end(), idx.begin(),
                           idx.begin() + n_train);
        d.val_idx.insert(d.val_idx.end(), idx.begin() + n_train,
                         idx.begin() + n_train + n_val);
        d.test_idx.insert(d.test_idx.end(), idx.begin() + n_train + n_val,
                          idx.end());
    }
    std::shuffle(d.train_idx.begin(), d.train_idx.end(), rng);
    return d;
}

// ---------------------------------------------------------------------------
// STE quantizer node

SteValue ste_quantize(double x, const QuantScheme& scheme) {
    scheme.validate();
    const int64_t q = round_half_away(x / scheme.step_size);
    const bool inside = q >= scheme.range_min() && q <= scheme.range_max();
    const int64_t qc = std::clamp(q, scheme.range_min(), scheme.range_max());
    return {double(qc) * scheme.step_size, inside ? 1.0 : 0.0};
}

std::string metrics_jsonl_row(const EpochMetrics& m) {
    std::ostringstream os;
    os << "{\"stage\":\"" << m.stage << "\",\"epoch\":" << m.epoch
       << ",\"acc\":" << m.acc << ",\"overflow_rate\":" << m.overflow_rate
       << ",\"carry_std\":" << m.carry_std << ",\"R_o\":" << m.r_o
       << ",\"R_c\":" << m.r_c << "}";
    return os.str();
}

// ---------------------------------------------------------------------------
// trainer internals

namespace {

struct QuantW {
    std::vector<int32_t> q;
    double scale = 1.0;
};

QuantW quantize_weights(const std::vector<double>& w, int bits) {
    QuantW out;
    out.q.resize(w.size());
    double mean_abs = 0.0, max_abs = 0.0;
    for (double v : w) {
        mean_abs += std::fabs(v);
        max_abs = std::max(max_abs, std::fabs(v));
    }
    mean_abs /= double(w.size());
    if (bits == 1) {
        out.scale = std::max(mean_abs, 1e-12);
        for (size_t i = 0; i < w.size(); ++i) out.q[i] = w[i] < 0.0 ? -1 : 1;
    } else if (bits == 2) {
        const double t = 0.7 * mean_abs;
        double surv = 0.0;
        size_t cnt = 0;
        for (double v : w)
            if (std::fabs(v) > t) {
                surv += std::fabs(v);
                ++cnt;
            }
        out.scale = cnt ? surv / double(cnt) : 1e-12;
        for (size_t i = 0; i < w.size(); ++i)
            out.q[i] = std::fabs(w[i]) > t ? (w[i] < 0.0 ? -1 : 1) : 0;
    } else {
        const int64_t qmax = (int64_t(1) << (bits - 1)) - 1;
        out.scale = std::max(max_abs / double(qmax), 1e-12);
        for (size_t i = 0; i < w.size(); ++i)
            out.q[i] = int32_t(std::clamp<int64_t>(
                round_half_away(w[i] / out.scale), -qmax, qmax));
    }
    return out;
}

struct LayerCache {
    std::vector<double> a_in, xq, gmask;
    QuantW wq;
    std::vector<double> z;        // pre-carry pre-activation (z_q units)
    std::vector<double> zc;       // post carry correction
    std::vector<double> carries;  // exact per (sample, neuron)
    std::vector<double> h, y, u, a_out;
    std::vector<double> carry_batch_mean;  // per neuron
};

struct StageFlags {
    bool calibrated = false;
    bool acts_quantized = false;
    bool use_cyclic = false;
    bool carry_values = false;  // compute exact carries
    double lambda_overflow = 0.0;
    double lambda_carry = 0.0;
};

CyclicSpec layer_cyclic(const Network& net, const TrainLayer& l) {
    CyclicSpec c;
    c.bits = l.pack_mode == "buffer_bit" ? net.acc_bits - 1 : net.acc_bits;
    c.slope = net.slope;
    c.kind = net.cyclic_kind;
    return c;
}

// exact carry count from the integer products of one neuron
double exact_neuron_carry(const int32_t* wq, const double* xq, int in,
                          int bits) {
    static thread_local std::vector<int32_t> v;
    v.resize(in);
    for (int j = 0; j < in; ++j)
        v[j] = int32_t(wrap(int64_t(wq[j]) * int64_t(std::llround(xq[j])),
                            bits));
    return double(carry_count(v, bits).carries);
}

void forward_batch(Network& net, const TrainConfig& cfg,
                   const double* batch_x, int batch, int features,
                   const StageFlags& flags, std::vector<LayerCache>& caches,
                   bool update_carry_means) {
    caches.resize(net.layers.size());
    std::vector<double> cur(batch_x, batch_x + size_t(batch) * features);
    for (size_t li = 0; li < net.layers.size(); ++li) {
        auto& l = net.layers[li];
        auto& c = caches[li];
        c.a_in = cur;
        const int in = l.in, out = l.out;
        c.z.assign(size_t(batch) * out, 0.0);

        if (l.full_precision) {
            for (int b = 0; b < batch; ++b)
                for (int o = 0; o < out; ++o) {
                    double acc = 0.0;
                    const double* a = c.a_in.data() + size_t(b) * in;
                    const double* wrow = l.w.data() + size_t(o) * in;
                    for (int j = 0; j < in; ++j) acc += wrow[j] * a[j];
                    c.z[size_t(b) * out + o] = acc;
                }
            c.y = c.z;
        } else {
            c.wq = quantize_weights(l.w, cfg.weight_bits);
            const double step = flags.calibrated ? l.delta_x : 1.0;
            const double qmax =
                flags.calibrated ? double((int64_t(1) << l.act_bits) - 1) : 0.0;
            c.xq.resize(c.a_in.size());
            c.gmask.resize(c.a_in.size());
            for (size_t i = 0; i < c.a_in.size(); ++i) {
                const double scaled = c.a_in[i] / step;
                if (flags.acts_quantized) {
                    const double q = double(round_half_away(scaled));
                    const bool inside = q >= 0.0 && q <= qmax;
                    c.xq[i] = std::clamp(q, 0.0, qmax);
                    c.gmask[i] = inside ? 1.0 / step : 0.0;
                } else {
                    c.xq[i] = scaled;
                    c.gmask[i] = 1.0 / step;
                }
            }
            for (int b = 0; b < batch; ++b)
                for (int o = 0; o < out; ++o) {
                    double acc = 0.0;
                    const double* x = c.xq.data() + size_t(b) * in;
                    const int32_t* wrow = c.wq.q.data() + size_t(o) * in;
                    for (int j = 0; j < in; ++j) acc += wrow[j] * x[j];
                    c.z[size_t(b) * out + o] = acc;
                }

            const bool sim =
                net.carry_sim_active && l.pack_mode == "carry_sim";
            if (flags.carry_values && flags.acts_quantized &&
                cfg.weight_bits <= 2) {
                c.carries.assign(size_t(batch) * out, 0.0);
                const int cbits = l.pack_mode == "buffer_bit"
                                      ? net.acc_bits - 1
                                      : net.acc_bits;
                for (int b = 0; b < batch; ++b)
                    for (int o = 0; o < out; ++o)
                        c.carries[size_t(b) * out + o] = exact_neuron_carry(
                            c.wq.q.data() + size_t(o) * in,
                            c.xq.data() + size_t(b) * in, in, cbits);
                c.carry_batch_mean.assign(out, 0.0);
                for (int b = 0; b < batch; ++b)
                    for (int o = 0; o < out; ++o)
                        c.carry_batch_mean[o] +=
                            c.carries[size_t(b) * out + o] / double(batch);
                if (update_carry_means) {
                    if (l.carry_moving_mean.size() != size_t(out)) {
                        l.carry_moving_mean = c.carry_batch_mean;
                    } else {
                        for (int o = 0; o < out; ++o)
                            l.carry_moving_mean[o] =
                                cfg.carry_momentum * l.carry_moving_mean[o] +
                                (1.0 - cfg.carry_momentum) *
                                    c.carry_batch_mean[o];
                    }
                }
            }
            if (sim && !c.carries.empty()) {
                c.zc.resize(c.z.size());
                for (int b = 0; b < batch; ++b)
                    for (int o = 0; o < out; ++o) {
                        const double mean = l.carry_moving_mean.empty()
                                                ? 0.0
                                                : l.carry_moving_mean[o];
                        c.zc[size_t(b) * out + o] =
                            c.z[size_t(b) * out + o] +
                            c.carries[size_t(b) * out + o] - mean;
                    }
            } else {
                c.zc = c.z;
            }

            const double dz = c.wq.scale * step;
            c.h.resize(c.zc.size());
            if (flags.use_cyclic) {
                const CyclicSpec cyc = layer_cyclic(net, l);
                for (size_t i = 0; i < c.zc.size(); ++i)
                    c.h[i] = cyclic_apply(c.zc[i], cyc);
            } else {
                c.h = c.zc;
            }
            c.y.resize(c.h.size());
            for (size_t i = 0; i < c.h.size(); ++i) c.y[i] = c.h[i] * dz;
        }

        c.u.resize(c.y.size());
        for (int b = 0; b < batch; ++b)
            for (int o = 0; o < out; ++o)
                c.u[size_t(b) * out + o] =
                    l.gamma[o] * c.y[size_t(b) * out + o] + l.beta[o];
        c.a_out = c.u;
        if (l.relu)
            for (double& v : c.a_out) v = std::max(v, 0.0);
        cur = c.a_out;
    }
}

struct BatchLoss {
    double ce = 0.0, r_o = 0.0, r_c = 0.0;
};

// softmax cross-entropy on the last cache's a_out; fills dlogits (mean CE)
double softmax_ce(const std::vector<double>& logits, const int* labels,
                  int batch, int classes, std::vector<double>& dlogits) {
    dlogits.assign(logits.size(), 0.0);
    double loss = 0.0;
    for (int b = 0; b < batch; ++b) {
        const double* row = logits.data() + size_t(b) * classes;
        double mx = row[0];
        for (int c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
        double denom = 0.0;
        for (int c = 0; c < classes; ++c) denom += std::exp(row[c] - mx);
        loss += -(row[labels[b]] - mx - std::log(denom));
        for (int c = 0; c < classes; ++c) {
            const double p = std::exp(row[c] - mx) / denom;
            dlogits[size_t(b) * classes + c] =
                (p - (c == labels[b] ? 1.0 : 0.0)) / double(batch);
        }
    }
    return loss / double(batch);
}

BatchLoss backward_batch(Network& net, const TrainConfig& cfg, int batch,
                         const int* labels, const StageFlags& flags,
                         std::vector<LayerCache>& caches, double lr) {
    BatchLoss bl;
    const int classes = net.layers.back().out;
    std::vector<double> dA;
    bl.ce = softmax_ce(caches.back().a_out, labels, batch, classes, dA);
    const int64_t limit = (int64_t(1) << (net.acc_bits - 1));

    for (int li = int(net.layers.size()) - 1; li >= 0; --li) {
        auto& l = net.layers[li];
        auto& c = caches[li];
        const int in = l.in, out = l.out;

        // relu + affine
        std::vector<double> dY(size_t(batch) * out);
        std::vector<double> dgamma(out, 0.0), dbeta(out, 0.0);
        for (int b = 0; b < batch; ++b)
            for (int o = 0; o < out; ++o) {
                const size_t i = size_t(b) * out + o;
                double g = dA[i];
                if (l.relu && c.u[i] <= 0.0) g = 0.0;
                dgamma[o] += g * c.y[i];
                dbeta[o] += g;
                dY[i] = g * l.gamma[o];
            }

        std::vector<double> dW(size_t(out) * in, 0.0);
        std::vector<double> dAprev(size_t(batch) * in, 0.0);

        if (l.full_precision) {
            for (int b = 0; b < batch; ++b)
                for (int o = 0; o < out; ++o) {
                    const double g = dY[size_t(b) * out + o];
                    if (g == 0.0) continue;
                    const double* a = c.a_in.data() + size_t(b) * in;
                    double* wg = dW.data() + size_t(o) * in;
                    const double* wrow = l.w.data() + size_t(o) * in;
                    double* ap = dAprev.data() + size_t(b) * in;
                    for (int j = 0; j < in; ++j) {
                        wg[j] += g * a[j];
                        ap[j] += g * wrow[j];
                    }
                }
        } else {
            const double step = flags.calibrated ? l.delta_x : 1.0;
            const double dzscale = c.wq.scale * step;
            const CyclicSpec cyc = layer_cyclic(net, l);
            const bool sim = net.carry_sim_active && l.pack_mode == "carry_sim";
            const bool have_carries = !c.carries.empty();
            const double lam_c =
                have_carries && flags.lambda_carry > 0.0 ? flags.lambda_carry
                                                         : 0.0;

            // dZ and overflow penalty
            std::vector<double> dZ(size_t(batch) * out);
            for (int b = 0; b < batch; ++b)
                for (int o = 0; o < out; ++o) {
                    const size_t i = size_t(b) * out + o;
                    double g = dY[i] * dzscale;
                    if (flags.use_cyclic) g *= cyclic_derivative(c.zc[i], cyc);
                    const double zi = c.z[i];
                    if (flags.lambda_overflow > 0.0 &&
                        std::fabs(zi) > double(limit)) {
                        bl.r_o += (std::fabs(zi) - double(limit)) /
                                  (double(out) * batch);
                        g += flags.lambda_overflow * (zi > 0.0 ? 1.0 : -1.0) /
                             (double(out) * batch);
                    }
                    dZ[i] = g;
                }

            // carry paths: simulated forward carries and/or variance penalty
            if (have_carries && (sim || lam_c > 0.0)) {
                double rc_layer = 0.0;
                if (lam_c > 0.0) {
                    for (int o = 0; o < out; ++o) {
                        double var = 0.0;
                        for (int b = 0; b < batch; ++b) {
                            const double d = c.carries[size_t(b) * out + o] -
                                             c.carry_batch_mean[o];
                            var += d * d;
                        }
                        rc_layer += var / double(batch) / double(out);
                    }
                    bl.r_c += rc_layer;
                }
                static thread_local std::vector<double> v, sg;
                v.resize(in);
                sg.resize(in);
                const int cbits =
                    l.pack_mode == "buffer_bit" ? net.acc_bits - 1 : net.acc_bits;
                for (int b = 0; b < batch; ++b)
                    for (int o = 0; o < out; ++o) {
                        const size_t i = size_t(b) * out + o;
                        double coef = sim ? dZ[i] : 0.0;
                        if (lam_c > 0.0)
                            coef += lam_c * 2.0 / (double(out) * batch) *
                                    (c.carries[i] - c.carry_batch_mean[o]);
                        if (coef == 0.0) continue;
                        const int32_t* wrow = c.wq.q.data() + size_t(o) * in;
                        const double* x = c.xq.data() + size_t(b) * in;
                        for (int j = 0; j < in; ++j) v[j] = wrow[j] * x[j];
                        soft_carry_grad(v, cbits, cfg.carry_temperature, sg);
                        double* xg = dAprev.data();  // reused below via dXq
                        (void)xg;
                        for (int j = 0; j < in; ++j) {
                            const double g = coef * sg[j];
                            // accumulate into dZ-equivalent paths directly
                            dW[size_t(o) * in + j] += g * x[j];
                            dAprev[size_t(b) * in + j] +=
                                g * wrow[j] * c.gmask[size_t(b) * in + j];
                        }
                    }
            }

            // main product paths
            for (int b = 0; b < batch; ++b)
                for (int o = 0; o < out; ++o) {
                    const double g = dZ[size_t(b) * out + o];
                    if (g == 0.0) continue;
                    const double* x = c.xq.data() + size_t(b) * in;
                    const int32_t* wrow = c.wq.q.data() + size_t(o) * in;
                    double* wg = dW.data() + size_t(o) * in;
                    const double* gm = c.gmask.data() + size_t(b) * in;
                    double* ap = dAprev.data() + size_t(b) * in;
                    for (int j = 0; j < in; ++j) {
                        wg[j] += g * x[j];
                        ap[j] += g * wrow[j] * gm[j];
                    }
                }
        }

        // SGD with momentum
        auto sgd = [&](std::vector<double>& p, std::vector<double>& vbuf,
                       const std::vector<double>& grad) {
            for (size_t i = 0; i < p.size(); ++i) {
                vbuf[i] = cfg.momentum * vbuf[i] - lr * grad[i];
                p[i] += vbuf[i];
            }
        };
        sgd(l.w, l.vw, dW);
        sgd(l.gamma, l.vgamma, dgamma);
        sgd(l.beta, l.vbeta, dbeta);
        if (!l.full_precision && cfg.weight_bits <= 2)
            for (double& w : l.w) w = std::clamp(w, -1.0, 1.0);

        dA = std::move(dAprev);
    }
    return bl;
}

Network build_network(const TrainConfig& cfg, const Dataset& data) {
    Network net;
    net.acc_bits = cfg.acc_bits;
    net.cyclic_kind = cfg.cyclic_kind;
    net.slope = cfg.slope;
    std::mt19937_64 rng(cfg.seed);
    // fp stem, cfg.quantized_layers hidden blocks, fp classifier head
    std::vector<int> dims{data.features};
    for (int i = 0; i <= cfg.quantized_layers; ++i) dims.push_back(cfg.hidden);
    dims.push_back(data.classes);
    for (size_t i = 0; i + 1 < dims.size(); ++i) {
        TrainLayer l;
        l.in = dims[i];
        l.out = dims[i + 1];
        l.full_precision =
            cfg.fp_baseline || i == 0 || i + 2 == dims.size();
        l.relu = i + 2 != dims.size();
        l.w.resize(size_t(l.in) * l.out);
        std::normal_distribution<double> init(0.0, std::sqrt(2.0 / l.in));
        for (auto& w : l.w) w = init(rng);
        l.vw.assign(l.w.size(), 0.0);
        l.gamma.assign(l.out, 1.0);
        l.beta.assign(l.out, 0.0);
        l.vgamma.assign(l.out, 0.0);
        l.vbeta.assign(l.out, 0.0);
        net.layers.push_back(std::move(l));
    }
    return net;
}

double network_accuracy(Network& net, const TrainConfig& cfg,
                        const Dataset& data, const std::vector<size_t>& idx,
                        const StageFlags& flags) {
    std::vector<LayerCache> caches;
    size_t correct = 0;
    const int B = 64;
    std::vector<double> xb(size_t(B) * data.features);
    for (size_t base = 0; base < idx.size(); base += B) {
        const int batch = int(std::min(size_t(B), idx.size() - base));
        for (int b = 0; b < batch; ++b)
            std::copy_n(data.x.data() + idx[base + b] * data.features,
                        data.features, xb.data() + size_t(b) * data.features);
        forward_batch(net, cfg, xb.data(), batch, data.features, flags,
                      caches, false);
        const auto& logits = caches.back().a_out;
        for (int b = 0; b < batch; ++b) {
            std::span<const double> row(logits.data() + size_t(b) * data.classes,
                                        size_t(data.classes));
            if (argmax(row) == data.y[idx[base + b]]) ++correct;
        }
    }
    return double(correct) / double(idx.size());
}

// mean overflow fraction and mean per-neuron carry std over the val set
void network_stats(Network& net, const TrainConfig& cfg, const Dataset& data,
                   const std::vector<size_t>& idx, const StageFlags& flags,
                   double& overflow_out, double& carry_std_out) {
    StageFlags f = flags;
    f.carry_values = flags.acts_quantized && cfg.weight_bits <= 2;
    const size_t n = std::min(idx.size(), size_t(256));
    std::vector<double> xb(n * data.features);
    for (size_t i = 0; i < n; ++i)
        std::copy_n(data.x.data() + idx[i] * data.features, data.features,
                    xb.data() + i * data.features);
    std::vector<LayerCache> caches;
    forward_batch(net, cfg, xb.data(), int(n), data.features, f, caches, false);
    const int64_t limit = (int64_t(1) << (net.acc_bits - 1)) - 1;
    double over = 0.0, total = 0.0, std_sum = 0.0, std_cnt = 0.0;
    for (size_t li = 0; li < net.layers.size(); ++li) {
        if (net.layers[li].full_precision) continue;
        const auto& c = caches[li];
        for (double z : c.z) {
            over += std::fabs(z) > double(limit) ? 1.0 : 0.0;
            total += 1.0;
        }
        if (!c.carries.empty()) {
            const int out = net.layers[li].out;
            for (int o = 0; o < out; ++o) {
                double m = 0.0, var = 0.0;
                for (size_t b = 0; b < n; ++b) m += c.carries[b * out + o];
                m /= double(n);
                for (size_t b = 0; b < n; ++b) {
                    const double d = c.carries[b * out + o] - m;
                    var += d * d;
                }
                std_sum += std::sqrt(var / double(n));
                std_cnt += 1.0;
            }
        }
    }
    overflow_out = total > 0.0 ? over / total : 0.0;
    carry_std_out = std_cnt > 0.0 ? std_sum / std_cnt : 0.0;
}

struct StageRunner {
    Network& net;
    const TrainConfig& cfg;
    const Dataset& data;
    std::vector<EpochMetrics>& metrics;
    std::mt19937_64& rng;
    int divergence_streak = 0;
    bool diverged = false;
    // the lr schedule spans the whole pipeline, not one stage
    double lr = cfg.lr;
    int global_epoch = 0;

    // returns false when the divergence detector fires
    bool run(const std::string& stage, int epochs, const StageFlags& flags,
             bool detect_divergence) {
        std::vector<size_t> order = data.train_idx;
        std::vector<double> xb(size_t(cfg.batch_size) * data.features);
        std::vector<int> yb(cfg.batch_size);
        std::vector<LayerCache> caches;
        for (int e = 0; e < epochs; ++e, ++global_epoch) {
            if (global_epoch > 0 && global_epoch % cfg.lr_step == 0)
                lr *= cfg.lr_decay;
            std::shuffle(order.begin(), order.end(), rng);
            double ro = 0.0, rc = 0.0;
            int batches = 0;
            for (size_t base = 0; base + cfg.batch_size <= order.size();
                 base += cfg.batch_size) {
                for (int b = 0; b < cfg.batch_size; ++b) {
                    std::copy_n(
                        data.x.data() + order[base + b] * data.features,
                        data.features, xb.data() + size_t(b) * data.features);
                    yb[b] = data.y[order[base + b]];
                }
                forward_batch(net, cfg, xb.data(), cfg.batch_size,
                              data.features, flags, caches, true);
                const auto bl = backward_batch(net, cfg, cfg.batch_size,
                                               yb.data(), flags, caches, lr);
                ro += bl.r_o;
                rc += bl.r_c;
                ++batches;
            }
            EpochMetrics m;
            m.stage = stage;
            m.epoch = e;
            m.acc = network_accuracy(net, cfg, data, data.val_idx, flags);
            network_stats(net, cfg, data, data.val_idx, flags,
                          m.overflow_rate, m.carry_std);
            m.r_o = batches ? ro / batches : 0.0;
            m.r_c = batches ? rc / batches : 0.0;
            metrics.push_back(m);
            if (detect_divergence) {
                if (m.acc <= data.chance() + 0.02)
                    ++divergence_streak;
                else
                    divergence_streak = 0;
                if (divergence_streak >= 10) {
                    diverged = true;
                    return false;
                }
            }
        }
        return true;
    }
};

void calibrate_network(Network& net, const TrainConfig& cfg,
                       const Dataset& data) {
    // collect per-quantized-layer input activations with real-valued forward
    StageFlags flags;  // pretrain-style forward
    const size_t n = std::min(data.train_idx.size(), size_t(1024));
    std::vector<double> xb(n * data.features);
    for (size_t i = 0; i < n; ++i)
        std::copy_n(data.x.data() + data.train_idx[i] * data.features,
                    data.features, xb.data() + i * data.features);
    std::vector<LayerCache> caches;
    forward_batch(net, cfg, xb.data(), int(n), data.features, flags, caches,
                  false);

    std::vector<double> deltas;
    std::vector<size_t> qlayers;
    for (size_t li = 0; li < net.layers.size(); ++li) {
        auto& l = net.layers[li];
        if (l.full_precision) continue;
        const auto& acts = caches[li].a_in;  // n x in, post-ReLU
        if (cfg.conventional) {
            std::vector<double> sorted(acts.begin(), acts.end());
            std::sort(sorted.begin(), sorted.end());
            const double q999 = sorted[std::min(
                sorted.size() - 1,
                size_t(std::ceil(0.999 * double(sorted.size()))))];
            l.act_bits = cfg.conventional_bits;
            l.delta_x = std::max(
                q999 / double((int64_t(1) << l.act_bits) - 1), 1e-9);
        } else {
            LayerSpec spec;
            spec.op = LayerOp::linear;
            const auto wq = quantize_weights(l.w, cfg.weight_bits);
            spec.weights.shape = {l.out, l.in};
            spec.weights.values = wq.q;
            spec.weights.scheme =
                QuantScheme{wq.scale, cfg.weight_bits == 1 ? 1 : 2, true,
                            cfg.weight_bits == 1 ? QuantKind::binary
                                                 : QuantKind::ternary};
            if (cfg.weight_bits > 2)
                spec.weights.scheme =
                    QuantScheme{wq.scale, cfg.weight_bits, true,
                                QuantKind::uniform};
            const auto cal = calibrate_step_size(spec, acts, n, cfg.p_target,
                                                 cfg.acc_bits);
            l.delta_x = cal.delta_x;
            l.act_bits = cal.bits;
        }
        deltas.push_back(l.delta_x);
        qlayers.push_back(li);
    }
    if (cfg.shared_delta && !deltas.empty()) {
        double logsum = 0.0;
        for (double d : deltas) logsum += std::log(d);
        const double shared = std::exp(logsum / double(deltas.size()));
        for (size_t li : qlayers) {
            auto& l = net.layers[li];
            const double q999_scaled =
                l.delta_x * double((int64_t(1) << l.act_bits) - 1);
            l.delta_x = shared;
            l.act_bits = std::clamp(
                int(std::ceil(std::log2(
                    std::ceil(q999_scaled / shared) + 1.0))),
                1, 16);
        }
    }
    net.calibrated = true;
}

}  // namespace

ModelManifest export_model(const Network& net, const TrainConfig& cfg) {
    ModelManifest m;
    m.acc_bits = net.acc_bits;
    m.seed = cfg.seed;
    for (size_t li = 0; li < net.layers.size(); ++li) {
        const auto& l = net.layers[li];
        LayerSpec spec;
        spec.op = LayerOp::linear;
        spec.full_precision = l.full_precision;
        spec.relu = l.relu;
        spec.affine.scale = l.gamma;
        spec.affine.shift = l.beta;
        if (l.full_precision) {
            double max_abs = 0.0;
            for (double w : l.w) max_abs = std::max(max_abs, std::fabs(w));
            const double step = std::max(max_abs / 32767.0, 1e-12);
            spec.weights = quantize_uniform(
                l.w, {l.out, l.in}, QuantScheme{step, 16, true,
                                                QuantKind::uniform});
        } else {
            const auto wq = quantize_weights(l.w, cfg.weight_bits);
            spec.weights.shape = {l.out, l.in};
            spec.weights.values = wq.q;
            if (cfg.weight_bits == 1)
                spec.weights.scheme =
                    QuantScheme{wq.scale, 1, true, QuantKind::binary};
            else if (cfg.weight_bits == 2)
                spec.weights.scheme =
                    QuantScheme{wq.scale, 2, true, QuantKind::ternary};
            else
                spec.weights.scheme = QuantScheme{wq.scale, cfg.weight_bits,
                                                  true, QuantKind::uniform};
            spec.input_scheme =
                QuantScheme{l.delta_x, l.act_bits, false, QuantKind::uniform};
            if (net.use_cyclic) spec.cyclic = layer_cyclic(net, l);
            spec.pack_mode = l.pack_mode;
            spec.carry_mean = l.carry_moving_mean;
        }
        m.layers.push_back(std::move(spec));
    }
    // requantization schemes: each layer feeding a quantized layer carries it
    for (size_t li = 0; li + 1 < m.layers.size(); ++li)
        if (!m.layers[li + 1].full_precision)
            m.layers[li].output_scheme = m.layers[li + 1].input_scheme;
    return m;
}

double eval_accuracy(const ModelManifest& model, const Dataset& data,
                     const std::vector<size_t>& idx,
                     const ForwardOptions& opts) {
    size_t correct = 0;
    for (size_t i : idx) {
        auto r = forward_model(
            model,
            std::span<const double>(data.x.data() + i * data.features,
                                    size_t(data.features)),
            opts);
        if (argmax(r.output) == data.y[i]) ++correct;
    }
    return double(correct) / double(idx.size());
}

TrainResult train_pipeline(const TrainConfig& cfg, const Dataset& data) {
    cfg.validate();
    TrainResult res;
    Network net = build_network(cfg, data);
    std::mt19937_64 rng(cfg.seed ^ 0x9E3779B97F4A7C15ull);
    StageRunner runner{net, cfg, data, res.metrics, rng};

    // stage 1: pre-train with quantized weights, real activations, no cyclic
    StageFlags pre;
    runner.run("pretrain", cfg.epochs_pretrain, pre, false);

    if (!cfg.fp_baseline) {
        // stage 2: calibrate activation step sizes
        calibrate_network(net, cfg, data);
        net.use_cyclic = cfg.use_cyclic && !cfg.conventional;

        // stage 3: warm-up with full-precision activations
        StageFlags warm;
        warm.calibrated = true;
        warm.use_cyclic = net.use_cyclic;
        warm.lambda_overflow =
            cfg.shared_delta ? cfg.lambda_overflow : 0.0;
        bool ok = runner.run("warmup", cfg.epochs_warmup, warm, true);

        // stage 4: fine-tune with quantized activations and regularizers
        if (ok) {
            StageFlags fine;
            fine.calibrated = true;
            fine.acts_quantized = true;
            fine.use_cyclic = net.use_cyclic;
            fine.lambda_overflow = cfg.lambda_overflow;
            fine.lambda_carry = cfg.lambda_carry;
            fine.carry_values =
                (cfg.lambda_carry > 0.0 || cfg.simulate_carry) &&
                cfg.weight_bits <= 2;
            if (cfg.simulate_carry) {
                net.carry_sim_active = true;
                for (auto& l : net.layers)
                    if (!l.full_precision) l.pack_mode = "carry_sim";
            }
            runner.run("finetune", cfg.epochs_finetune, fine, true);
        }
    }

    res.diverged = runner.diverged;
    net.acts_quantized = net.calibrated;
    res.network = net;
    res.model = export_model(net, cfg);

    StageFlags final_flags;
    final_flags.calibrated = net.calibrated;
    final_flags.acts_quantized = net.calibrated && !cfg.fp_baseline;
    final_flags.use_cyclic = net.use_cyclic;
    res.final_val_acc =
        network_accuracy(net, cfg, data, data.val_idx, final_flags);
    res.final_test_acc =
        network_accuracy(net, cfg, data, data.test_idx, final_flags);
    network_stats(net, cfg, data, data.val_idx, final_flags,
                  res.final_overflow_rate, res.final_carry_std);
    return res;
}

ScheduleResult carry_adaptation_schedule(const TrainConfig& cfg,
                                         const Dataset& data,
                                         const Network& base) {
    ScheduleResult sr;
    Network net = base;
    net.carry_sim_active = true;
    std::mt19937_64 rng(cfg.seed ^ 0xA5A5A5A5ull);

    StageFlags fine;
    fine.calibrated = true;
    fine.acts_quantized = true;
    fine.use_cyclic = net.use_cyclic;
    fine.lambda_overflow = cfg.lambda_overflow;
    fine.lambda_carry = cfg.lambda_carry > 0.0 ? cfg.lambda_carry : 0.01;
    fine.carry_values = true;

    // rank quantized layers by their calibration-pass carry std, ascending
    std::vector<size_t> qlayers;
    for (size_t li = 0; li < net.layers.size(); ++li)
        if (!net.layers[li].full_precision) qlayers.push_back(li);
    std::vector<double> layer_std(qlayers.size(), 0.0);
    {
        const size_t n = std::min(data.val_idx.size(), size_t(256));
        std::vector<double> xb(n * data.features);
        for (size_t i = 0; i < n; ++i)
            std::copy_n(data.x.data() + data.val_idx[i] * data.features,
                        data.features, xb.data() + i * data.features);
        std::vector<LayerCache> caches;
        Network probe = net;
        probe.carry_sim_active = false;
        forward_batch(probe, cfg, xb.data(), int(n), data.features, fine,
                      caches, false);
        for (size_t qi = 0; qi < qlayers.size(); ++qi) {
            const auto& c = caches[qlayers[qi]];
            const int out = net.layers[qlayers[qi]].out;
            double acc_std = 0.0;
            net.layers[qlayers[qi]].carry_moving_mean.assign(out, 0.0);
            for (int o = 0; o < out; ++o) {
                double m = 0.0, var = 0.0;
                for (size_t b = 0; b < n; ++b) m += c.carries[b * out + o];
                m /= double(n);
                for (size_t b = 0; b < n; ++b) {
                    const double d = c.carries[b * out + o] - m;
                    var += d * d;
                }
                acc_std += std::sqrt(var / double(n));
                net.layers[qlayers[qi]].carry_moving_mean[o] = m;
            }
            layer_std[qi] = acc_std / out;
        }
    }
    std::vector<size_t> order(qlayers.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return layer_std[a] < layer_std[b];
    });

    std::vector<EpochMetrics> metrics;
    StageRunner runner{net, cfg, data, metrics, rng};
    // the schedule replaces the fine-tuning stage: pick up the lr where the
    // warm-up left off
    runner.global_epoch = cfg.epochs_pretrain + cfg.epochs_warmup;
    for (int e = cfg.lr_step; e <= runner.global_epoch; e += cfg.lr_step)
        runner.lr *= cfg.lr_decay;
    double baseline_acc =
        network_accuracy(net, cfg, data, data.val_idx, fine);

    sr.modes.assign(qlayers.size(), "");
    bool buffer_rest = false;
    for (size_t oi = 0; oi < order.size(); ++oi) {
        const size_t qi = order[oi];
        if (buffer_rest) {
            sr.modes[qi] = "buffer_bit";
            net.layers[qlayers[qi]].pack_mode = "buffer_bit";
            continue;
        }
        Network snapshot = net;
        net.layers[qlayers[qi]].pack_mode = "carry_sim";
        runner.run("schedule", cfg.epochs_schedule, fine, false);
        const double acc = network_accuracy(net, cfg, data, data.val_idx, fine);
        if (acc < baseline_acc - 0.03) {
            net = snapshot;
            buffer_rest = true;
            sr.modes[qi] = "buffer_bit";
            net.layers[qlayers[qi]].pack_mode = "buffer_bit";
        } else {
            sr.modes[qi] = "carry_sim";
            baseline_acc = std::max(baseline_acc, acc);
        }
    }
    // consolidation: spend whatever is left of the fine-tuning budget with
    // the final per-layer assignment in place
    const int spent = int(order.size()) * cfg.epochs_schedule;
    if (cfg.epochs_finetune > spent)
        runner.run("schedule", cfg.epochs_finetune - spent, fine, false);

    sr.result.network = net;
    sr.result.metrics = std::move(metrics);
    sr.result.model = export_model(net, cfg);
    sr.result.final_val_acc =
        network_accuracy(net, cfg, data, data.val_idx, fine);
    sr.result.final_test_acc =
        network_accuracy(net, cfg, data, data.test_idx, fine);
    network_stats(net, cfg, data, data.val_idx, fine,
                  sr.result.final_overflow_rate, sr.result.final_carry_std);
    return sr;
}

}  // namespace wrapnet
