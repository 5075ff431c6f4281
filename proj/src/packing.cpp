#include "wrapnet/packing.hpp"

#include "wrapnet/fxp.hpp"

#include <cmath>
#include <stdexcept>

namespace wrapnet {

uint64_t PackSpec::word_mask() const {
    return width == 64 ? ~uint64_t(0) : (uint64_t(1) << width) - 1;
}

uint64_t PackSpec::lane_mask() const {
    return (uint64_t(1) << lane_bits) - 1;
}

uint64_t PackSpec::value_mask_all() const {
    if (!buffered) return word_mask();
    const uint64_t lane_value = (uint64_t(1) << (lane_bits - 1)) - 1;
    uint64_t m = 0;
    for (int i = 0; i < lanes(); ++i) m |= lane_value << (i * lane_bits);
    return m;
}

uint64_t PackSpec::high_bit_all() const {
    uint64_t m = 0;
    for (int i = 0; i < lanes(); ++i)
        m |= uint64_t(1) << (i * lane_bits + lane_bits - 1);
    return m;
}

void PackSpec::validate() const {
    if (width != 16 && width != 32 && width != 64)
        throw std::invalid_argument("PackSpec: width must be 16, 32 or 64");
    if (lane_bits < 2 || lane_bits > 32 || width % lane_bits != 0)
        throw std::invalid_argument("PackSpec: lane_bits must divide width");
}

PackedWord pack(std::span<const uint64_t> values, const PackSpec& spec) {
    spec.validate();
    if (static_cast<int>(values.size()) != spec.lanes())
        throw std::invalid_argument("pack: value count must equal lane count");
    const uint64_t cap = uint64_t(1) << spec.value_bits();
    PackedWord w{spec, 0};
    for (int i = 0; i < spec.lanes(); ++i) {
        if (values[i] >= cap)
            throw std::invalid_argument("pack: value exceeds lane capacity");
        w.payload |= values[i] << (i * spec.lane_bits);
    }
    return w;
}

std::vector<uint64_t> unpack(const PackedWord& word) {
    std::vector<uint64_t> out(word.spec.lanes());
    for (int i = 0; i < word.spec.lanes(); ++i)
        out[i] = (word.payload >> (i * word.spec.lane_bits)) &
                 word.spec.lane_mask();
    return out;
}

PackedWord add_contaminated(const PackedWord& a, const PackedWord& c,
                            uint64_t* top_carry_out) {
    if (a.spec != c.spec) throw std::invalid_argument("add: spec mismatch");
    if (a.spec.buffered)
        throw std::invalid_argument("add_contaminated: buffered spec");
    const unsigned __int128 wide =
        static_cast<unsigned __int128>(a.payload) + c.payload;
    if (top_carry_out)
        *top_carry_out = static_cast<uint64_t>(wide >> a.spec.width);
    return PackedWord{a.spec, static_cast<uint64_t>(wide) & a.spec.word_mask()};
}

PackedWord add_lane_isolated(const PackedWord& a, const PackedWord& c) {
    if (a.spec != c.spec) throw std::invalid_argument("add: spec mismatch");
    const uint64_t high = a.spec.high_bit_all();
    const uint64_t low = ~high & a.spec.word_mask();
    const uint64_t sum =
        ((a.payload & low) + (c.payload & low)) ^ ((a.payload ^ c.payload) & high);
    return PackedWord{a.spec, sum & a.spec.word_mask()};
}

PackedWord add_buffered(const PackedWord& a, const PackedWord& c) {
    if (a.spec != c.spec) throw std::invalid_argument("add: spec mismatch");
    if (!a.spec.buffered)
        throw std::invalid_argument("add_buffered: spec not buffered");
    const uint64_t buffer = a.spec.high_bit_all();
    if ((a.payload & buffer) || (c.payload & buffer))
        throw std::invalid_argument("add_buffered: operand buffer bit set");
    const uint64_t sum = (a.payload + c.payload) & a.spec.word_mask();
    return PackedWord{a.spec, sum & a.spec.value_mask_all()};
}

CarryResult carry_count(std::span<const int32_t> v, int bits) {
    uint64_t u = 0;
    for (int32_t x : v) u += to_unsigned(x, bits);
    CarryResult res;
    res.unsigned_sum = u;
    const uint64_t mask = (uint64_t(1) << bits) - 1;
    uint64_t ci = u, ri = 0;
    while (ci != 0) {
        const uint64_t s = ci + ri;
        ci = s >> bits;
        ri = s & mask;
        res.carries += ci;
    }
    res.r_final = ri;
    return res;
}

PackedDotResult packed_dot_contaminated(std::span<const int32_t> x,
                                        std::span<const int32_t> w,
                                        const PackSpec& spec) {
    spec.validate();
    if (spec.buffered)
        throw std::invalid_argument("packed_dot_contaminated: buffered spec");
    if (x.size() != w.size())
        throw std::invalid_argument("packed_dot_contaminated: length mismatch");
    const int b = spec.lane_bits;
    const int L = spec.lanes();
    const uint64_t mask = (uint64_t(1) << b) - 1;

    PackedWord acc{spec, 0};
    PackedDotResult res;
    for (size_t base = 0; base < x.size(); base += L) {
        PackedWord group{spec, 0};
        for (int lane = 0; lane < L && base + lane < x.size(); ++lane) {
            const int32_t wgt = w[base + lane];
            if (wgt < -1 || wgt > 1)
                throw std::invalid_argument(
                    "packed_dot_contaminated: weight outside {-1,0,1}");
            const int64_t product =
                wrap(int64_t(x[base + lane]) * wgt, b);
            group.payload |= to_unsigned(product, b)
                             << (lane * b);
        }
        uint64_t top = 0;
        acc = add_contaminated(acc, group, &top);
        res.dropped_top_carries += top;
    }

    const auto lanes = unpack(acc);
    uint64_t r = lanes[0];
    for (int lane = 1; lane < L; ++lane) {
        const uint64_t s = r + lanes[lane];
        res.dropped_reduction_carries += s >> b;
        r = s & mask;
    }
    res.value = to_signed(r, b);
    return res;
}

void carry_batch_stats(std::span<const double> counts, size_t batch,
                       size_t neurons, std::span<double> mean_out,
                       std::span<double> var_out) {
    if (batch == 0) throw std::invalid_argument("carry_batch_stats: empty batch");
    if (counts.size() != batch * neurons || mean_out.size() != neurons ||
        var_out.size() != neurons)
        throw std::invalid_argument("carry_batch_stats: size mismatch");
    for (size_t n = 0; n < neurons; ++n) {
        double m = 0.0;
        for (size_t s = 0; s < batch; ++s) m += counts[s * neurons + n];
        m /= double(batch);
        double v = 0.0;
        for (size_t s = 0; s < batch; ++s) {
            const double d = counts[s * neurons + n] - m;
            v += d * d;
        }
        mean_out[n] = m;
        var_out[n] = v / double(batch);
    }
}

void CarryStats::update(std::span<const double> batch_mean) {
    if (!initialized) {
        moving_mean.assign(batch_mean.begin(), batch_mean.end());
        initialized = true;
        return;
    }
    if (batch_mean.size() != moving_mean.size())
        throw std::invalid_argument("CarryStats: neuron count changed");
    for (size_t i = 0; i < moving_mean.size(); ++i)
        moving_mean[i] = momentum * moving_mean[i] +
                         (1.0 - momentum) * batch_mean[i];
}

SoftCarry soft_carry_count(std::span<const double> v, int bits,
                           double temperature) {
    const double period = double(uint64_t(1) << bits);
    double u = 0.0;
    for (double x : v) {
        const double s = std::tanh((x + 0.5) / temperature);
        u += x + period * (1.0 - s) / 2.0;
    }
    SoftCarry out;
    out.u_soft = u;
    out.smooth_value = u / (period - 1.0);
    // exact fold of the softened sum
    double ci = u, ri = 0.0, total = 0.0;
    while (ci >= 1.0 || ci <= -1.0) {
        const double s = ci + ri;
        ci = std::floor(s / period);
        ri = s - period * ci;
        total += ci;
    }
    out.value = total;
    return out;
}

void soft_carry_grad(std::span<const double> v, int bits, double temperature,
                     std::span<double> grad_out) {
    if (grad_out.size() != v.size())
        throw std::invalid_argument("soft_carry_grad: size mismatch");
    const double period = double(uint64_t(1) << bits);
    const double half = period / 2.0;
    for (size_t i = 0; i < v.size(); ++i) {
        const double t = std::tanh((v[i] + 0.5) / temperature);
        const double sprime = (1.0 - t * t) / temperature;
        grad_out[i] = (1.0 - half * sprime) / (period - 1.0);
    }
}

}  // namespace wrapnet
