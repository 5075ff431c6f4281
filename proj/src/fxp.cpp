#include "wrapnet/fxp.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

namespace wrapnet {

std::string to_string(QuantKind k) {
    switch (k) {
        case QuantKind::uniform: return "uniform";
        case QuantKind::binary: return "binary";
        case QuantKind::ternary: return "ternary";
    }
    throw std::logic_error("bad QuantKind");
}

QuantKind quant_kind_from_string(const std::string& s) {
    if (s == "uniform") return QuantKind::uniform;
    if (s == "binary") return QuantKind::binary;
    if (s == "ternary") return QuantKind::ternary;
    throw std::invalid_argument("unknown quantizer kind: " + s);
}

int64_t QuantScheme::range_min() const {
    if (kind == QuantKind::binary || kind == QuantKind::ternary) return -1;
    return is_signed ? -(int64_t(1) << (bits - 1)) : 0;
}

int64_t QuantScheme::range_max() const {
    // Binary/ternary codes are {-1,+1}/{-1,0,+1}; the two's complement range
    // convention does not apply to them.
    if (kind == QuantKind::binary || kind == QuantKind::ternary) return 1;
    return is_signed ? (int64_t(1) << (bits - 1)) - 1
                     : (int64_t(1) << bits) - 1;
}

void QuantScheme::validate() const {
    if (!(step_size > 0.0))
        throw std::invalid_argument("QuantScheme: step_size must be > 0");
    if (bits < 1 || bits > 16)
        throw std::invalid_argument("QuantScheme: bits must be in [1, 16]");
    if (kind == QuantKind::binary && bits != 1)
        throw std::invalid_argument("QuantScheme: binary requires bits = 1");
    if (kind == QuantKind::ternary && bits != 2)
        throw std::invalid_argument("QuantScheme: ternary requires bits = 2");
}

void FixedTensor::validate() const {
    scheme.validate();
    int64_t count = 1;
    for (int64_t d : shape) {
        if (d <= 0) throw std::invalid_argument("FixedTensor: bad dimension");
        count *= d;
    }
    if (count != static_cast<int64_t>(values.size()))
        throw std::invalid_argument("FixedTensor: shape/value count mismatch");
    const int64_t lo = scheme.range_min(), hi = scheme.range_max();
    for (int32_t v : values)
        if (v < lo || v > hi)
            throw std::invalid_argument("FixedTensor: value out of range");
}

int64_t round_half_away(double x) {
    return static_cast<int64_t>(x >= 0.0 ? std::floor(x + 0.5)
                                         : std::ceil(x - 0.5));
}

FixedTensor quantize_uniform(std::span<const double> x,
                             std::vector<int64_t> shape,
                             const QuantScheme& scheme) {
    scheme.validate();
    if (scheme.kind != QuantKind::uniform)
        throw std::invalid_argument("quantize_uniform: scheme kind");
    FixedTensor out;
    out.shape = std::move(shape);
    out.scheme = scheme;
    out.values.reserve(x.size());
    const int64_t lo = scheme.range_min(), hi = scheme.range_max();
    for (double v : x) {
        int64_t q = round_half_away(v / scheme.step_size);
        q = std::clamp(q, lo, hi);
        out.values.push_back(static_cast<int32_t>(q));
    }
    out.validate();
    return out;
}

FixedTensor quantize_binary(std::span<const double> w,
                            std::vector<int64_t> shape) {
    if (w.empty()) throw std::invalid_argument("quantize_binary: empty tensor");
    double mean_abs = 0.0;
    for (double v : w) mean_abs += std::fabs(v);
    mean_abs /= static_cast<double>(w.size());
    if (mean_abs == 0.0)
        throw std::invalid_argument("quantize_binary: degenerate scale");
    FixedTensor out;
    out.shape = std::move(shape);
    out.scheme = QuantScheme{mean_abs, 1, true, QuantKind::binary};
    out.values.reserve(w.size());
    // sign(0) maps to +1
    for (double v : w) out.values.push_back(v < 0.0 ? -1 : 1);
    return out;
}

FixedTensor quantize_ternary(std::span<const double> w,
                             std::vector<int64_t> shape) {
    if (w.empty()) throw std::invalid_argument("quantize_ternary: empty tensor");
    double mean_abs = 0.0;
    for (double v : w) mean_abs += std::fabs(v);
    mean_abs /= static_cast<double>(w.size());
    const double threshold = 0.7 * mean_abs;
    double surviving_sum = 0.0;
    size_t surviving = 0;
    for (double v : w)
        if (std::fabs(v) > threshold) {
            surviving_sum += std::fabs(v);
            ++surviving;
        }
    if (surviving == 0)
        throw std::invalid_argument("quantize_ternary: degenerate scale");
    FixedTensor out;
    out.shape = std::move(shape);
    out.scheme =
        QuantScheme{surviving_sum / surviving, 2, true, QuantKind::ternary};
    out.values.reserve(w.size());
    for (double v : w)
        out.values.push_back(std::fabs(v) > threshold ? (v < 0.0 ? -1 : 1) : 0);
    return out;
}

std::vector<double> dequantize(const FixedTensor& t) {
    std::vector<double> out(t.values.size());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = t.scheme.step_size * t.values[i];
    return out;
}

int64_t wrap(int64_t z, int bits) {
    if (bits < 1 || bits > 32) throw std::invalid_argument("wrap: bits");
    const uint64_t period = uint64_t(1) << bits;
    const uint64_t mask = period - 1;
    uint64_t r = static_cast<uint64_t>(z) & mask;
    if (r >= period / 2) return static_cast<int64_t>(r) - static_cast<int64_t>(period);
    return static_cast<int64_t>(r);
}

uint64_t to_unsigned(int64_t v, int bits) {
    if (bits < 1 || bits > 32) throw std::invalid_argument("to_unsigned: bits");
    const int64_t half = int64_t(1) << (bits - 1);
    if (v < -half || v >= half)
        throw std::invalid_argument("to_unsigned: value outside signed range");
    return v >= 0 ? static_cast<uint64_t>(v)
                  : static_cast<uint64_t>(v + (int64_t(1) << bits));
}

int64_t to_signed(uint64_t u, int bits) {
    if (bits < 1 || bits > 32) throw std::invalid_argument("to_signed: bits");
    const uint64_t period = uint64_t(1) << bits;
    if (u >= period)
        throw std::invalid_argument("to_signed: value outside unsigned range");
    return u >= period / 2 ? static_cast<int64_t>(u) - static_cast<int64_t>(period)
                           : static_cast<int64_t>(u);
}

int64_t exact_dot(std::span<const int32_t> x, std::span<const int32_t> w) {
    if (x.size() != w.size())
        throw std::invalid_argument("exact_dot: length mismatch");
    int64_t acc = 0;
    for (size_t i = 0; i < x.size(); ++i)
        acc += static_cast<int64_t>(x[i]) * static_cast<int64_t>(w[i]);
    return acc;
}

int64_t wrapped_dot(std::span<const int32_t> x, std::span<const int32_t> w,
                    int bits) {
    if (x.size() != w.size())
        throw std::invalid_argument("wrapped_dot: length mismatch");
    const uint64_t mask = (uint64_t(1) << bits) - 1;
    uint64_t acc = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        const uint64_t p = static_cast<uint64_t>(
            static_cast<int64_t>(x[i]) * static_cast<int64_t>(w[i]));
        acc = (acc + p) & mask;
    }
    return to_signed(acc, bits);
}

std::vector<uint8_t> serialize_tensor(const FixedTensor& t) {
    std::vector<uint8_t> out;
    auto put32 = [&out](int32_t v) {
        const uint32_t u = static_cast<uint32_t>(v);
        out.push_back(static_cast<uint8_t>(u & 0xFF));
        out.push_back(static_cast<uint8_t>((u >> 8) & 0xFF));
        out.push_back(static_cast<uint8_t>((u >> 16) & 0xFF));
        out.push_back(static_cast<uint8_t>((u >> 24) & 0xFF));
    };
    put32(static_cast<int32_t>(t.shape.size()));
    for (int64_t d : t.shape) put32(static_cast<int32_t>(d));
    for (int32_t v : t.values) put32(v);
    return out;
}

FixedTensor deserialize_tensor(std::span<const uint8_t> bytes,
                               const QuantScheme& scheme) {
    size_t pos = 0;
    auto get32 = [&bytes, &pos]() -> int32_t {
        if (pos + 4 > bytes.size())
            throw std::runtime_error("tensor blob truncated");
        uint32_t u = static_cast<uint32_t>(bytes[pos]) |
                     (static_cast<uint32_t>(bytes[pos + 1]) << 8) |
                     (static_cast<uint32_t>(bytes[pos + 2]) << 16) |
                     (static_cast<uint32_t>(bytes[pos + 3]) << 24);
        pos += 4;
        return static_cast<int32_t>(u);
    };
    FixedTensor t;
    t.scheme = scheme;
    const int32_t ndims = get32();
    if (ndims < 0 || ndims > 8) throw std::runtime_error("tensor blob: bad rank");
    int64_t count = 1;
    for (int32_t i = 0; i < ndims; ++i) {
        t.shape.push_back(get32());
        count *= t.shape.back();
    }
    t.values.reserve(count);
    for (int64_t i = 0; i < count; ++i) t.values.push_back(get32());
    if (pos != bytes.size()) throw std::runtime_error("tensor blob: trailing bytes");
    return t;
}

uint64_t fnv1a(std::span<const uint8_t> bytes) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace wrapnet
