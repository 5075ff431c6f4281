// fxp.hpp — fixed-point quantizers and wrapping integer accumulation.
//
// Everything here is a pure function. Integers live in int32 storage; the
// wide accumulator type is int64, which covers every supported shape
// (K <= 2^20, |product| <= 2^15).

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace wrapnet {

enum class QuantKind { uniform, binary, ternary };

std::string to_string(QuantKind k);
QuantKind quant_kind_from_string(const std::string& s);

// Scale + bitwidth + signedness of one fixed-point encoding.
struct QuantScheme {
    double step_size = 1.0;  // delta, > 0
    int bits = 8;            // in [1, 16]
    bool is_signed = true;
    QuantKind kind = QuantKind::uniform;

    int64_t range_min() const;
    int64_t range_max() const;
    void validate() const;  // throws std::invalid_argument
};

// Shape + integer payload + the scheme that gives the payload meaning.
struct FixedTensor {
    std::vector<int64_t> shape;
    std::vector<int32_t> values;
    QuantScheme scheme;

    size_t size() const { return values.size(); }
    void validate() const;
};

// Round half away from zero. round(2.5) = 3, round(-2.5) = -3.
int64_t round_half_away(double x);

FixedTensor quantize_uniform(std::span<const double> x,
                             std::vector<int64_t> shape,
                             const QuantScheme& scheme);

// Sign quantizer; scale = mean |w|. Throws on an all-zero tensor.
FixedTensor quantize_binary(std::span<const double> w,
                            std::vector<int64_t> shape);

// TWN-style ternary quantizer: threshold t = 0.7 * mean|w|,
// scale = mean |w| over entries with |w| > t.
FixedTensor quantize_ternary(std::span<const double> w,
                             std::vector<int64_t> shape);

std::vector<double> dequantize(const FixedTensor& t);

// Reduce z into the signed b-bit range [-2^(b-1), 2^(b-1)).
int64_t wrap(int64_t z, int bits);

// Two's complement reinterpretation, both directions. b in [1, 32].
uint64_t to_unsigned(int64_t v, int bits);
int64_t to_signed(uint64_t u, int bits);

int64_t exact_dot(std::span<const int32_t> x, std::span<const int32_t> w);
int64_t wrapped_dot(std::span<const int32_t> x, std::span<const int32_t> w,
                    int bits);

// Tensor blob format: little-endian int32 words,
// [ndims][dim0..dimN-1][values...].
std::vector<uint8_t> serialize_tensor(const FixedTensor& t);
// Deserializes payload only; the scheme travels in the model manifest.
FixedTensor deserialize_tensor(std::span<const uint8_t> bytes,
                               const QuantScheme& scheme);

// FNV-1a, used as the blob checksum in model manifests.
uint64_t fnv1a(std::span<const uint8_t> bytes);

}  // namespace wrapnet
