// packing.hpp — SWAR bit-packing, the three accumulation schemes, and the
// carry oracle.
//
// A PackedWord holds L = width / lane_bits lanes. In buffered layout each
// lane keeps (lane_bits - 1) value bits plus one buffer bit at its top that
// absorbs the carry-out and is cleared after every add.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace wrapnet {

struct PackSpec {
    int width = 64;       // W in {16, 32, 64}
    int lane_bits = 8;    // b per lane, must divide W
    bool buffered = false;

    int lanes() const { return width / lane_bits; }
    int value_bits() const { return buffered ? lane_bits - 1 : lane_bits; }
    uint64_t word_mask() const;
    uint64_t lane_mask() const;       // low lane_bits bits
    uint64_t value_mask_all() const;  // value bits of every lane
    uint64_t high_bit_all() const;    // top bit of every lane
    void validate() const;
    bool operator==(const PackSpec&) const = default;
};

struct PackedWord {
    PackSpec spec;
    uint64_t payload = 0;
};

PackedWord pack(std::span<const uint64_t> values, const PackSpec& spec);
std::vector<uint64_t> unpack(const PackedWord& word);

// One wide add; lane carry-outs contaminate the next lane, the top-lane
// carry is dropped. Optionally reports whether a carry left the word.
PackedWord add_contaminated(const PackedWord& a, const PackedWord& c,
                            uint64_t* top_carry_out = nullptr);

// Each lane wraps independently at lane_bits (vector-instruction semantics).
PackedWord add_lane_isolated(const PackedWord& a, const PackedWord& c);

// Wide add, then clear buffer bits; equals lane-isolated at (lane_bits - 1).
PackedWord add_buffered(const PackedWord& a, const PackedWord& c);

// Closed-form carry fold: u = sum of two's complement reinterpretations,
// then repeatedly fold the overflowed part back in until it is zero.
// Identity: r_final = (u + carries) mod 2^b.
struct CarryResult {
    uint64_t carries = 0;
    uint64_t r_final = 0;
    uint64_t unsigned_sum = 0;
};
CarryResult carry_count(std::span<const int32_t> v, int bits);

// Per-addition simulator used as the small-instance oracle in tests lives in
// test code, not here.

// Bit-packed dot product with carry contamination. Products are distributed
// round-robin across lanes (product i goes to lane i mod L), accumulated
// with add_contaminated, then the lanes are reduced with b-bit wrapping adds
// whose carry-outs are dropped. Both dropped-carry kinds are counted.
struct PackedDotResult {
    int64_t value = 0;              // signed b-bit result
    uint64_t dropped_top_carries = 0;       // carries that left the word
    uint64_t dropped_reduction_carries = 0; // carries dropped while folding lanes
    uint64_t dropped_carries() const {
        return dropped_top_carries + dropped_reduction_carries;
    }
};
PackedDotResult packed_dot_contaminated(std::span<const int32_t> x,
                                        std::span<const int32_t> w,
                                        const PackSpec& spec);

// Per-neuron carry statistics over a batch. Population variance (divisor
// b_s); the running mean is a moving average with the given momentum.
struct CarryStats {
    std::vector<double> moving_mean;
    double momentum = 0.99;
    bool initialized = false;

    void update(std::span<const double> batch_mean);
};
void carry_batch_stats(std::span<const double> counts, size_t batch,
                       size_t neurons, std::span<double> mean_out,
                       std::span<double> var_out);

// Differentiable carry surrogate. The unsigned reinterpretation's sign
// selector is replaced by tanh((v + 1/2) / temperature); floor and mod pass
// gradients through a straight-through rule. value() applies the exact fold
// to the softened unsigned sum; gradients flow through the smooth relaxation
// u_soft / (2^b - 1), whose analytic derivative grad() returns.
struct SoftCarry {
    double value = 0.0;         // exact fold of the softened sum
    double smooth_value = 0.0;  // u_soft / (2^b - 1), the relaxation
    double u_soft = 0.0;
};
SoftCarry soft_carry_count(std::span<const double> v, int bits,
                           double temperature);
void soft_carry_grad(std::span<const double> v, int bits, double temperature,
                     std::span<double> grad_out);

}  // namespace wrapnet
