// kernels.hpp — integer GEMM and conv lowering with selectable accumulator
// semantics, plus the timing harness.

#pragma once

#include "wrapnet/fxp.hpp"
#include "wrapnet/packing.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace wrapnet {

enum class AccKind {
    exact32,             // wide exact accumulation
    wrapped,             // wrap(exact, b) entrywise
    packed_isolated,     // SWAR lanes, vector-instruction semantics
    packed_buffered,     // SWAR lanes with a buffer bit; (b-1)-bit values
    packed_contaminated  // plain wide adds, carries contaminate lanes
};

struct AccMode {
    AccKind kind = AccKind::exact32;
    int bits = 32;   // accumulator bits b (wrapped / packed modes)
    int width = 64;  // register width W (packed modes)

    static AccMode exact() { return {AccKind::exact32, 32, 64}; }
    static AccMode wrapped_at(int b) { return {AccKind::wrapped, b, 64}; }
    static AccMode packed(AccKind k, int b, int w) { return {k, b, w}; }
    bool is_packed() const {
        return kind == AccKind::packed_isolated ||
               kind == AccKind::packed_buffered ||
               kind == AccKind::packed_contaminated;
    }
    void validate() const;
    std::string name() const;
};
AccMode acc_mode_from_string(const std::string& s);

struct GemmResult {
    int rows = 0, cols = 0;
    std::vector<int64_t> values;  // row-major M x N
    uint64_t dropped_carries = 0; // packed_contaminated only
};

// C = A (M x K) * B (K x N). Packed / contaminated modes require B entries
// in {-1, 0, 1}.
GemmResult gemm(std::span<const int32_t> a, std::span<const int32_t> b,
                int m, int k, int n, const AccMode& mode);

// Convolution lowering. Input is C x H x W, kernel kh x kw; the output is a
// (C*kh*kw) x (out_h*out_w) patch matrix so conv = gemm(w_mat, patches).
struct ConvGeom {
    int channels = 1, height = 1, width = 1;
    int kernel_h = 1, kernel_w = 1;
    int stride = 1, pad = 0;

    int out_h() const { return (height + 2 * pad - kernel_h) / stride + 1; }
    int out_w() const { return (width + 2 * pad - kernel_w) / stride + 1; }
    void validate() const;
};
std::vector<int32_t> im2col(std::span<const int32_t> x, const ConvGeom& g);

// conv2d with out_channels filters of shape C x kh x kw each; returns
// out_channels x out_h x out_w.
GemmResult conv2d(std::span<const int32_t> x, std::span<const int32_t> w,
                  int out_channels, const ConvGeom& g, const AccMode& mode);

struct BenchRecord {
    std::string name;
    int m = 0, k = 0, n = 0;
    AccMode mode;
    int repetitions = 0;
    int64_t median_ns = 0;
    int64_t mad_ns = 0;
    double gops = 0.0;  // 2*M*N*K / median_ns
};

// Deterministic inputs from the seed; >= 3 warm-up runs; median + MAD.
BenchRecord bench_gemm(int m, int k, int n, const AccMode& mode,
                       int repetitions, uint64_t seed = 7);

std::string bench_csv_header();
std::string bench_csv_row(const BenchRecord& r);
std::string bench_jsonl_row(const BenchRecord& r);

}  // namespace wrapnet
