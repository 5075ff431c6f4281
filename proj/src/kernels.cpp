#include "wrapnet/kernels.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

namespace wrapnet {

void AccMode::validate() const {
    switch (kind) {
        case AccKind::exact32:
            return;
        case AccKind::wrapped:
            if (bits < 4 || bits > 32)
                throw std::invalid_argument("AccMode: wrapped bits in [4,32]");
            return;
        case AccKind::packed_isolated:
        case AccKind::packed_buffered:
        case AccKind::packed_contaminated:
            if (bits < 4 || bits > 16)
                throw std::invalid_argument("AccMode: packed bits in [4,16]");
            if (width != 16 && width != 32 && width != 64)
                throw std::invalid_argument("AccMode: width must be 16/32/64");
            if (width % bits != 0)
                throw std::invalid_argument("AccMode: bits must divide width");
            return;
    }
    throw std::logic_error("bad AccKind");
}

std::string AccMode::name() const {
    switch (kind) {
        case AccKind::exact32: return "exact32";
        case AccKind::wrapped: return "wrapped:" + std::to_string(bits);
        case AccKind::packed_isolated:
            return "packed_isolated:" + std::to_string(bits) + ":" +
                   std::to_string(width);
        case AccKind::packed_buffered:
            return "packed_buffered:" + std::to_string(bits) + ":" +
                   std::to_string(width);
        case AccKind::packed_contaminated:
            return "packed_contaminated:" + std::to_string(bits) + ":" +
                   std::to_string(width);
    }
    throw std::logic_error("bad AccKind");
}

AccMode acc_mode_from_string(const std::string& s) {
    std::vector<std::string> parts;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ':')) parts.push_back(item);
    if (parts.empty()) throw std::invalid_argument("empty acc mode");
    AccMode mode;
    if (parts[0] == "exact32") {
        mode = AccMode::exact();
    } else if (parts[0] == "wrapped") {
        if (parts.size() != 2) throw std::invalid_argument("wrapped:<bits>");
        mode = AccMode::wrapped_at(std::stoi(parts[1]));
    } else {
        AccKind kind;
        if (parts[0] == "packed_isolated") kind = AccKind::packed_isolated;
        else if (parts[0] == "packed_buffered") kind = AccKind::packed_buffered;
        else if (parts[0] == "packed_contaminated")
            kind = AccKind::packed_contaminated;
        else throw std::invalid_argument("unknown acc mode: " + s);
        if (parts.size() != 3)
            throw std::invalid_argument("packed mode needs <bits>:<width>");
        mode = AccMode::packed(kind, std::stoi(parts[1]), std::stoi(parts[2]));
    }
    mode.validate();
    return mode;
}

namespace {

void check_ternary(std::span<const int32_t> b) {
    for (int32_t v : b)
        if (v < -1 || v > 1)
            throw std::invalid_argument(
                "gemm: packed modes require weights in {-1,0,1}");
}

// Lane-isolated SWAR add: carry chains are cut at lane boundaries.
inline uint64_t lane_add(uint64_t a, uint64_t b, uint64_t high, uint64_t low) {
    return ((a & low) + (b & low)) ^ ((a ^ b) & high);
}

struct PackedMasks {
    // per (column, group): keep-mask, xor-mask, per-lane +1 vector
    std::vector<uint64_t> keep, xorm, ones;
};

PackedMasks build_column_masks(std::span<const int32_t> b, int k, int n,
                               int lanes, int lane_bits, int groups,
                               uint64_t lane_value_mask) {
    PackedMasks masks;
    masks.keep.assign(size_t(n) * groups, 0);
    masks.xorm.assign(size_t(n) * groups, 0);
    masks.ones.assign(size_t(n) * groups, 0);
    for (int col = 0; col < n; ++col) {
        for (int g = 0; g < groups; ++g) {
            uint64_t keep = 0, xorm = 0, ones = 0;
            for (int lane = 0; lane < lanes; ++lane) {
                const int kk = g * lanes + lane;
                if (kk >= k) break;
                const int32_t w = b[size_t(kk) * n + col];
                const int shift = lane * lane_bits;
                if (w == 0) continue;
                keep |= lane_value_mask << shift;
                if (w == -1) {
                    xorm |= lane_value_mask << shift;
                    ones |= uint64_t(1) << shift;
                }
            }
            const size_t idx = size_t(col) * groups + g;
            masks.keep[idx] = keep;
            masks.xorm[idx] = xorm;
            masks.ones[idx] = ones;
        }
    }
    return masks;
}

// Activations packed group-wise: PA[m][g] holds lanes of unsigned b-bit
// (or (b-1)-bit) wrapped values.
std::vector<uint64_t> pack_rows(std::span<const int32_t> a, int m, int k,
                                int lanes, int lane_bits, int groups,
                                int value_bits) {
    std::vector<uint64_t> pa(size_t(m) * groups, 0);
    const uint64_t vmask = (uint64_t(1) << value_bits) - 1;
    for (int row = 0; row < m; ++row) {
        for (int g = 0; g < groups; ++g) {
            uint64_t word = 0;
            for (int lane = 0; lane < lanes; ++lane) {
                const int kk = g * lanes + lane;
                if (kk >= k) break;
                const uint64_t v =
                    static_cast<uint64_t>(a[size_t(row) * k + kk]) & vmask;
                word |= v << (lane * lane_bits);
            }
            pa[size_t(row) * groups + g] = word;
        }
    }
    return pa;
}

int64_t reduce_lanes_mod(uint64_t word, int lanes, int lane_bits,
                         int value_bits) {
    const uint64_t lmask = (uint64_t(1) << lane_bits) - 1;
    const uint64_t vmask = (uint64_t(1) << value_bits) - 1;
    uint64_t r = 0;
    for (int lane = 0; lane < lanes; ++lane)
        r = (r + ((word >> (lane * lane_bits)) & lmask)) & vmask;
    return to_signed(r, value_bits);
}

}  // namespace

GemmResult gemm(std::span<const int32_t> a, std::span<const int32_t> b,
                int m, int k, int n, const AccMode& mode) {
    mode.validate();
    if (a.size() != size_t(m) * k || b.size() != size_t(k) * n)
        throw std::invalid_argument("gemm: dimension mismatch");
    GemmResult res;
    res.rows = m;
    res.cols = n;
    res.values.assign(size_t(m) * n, 0);

    switch (mode.kind) {
        case AccKind::exact32: {
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    int64_t acc = 0;
                    for (int kk = 0; kk < k; ++kk)
                        acc += int64_t(a[size_t(i) * k + kk]) *
                               int64_t(b[size_t(kk) * n + j]);
                    res.values[size_t(i) * n + j] = acc;
                }
            return res;
        }
        case AccKind::wrapped: {
            if (mode.bits == 32) {
                // the scalar 32-bit accumulator baseline
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        uint32_t acc = 0;
                        const int32_t* arow = a.data() + size_t(i) * k;
                        for (int kk = 0; kk < k; ++kk)
                            acc += uint32_t(arow[kk]) *
                                   uint32_t(b[size_t(kk) * n + j]);
                        res.values[size_t(i) * n + j] =
                            wrap(int64_t(int32_t(acc)), 32);
                    }
            } else {
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        int64_t acc = 0;
                        for (int kk = 0; kk < k; ++kk)
                            acc += int64_t(a[size_t(i) * k + kk]) *
                                   int64_t(b[size_t(kk) * n + j]);
                        res.values[size_t(i) * n + j] = wrap(acc, mode.bits);
                    }
            }
            return res;
        }
        case AccKind::packed_isolated:
        case AccKind::packed_buffered: {
            check_ternary(b);
            const bool buffered = mode.kind == AccKind::packed_buffered;
            const int lane_bits = mode.bits;
            const int value_bits = buffered ? lane_bits - 1 : lane_bits;
            const int lanes = mode.width / lane_bits;
            const int groups = (k + lanes - 1) / lanes;
            const uint64_t word_mask = mode.width == 64
                                           ? ~uint64_t(0)
                                           : (uint64_t(1) << mode.width) - 1;
            const uint64_t lane_value_mask = (uint64_t(1) << value_bits) - 1;
            uint64_t value_mask_all = 0, high = 0;
            for (int lane = 0; lane < lanes; ++lane) {
                value_mask_all |= lane_value_mask << (lane * lane_bits);
                high |= uint64_t(1) << (lane * lane_bits + lane_bits - 1);
            }
            const uint64_t low = ~high & word_mask;

            const auto pa =
                pack_rows(a, m, k, lanes, lane_bits, groups, value_bits);
            const auto masks = build_column_masks(b, k, n, lanes, lane_bits,
                                                  groups, lane_value_mask);
            for (int j = 0; j < n; ++j) {
                const uint64_t* keep = masks.keep.data() + size_t(j) * groups;
                const uint64_t* xorm = masks.xorm.data() + size_t(j) * groups;
                const uint64_t* ones = masks.ones.data() + size_t(j) * groups;
                for (int i = 0; i < m; ++i) {
                    const uint64_t* row = pa.data() + size_t(i) * groups;
                    uint64_t acc = 0;
                    if (buffered) {
                        for (int g = 0; g < groups; ++g) {
                            const uint64_t t = (row[g] & keep[g]) ^ xorm[g];
                            const uint64_t addend =
                                ((t + ones[g]) & word_mask) & value_mask_all;
                            acc = ((acc + addend) & word_mask) & value_mask_all;
                        }
                    } else {
                        for (int g = 0; g < groups; ++g) {
                            const uint64_t t = (row[g] & keep[g]) ^ xorm[g];
                            const uint64_t addend =
                                lane_add(t, ones[g], high, low);
                            acc = lane_add(acc, addend, high, low);
                        }
                    }
                    res.values[size_t(i) * n + j] =
                        reduce_lanes_mod(acc, lanes, lane_bits, value_bits);
                }
            }
            return res;
        }
        case AccKind::packed_contaminated: {
            check_ternary(b);
            PackSpec spec{mode.width, mode.bits, false};
            std::vector<int32_t> col(k);
            for (int j = 0; j < n; ++j) {
                for (int kk = 0; kk < k; ++kk) col[kk] = b[size_t(kk) * n + j];
                for (int i = 0; i < m; ++i) {
                    const auto r = packed_dot_contaminated(
                        a.subspan(size_t(i) * k, k), col, spec);
                    res.values[size_t(i) * n + j] = r.value;
                    res.dropped_carries += r.dropped_carries();
                }
            }
            return res;
        }
    }
    throw std::logic_error("bad AccKind");
}

void ConvGeom::validate() const {
    if (channels < 1 || height < 1 || width < 1 || kernel_h < 1 ||
        kernel_w < 1 || stride < 1 || pad < 0)
        throw std::invalid_argument("ConvGeom: bad geometry");
    if (out_h() < 1 || out_w() < 1)
        throw std::invalid_argument("ConvGeom: empty output");
}

std::vector<int32_t> im2col(std::span<const int32_t> x, const ConvGeom& g) {
    g.validate();
    if (x.size() != size_t(g.channels) * g.height * g.width)
        throw std::invalid_argument("im2col: input size mismatch");
    const int oh = g.out_h(), ow = g.out_w();
    const int patch = g.channels * g.kernel_h * g.kernel_w;
    std::vector<int32_t> out(size_t(patch) * oh * ow, 0);
    for (int c = 0; c < g.channels; ++c)
        for (int kh = 0; kh < g.kernel_h; ++kh)
            for (int kw = 0; kw < g.kernel_w; ++kw) {
                const int prow = (c * g.kernel_h + kh) * g.kernel_w + kw;
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox) {
                        const int iy = oy * g.stride + kh - g.pad;
                        const int ix = ox * g.stride + kw - g.pad;
                        int32_t v = 0;  // pad with the zero-point
                        if (iy >= 0 && iy < g.height && ix >= 0 && ix < g.width)
                            v = x[(size_t(c) * g.height + iy) * g.width + ix];
                        out[size_t(prow) * oh * ow + size_t(oy) * ow + ox] = v;
                    }
            }
    return out;
}

GemmResult conv2d(std::span<const int32_t> x, std::span<const int32_t> w,
                  int out_channels, const ConvGeom& g, const AccMode& mode) {
    const int patch = g.channels * g.kernel_h * g.kernel_w;
    if (w.size() != size_t(out_channels) * patch)
        throw std::invalid_argument("conv2d: weight size mismatch");
    const auto patches = im2col(x, g);
    const int cols = g.out_h() * g.out_w();
    // gemm wants B in K x N layout with N = cols; patches are already
    // patch x cols, and weights out_channels x patch.
    return gemm(w, patches, out_channels, patch, cols, mode);
}

BenchRecord bench_gemm(int m, int k, int n, const AccMode& mode,
                       int repetitions, uint64_t seed) {
    mode.validate();
    if (repetitions < 1) throw std::invalid_argument("bench_gemm: repetitions");
    std::mt19937_64 rng(seed);
    const int abits = mode.is_packed() || mode.kind == AccKind::wrapped
                          ? std::min(mode.bits, 8)
                          : 8;
    const int64_t hi = (int64_t(1) << (abits - 1)) - 1;
    std::uniform_int_distribution<int64_t> adist(-hi - 1, hi);
    std::uniform_int_distribution<int> wdist(0, 1);
    std::vector<int32_t> a(size_t(m) * k), b(size_t(k) * n);
    for (auto& v : a) v = int32_t(adist(rng));
    for (auto& v : b) v = wdist(rng) ? 1 : -1;

    volatile int64_t sink = 0;
    auto run_once = [&]() -> int64_t {
        const auto t0 = std::chrono::steady_clock::now();
        const auto r = gemm(a, b, m, k, n, mode);
        const auto t1 = std::chrono::steady_clock::now();
        sink = sink + r.values[0];
        return std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0)
            .count();
    };
    for (int i = 0; i < 3; ++i) run_once();
    std::vector<int64_t> samples(repetitions);
    for (int i = 0; i < repetitions; ++i) samples[i] = run_once();

    auto median_of = [](std::vector<int64_t> v) -> int64_t {
        std::sort(v.begin(), v.end());
        const size_t h = v.size() / 2;
        return v.size() % 2 ? v[h] : (v[h - 1] + v[h]) / 2;
    };
    const int64_t med = median_of(samples);
    std::vector<int64_t> dev(samples.size());
    for (size_t i = 0; i < samples.size(); ++i)
        dev[i] = std::llabs(samples[i] - med);
    BenchRecord rec;
    rec.name = std::to_string(m) + "x" + std::to_string(k) + "x" +
               std::to_string(n);
    rec.m = m;
    rec.k = k;
    rec.n = n;
    rec.mode = mode;
    rec.repetitions = repetitions;
    rec.median_ns = med;
    rec.mad_ns = median_of(dev);
    rec.gops = med > 0 ? 2.0 * m * n * double(k) / double(med) : 0.0;
    return rec;
}

std::string bench_csv_header() {
    return "shape,mode,b,W,median_ns,mad_ns,gops";
}

std::string bench_csv_row(const BenchRecord& r) {
    std::ostringstream os;
    os << r.name << "," << r.mode.name() << "," << r.mode.bits << ","
       << r.mode.width << "," << r.median_ns << "," << r.mad_ns << ","
       << r.gops;
    return os.str();
}

std::string bench_jsonl_row(const BenchRecord& r) {
    std::ostringstream os;
    os << "{\"shape\":\"" << r.name << "\",\"mode\":\"" << r.mode.name()
       << "\",\"b\":" << r.mode.bits << ",\"W\":" << r.mode.width
       << ",\"median_ns\":" << r.median_ns << ",\"mad_ns\":" << r.mad_ns
       << ",\"gops\":" << r.gops << "}";
    return os.str();
}

}  // namespace wrapnet
