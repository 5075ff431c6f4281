#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "wrapnet/packing.hpp"

using namespace wrapnet;

// Per-addition end-around-carry simulator: add each unsigned term; whenever
// the running sum overflows b bits, subtract 2^b and add 1 back (the carry
// re-enters at the bottom). Small-instance oracle for carry_count.
static CarryResult per_add_simulator(const std::vector<int32_t>& v, int bits) {
    const uint64_t period = uint64_t(1) << bits;
    uint64_t r = 0, c = 0, u = 0;
    for (int32_t x : v) {
        uint64_t ux = uint64_t(x) & (period - 1);
        u += ux;
        r += ux;
        while (r >= period) {
            r = r - period + 1;
            ++c;
        }
    }
    CarryResult out;
    out.carries = c;
    out.r_final = r;
    out.unsigned_sum = u;
    return out;
}

TEST_CASE("pack/unpack hand values") {
    PackSpec spec{64, 8, false};
    std::vector<uint64_t> vals = {0xFF, 0x01, 0, 0, 0, 0, 0, 0};
    PackedWord w = pack(vals, spec);
    CHECK(w.payload == 0x000001FFull);
    auto back = unpack(w);
    REQUIRE(back.size() == 8);
    for (size_t i = 0; i < 8; ++i) CHECK(back[i] == vals[i]);

    // Buffered layout: each lane keeps lane_bits-1 value bits.
    PackSpec buf{16, 8, true};
    std::vector<uint64_t> bv = {0x03, 0x7E};
    PackedWord bw = pack(bv, buf);
    CHECK(bw.payload == 0x7E03ull);

    PackedWord z = pack(std::vector<uint64_t>(4, 0), PackSpec{32, 8, false});
    CHECK(z.payload == 0);
}

TEST_CASE("pack rejects values exceeding lane capacity") {
    PackSpec spec{64, 8, false};
    std::vector<uint64_t> vals(8, 0);
    vals[3] = 0x100;  // needs 9 bits
    CHECK_THROWS_AS(pack(vals, spec), std::invalid_argument);

    PackSpec buf{64, 8, true};
    std::vector<uint64_t> bvals(8, 0);
    bvals[0] = 0x80;  // buffer bit is not a value bit
    CHECK_THROWS_AS(pack(bvals, buf), std::invalid_argument);

    CHECK_THROWS_AS(pack(std::vector<uint64_t>(7, 0), spec),
                    std::invalid_argument);
}

TEST_CASE("pack/unpack roundtrip randomized") {
    std::mt19937_64 rng(11);
    for (int width : {16, 32, 64}) {
        for (int b : {4, 8, 16}) {
            if (width % b != 0) continue;
            for (bool buffered : {false, true}) {
                PackSpec spec{width, b, buffered};
                const uint64_t cap = uint64_t(1) << spec.value_bits();
                for (int it = 0; it < 50; ++it) {
                    std::vector<uint64_t> vals(size_t(spec.lanes()));
                    for (auto& v : vals) v = rng() % cap;
                    auto back = unpack(pack(vals, spec));
                    REQUIRE(back == vals);
                }
            }
        }
    }
}

TEST_CASE("add_contaminated lane carry leaks into the next lane") {
    PackSpec spec{64, 8, false};
    // 0x1FF + 1: lane 0 wraps to 0 and its carry lands in lane 1.
    PackedWord a{spec, 0x1FF};
    PackedWord c{spec, 0x001};
    uint64_t top = 7;
    PackedWord s = add_contaminated(a, c, &top);
    CHECK(s.payload == 0x200ull);
    CHECK(top == 0);

    // Top lane carry-out leaves the word and is dropped (reported via flag).
    PackedWord hi{spec, 0xFFull << 56};
    PackedWord one{spec, 0x01ull << 56};
    s = add_contaminated(hi, one, &top);
    CHECK(s.payload == 0);
    CHECK(top == 1);
}

TEST_CASE("add_lane_isolated wraps each lane independently") {
    PackSpec spec{64, 8, false};
    PackedWord a{spec, 0x1FF};
    PackedWord c{spec, 0x001};
    PackedWord s = add_lane_isolated(a, c);
    CHECK(s.payload == 0x100ull);  // lane 0 wrapped, lane 1 untouched

    // Exhaustive for b=4, W=16 on a pair of active lanes.
    PackSpec s4{16, 4, false};
    for (uint64_t x0 = 0; x0 < 16; ++x0)
        for (uint64_t y0 = 0; y0 < 16; ++y0)
            for (uint64_t x1 : {0ull, 7ull, 15ull})
                for (uint64_t y1 : {0ull, 9ull, 15ull}) {
                    std::vector<uint64_t> xa = {x0, x1, 3, 12};
                    std::vector<uint64_t> ya = {y0, y1, 12, 5};
                    auto r = unpack(add_lane_isolated(pack(xa, s4), pack(ya, s4)));
                    for (size_t i = 0; i < 4; ++i)
                        CHECK(r[i] == ((xa[i] + ya[i]) & 15));
                }
}

TEST_CASE("add_lane_isolated randomized per-lane wrap oracle") {
    PackSpec spec{64, 8, false};
    std::mt19937_64 rng(23);
    for (int it = 0; it < 200; ++it) {
        std::vector<uint64_t> xa(8), ya(8);
        for (auto& v : xa) v = rng() & 0xFF;
        for (auto& v : ya) v = rng() & 0xFF;
        auto r = unpack(add_lane_isolated(pack(xa, spec), pack(ya, spec)));
        for (size_t i = 0; i < 8; ++i) CHECK(r[i] == ((xa[i] + ya[i]) & 0xFF));
    }
}

TEST_CASE("add_buffered wraps each lane at one fewer bit") {
    PackSpec buf{64, 8, true};
    std::mt19937_64 rng(31);
    for (int it = 0; it < 200; ++it) {
        std::vector<uint64_t> xa(8), ya(8);
        for (auto& v : xa) v = rng() & 0x7F;
        for (auto& v : ya) v = rng() & 0x7F;
        auto r = unpack(add_buffered(pack(xa, buf), pack(ya, buf)));
        for (size_t i = 0; i < 8; ++i)
            CHECK(r[i] == ((xa[i] + ya[i]) & 0x7F));
    }

    // Hand value: 0x7F + 0x01 wraps to 0 inside the buffered lane, and the
    // buffer bit is cleared so the neighbour is untouched.
    auto r = unpack(add_buffered(pack(std::vector<uint64_t>{0x7F, 5, 0, 0, 0, 0, 0, 0}, buf),
                                 pack(std::vector<uint64_t>{0x01, 2, 0, 0, 0, 0, 0, 0}, buf)));
    CHECK(r[0] == 0);
    CHECK(r[1] == 7);
}

TEST_CASE("carry_count hand values") {
    {
        std::vector<int32_t> v = {100, 100, 100};
        auto r = carry_count(v, 8);
        CHECK(r.unsigned_sum == 300);
        CHECK(r.carries == 1);
        CHECK(r.r_final == 45);  // (300 - 1*255) = 45
    }
    {
        std::vector<int32_t> v = {-1, -1};
        auto r = carry_count(v, 8);  // 255 + 255 = 510
        CHECK(r.carries == 1);
        CHECK(r.r_final == 255);
    }
    {
        std::vector<int32_t> v = {0, 0, 0};
        auto r = carry_count(v, 8);
        CHECK(r.carries == 0);
        CHECK(r.r_final == 0);
    }
}

TEST_CASE("carry_count closed-form identity and simulator oracle") {
    std::mt19937_64 rng(47);
    for (int bits : {4, 8, 12}) {
        const int64_t period = int64_t(1) << bits;
        const int64_t half = period / 2;
        std::uniform_int_distribution<int64_t> dist(-half, half - 1);
        for (int it = 0; it < 2000; ++it) {
            size_t len = 1 + rng() % 64;
            std::vector<int32_t> v(len);
            for (auto& x : v) x = int32_t(dist(rng));
            auto r = carry_count(v, bits);
            // r_final = (u + c) mod 2^b
            CHECK(int64_t((r.unsigned_sum + r.carries) % uint64_t(period)) ==
                  int64_t(r.r_final));
            // total carries match the per-addition end-around simulator
            auto sim = per_add_simulator(v, bits);
            CHECK(r.carries == sim.carries);
            CHECK(r.r_final == sim.r_final);
            CHECK(r.unsigned_sum == sim.unsigned_sum);
        }
    }
    // Larger random vectors: identity only.
    for (int it = 0; it < 200; ++it) {
        size_t len = 1 + rng() % 1000;
        std::vector<int32_t> v(len);
        for (auto& x : v) x = int32_t(int64_t(rng() & 0xFF) - 128);
        auto r = carry_count(v, 8);
        CHECK(((r.unsigned_sum + r.carries) & 0xFF) == r.r_final);
    }
}

TEST_CASE("carry_count fold terminates: carries bounded by n") {
    std::mt19937_64 rng(59);
    for (int it = 0; it < 500; ++it) {
        size_t len = 1 + rng() % 128;
        std::vector<int32_t> v(len);
        for (auto& x : v) x = int32_t(int64_t(rng() & 0xF) - 8);
        auto r = carry_count(v, 4);
        CHECK(r.carries <= len);  // each term contributes < 2^b, so < n carries
        CHECK(r.r_final < 16);
    }
}

TEST_CASE("packed_dot_contaminated: carry-free case equals the exact dot") {
    PackSpec spec{64, 8, false};
    std::mt19937_64 rng(71);
    // Non-negative inputs and {0,1} weights small enough that no lane ever
    // carries: the packed dot must reproduce the exact sum verbatim.
    for (int it = 0; it < 300; ++it) {
        size_t len = 1 + rng() % 32;
        std::vector<int32_t> xs(len), ws(len);
        int64_t exact = 0;
        for (size_t i = 0; i < len; ++i) {
            xs[i] = int32_t(rng() % 8);
            ws[i] = int32_t(rng() % 2);
            exact += int64_t(xs[i]) * ws[i];
        }
        auto pr = packed_dot_contaminated(xs, ws, spec);
        CHECK(pr.dropped_carries() == 0);
        CHECK(pr.value == exact);
    }
}

TEST_CASE("packed_dot_contaminated: lane carries shift the wrap by +1 each") {
    PackSpec spec{64, 8, false};
    std::mt19937_64 rng(73);
    // With signed inputs every intra-word carry re-enters the neighbouring
    // lane worth +1 modulo 2^b, so the result is congruent to exact + d for
    // some 0 <= d <= len (the total carry count).
    for (int it = 0; it < 500; ++it) {
        size_t len = 1 + rng() % 48;
        std::vector<int32_t> xs(len), ws(len);
        int64_t exact = 0;
        for (size_t i = 0; i < len; ++i) {
            xs[i] = int32_t(int64_t(rng() & 0xFF) - 128);
            ws[i] = int32_t(int64_t(rng() % 3) - 1);
            exact += int64_t(xs[i]) * ws[i];
        }
        auto pr = packed_dot_contaminated(xs, ws, spec);
        CHECK(pr.value >= -128);
        CHECK(pr.value < 128);
        int64_t d = ((pr.value - exact) % 256 + 256) % 256;
        CHECK(d <= int64_t(len));
    }
}

TEST_CASE("carry_batch_stats hand values and moving mean") {
    {
        std::vector<double> counts = {2, 4, 6};  // one neuron, three samples
        double mean = 0, var = 0;
        carry_batch_stats(counts, 3, 1, std::span<double>(&mean, 1),
                          std::span<double>(&var, 1));
        CHECK(mean == doctest::Approx(4.0));
        CHECK(var == doctest::Approx(8.0 / 3.0));
    }
    {
        std::vector<double> counts = {0, 8};
        double mean = 0, var = 0;
        carry_batch_stats(counts, 2, 1, std::span<double>(&mean, 1),
                          std::span<double>(&var, 1));
        CHECK(mean == doctest::Approx(4.0));
        CHECK(var == doctest::Approx(16.0));
    }
    {
        // Two neurons, row-major [batch x neurons].
        std::vector<double> counts = {1, 10, 3, 20};
        std::vector<double> mean(2), var(2);
        carry_batch_stats(counts, 2, 2, mean, var);
        CHECK(mean[0] == doctest::Approx(2.0));
        CHECK(mean[1] == doctest::Approx(15.0));
        CHECK(var[0] == doctest::Approx(1.0));
        CHECK(var[1] == doctest::Approx(25.0));
    }
    {
        std::vector<double> counts = {1.0};
        double mean = 0, var = 0;
        CHECK_THROWS_AS(carry_batch_stats(counts, 0, 1,
                                          std::span<double>(&mean, 1),
                                          std::span<double>(&var, 1)),
                        std::invalid_argument);
    }

    CarryStats stats;
    stats.momentum = 0.9;
    std::vector<double> m1 = {4.0};
    stats.update(m1);
    CHECK(stats.moving_mean[0] == doctest::Approx(4.0));  // first update seeds
    std::vector<double> m2 = {8.0};
    stats.update(m2);
    CHECK(stats.moving_mean[0] == doctest::Approx(0.9 * 4.0 + 0.1 * 8.0));
}

TEST_CASE("soft_carry_count matches exact fold at integral inputs, tiny T") {
    std::mt19937_64 rng(83);
    for (int bits : {4, 8}) {
        const int64_t half = int64_t(1) << (bits - 1);
        std::uniform_int_distribution<int64_t> dist(-half, half - 1);
        for (int it = 0; it < 200; ++it) {
            size_t len = 1 + rng() % 32;
            std::vector<int32_t> vi(len);
            std::vector<double> vd(len);
            for (size_t i = 0; i < len; ++i) {
                vi[i] = int32_t(dist(rng));
                vd[i] = double(vi[i]);
            }
            auto exact = carry_count(vi, bits);
            auto soft = soft_carry_count(vd, bits, 1e-4);
            CHECK(soft.value == doctest::Approx(double(exact.carries)).epsilon(1e-9));
        }
    }
    std::vector<double> zeros(8, 0.0);
    CHECK(soft_carry_count(zeros, 8, 0.5).value == doctest::Approx(0.0));
}

TEST_CASE("soft_carry_grad matches finite differences of the relaxation") {
    std::mt19937_64 rng(97);
    const int bits = 8;
    const double T = 2.0;
    std::uniform_real_distribution<double> dist(-100.0, 100.0);
    for (int it = 0; it < 20; ++it) {
        size_t len = 4 + rng() % 12;
        std::vector<double> v(len);
        for (auto& x : v) x = dist(rng);
        std::vector<double> grad(len);
        soft_carry_grad(v, bits, T, grad);
        const double h = 1e-5;
        for (size_t i = 0; i < len; ++i) {
            auto vp = v; vp[i] += h;
            auto vm = v; vm[i] -= h;
            double fd = (soft_carry_count(vp, bits, T).smooth_value -
                         soft_carry_count(vm, bits, T).smooth_value) / (2 * h);
            double denom = std::max(std::abs(fd), 1e-6);
            CHECK(std::abs(grad[i] - fd) / denom < 1e-3);
        }
    }
}
