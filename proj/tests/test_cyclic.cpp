#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "wrapnet/cyclic.hpp"
#include "wrapnet/fxp.hpp"

#include <cmath>
#include <limits>
#include <random>

using namespace wrapnet;

static CyclicSpec spec(int bits, double k,
                       CyclicKind kind = CyclicKind::smooth_modulo) {
    return CyclicSpec{bits, k, kind};
}

TEST_CASE("smooth modulo hand values") {
    const auto s41 = spec(4, 1);
    CHECK(cyclic_apply(0, s41) == 0);
    CHECK(cyclic_apply(6, s41) == 2);
    CHECK(cyclic_apply(8, s41) == 0);
    CHECK(cyclic_apply(22, s41) == 2);
    const auto s82 = spec(8, 2);
    CHECK(cyclic_apply(100, s82) == 56);
}

TEST_CASE("derivative hand values") {
    const auto s82 = spec(8, 2);
    CHECK(cyclic_derivative(10, s82) == 1);
    CHECK(cyclic_derivative(100, s82) == -2);
    CHECK(cyclic_derivative(22, spec(4, 1)) == -1);
}

TEST_CASE("periodicity over one full period") {
    for (int b : {4, 8, 12}) {
        for (double k : {1.0, 2.0, 7.0}) {
            for (CyclicKind kind :
                 {CyclicKind::smooth_modulo, CyclicKind::relu_like,
                  CyclicKind::absolute, CyclicKind::pure_modulo}) {
                const auto s = spec(b, k, kind);
                const int64_t period = int64_t(1) << b;
                const int64_t lo = -(int64_t(1) << (b + 2));
                for (int64_t z = lo; z <= (int64_t(1) << (b + 2)); ++z)
                    REQUIRE(cyclic_apply(double(z), s) ==
                            cyclic_apply(double(z + period), s));
            }
        }
    }
}

TEST_CASE("range bound with equality at the boundary") {
    for (int b : {4, 8}) {
        for (double k : {1.0, 2.0, 5.0}) {
            const auto s = spec(b, k);
            const double M = s.boundary();
            double max_abs = 0.0;
            for (int z = -(1 << b); z <= (1 << b); ++z)
                max_abs = std::max(max_abs, std::fabs(cyclic_apply(z, s)));
            CHECK(max_abs <= M + 1e-12);
            CHECK(std::fabs(cyclic_apply(M, s)) == doctest::Approx(M));
        }
    }
    // k=1 uses exactly half the signed range
    CHECK(spec(8, 1).boundary() == doctest::Approx(64.0));
}

TEST_CASE("odd symmetry of smooth modulo") {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> d(-2000.0, 2000.0);
    const auto s = spec(8, 3);
    for (int i = 0; i < 20000; ++i) {
        const double z = d(rng);
        CHECK(cyclic_apply(-z, s) ==
              doctest::Approx(-cyclic_apply(z, s)).epsilon(1e-12));
    }
}

TEST_CASE("infinite slope equals pure modulo equals wrap") {
    const auto sinf = spec(8, std::numeric_limits<double>::infinity());
    const auto spure = spec(8, 1, CyclicKind::pure_modulo);
    CHECK(sinf.infinite_slope());
    for (int z = -1024; z <= 1024; ++z) {
        CHECK(cyclic_apply(z, sinf) == double(wrap(z, 8)));
        CHECK(cyclic_apply(z, spure) == double(wrap(z, 8)));
    }
}

TEST_CASE("huge finite slope approaches pure modulo") {
    const auto s = spec(8, 1e6);
    const double tol = 128.0 * 1e-5;
    const double guard = 128.0 * 1e-6;
    for (double z = -512.0; z <= 512.0; z += 0.01) {
        const double m = wrap_real(z, 8);
        if (std::fabs(std::fabs(m) - 128.0) < guard) continue;  // near boundary
        CHECK(std::fabs(cyclic_apply(z, s) - double(wrap_real(z, 8))) <= tol);
    }
}

TEST_CASE("continuity at every kink") {
    const double eps = 1e-6;
    for (int b : {4, 8}) {
        for (double k : {1.0, 2.0, 4.0}) {
            for (CyclicKind kind : {CyclicKind::smooth_modulo,
                                    CyclicKind::relu_like,
                                    CyclicKind::absolute}) {
                const auto s = spec(b, k, kind);
                const double M = s.boundary();
                const double half = double(int64_t(1) << (b - 1));
                // kinks: +-M, 0, and the period boundary; the worst case is
                // the period boundary where both branches carry slope k
                for (double kink : {M, -M, 0.0, half, -half}) {
                    const double lo = cyclic_apply(kink - eps, s);
                    const double hi = cyclic_apply(kink + eps, s);
                    CHECK(std::fabs(lo - hi) <=
                          2.0 * std::max(1.0, k) * eps * 1.001);
                }
            }
        }
    }
}

TEST_CASE("analytic derivative matches finite differences away from kinks") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> d(-600.0, 600.0);
    const double h = 1e-4, guard = 1e-3;
    int checked = 0;
    while (checked < 10000) {
        const double z = d(rng);
        for (double k : {1.0, 2.0, 5.0}) {
            for (CyclicKind kind : {CyclicKind::smooth_modulo,
                                    CyclicKind::relu_like,
                                    CyclicKind::absolute}) {
                const auto s = spec(8, k, kind);
                const double M = s.boundary();
                const double m = wrap_real(z, 8);
                bool near = std::fabs(m) < guard ||
                            std::fabs(std::fabs(m) - M) < guard ||
                            std::fabs(std::fabs(m) - 128.0) < guard;
                if (near) continue;
                const double fd =
                    (cyclic_apply(z + h, s) - cyclic_apply(z - h, s)) /
                    (2.0 * h);
                const double an = cyclic_derivative(z, s);
                REQUIRE(std::fabs(fd - an) <=
                        1e-4 * std::max(1.0, std::fabs(an)));
                ++checked;
            }
        }
    }
}

TEST_CASE("relu_like and absolute reconstructions") {
    const auto r = spec(4, 1, CyclicKind::relu_like);
    // m <= M: max(m, 0); m > M: k*(2^(b-1) - m)
    CHECK(cyclic_apply(3, r) == 3);
    CHECK(cyclic_apply(-3, r) == 0);
    CHECK(cyclic_apply(6, r) == 2);  // m=6 > M=4 -> 8-6
    const auto a = spec(4, 1, CyclicKind::absolute);
    CHECK(cyclic_apply(-3, a) == 3);
    CHECK(cyclic_apply(5, a) == 5);
}

TEST_CASE("spec string round trips") {
    CHECK(to_string(CyclicKind::smooth_modulo) == "smooth_modulo");
    CHECK(cyclic_kind_from_string("relu_like") == CyclicKind::relu_like);
    CHECK(cyclic_kind_from_string("absolute") == CyclicKind::absolute);
    CHECK(cyclic_kind_from_string("pure_modulo") == CyclicKind::pure_modulo);
    CHECK_THROWS(cyclic_kind_from_string("nope"));
}

TEST_CASE("spec validation") {
    CHECK_THROWS(spec(3, 1).validate());
    CHECK_THROWS(spec(33, 1).validate());
    CHECK_THROWS(spec(8, 0.5).validate());
    CHECK_NOTHROW(spec(8, 1).validate());
    CHECK_NOTHROW(spec(8, std::numeric_limits<double>::infinity()).validate());
}
