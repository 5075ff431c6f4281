// cyclic.hpp — the smooth-modulo activation family.
//
// Every kind is periodic with period 2^bits. The forward accepts real inputs
// (training-time surrogates); at inference the inputs are integers.

#pragma once

#include <limits>
#include <string>

namespace wrapnet {

enum class CyclicKind { smooth_modulo, relu_like, absolute, pure_modulo };

std::string to_string(CyclicKind k);
CyclicKind cyclic_kind_from_string(const std::string& s);

struct CyclicSpec {
    int bits = 8;                                      // accumulator bits b
    double slope = 2.0;                                // k >= 1, may be inf
    CyclicKind kind = CyclicKind::smooth_modulo;

    bool infinite_slope() const {
        return slope == std::numeric_limits<double>::infinity();
    }
    double period() const { return double(int64_t(1) << bits); }
    // Transition boundary M = (k/(k+1)) * 2^(b-1).
    double boundary() const;
    void validate() const;
};

// Real-valued wrap of z into [-2^(b-1), 2^(b-1)).
double wrap_real(double z, int bits);

double cyclic_apply(double z, const CyclicSpec& spec);

// Piecewise-constant derivative; kinks take the incoming (left) branch.
double cyclic_derivative(double z, const CyclicSpec& spec);

}  // namespace wrapnet
