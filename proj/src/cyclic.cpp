#include "wrapnet/cyclic.hpp"

#include <cmath>
#include <stdexcept>

namespace wrapnet {

std::string to_string(CyclicKind k) {
    switch (k) {
        case CyclicKind::smooth_modulo: return "smooth_modulo";
        case CyclicKind::relu_like: return "relu_like";
        case CyclicKind::absolute: return "absolute";
        case CyclicKind::pure_modulo: return "pure_modulo";
    }
    throw std::logic_error("bad CyclicKind");
}

CyclicKind cyclic_kind_from_string(const std::string& s) {
    if (s == "smooth_modulo") return CyclicKind::smooth_modulo;
    if (s == "relu_like") return CyclicKind::relu_like;
    if (s == "absolute") return CyclicKind::absolute;
    if (s == "pure_modulo") return CyclicKind::pure_modulo;
    throw std::invalid_argument("unknown cyclic kind: " + s);
}

double CyclicSpec::boundary() const {
    const double half = period() / 2.0;
    if (infinite_slope()) return half;
    return slope / (slope + 1.0) * half;
}

void CyclicSpec::validate() const {
    if (bits < 4 || bits > 32)
        throw std::invalid_argument("CyclicSpec: bits must be in [4, 32]");
    if (!(slope >= 1.0))
        throw std::invalid_argument("CyclicSpec: slope must be >= 1 or inf");
}

double wrap_real(double z, int bits) {
    const double period = double(int64_t(1) << bits);
    const double half = period / 2.0;
    return z - period * std::floor((z + half) / period);
}

double cyclic_apply(double z, const CyclicSpec& spec) {
    const double half = spec.period() / 2.0;
    const double m = wrap_real(z, spec.bits);
    const double k = spec.slope;
    switch (spec.kind) {
        case CyclicKind::pure_modulo:
            return m;
        case CyclicKind::smooth_modulo: {
            if (spec.infinite_slope()) return m;
            const double boundary = spec.boundary();
            if (m > boundary) return k * half - k * m;
            if (m < -boundary) return -k * half - k * m;
            return m;
        }
        case CyclicKind::relu_like: {
            const double boundary = spec.boundary();
            if (!spec.infinite_slope() && m > boundary)
                return k * (half - m);
            return m > 0.0 ? m : 0.0;
        }
        case CyclicKind::absolute:
            return std::fabs(m);
    }
    throw std::logic_error("bad CyclicKind");
}

double cyclic_derivative(double z, const CyclicSpec& spec) {
    const double m = wrap_real(z, spec.bits);
    const double k = spec.slope;
    switch (spec.kind) {
        case CyclicKind::pure_modulo:
            return 1.0;
        case CyclicKind::smooth_modulo: {
            if (spec.infinite_slope()) return 1.0;
            const double boundary = spec.boundary();
            // kinks take the incoming branch: slope 1 at m = M, -k at m = -M
            if (m > -boundary && m <= boundary) return 1.0;
            return -k;
        }
        case CyclicKind::relu_like: {
            const double boundary = spec.boundary();
            if (!spec.infinite_slope() && m > boundary) return -k;
            return m > 0.0 ? 1.0 : 0.0;
        }
        case CyclicKind::absolute:
            return m > 0.0 ? 1.0 : -1.0;
    }
    throw std::logic_error("bad CyclicKind");
}

}  // namespace wrapnet
