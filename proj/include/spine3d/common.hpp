#pragma once

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>

namespace spine3d {

#ifdef SPINE3D_SINGLE_PRECISION
using Real = float;
#else
using Real = double;
#endif

/// Thrown on dimension / precondition violations (offending dims in the message).
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Thrown on runtime pipeline failures (empty curve, insufficient overlap, bad file).
struct PipelineError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void check(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

/// Deterministic, stdlib-independent RNG (splitmix64 stream + Box-Muller).
/// Identical seeds give identical sequences on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Inclusive on both ends.
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(next_u64() % static_cast<std::uint64_t>(hi - lo + 1));
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 1e-300) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * M_PI * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * M_PI * u2);
    }

    /// Independent child stream, stable under changes to draw order elsewhere.
    Rng fork(std::uint64_t stream) const {
        std::uint64_t z = state_ ^ (0x510e527fade682d1ULL + stream * 0x6a09e667f3bcc909ULL);
        z = (z ^ (z >> 33)) * 0xff51afd7ed558ccdULL;
        return Rng(z ^ (z >> 33));
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

enum class View { PA, LAT };

inline const char* view_name(View v) { return v == View::PA ? "PA" : "LAT"; }

inline double deg_from_rad(double r) { return r * (180.0 / M_PI); }
inline double rad_from_deg(double d) { return d * (M_PI / 180.0); }

}  // namespace spine3d
