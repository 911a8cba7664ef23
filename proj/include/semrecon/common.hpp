#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace semrecon {

using cplx = std::complex<double>;

// Error taxonomy. The CLI maps these onto stable exit codes:
// validation/usage -> 1, numerical divergence -> 2, I/O and format -> 3.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DimensionError : ValidationError {
    using ValidationError::ValidationError;
};
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// H x W complex image, row-major.
struct ComplexImage {
    int height = 0;
    int width = 0;
    std::vector<cplx> data;

    ComplexImage() = default;
    ComplexImage(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w) {}

    size_t size() const { return data.size(); }
    cplx& at(int r, int c) { return data[static_cast<size_t>(r) * width + c]; }
    const cplx& at(int r, int c) const { return data[static_cast<size_t>(r) * width + c]; }

    bool same_shape(const ComplexImage& o) const { return height == o.height && width == o.width; }
};

inline bool all_finite(const ComplexImage& im) {
    for (const cplx& v : im.data)
        if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) return false;
    return true;
}

inline void require_same_shape(const ComplexImage& a, const ComplexImage& b, const char* what) {
    if (!a.same_shape(b))
        throw DimensionError(std::string(what) + ": shape mismatch " + std::to_string(a.height) + "x" +
                             std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                             std::to_string(b.width));
}

inline std::vector<double> magnitude(const ComplexImage& im) {
    std::vector<double> m(im.size());
    for (size_t i = 0; i < im.size(); ++i) m[i] = std::abs(im.data[i]);
    return m;
}

// splitmix64 round; used to derive independent sub-stream seeds.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Deterministic RNG. Normal deviates use explicit Box-Muller so the stream
// does not depend on the standard library's distribution implementation.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed ? seed : 0x6a09e667f3bcc908ULL) {
        // warm up splitmix, then seed the main generator
        for (int i = 0; i < 4; ++i) next_raw();
    }

    uint64_t next_u64() { return next_raw(); }

    // uniform in [0,1)
    double uniform() { return static_cast<double>(next_raw() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // unbiased integer in [0, n)
    uint64_t uniform_int(uint64_t n) {
        if (n == 0) throw ValidationError("uniform_int: n must be positive");
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = next_raw();
        } while (x >= limit);
        return x % n;
    }

    // standard normal via Box-Muller, one spare cached
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

  private:
    uint64_t next_raw() {
        // splitmix64
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace semrecon
