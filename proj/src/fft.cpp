#include "semrecon/fft.hpp"

#include <fftw3.h>

#include <map>
#include <mutex>

namespace semrecon::mri {

namespace {

// FFTW planner is not thread safe; plans are cached per (h, w, sign).
// FFTW_ESTIMATE keeps planning deterministic, FFTW_UNALIGNED lets the plan
// run on std::vector storage of any alignment.
class PlanCache {
  public:
    static fftw_plan get(int h, int w, int sign) {
        static PlanCache cache;
        std::lock_guard<std::mutex> lock(cache.mu_);
        auto key = std::make_tuple(h, w, sign);
        auto it = cache.plans_.find(key);
        if (it != cache.plans_.end()) return it->second;
        fftw_plan p = fftw_plan_dft_2d(h, w, nullptr, nullptr, sign, FFTW_ESTIMATE | FFTW_UNALIGNED);
        cache.plans_.emplace(key, p);
        return p;
    }

  private:
    ~PlanCache() {
        for (auto& [k, p] : plans_) fftw_destroy_plan(p);
    }
    std::mutex mu_;
    std::map<std::tuple<int, int, int>, fftw_plan> plans_;
};

ComplexImage transform(const ComplexImage& x, int sign) {
    if (x.height <= 0 || x.width <= 0) throw DimensionError("fft2: empty image");
    ComplexImage out(x.height, x.width);
    ComplexImage in = x;  // fftw may not preserve input
    fftw_plan p = PlanCache::get(x.height, x.width, sign);
    fftw_execute_dft(p, reinterpret_cast<fftw_complex*>(in.data.data()),
                     reinterpret_cast<fftw_complex*>(out.data.data()));
    const double scale = 1.0 / std::sqrt(static_cast<double>(x.size()));
    for (cplx& v : out.data) v *= scale;
    return out;
}

}  // namespace

ComplexImage fft2(const ComplexImage& x) { return transform(x, FFTW_FORWARD); }
ComplexImage ifft2(const ComplexImage& x) { return transform(x, FFTW_BACKWARD); }

}  // namespace semrecon::mri
