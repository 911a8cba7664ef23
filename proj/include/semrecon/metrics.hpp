#pragma once

#include <span>
#include <vector>

#include "semrecon/common.hpp"
#include "semrecon/encoder.hpp"

namespace semrecon::metrics {

struct MetricReport {
    double psnr = 0.0;
    double ssim = 0.0;
    double tenengrad = 0.0;
    double feature_distance = 0.0;
};

// 20*log10(1/rmse) on magnitude images normalized so the reference max is 1;
// +inf when the images are identical
double psnr(std::span<const double> test, std::span<const double> ref);

// mean local SSIM, 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
// dynamic range 1, valid region only
double ssim(std::span<const double> test, std::span<const double> ref, int h, int w);

// mean Sobel gradient magnitude over interior pixels
double tenengrad(std::span<const double> img, int h, int w);

// sum_level weight * (1 - cos(e_level(test), e_level(ref)));
// encoder-feature stand-in for a learned perceptual metric
double feature_distance(const ComplexImage& test, const ComplexImage& ref, const enc::Encoder& encoder,
                        const std::array<double, 3>& level_weights = {0.005, 0.5, 1.0});

// Normalizes both magnitudes by the reference max, then computes everything.
// feature_distance is NaN when no encoder is supplied.
MetricReport compute_report(const ComplexImage& test, const ComplexImage& ref,
                            const enc::Encoder* encoder = nullptr);

}  // namespace semrecon::metrics
