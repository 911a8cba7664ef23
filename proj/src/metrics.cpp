#include "semrecon/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "semrecon/contrastive.hpp"

namespace semrecon::metrics {

double psnr(std::span<const double> test, std::span<const double> ref) {
    if (test.size() != ref.size()) throw DimensionError("psnr: size mismatch");
    if (test.empty()) throw DimensionError("psnr: empty input");
    double se = 0.0;
    for (size_t i = 0; i < test.size(); ++i) {
        const double d = test[i] - ref[i];
        se += d * d;
    }
    const double rmse = std::sqrt(se / static_cast<double>(test.size()));
    if (rmse == 0.0) return std::numeric_limits<double>::infinity();
    return 20.0 * std::log10(1.0 / rmse);
}

namespace {

std::vector<double> gaussian_window(int n, double sigma) {
    std::vector<double> w(static_cast<size_t>(n) * n);
    const double c = (n - 1) / 2.0;
    double sum = 0.0;
    for (int r = 0; r < n; ++r)
        for (int col = 0; col < n; ++col) {
            const double d2 = (r - c) * (r - c) + (col - c) * (col - c);
            w[static_cast<size_t>(r) * n + col] = std::exp(-d2 / (2.0 * sigma * sigma));
            sum += w[static_cast<size_t>(r) * n + col];
        }
    for (double& v : w) v /= sum;
    return w;
}

}  // namespace

double ssim(std::span<const double> test, std::span<const double> ref, int h, int w) {
    if (test.size() != ref.size() || test.size() != static_cast<size_t>(h) * w)
        throw DimensionError("ssim: size mismatch");
    constexpr int kWin = 11;
    constexpr double kC1 = 0.01 * 0.01;  // (K1*L)^2 with L = 1
    constexpr double kC2 = 0.03 * 0.03;
    if (h < kWin || w < kWin) throw ValidationError("ssim: image smaller than the 11x11 window");
    static const std::vector<double> win = gaussian_window(kWin, 1.5);

    double acc = 0.0;
    int count = 0;
    for (int r = 0; r + kWin <= h; ++r) {
        for (int c = 0; c + kWin <= w; ++c) {
            double mu1 = 0.0, mu2 = 0.0, m11 = 0.0, m22 = 0.0, m12 = 0.0;
            for (int i = 0; i < kWin; ++i)
                for (int j = 0; j < kWin; ++j) {
                    const double wv = win[static_cast<size_t>(i) * kWin + j];
                    const double a = test[static_cast<size_t>(r + i) * w + (c + j)];
                    const double b = ref[static_cast<size_t>(r + i) * w + (c + j)];
                    mu1 += wv * a;
                    mu2 += wv * b;
                    m11 += wv * a * a;
                    m22 += wv * b * b;
                    m12 += wv * a * b;
                }
            const double var1 = m11 - mu1 * mu1;
            const double var2 = m22 - mu2 * mu2;
            const double cov = m12 - mu1 * mu2;
            acc += (2.0 * mu1 * mu2 + kC1) * (2.0 * cov + kC2) /
                   ((mu1 * mu1 + mu2 * mu2 + kC1) * (var1 + var2 + kC2));
            ++count;
        }
    }
    return acc / count;
}

double tenengrad(std::span<const double> img, int h, int w) {
    if (img.size() != static_cast<size_t>(h) * w) throw DimensionError("tenengrad: size mismatch");
    if (h < 3 || w < 3) throw ValidationError("tenengrad: image smaller than 3x3");
    double acc = 0.0;
    for (int r = 1; r < h - 1; ++r) {
        for (int c = 1; c < w - 1; ++c) {
            auto px = [&](int dr, int dc) { return img[static_cast<size_t>(r + dr) * w + (c + dc)]; };
            const double gx = (px(-1, 1) + 2.0 * px(0, 1) + px(1, 1)) - (px(-1, -1) + 2.0 * px(0, -1) + px(1, -1));
            const double gy = (px(1, -1) + 2.0 * px(1, 0) + px(1, 1)) - (px(-1, -1) + 2.0 * px(-1, 0) + px(-1, 1));
            acc += std::sqrt(gx * gx + gy * gy);
        }
    }
    return acc / (static_cast<double>(h - 2) * (w - 2));
}

double feature_distance(const ComplexImage& test, const ComplexImage& ref, const enc::Encoder& encoder,
                        const std::array<double, 3>& level_weights) {
    const auto et = encoder.encode_image(test);
    const auto er = encoder.encode_image(ref);
    double d = 0.0;
    for (int l = 0; l < 3; ++l)
        d += level_weights[static_cast<size_t>(l)] *
             (1.0 - loss::cosine_sim(et[static_cast<size_t>(l)].v, er[static_cast<size_t>(l)].v));
    return d;
}

MetricReport compute_report(const ComplexImage& test, const ComplexImage& ref, const enc::Encoder* encoder) {
    require_same_shape(test, ref, "metrics");
    std::vector<double> mt = magnitude(test), mr = magnitude(ref);
    const double peak = *std::max_element(mr.begin(), mr.end());
    if (peak <= 0.0) throw ValidationError("metrics: reference image is identically zero");
    for (double& v : mt) v /= peak;
    for (double& v : mr) v /= peak;

    MetricReport rep;
    rep.psnr = psnr(mt, mr);
    rep.ssim = ssim(mt, mr, test.height, test.width);
    rep.tenengrad = tenengrad(mt, test.height, test.width);
    if (encoder) {
        ComplexImage tn = test, rn = ref;
        for (auto& v : tn.data) v /= peak;
        for (auto& v : rn.data) v /= peak;
        rep.feature_distance = feature_distance(tn, rn, *encoder);
    } else {
        rep.feature_distance = std::numeric_limits<double>::quiet_NaN();
    }
    return rep;
}

}  // namespace semrecon::metrics
