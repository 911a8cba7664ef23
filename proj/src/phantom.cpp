#include "semrecon/phantom.hpp"

#include <algorithm>
#include <cmath>

namespace semrecon::data {

PhantomKind phantom_kind_from_string(const std::string& s) {
    if (s == "shepp_logan") return PhantomKind::shepp_logan;
    if (s == "random_ellipses") return PhantomKind::random_ellipses;
    if (s == "layered_rings") return PhantomKind::layered_rings;
    throw ValidationError("unknown phantom kind: " + s);
}

std::string to_string(PhantomKind k) {
    switch (k) {
        case PhantomKind::shepp_logan: return "shepp_logan";
        case PhantomKind::random_ellipses: return "random_ellipses";
        case PhantomKind::layered_rings: return "layered_rings";
    }
    return "?";
}

namespace {

struct Ellipse {
    double value, a, b, x0, y0, phi_deg;
};

// Modified Shepp-Logan intensities (peak magnitude 1).
constexpr Ellipse kSheppLogan[] = {
    {1.0, 0.69, 0.92, 0.0, 0.0, 0.0},
    {-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0},
    {-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0},
    {-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0},
    {0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0},
    {0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0},
    {0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0},
    {0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0},
    {0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0},
    {0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0},
};

void add_ellipse(std::vector<double>& mag, int n, const Ellipse& e) {
    const double sphi = std::sin(e.phi_deg * M_PI / 180.0);
    const double cphi = std::cos(e.phi_deg * M_PI / 180.0);
    for (int r = 0; r < n; ++r) {
        const double y = 1.0 - 2.0 * (r + 0.5) / n;  // +y up, [-1,1]
        for (int c = 0; c < n; ++c) {
            const double x = 2.0 * (c + 0.5) / n - 1.0;
            const double dx = x - e.x0, dy = y - e.y0;
            const double xr = dx * cphi + dy * sphi;
            const double yr = -dx * sphi + dy * cphi;
            if ((xr * xr) / (e.a * e.a) + (yr * yr) / (e.b * e.b) <= 1.0)
                mag[static_cast<size_t>(r) * n + c] += e.value;
        }
    }
}

std::vector<double> base_magnitude(const PhantomSpec& spec) {
    const int n = spec.size;
    std::vector<double> mag(static_cast<size_t>(n) * n, 0.0);
    switch (spec.kind) {
        case PhantomKind::shepp_logan: {
            for (const Ellipse& e : kSheppLogan) add_ellipse(mag, n, e);
            break;
        }
        case PhantomKind::random_ellipses: {
            Rng rng(mix_seed(spec.seed, 0x656c6cULL));
            if (spec.n_objects < 1) throw ValidationError("random_ellipses: n_objects must be >= 1");
            for (int i = 0; i < spec.n_objects; ++i) {
                Ellipse e;
                e.value = rng.uniform(0.15, 0.55);
                e.a = rng.uniform(0.08, 0.45);
                e.b = rng.uniform(0.08, 0.45);
                e.x0 = rng.uniform(-0.55, 0.55);
                e.y0 = rng.uniform(-0.55, 0.55);
                e.phi_deg = rng.uniform(0.0, 180.0);
                add_ellipse(mag, n, e);
            }
            break;
        }
        case PhantomKind::layered_rings: {
            // 6 concentric bands with alternating intensities
            static const double levels[6] = {0.95, 0.35, 0.75, 0.25, 0.55, 0.15};
            for (int r = 0; r < n; ++r) {
                const double y = 1.0 - 2.0 * (r + 0.5) / n;
                for (int c = 0; c < n; ++c) {
                    const double x = 2.0 * (c + 0.5) / n - 1.0;
                    const double rad = std::sqrt(x * x + y * y);
                    if (rad < 0.9) {
                        int band = std::min(5, static_cast<int>(rad / 0.15));
                        mag[static_cast<size_t>(r) * n + c] = levels[band];
                    }
                }
            }
            break;
        }
    }
    for (double& v : mag) v = std::clamp(v, 0.0, 1.0);
    return mag;
}

}  // namespace

ComplexImage make_phantom(const PhantomSpec& spec) {
    if (spec.size < 16) throw ValidationError("phantom: size must be >= 16");
    const int n = spec.size;
    std::vector<double> mag = base_magnitude(spec);

    if (spec.lesion) {
        const Lesion& L = *spec.lesion;
        if (L.radius <= 0.0) throw ValidationError("lesion: radius must be positive");
        if (L.center_row - L.radius < 0 || L.center_row + L.radius > n - 1 || L.center_col - L.radius < 0 ||
            L.center_col + L.radius > n - 1)
            throw ValidationError("lesion: disk extends outside the image");
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < n; ++c) {
                const double dr = r - L.center_row, dc = c - L.center_col;
                if (dr * dr + dc * dc <= L.radius * L.radius)
                    mag[static_cast<size_t>(r) * n + c] += L.delta;
            }
    }

    // low-order polynomial phase, coefficients seeded
    Rng rng(mix_seed(spec.seed, 0x70686173ULL));
    double a[6];
    for (double& v : a) v = rng.uniform(-1.2, 1.2);
    ComplexImage out(n, n);
    for (int r = 0; r < n; ++r) {
        const double y = 2.0 * (r + 0.5) / n - 1.0;
        for (int c = 0; c < n; ++c) {
            const double x = 2.0 * (c + 0.5) / n - 1.0;
            const double phi = a[0] + a[1] * x + a[2] * y + a[3] * x * x + a[4] * x * y + a[5] * y * y;
            out.at(r, c) = std::polar(mag[static_cast<size_t>(r) * n + c], phi);
        }
    }
    return out;
}

mri::CoilSensitivities simulate_coils(int n_coils, int height, int width) {
    if (n_coils < 1) throw ValidationError("simulate_coils: n_coils must be >= 1");
    mri::CoilSensitivities cs;
    cs.n_coils = n_coils;
    cs.height = height;
    cs.width = width;
    cs.maps.assign(static_cast<size_t>(n_coils), ComplexImage(height, width));

    const double cr = 0.5 * (height - 1), cc = 0.5 * (width - 1);
    const double ring = 0.48 * std::min(height, width);
    const double sigma = 0.6 * std::min(height, width);

    for (int j = 0; j < n_coils; ++j) {
        const double theta = 2.0 * M_PI * j / n_coils;
        const double br = cr - ring * std::sin(theta);
        const double bc = cc + ring * std::cos(theta);
        for (int r = 0; r < height; ++r) {
            for (int c = 0; c < width; ++c) {
                const double d2 = (r - br) * (r - br) + (c - bc) * (c - bc);
                const double m = std::exp(-d2 / (2.0 * sigma * sigma));
                // smooth per-coil linear phase
                const double ph = 0.5 * theta + 1.5 * ((r - cr) * std::sin(theta) + (c - cc) * std::cos(theta)) /
                                                    std::max(height, width);
                cs.maps[static_cast<size_t>(j)].at(r, c) = std::polar(m, ph);
            }
        }
    }
    // joint per-pixel sum-of-squares normalization
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            double sos = 0.0;
            for (auto& m : cs.maps) sos += std::norm(m.at(r, c));
            const double inv = 1.0 / std::sqrt(sos);
            for (auto& m : cs.maps) m.at(r, c) *= inv;
        }
    }
    return cs;
}

ComplexImage remap_contrast(const ComplexImage& image, double gamma) {
    if (gamma <= 0.0) throw ValidationError("remap_contrast: gamma must be positive");
    ComplexImage out(image.height, image.width);
    for (size_t i = 0; i < image.size(); ++i) {
        const double m = std::abs(image.data[i]);
        const double ph = std::arg(image.data[i]);
        out.data[i] = std::polar(std::pow(m, gamma), ph);
    }
    return out;
}

}  // namespace semrecon::data
