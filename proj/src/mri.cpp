#include "semrecon/mri.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace semrecon::mri {

void CoilSensitivities::validate() const {
    if (n_coils < 1) throw ValidationError("coils: n_coils must be >= 1");
    if (static_cast<int>(maps.size()) != n_coils) throw ValidationError("coils: maps/n_coils mismatch");
    for (const auto& m : maps) {
        if (m.height != height || m.width != width) throw DimensionError("coils: map shape mismatch");
        if (!all_finite(m)) throw ValidationError("coils: non-finite sensitivity value");
    }
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            double sos = 0.0;
            for (const auto& m : maps) sos += std::norm(m.at(r, c));
            if (std::abs(sos - 1.0) > 1e-6)
                throw ValidationError("coils: per-pixel sum-of-squares is " + std::to_string(sos) +
                                      ", expected 1");
        }
    }
}

int SamplingMask::sampled_rows() const {
    return static_cast<int>(std::count(rows.begin(), rows.end(), uint8_t{1}));
}

void SamplingMask::validate() const {
    if (height <= 0 || width <= 0) throw DimensionError("mask: empty");
    if (static_cast<int>(rows.size()) != height) throw ValidationError("mask: rows/height mismatch");
    for (uint8_t v : rows)
        if (v != 0 && v != 1) throw ValidationError("mask: entries must be 0 or 1");
    const int start = (height - acs_lines) / 2;
    for (int r = start; r < start + acs_lines; ++r)
        if (!rows[static_cast<size_t>(r)]) throw ValidationError("mask: ACS row not sampled");
}

void AcquisitionData::validate() const {
    coils.validate();
    mask.validate();
    if (static_cast<int>(kspace.size()) != coils.n_coils)
        throw DimensionError("acquisition: kspace count != n_coils");
    for (const auto& k : kspace) {
        if (k.height != mask.height || k.width != mask.width)
            throw DimensionError("acquisition: kspace shape mismatch");
        for (int r = 0; r < k.height; ++r) {
            if (mask.sampled(r)) continue;
            for (int c = 0; c < k.width; ++c)
                if (k.at(r, c) != cplx{0.0, 0.0})
                    throw ValidationError("acquisition: nonzero k-space at unsampled row");
        }
    }
}

namespace {

void apply_mask(ComplexImage& k, const SamplingMask& mask) {
    for (int r = 0; r < k.height; ++r) {
        if (mask.sampled(r)) continue;
        for (int c = 0; c < k.width; ++c) k.at(r, c) = cplx{0.0, 0.0};
    }
}

void check_shapes(const ComplexImage& image, const CoilSensitivities& coils, const SamplingMask& mask) {
    if (image.height != coils.height || image.width != coils.width)
        throw DimensionError("forward_model: image/coils shape mismatch");
    if (image.height != mask.height || image.width != mask.width)
        throw DimensionError("forward_model: image/mask shape mismatch");
}

}  // namespace

std::vector<ComplexImage> forward_model(const ComplexImage& image, const CoilSensitivities& coils,
                                        const SamplingMask& mask) {
    check_shapes(image, coils, mask);
    std::vector<ComplexImage> out;
    out.reserve(static_cast<size_t>(coils.n_coils));
    for (int j = 0; j < coils.n_coils; ++j) {
        ComplexImage weighted(image.height, image.width);
        const ComplexImage& cj = coils.maps[static_cast<size_t>(j)];
        for (size_t i = 0; i < image.size(); ++i) weighted.data[i] = cj.data[i] * image.data[i];
        ComplexImage k = fft2(weighted);
        apply_mask(k, mask);
        out.push_back(std::move(k));
    }
    return out;
}

ComplexImage adjoint(const std::vector<ComplexImage>& kspace, const CoilSensitivities& coils,
                     const SamplingMask& mask) {
    if (static_cast<int>(kspace.size()) != coils.n_coils)
        throw DimensionError("adjoint: kspace count != n_coils");
    ComplexImage acc(coils.height, coils.width);
    for (int j = 0; j < coils.n_coils; ++j) {
        const ComplexImage& k = kspace[static_cast<size_t>(j)];
        if (k.height != coils.height || k.width != coils.width)
            throw DimensionError("adjoint: kspace shape mismatch");
        ComplexImage masked = k;
        apply_mask(masked, mask);
        ComplexImage img = ifft2(masked);
        const ComplexImage& cj = coils.maps[static_cast<size_t>(j)];
        for (size_t i = 0; i < acc.size(); ++i) acc.data[i] += std::conj(cj.data[i]) * img.data[i];
    }
    return acc;
}

SamplingMask generate_mask(int height, int width, double acceleration, int acs_lines, uint64_t seed) {
    if (height <= 0 || width <= 0) throw DimensionError("generate_mask: empty");
    if (acceleration < 1.0) throw ValidationError("generate_mask: acceleration must be >= 1");
    if (acs_lines < 0 || acs_lines > height) throw ValidationError("generate_mask: bad acs_lines");
    const int budget = static_cast<int>(std::lround(height / acceleration));
    if (budget < acs_lines)
        throw ValidationError("generate_mask: row budget " + std::to_string(budget) +
                              " below acs_lines " + std::to_string(acs_lines));

    SamplingMask m;
    m.height = height;
    m.width = width;
    m.acceleration = acceleration;
    m.acs_lines = acs_lines;
    m.rows.assign(static_cast<size_t>(height), 0);

    const int start = (height - acs_lines) / 2;
    for (int r = start; r < start + acs_lines; ++r) m.rows[static_cast<size_t>(r)] = 1;

    std::vector<int> candidates;
    for (int r = 0; r < height; ++r)
        if (!m.rows[static_cast<size_t>(r)]) candidates.push_back(r);

    Rng rng(mix_seed(seed, 0x6d61736bULL));
    int remaining = budget - acs_lines;
    // partial Fisher-Yates draw without replacement
    for (int i = 0; i < remaining; ++i) {
        size_t j = i + rng.uniform_int(candidates.size() - static_cast<size_t>(i));
        std::swap(candidates[static_cast<size_t>(i)], candidates[j]);
        m.rows[static_cast<size_t>(candidates[static_cast<size_t>(i)])] = 1;
    }
    return m;
}

void add_noise(std::vector<ComplexImage>& kspace, const SamplingMask& mask, double sigma, uint64_t seed) {
    if (sigma < 0.0) throw ValidationError("add_noise: sigma must be >= 0");
    if (sigma == 0.0) return;
    Rng rng(mix_seed(seed, 0x6e6f6973ULL));
    for (auto& k : kspace) {
        for (int r = 0; r < k.height; ++r) {
            if (!mask.sampled(r)) continue;
            for (int c = 0; c < k.width; ++c)
                k.at(r, c) += cplx{sigma * rng.normal(), sigma * rng.normal()};
        }
    }
}

cplx inner(const ComplexImage& a, const ComplexImage& b) {
    cplx s{0.0, 0.0};
    for (size_t i = 0; i < a.size(); ++i) s += std::conj(a.data[i]) * b.data[i];
    return s;
}

cplx inner(const std::vector<ComplexImage>& a, const std::vector<ComplexImage>& b) {
    cplx s{0.0, 0.0};
    for (size_t j = 0; j < a.size(); ++j) s += inner(a[j], b[j]);
    return s;
}

double norm2(const ComplexImage& a) { return std::sqrt(inner(a, a).real()); }

CgResult cg_solve(const std::function<ComplexImage(const ComplexImage&)>& normal_op, const ComplexImage& rhs,
                  double tol, int max_iter) {
    if (tol <= 0.0) throw ValidationError("cg_solve: tol must be > 0");
    const double rhs_norm = norm2(rhs);
    CgResult res;
    res.x = ComplexImage(rhs.height, rhs.width);
    if (rhs_norm == 0.0) return res;  // x = 0 solves exactly

    ComplexImage r = rhs;  // residual for x0 = 0
    ComplexImage p = r;
    double rr = inner(r, r).real();

    for (int it = 0; it < max_iter; ++it) {
        ComplexImage ap = normal_op(p);
        const double pap = inner(p, ap).real();
        if (!std::isfinite(pap)) throw DivergenceError("cg_solve: non-finite curvature");
        if (pap <= 0.0) break;  // search direction in the operator's null space
        const double alpha = rr / pap;
        for (size_t i = 0; i < res.x.size(); ++i) {
            res.x.data[i] += alpha * p.data[i];
            r.data[i] -= alpha * ap.data[i];
        }
        const double rr_new = inner(r, r).real();
        if (!std::isfinite(rr_new)) throw DivergenceError("cg_solve: non-finite residual");
        res.iterations = it + 1;
        if (std::sqrt(rr_new) / rhs_norm <= tol) {
            rr = rr_new;
            break;
        }
        const double beta = rr_new / rr;
        rr = rr_new;
        for (size_t i = 0; i < p.size(); ++i) p.data[i] = r.data[i] + beta * p.data[i];
    }
    res.rel_residual = std::sqrt(rr) / rhs_norm;
    return res;
}

ComplexImage zero_filled(const AcquisitionData& acq) { return adjoint(acq.kspace, acq.coils, acq.mask); }

AcquisitionData simulate_acquisition(const ComplexImage& image, const CoilSensitivities& coils,
                                     const SamplingMask& mask, double noise_sigma, uint64_t noise_seed) {
    AcquisitionData acq;
    acq.kspace = forward_model(image, coils, mask);
    add_noise(acq.kspace, mask, noise_sigma, noise_seed);
    acq.mask = mask;
    acq.coils = coils;
    acq.noise_sigma = noise_sigma;
    return acq;
}

}  // namespace semrecon::mri
