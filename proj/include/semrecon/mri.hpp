#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "semrecon/common.hpp"
#include "semrecon/fft.hpp"

namespace semrecon::mri {

// Per-coil complex sensitivity fields, sum-of-squares normalized:
// sum_j |C_j(p)|^2 == 1 at every pixel p.
struct CoilSensitivities {
    int n_coils = 0;
    int height = 0;
    int width = 0;
    std::vector<ComplexImage> maps;

    void validate() const;
};

// Cartesian phase-encode line mask. Rows are phase-encode lines; the pattern
// is constant along the readout (column) axis. The central acs_lines rows are
// always fully sampled.
struct SamplingMask {
    int height = 0;
    int width = 0;
    double acceleration = 1.0;
    int acs_lines = 0;
    std::vector<uint8_t> rows;  // 0/1 per phase-encode row

    bool sampled(int r) const { return rows[static_cast<size_t>(r)] != 0; }
    int sampled_rows() const;
    void validate() const;
};

struct AcquisitionData {
    std::vector<ComplexImage> kspace;  // one per coil, zero at unsampled rows
    SamplingMask mask;
    CoilSensitivities coils;
    double noise_sigma = 0.0;

    int height() const { return mask.height; }
    int width() const { return mask.width; }
    void validate() const;
};

// S_j = mask .* UnitaryFFT2(C_j .* image), one array per coil.
std::vector<ComplexImage> forward_model(const ComplexImage& image, const CoilSensitivities& coils,
                                        const SamplingMask& mask);

// sum_j conj(C_j) .* UnitaryIFFT2(mask .* k_j); exact adjoint of forward_model.
ComplexImage adjoint(const std::vector<ComplexImage>& kspace, const CoilSensitivities& coils,
                     const SamplingMask& mask);

// Central acs_lines rows plus uniformly random rows without replacement until
// round(height/R) rows are sampled. Deterministic for a fixed seed.
SamplingMask generate_mask(int height, int width, double acceleration, int acs_lines, uint64_t seed);

// i.i.d. complex Gaussian noise (sigma per real/imag component) at sampled
// rows only; unsampled rows stay exactly zero.
void add_noise(std::vector<ComplexImage>& kspace, const SamplingMask& mask, double sigma, uint64_t seed);

struct CgResult {
    ComplexImage x;
    int iterations = 0;
    double rel_residual = 0.0;
};

// Conjugate gradient for normal_op(x) = rhs where normal_op is Hermitian PSD.
// Stops when ||normal_op(x) - rhs|| / ||rhs|| <= tol or max_iter is reached.
CgResult cg_solve(const std::function<ComplexImage(const ComplexImage&)>& normal_op, const ComplexImage& rhs,
                  double tol, int max_iter);

// Adjoint applied to the acquired k-space; the aliased baseline image.
ComplexImage zero_filled(const AcquisitionData& acq);

// Convenience: full acquisition simulation for one image.
AcquisitionData simulate_acquisition(const ComplexImage& image, const CoilSensitivities& coils,
                                     const SamplingMask& mask, double noise_sigma, uint64_t noise_seed);

// Inner products on images / k-space stacks (standard complex inner product).
cplx inner(const ComplexImage& a, const ComplexImage& b);
cplx inner(const std::vector<ComplexImage>& a, const std::vector<ComplexImage>& b);
double norm2(const ComplexImage& a);

}  // namespace semrecon::mri
