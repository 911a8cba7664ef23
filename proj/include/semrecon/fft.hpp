#pragma once

#include "semrecon/common.hpp"

namespace semrecon::mri {

// Unitary 2-D DFT (1/sqrt(N) scaling both ways), DC bin at index (0,0).
// With this convention ifft2 is both the inverse and the adjoint of fft2.
ComplexImage fft2(const ComplexImage& x);
ComplexImage ifft2(const ComplexImage& x);

}  // namespace semrecon::mri
