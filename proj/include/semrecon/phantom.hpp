#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "semrecon/common.hpp"
#include "semrecon/mri.hpp"

namespace semrecon::data {

enum class PhantomKind { shepp_logan, random_ellipses, layered_rings };

PhantomKind phantom_kind_from_string(const std::string& s);
std::string to_string(PhantomKind k);

struct Lesion {
    double center_row = 0.0;  // pixel coordinates
    double center_col = 0.0;
    double radius = 0.0;  // pixels
    double delta = 0.0;   // added magnitude inside the disk
};

struct PhantomSpec {
    PhantomKind kind = PhantomKind::shepp_logan;
    int size = 64;  // H == W
    int n_objects = 8;  // random_ellipses only
    std::optional<Lesion> lesion;
    uint64_t seed = 0;
};

// Magnitude in [0,1] (lesion delta applied afterwards, unclamped), with a
// seeded low-order polynomial phase so images are genuinely complex.
ComplexImage make_phantom(const PhantomSpec& spec);

// Smooth Gaussian-bump coil fields at equally spaced boundary angles, jointly
// normalized to per-pixel sum-of-squares 1.
mri::CoilSensitivities simulate_coils(int n_coils, int height, int width);

// Monotone intensity remapping (gamma curve) of the magnitude, phase kept;
// stands in for a contrast change of the same geometry.
ComplexImage remap_contrast(const ComplexImage& image, double gamma);

}  // namespace semrecon::data
