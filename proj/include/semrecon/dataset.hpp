#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "semrecon/common.hpp"
#include "semrecon/mri.hpp"

namespace semrecon::data {

// On-disk array format: 16-byte magic "SEMRECON-ARR" + 4 NULs, little-endian
// u32 rank, u32 dims[rank], u8 dtype tag, row-major little-endian payload.
enum class Dtype : uint8_t { f32 = 0, f64 = 1, c64 = 2, c128 = 3 };

struct RealArray {
    std::vector<uint32_t> dims;
    std::vector<double> v;
};

struct ComplexArray {
    std::vector<uint32_t> dims;
    std::vector<cplx> v;
};

void write_array(const std::filesystem::path& path, const RealArray& a, Dtype dtype = Dtype::f64);
void write_array(const std::filesystem::path& path, const ComplexArray& a, Dtype dtype = Dtype::c128);

// Readers convert f32->f64 and c64->c128; a dtype of the wrong family throws.
RealArray read_real_array(const std::filesystem::path& path);
ComplexArray read_complex_array(const std::filesystem::path& path);

// ComplexImage / coil-stack adapters
ComplexArray to_array(const ComplexImage& im);
ComplexArray to_array(const std::vector<ComplexImage>& stack);
ComplexImage image_from_array(const ComplexArray& a);
std::vector<ComplexImage> stack_from_array(const ComplexArray& a);

struct EntryMetadata {
    double R = 1.0;
    int acs = 0;
    double noise_sigma = 0.0;
    uint64_t seed = 0;
};

struct ManifestEntry {
    std::string id;
    std::string image, kspace, mask, coils;  // file names relative to the dataset dir
    EntryMetadata meta;
};

struct DatasetManifest {
    int version = 1;
    std::vector<ManifestEntry> entries;
};

void write_manifest(const std::filesystem::path& dir, const DatasetManifest& m);
// Parses manifest.json and checks ids are unique and every referenced file exists.
DatasetManifest read_manifest(const std::filesystem::path& dir);

struct LoadedEntry {
    ComplexImage image;  // ground truth
    mri::AcquisitionData acq;
};

LoadedEntry load_entry(const std::filesystem::path& dir, const ManifestEntry& e);

// PNG output (images are for inspection only, never inputs to metrics).
void write_png_gray8(const std::filesystem::path& path, const std::vector<uint8_t>& pixels, int h, int w);
void write_png_rgb8(const std::filesystem::path& path, const std::vector<uint8_t>& pixels, int h, int w);
// min-max normalized magnitude as 8-bit grayscale
void write_magnitude_png(const std::filesystem::path& path, const ComplexImage& im);
void write_scalar_png(const std::filesystem::path& path, const std::vector<double>& img, int h, int w);

}  // namespace semrecon::data
