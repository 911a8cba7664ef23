#include "semrecon/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>

#include "json.hpp"

namespace semrecon::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[16] = {'S', 'E', 'M', 'R', 'E', 'C', 'O', 'N', '-', 'A', 'R', 'R', 0, 0, 0, 0};

void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& buf, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(buf, bits);
}

void put_f64(std::string& buf, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u32(buf, static_cast<uint32_t>(bits & 0xffffffffULL));
    put_u32(buf, static_cast<uint32_t>(bits >> 32));
}

class Reader {
  public:
    explicit Reader(const fs::path& path) : path_(path.string()) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot open " + path_);
        buf_.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    }

    void expect_magic() {
        if (buf_.size() < 16 || std::memcmp(buf_.data(), kMagic, 16) != 0)
            throw FormatError(path_ + ": bad magic");
        pos_ = 16;
    }

    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }

    uint8_t u8() {
        need(1);
        return static_cast<uint8_t>(buf_[pos_++]);
    }

    float f32() {
        uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }

    double f64() {
        uint64_t lo = u32(), hi = u32();
        uint64_t bits = lo | (hi << 32);
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }

    size_t remaining() const { return buf_.size() - pos_; }
    const std::string& path() const { return path_; }

  private:
    void need(size_t n) {
        if (pos_ + n > buf_.size()) throw FormatError(path_ + ": truncated array file");
    }
    std::string path_;
    std::string buf_;
    size_t pos_ = 0;
};

size_t numel(const std::vector<uint32_t>& dims) {
    size_t n = 1;
    for (uint32_t d : dims) {
        if (d == 0) throw FormatError("array has a zero dimension");
        n *= d;
    }
    return n;
}

void write_file(const fs::path& path, const std::string& payload) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!f) throw IoError("write failed: " + path.string());
}

std::string header(const std::vector<uint32_t>& dims, Dtype dtype) {
    if (dims.empty() || dims.size() > 8) throw ValidationError("array rank must be 1..8");
    std::string buf(kMagic, 16);
    put_u32(buf, static_cast<uint32_t>(dims.size()));
    for (uint32_t d : dims) put_u32(buf, d);
    buf.push_back(static_cast<char>(dtype));
    return buf;
}

}  // namespace

void write_array(const fs::path& path, const RealArray& a, Dtype dtype) {
    if (dtype != Dtype::f32 && dtype != Dtype::f64) throw ValidationError("real array needs f32/f64 dtype");
    if (numel(a.dims) != a.v.size()) throw ValidationError("array dims/payload mismatch");
    std::string buf = header(a.dims, dtype);
    for (double v : a.v) {
        if (dtype == Dtype::f32)
            put_f32(buf, static_cast<float>(v));
        else
            put_f64(buf, v);
    }
    write_file(path, buf);
}

void write_array(const fs::path& path, const ComplexArray& a, Dtype dtype) {
    if (dtype != Dtype::c64 && dtype != Dtype::c128) throw ValidationError("complex array needs c64/c128 dtype");
    if (numel(a.dims) != a.v.size()) throw ValidationError("array dims/payload mismatch");
    std::string buf = header(a.dims, dtype);
    for (const cplx& v : a.v) {
        if (dtype == Dtype::c64) {
            put_f32(buf, static_cast<float>(v.real()));
            put_f32(buf, static_cast<float>(v.imag()));
        } else {
            put_f64(buf, v.real());
            put_f64(buf, v.imag());
        }
    }
    write_file(path, buf);
}

namespace {

std::pair<std::vector<uint32_t>, Dtype> read_header(Reader& r) {
    r.expect_magic();
    uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw FormatError(r.path() + ": bad rank");
    std::vector<uint32_t> dims(rank);
    for (auto& d : dims) d = r.u32();
    uint8_t tag = r.u8();
    if (tag > 3) throw FormatError(r.path() + ": unknown dtype tag");
    return {dims, static_cast<Dtype>(tag)};
}

}  // namespace

RealArray read_real_array(const fs::path& path) {
    Reader r(path);
    auto [dims, dtype] = read_header(r);
    if (dtype != Dtype::f32 && dtype != Dtype::f64)
        throw FormatError(r.path() + ": expected a real array");
    RealArray a;
    a.dims = dims;
    size_t n = numel(dims);
    size_t elem = dtype == Dtype::f32 ? 4 : 8;
    if (r.remaining() != n * elem) throw FormatError(r.path() + ": payload size mismatch");
    a.v.resize(n);
    for (size_t i = 0; i < n; ++i) a.v[i] = dtype == Dtype::f32 ? static_cast<double>(r.f32()) : r.f64();
    return a;
}

ComplexArray read_complex_array(const fs::path& path) {
    Reader r(path);
    auto [dims, dtype] = read_header(r);
    if (dtype != Dtype::c64 && dtype != Dtype::c128)
        throw FormatError(r.path() + ": expected a complex array");
    ComplexArray a;
    a.dims = dims;
    size_t n = numel(dims);
    size_t elem = dtype == Dtype::c64 ? 8 : 16;
    if (r.remaining() != n * elem) throw FormatError(r.path() + ": payload size mismatch");
    a.v.resize(n);
    for (size_t i = 0; i < n; ++i) {
        double re = dtype == Dtype::c64 ? static_cast<double>(r.f32()) : r.f64();
        double im = dtype == Dtype::c64 ? static_cast<double>(r.f32()) : r.f64();
        a.v[i] = cplx{re, im};
    }
    return a;
}

ComplexArray to_array(const ComplexImage& im) {
    ComplexArray a;
    a.dims = {static_cast<uint32_t>(im.height), static_cast<uint32_t>(im.width)};
    a.v = im.data;
    return a;
}

ComplexArray to_array(const std::vector<ComplexImage>& stack) {
    if (stack.empty()) throw ValidationError("empty image stack");
    ComplexArray a;
    a.dims = {static_cast<uint32_t>(stack.size()), static_cast<uint32_t>(stack[0].height),
              static_cast<uint32_t>(stack[0].width)};
    for (const auto& im : stack) {
        if (!im.same_shape(stack[0])) throw DimensionError("stack images differ in shape");
        a.v.insert(a.v.end(), im.data.begin(), im.data.end());
    }
    return a;
}

ComplexImage image_from_array(const ComplexArray& a) {
    if (a.dims.size() != 2) throw FormatError("expected a rank-2 complex array");
    ComplexImage im(static_cast<int>(a.dims[0]), static_cast<int>(a.dims[1]));
    im.data = a.v;
    return im;
}

std::vector<ComplexImage> stack_from_array(const ComplexArray& a) {
    if (a.dims.size() != 3) throw FormatError("expected a rank-3 complex array");
    const int n = static_cast<int>(a.dims[0]);
    const int h = static_cast<int>(a.dims[1]);
    const int w = static_cast<int>(a.dims[2]);
    std::vector<ComplexImage> stack(static_cast<size_t>(n), ComplexImage(h, w));
    const size_t plane = static_cast<size_t>(h) * w;
    for (int j = 0; j < n; ++j)
        std::copy_n(a.v.begin() + static_cast<long>(j * plane), plane, stack[static_cast<size_t>(j)].data.begin());
    return stack;
}

void write_manifest(const fs::path& dir, const DatasetManifest& m) {
    json j;
    j["version"] = m.version;
    j["entries"] = json::array();
    for (const auto& e : m.entries) {
        j["entries"].push_back({{"id", e.id},
                                {"image", e.image},
                                {"kspace", e.kspace},
                                {"mask", e.mask},
                                {"coils", e.coils},
                                {"metadata",
                                 {{"R", e.meta.R},
                                  {"acs", e.meta.acs},
                                  {"noise_sigma", e.meta.noise_sigma},
                                  {"seed", e.meta.seed}}}});
    }
    std::ofstream f(dir / "manifest.json", std::ios::trunc);
    if (!f) throw IoError("cannot write manifest in " + dir.string());
    f << j.dump(2) << "\n";
}

DatasetManifest read_manifest(const fs::path& dir) {
    std::ifstream f(dir / "manifest.json");
    if (!f) throw IoError("no manifest.json in " + dir.string());
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw FormatError("manifest.json: " + std::string(e.what()));
    }
    DatasetManifest m;
    try {
        m.version = j.at("version").get<int>();
        std::set<std::string> ids;
        for (const auto& je : j.at("entries")) {
            ManifestEntry e;
            e.id = je.at("id").get<std::string>();
            e.image = je.at("image").get<std::string>();
            e.kspace = je.at("kspace").get<std::string>();
            e.mask = je.at("mask").get<std::string>();
            e.coils = je.at("coils").get<std::string>();
            const auto& md = je.at("metadata");
            e.meta.R = md.at("R").get<double>();
            e.meta.acs = md.at("acs").get<int>();
            e.meta.noise_sigma = md.at("noise_sigma").get<double>();
            e.meta.seed = md.at("seed").get<uint64_t>();
            if (!ids.insert(e.id).second) throw FormatError("manifest: duplicate id " + e.id);
            for (const std::string* fn : {&e.image, &e.kspace, &e.mask, &e.coils})
                if (!fs::exists(dir / *fn)) throw FormatError("manifest: missing file " + *fn);
            m.entries.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw FormatError("manifest.json: " + std::string(e.what()));
    }
    return m;
}

LoadedEntry load_entry(const fs::path& dir, const ManifestEntry& e) {
    LoadedEntry out;
    out.image = image_from_array(read_complex_array(dir / e.image));
    auto kspace = stack_from_array(read_complex_array(dir / e.kspace));
    auto coil_maps = stack_from_array(read_complex_array(dir / e.coils));
    RealArray mask_grid = read_real_array(dir / e.mask);
    if (mask_grid.dims.size() != 2) throw FormatError(e.mask + ": mask must be rank 2");

    const int h = static_cast<int>(mask_grid.dims[0]);
    const int w = static_cast<int>(mask_grid.dims[1]);
    mri::SamplingMask mask;
    mask.height = h;
    mask.width = w;
    mask.acceleration = e.meta.R;
    mask.acs_lines = e.meta.acs;
    mask.rows.resize(static_cast<size_t>(h));
    for (int r = 0; r < h; ++r) {
        const double v0 = mask_grid.v[static_cast<size_t>(r) * w];
        for (int c = 0; c < w; ++c)
            if (mask_grid.v[static_cast<size_t>(r) * w + c] != v0)
                throw ValidationError(e.mask + ": mask row not constant along readout");
        if (v0 != 0.0 && v0 != 1.0) throw ValidationError(e.mask + ": mask entries must be 0/1");
        mask.rows[static_cast<size_t>(r)] = v0 != 0.0 ? 1 : 0;
    }

    mri::AcquisitionData acq;
    acq.kspace = std::move(kspace);
    acq.mask = std::move(mask);
    acq.coils.n_coils = static_cast<int>(coil_maps.size());
    acq.coils.height = coil_maps[0].height;
    acq.coils.width = coil_maps[0].width;
    acq.coils.maps = std::move(coil_maps);
    acq.noise_sigma = e.meta.noise_sigma;

    if (out.image.height != h || out.image.width != w)
        throw ValidationError(e.id + ": image/mask shape mismatch");
    acq.validate();
    return out;
}

namespace {

void append_chunk(std::string& out, const char type[4], const std::string& body) {
    auto be32 = [&out](uint32_t v) {
        out.push_back(static_cast<char>((v >> 24) & 0xff));
        out.push_back(static_cast<char>((v >> 16) & 0xff));
        out.push_back(static_cast<char>((v >> 8) & 0xff));
        out.push_back(static_cast<char>(v & 0xff));
    };
    be32(static_cast<uint32_t>(body.size()));
    std::string tb(type, 4);
    tb += body;
    out += tb;
    uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(tb.data()), static_cast<uInt>(tb.size()));
    be32(static_cast<uint32_t>(crc));
}

void write_png(const fs::path& path, const std::vector<uint8_t>& pixels, int h, int w, int channels) {
    if (h <= 0 || w <= 0) throw DimensionError("png: empty image");
    if (pixels.size() != static_cast<size_t>(h) * w * channels) throw DimensionError("png: pixel count mismatch");

    // filter byte 0 per scanline, then one zlib stream
    std::string raw;
    raw.reserve(static_cast<size_t>(h) * (static_cast<size_t>(w) * channels + 1));
    for (int r = 0; r < h; ++r) {
        raw.push_back(0);
        raw.append(reinterpret_cast<const char*>(pixels.data()) + static_cast<size_t>(r) * w * channels,
                   static_cast<size_t>(w) * channels);
    }
    uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
    std::string comp(comp_len, '\0');
    if (compress2(reinterpret_cast<Bytef*>(comp.data()), &comp_len,
                  reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()), 9) != Z_OK)
        throw IoError("png: deflate failed");
    comp.resize(comp_len);

    std::string out("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    auto be32 = [&ihdr](uint32_t v) {
        ihdr.push_back(static_cast<char>((v >> 24) & 0xff));
        ihdr.push_back(static_cast<char>((v >> 16) & 0xff));
        ihdr.push_back(static_cast<char>((v >> 8) & 0xff));
        ihdr.push_back(static_cast<char>(v & 0xff));
    };
    be32(static_cast<uint32_t>(w));
    be32(static_cast<uint32_t>(h));
    ihdr.push_back(8);                                   // bit depth
    ihdr.push_back(channels == 1 ? 0 : 2);               // gray / truecolor
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    append_chunk(out, "IHDR", ihdr);
    append_chunk(out, "IDAT", comp);
    append_chunk(out, "IEND", "");
    write_file(path, out);
}

}  // namespace

void write_png_gray8(const fs::path& path, const std::vector<uint8_t>& pixels, int h, int w) {
    write_png(path, pixels, h, w, 1);
}

void write_png_rgb8(const fs::path& path, const std::vector<uint8_t>& pixels, int h, int w) {
    write_png(path, pixels, h, w, 3);
}

void write_magnitude_png(const fs::path& path, const ComplexImage& im) {
    write_scalar_png(path, magnitude(im), im.height, im.width);
}

void write_scalar_png(const fs::path& path, const std::vector<double>& img, int h, int w) {
    double lo = img.empty() ? 0.0 : img[0], hi = lo;
    for (double v : img) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double span = hi > lo ? hi - lo : 1.0;
    std::vector<uint8_t> px(img.size());
    for (size_t i = 0; i < img.size(); ++i)
        px[i] = static_cast<uint8_t>(std::lround(255.0 * (img[i] - lo) / span));
    write_png_gray8(path, px, h, w);
}

}  // namespace semrecon::data
