#include "semrecon/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "semrecon/dataset.hpp"

namespace semrecon::nn {

using ad::Tape;
using ad::Tensor;
using ad::VarId;
using nlohmann::json;

namespace {
constexpr double kInstanceNormEps = 1e-5;
constexpr double kSirenHiddenOmega = 30.0;
}  // namespace

// ---------------------------------------------------------------------------
// ParamStore

int ParamStore::add(const std::string& name, std::vector<int> shape, bool trainable) {
    if (by_name_.count(name)) throw ValidationError("param segment already exists: " + name);
    Segment s;
    s.name = name;
    s.shape = std::move(shape);
    s.offset = values_.size();
    s.size = Tensor::numel_of(s.shape);
    s.trainable = trainable;
    values_.resize(values_.size() + s.size, 0.0);
    grads_.resize(values_.size(), 0.0);
    by_name_[name] = static_cast<int>(segments_.size());
    segments_.push_back(std::move(s));
    return static_cast<int>(segments_.size()) - 1;
}

int ParamStore::index_of(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? -1 : it->second;
}

size_t ParamStore::trainable_size() const {
    size_t n = 0;
    for (const auto& s : segments_)
        if (s.trainable) n += s.size;
    return n;
}

std::span<double> ParamStore::values(int i) {
    const Segment& s = segments_[static_cast<size_t>(i)];
    return {values_.data() + s.offset, s.size};
}

std::span<const double> ParamStore::values(int i) const {
    const Segment& s = segments_[static_cast<size_t>(i)];
    return {values_.data() + s.offset, s.size};
}

std::span<double> ParamStore::grads(int i) {
    const Segment& s = segments_[static_cast<size_t>(i)];
    return {grads_.data() + s.offset, s.size};
}

void ParamStore::zero_grads() { std::fill(grads_.begin(), grads_.end(), 0.0); }

std::vector<uint8_t> ParamStore::trainable_mask() const {
    std::vector<uint8_t> m(values_.size(), 0);
    for (const auto& s : segments_)
        if (s.trainable) std::fill_n(m.begin() + static_cast<long>(s.offset), s.size, uint8_t{1});
    return m;
}

uint64_t ParamStore::content_hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const void* p, size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& s : segments_) feed(s.name.data(), s.name.size());
    feed(values_.data(), values_.size() * sizeof(double));
    return h;
}

void ParamStore::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    json layout;
    layout["segments"] = json::array();
    for (size_t i = 0; i < segments_.size(); ++i) {
        const Segment& s = segments_[i];
        char file[32];
        std::snprintf(file, sizeof(file), "seg_%04zu.arr", i);
        layout["segments"].push_back(
            {{"name", s.name}, {"shape", s.shape}, {"trainable", s.trainable}, {"file", file}});
        data::RealArray a;
        for (int d : s.shape) a.dims.push_back(static_cast<uint32_t>(d));
        a.v.assign(values_.begin() + static_cast<long>(s.offset),
                   values_.begin() + static_cast<long>(s.offset + s.size));
        data::write_array(dir / file, a);
    }
    std::ofstream f(dir / "layout.json", std::ios::trunc);
    if (!f) throw IoError("cannot write layout.json in " + dir.string());
    f << layout.dump(2) << "\n";
}

ParamStore ParamStore::load(const std::filesystem::path& dir) {
    std::ifstream f(dir / "layout.json");
    if (!f) throw IoError("no layout.json in " + dir.string());
    json layout;
    try {
        f >> layout;
    } catch (const json::exception& e) {
        throw FormatError("layout.json: " + std::string(e.what()));
    }
    ParamStore store;
    try {
        for (const auto& js : layout.at("segments")) {
            const int idx = store.add(js.at("name").get<std::string>(), js.at("shape").get<std::vector<int>>(),
                                      js.at("trainable").get<bool>());
            data::RealArray a = data::read_real_array(dir / js.at("file").get<std::string>());
            auto dst = store.values(idx);
            if (a.v.size() != dst.size())
                throw FormatError("checkpoint segment size mismatch: " + js.at("name").get<std::string>());
            std::copy(a.v.begin(), a.v.end(), dst.begin());
        }
    } catch (const json::exception& e) {
        throw FormatError("layout.json: " + std::string(e.what()));
    }
    return store;
}

std::vector<VarId> ParamStore::bind(Tape& tape) const {
    std::vector<VarId> ids;
    ids.reserve(segments_.size());
    for (size_t i = 0; i < segments_.size(); ++i) {
        const Segment& s = segments_[i];
        Tensor t(s.shape, std::vector<double>(values_.begin() + static_cast<long>(s.offset),
                                              values_.begin() + static_cast<long>(s.offset + s.size)));
        ids.push_back(s.trainable ? tape.leaf(std::move(t)) : tape.constant(std::move(t)));
    }
    return ids;
}

void ParamStore::collect_grads(const Tape& tape, const std::vector<VarId>& bound) {
    for (size_t i = 0; i < segments_.size(); ++i) {
        const Segment& s = segments_[i];
        if (!s.trainable) continue;
        Tensor g = tape.grad(bound[i]);
        for (size_t k = 0; k < s.size; ++k) grads_[s.offset + k] += g.v[k];
    }
}

// ---------------------------------------------------------------------------
// Specs

BackboneKind backbone_kind_from_string(const std::string& s) {
    if (s == "end_to_end" || s == "end_to_end_unet" || s == "unet") return BackboneKind::end_to_end_unet;
    if (s == "unrolled") return BackboneKind::unrolled;
    if (s == "inr") return BackboneKind::inr;
    if (s == "pixel") return BackboneKind::pixel;
    throw ValidationError("unknown backbone kind: " + s);
}

std::string to_string(BackboneKind k) {
    switch (k) {
        case BackboneKind::end_to_end_unet: return "end_to_end_unet";
        case BackboneKind::unrolled: return "unrolled";
        case BackboneKind::inr: return "inr";
        case BackboneKind::pixel: return "pixel";
    }
    return "?";
}

void BackboneSpec::validate() const {
    auto check_unet = [](const UnetSpec& u) {
        if (u.levels < 1) throw ValidationError("unet: levels must be >= 1");
        if (static_cast<int>(u.channels.size()) != u.levels)
            throw ValidationError("unet: channels must list one width per level");
        for (int c : u.channels)
            if (c < 1) throw ValidationError("unet: channel width must be positive");
    };
    switch (kind) {
        case BackboneKind::end_to_end_unet: check_unet(unet); break;
        case BackboneKind::unrolled:
            if (unrolled.n_stages < 1) throw ValidationError("unrolled: n_stages must be >= 1");
            if (unrolled.cg_tol <= 0) throw ValidationError("unrolled: cg_tol must be positive");
            if (unrolled.cg_iters < 1) throw ValidationError("unrolled: cg_iters must be >= 1");
            if (unrolled.mu < 0) throw ValidationError("unrolled: mu must be >= 0");
            check_unet(unrolled.block);
            break;
        case BackboneKind::inr:
            if (inr.n_layers < 2) throw ValidationError("inr: n_layers must be >= 2");
            if (inr.hidden_units < 1) throw ValidationError("inr: hidden_units must be >= 1");
            break;
        case BackboneKind::pixel: break;
    }
}

// ---------------------------------------------------------------------------
// Backbone construction

namespace {

void init_uniform(std::span<double> w, double bound, Rng& rng) {
    for (double& v : w) v = rng.uniform(-bound, bound);
}

void add_unet_params(ParamStore& store, const UnetSpec& spec, const std::string& prefix, Rng& rng) {
    auto add_conv = [&](const std::string& name, int ci, int co) {
        int k = store.add(name + ".k", {co, ci, 3, 3});
        init_uniform(store.values(k), std::sqrt(6.0 / (ci * 9.0)), rng);
        store.add(name + ".bias", {co});
        int g = store.add(name + ".gamma", {co});
        std::fill(store.values(g).begin(), store.values(g).end(), 1.0);
        store.add(name + ".beta", {co});
    };
    int in_ch = 2;
    for (int l = 0; l < spec.levels; ++l) {
        const std::string base = prefix + "enc" + std::to_string(l);
        add_conv(base + ".conv0", in_ch, spec.channels[static_cast<size_t>(l)]);
        add_conv(base + ".conv1", spec.channels[static_cast<size_t>(l)], spec.channels[static_cast<size_t>(l)]);
        in_ch = spec.channels[static_cast<size_t>(l)];
    }
    for (int l = spec.levels - 2; l >= 0; --l) {
        const std::string base = prefix + "dec" + std::to_string(l);
        const int cat = spec.channels[static_cast<size_t>(l + 1)] + spec.channels[static_cast<size_t>(l)];
        add_conv(base + ".conv0", cat, spec.channels[static_cast<size_t>(l)]);
        add_conv(base + ".conv1", spec.channels[static_cast<size_t>(l)], spec.channels[static_cast<size_t>(l)]);
    }
    int w = store.add(prefix + "out.w", {spec.channels[0], 2});
    init_uniform(store.values(w), std::sqrt(6.0 / spec.channels[0]), rng);
    store.add(prefix + "out.bias", {2});
}

void add_inr_params(ParamStore& store, const InrSpec& spec, Rng& rng) {
    // SIREN-style: first layer U(+-1/fan_in), later layers
    // U(+-sqrt(6/fan_in)/omega_hidden)
    int in = 2;
    for (int l = 0; l < spec.n_layers; ++l) {
        const bool last = l == spec.n_layers - 1;
        const int out = last ? 2 : spec.hidden_units;
        int w = store.add("inr.l" + std::to_string(l) + ".w", {in, out});
        const double bound = l == 0 ? 1.0 / in : std::sqrt(6.0 / in) / kSirenHiddenOmega;
        init_uniform(store.values(w), bound, rng);
        store.add("inr.l" + std::to_string(l) + ".bias", {out});
        in = out;
    }
}

}  // namespace

Backbone::Backbone(BackboneSpec spec, uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    Rng rng(mix_seed(seed, 0x6e6e696eULL));
    switch (spec_.kind) {
        case BackboneKind::end_to_end_unet: add_unet_params(params_, spec_.unet, "unet.", rng); break;
        case BackboneKind::unrolled: {
            const int distinct = spec_.unrolled.shared_weights ? 1 : spec_.unrolled.n_stages;
            for (int s = 0; s < distinct; ++s)
                add_unet_params(params_, spec_.unrolled.block, "stage" + std::to_string(s) + ".", rng);
            break;
        }
        case BackboneKind::inr: add_inr_params(params_, spec_.inr, rng); break;
        case BackboneKind::pixel:
            throw ValidationError("pixel backbone must be built from an init image");
    }
}

Backbone Backbone::pixel(const ComplexImage& init) {
    Backbone b;
    b.spec_.kind = BackboneKind::pixel;
    int seg = b.params_.add("pixel.image", {2, init.height, init.width});
    auto dst = b.params_.values(seg);
    const size_t plane = init.size();
    for (size_t i = 0; i < plane; ++i) {
        dst[i] = init.data[i].real();
        dst[plane + i] = init.data[i].imag();
    }
    return b;
}

VarId Backbone::effective_weight(Tape& tape, const std::vector<VarId>& bound, int seg) const {
    if (lora_) {
        for (const LoraEntry& e : *lora_) {
            if (e.base != seg) continue;
            VarId delta = tape.matmul(bound[static_cast<size_t>(e.b)], bound[static_cast<size_t>(e.a)]);
            delta = tape.scale(delta, e.scale);
            const auto& shape = params_.segment(seg).shape;
            if (shape.size() == 4) delta = tape.reshape(delta, shape);
            return tape.add(bound[static_cast<size_t>(seg)], delta);
        }
    }
    return bound[static_cast<size_t>(seg)];
}

VarId Backbone::unet_forward(Tape& tape, const std::vector<VarId>& bound, VarId x, const UnetSpec& spec,
                             const std::string& prefix) const {
    auto seg = [&](const std::string& n) {
        int i = params_.index_of(n);
        if (i < 0) throw ValidationError("missing param segment " + n);
        return i;
    };
    auto conv_block = [&](VarId h, const std::string& name) {
        for (int i = 0; i < 2; ++i) {
            const std::string c = name + ".conv" + std::to_string(i);
            h = tape.conv3x3(h, effective_weight(tape, bound, seg(c + ".k")), bound[static_cast<size_t>(seg(c + ".bias"))]);
            h = tape.instance_norm(h, bound[static_cast<size_t>(seg(c + ".gamma"))],
                                   bound[static_cast<size_t>(seg(c + ".beta"))], kInstanceNormEps);
            h = tape.relu(h);
        }
        return h;
    };

    const auto& in_shape = tape.val(x).shape;
    if (in_shape.size() != 3 || in_shape[0] != 2) throw DimensionError("unet: input must be [2,H,W]");
    const int div = 1 << (spec.levels - 1);
    if (in_shape[1] % div || in_shape[2] % div)
        throw DimensionError("unet: H,W must be divisible by 2^(levels-1)");

    std::vector<VarId> skips;
    VarId h = x;
    for (int l = 0; l < spec.levels; ++l) {
        h = conv_block(h, prefix + "enc" + std::to_string(l));
        if (l < spec.levels - 1) {
            skips.push_back(h);
            h = tape.avg_pool2(h);
        }
    }
    for (int l = spec.levels - 2; l >= 0; --l) {
        h = tape.upsample2(h);
        h = tape.concat_channels(h, skips[static_cast<size_t>(l)]);
        h = conv_block(h, prefix + "dec" + std::to_string(l));
    }
    // 1x1 projection to 2 channels, no activation
    const auto& hs = tape.val(h).shape;
    const int hw = hs[1] * hs[2];
    VarId flat = tape.transpose(tape.reshape(h, {hs[0], hw}));  // [HW, C]
    VarId out = tape.linear(flat, effective_weight(tape, bound, seg(prefix + "out.w")),
                            bound[static_cast<size_t>(seg(prefix + "out.bias"))]);
    return tape.reshape(tape.transpose(out), {2, hs[1], hs[2]});
}

VarId Backbone::forward(Tape& tape, const std::vector<VarId>& bound, VarId input,
                        const mri::AcquisitionData* acq) const {
    switch (spec_.kind) {
        case BackboneKind::end_to_end_unet: return unet_forward(tape, bound, input, spec_.unet, "unet.");
        case BackboneKind::unrolled: {
            if (!acq) throw ValidationError("unrolled backbone needs acquisition data");
            VarId x = input;
            for (int s = 0; s < spec_.unrolled.n_stages; ++s) {
                const int idx = spec_.unrolled.shared_weights ? 0 : s;
                VarId z = unet_forward(tape, bound, x, spec_.unrolled.block,
                                       "stage" + std::to_string(idx) + ".");
                x = cg_dc_node(tape, z, *acq, spec_.unrolled.mu, spec_.unrolled.cg_tol,
                               spec_.unrolled.cg_iters);
            }
            return x;
        }
        case BackboneKind::inr: {
            const auto& s = tape.val(input).shape;
            if (s.size() != 2 || s[1] != 2) throw DimensionError("inr: input must be [N,2] coordinates");
            VarId h = input;
            for (int l = 0; l < spec_.inr.n_layers; ++l) {
                const std::string base = "inr.l" + std::to_string(l);
                const int wi = params_.index_of(base + ".w");
                const int bi = params_.index_of(base + ".bias");
                h = tape.linear(h, effective_weight(tape, bound, wi), bound[static_cast<size_t>(bi)]);
                if (l < spec_.inr.n_layers - 1)
                    h = tape.sine(h, l == 0 ? spec_.inr.omega0 : kSirenHiddenOmega);
            }
            return h;  // [N,2]; caller reshapes via inr_output_to_image
        }
        case BackboneKind::pixel: return bound[static_cast<size_t>(params_.index_of("pixel.image"))];
    }
    throw ValidationError("unreachable backbone kind");
}

void Backbone::apply_lora(const LoraConfig& cfg, uint64_t seed) {
    if (lora_) throw ValidationError("lora already applied");
    if (cfg.rank < 1) throw ValidationError("lora: rank must be >= 1");
    std::vector<std::string> targets = cfg.targets;
    if (targets.empty()) {
        for (int i = 0; i < params_.n_segments(); ++i) {
            const auto& name = params_.segment(i).name;
            if (name.ends_with(".w") || name.ends_with(".k")) targets.push_back(name);
        }
    }
    if (targets.empty()) throw ValidationError("lora: no matrix-like segments to target");

    Rng rng(mix_seed(seed, 0x6c6f7261ULL));
    std::vector<LoraEntry> entries;
    for (const std::string& t : targets) {
        const int base = params_.index_of(t);
        if (base < 0) throw ValidationError("lora: no such segment " + t);
        const auto& shape = params_.segment(base).shape;
        int m, n;
        if (shape.size() == 2) {
            m = shape[0];
            n = shape[1];
        } else if (shape.size() == 4) {
            m = shape[0];
            n = shape[1] * shape[2] * shape[3];
        } else {
            throw ValidationError("lora: segment is not matrix-like: " + t);
        }
        if (cfg.rank >= std::min(m, n))
            throw ValidationError("lora: rank " + std::to_string(cfg.rank) + " too large for " + t);
        LoraEntry e;
        e.base = base;
        e.b = params_.add(t + ".lora_b", {m, cfg.rank});  // zero init keeps the base network intact
        e.a = params_.add(t + ".lora_a", {cfg.rank, n});
        init_uniform(params_.values(e.a), 1.0 / std::sqrt(static_cast<double>(n)), rng);
        e.scale = cfg.alpha / cfg.rank;
        entries.push_back(e);
    }
    // only the low-rank factors train from here on
    for (int i = 0; i < params_.n_segments(); ++i) {
        const auto& name = params_.segment(i).name;
        params_.set_trainable(i, name.ends_with(".lora_a") || name.ends_with(".lora_b"));
    }
    lora_ = std::move(entries);
}

// ---------------------------------------------------------------------------
// CG data-consistency node

VarId cg_dc_node(Tape& tape, VarId z, const mri::AcquisitionData& acq, double mu, double tol, int max_iter) {
    const auto& zs = tape.val(z).shape;
    if (zs.size() != 3 || zs[0] != 2 || zs[1] != acq.height() || zs[2] != acq.width())
        throw DimensionError("cg_dc: z shape does not match acquisition");

    auto normal_op = [&acq, mu](const ComplexImage& x) {
        ComplexImage y = mri::adjoint(mri::forward_model(x, acq.coils, acq.mask), acq.coils, acq.mask);
        if (mu != 0.0)
            for (size_t i = 0; i < y.size(); ++i) y.data[i] += mu * x.data[i];
        return y;
    };

    ComplexImage zi = tensor_to_image(tape.val(z));
    ComplexImage rhs = mri::adjoint(acq.kspace, acq.coils, acq.mask);
    if (mu != 0.0)
        for (size_t i = 0; i < rhs.size(); ++i) rhs.data[i] += mu * zi.data[i];
    ComplexImage y = mri::cg_solve(normal_op, rhs, tol, max_iter).x;

    // d y / d z = mu (A^H A + mu I)^{-1}; Hermitian, so backward reuses CG
    return tape.custom(image_to_tensor(y), {z},
                       [&acq, mu, tol, max_iter, normal_op](const Tensor& g, const std::vector<double*>& pg) {
                           if (!pg[0] || mu == 0.0) return;
                           ComplexImage gi = tensor_to_image(g);
                           ComplexImage gz = mri::cg_solve(normal_op, gi, tol, max_iter).x;
                           const size_t plane = gz.size();
                           for (size_t i = 0; i < plane; ++i) {
                               pg[0][i] += mu * gz.data[i].real();
                               pg[0][plane + i] += mu * gz.data[i].imag();
                           }
                       });
}

// ---------------------------------------------------------------------------
// helpers

Tensor coordinate_grid(int height, int width) {
    Tensor t({height * width, 2});
    for (int r = 0; r < height; ++r)
        for (int c = 0; c < width; ++c) {
            const size_t i = static_cast<size_t>(r) * width + c;
            t.v[2 * i] = height > 1 ? 2.0 * r / (height - 1) - 1.0 : 0.0;
            t.v[2 * i + 1] = width > 1 ? 2.0 * c / (width - 1) - 1.0 : 0.0;
        }
    return t;
}

Tensor image_to_tensor(const ComplexImage& im) {
    Tensor t({2, im.height, im.width});
    const size_t plane = im.size();
    for (size_t i = 0; i < plane; ++i) {
        t.v[i] = im.data[i].real();
        t.v[plane + i] = im.data[i].imag();
    }
    return t;
}

ComplexImage tensor_to_image(const Tensor& t) {
    if (t.shape.size() == 3 && t.shape[0] == 2) {
        ComplexImage im(t.shape[1], t.shape[2]);
        const size_t plane = im.size();
        for (size_t i = 0; i < plane; ++i) im.data[i] = cplx{t.v[i], t.v[plane + i]};
        return im;
    }
    throw DimensionError("tensor_to_image: expected [2,H,W]");
}

VarId inr_output_to_image_node(Tape& tape, VarId out, int height, int width) {
    const auto& s = tape.val(out).shape;
    if (s.size() != 2 || s[1] != 2 || s[0] != height * width)
        throw DimensionError("inr output: expected [H*W,2]");
    return tape.reshape(tape.transpose(out), {2, height, width});
}

double gradcheck(const std::function<double(bool)>& eval, ParamStore& params, int n_probes, double h,
                 uint64_t seed) {
    if (h <= 0) throw ValidationError("gradcheck: h must be positive");
    const double f0 = eval(true);
    if (!std::isfinite(f0)) throw DivergenceError("gradcheck: non-finite loss");
    const std::vector<double> analytic = params.grads();

    std::vector<size_t> idx;
    const auto mask = params.trainable_mask();
    for (size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) idx.push_back(i);
    if (idx.empty()) throw ValidationError("gradcheck: no trainable parameters");

    Rng rng(mix_seed(seed, 0x67636865ULL));
    double worst = 0.0;
    for (int p = 0; p < n_probes; ++p) {
        const size_t i = idx[rng.uniform_int(idx.size())];
        const double orig = params.values()[i];
        params.values()[i] = orig + h;
        const double fp = eval(false);
        params.values()[i] = orig - h;
        const double fm = eval(false);
        params.values()[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) throw DivergenceError("gradcheck: non-finite loss");
        const double fd = (fp - fm) / (2.0 * h);
        const double an = analytic[i];
        // 1e-6 floor absorbs central-difference roundoff on near-zero gradients
        const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
        worst = std::max(worst, rel);
    }
    return worst;
}

Adam::Adam(size_t n, double lr_, double beta1, double beta2, double eps)
    : lr(lr_), m_(n, 0.0), v_(n, 0.0), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(std::vector<double>& values, const std::vector<double>& grads,
                const std::vector<uint8_t>& trainable) {
    if (values.size() != m_.size() || grads.size() != m_.size() || trainable.size() != m_.size())
        throw DimensionError("adam: size mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < values.size(); ++i) {
        if (!trainable[i]) continue;
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i] * grads[i];
        values[i] -= lr * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + eps_);
    }
}

}  // namespace semrecon::nn
