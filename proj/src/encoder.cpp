#include "semrecon/encoder.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

#include "json.hpp"

namespace semrecon::enc {

using ad::Tape;
using ad::Tensor;
using ad::VarId;
using nlohmann::json;

const char* to_string(Level l) {
    switch (l) {
        case Level::low: return "low";
        case Level::mid: return "mid";
        case Level::high: return "high";
        case Level::language: return "language";
    }
    return "?";
}

Level level_from_string(const std::string& s) {
    if (s == "low") return Level::low;
    if (s == "mid") return Level::mid;
    if (s == "high") return Level::high;
    if (s == "language") return Level::language;
    throw ValidationError("unknown level: " + s);
}

const char* to_string(QualityLabel l) {
    switch (l) {
        case QualityLabel::positive: return "positive";
        case QualityLabel::negative: return "negative";
        case QualityLabel::undetermined: return "undetermined";
    }
    return "?";
}

std::vector<int> tokenize(const std::string& text, int vocab) {
    if (vocab < 2) throw ValidationError("tokenize: vocabulary too small");
    std::vector<int> ids;
    std::string tok;
    auto flush = [&]() {
        if (tok.empty()) return;
        uint64_t h = 0xcbf29ce484222325ULL;
        for (char c : tok) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ULL;
        }
        ids.push_back(static_cast<int>(h % static_cast<uint64_t>(vocab)));
        tok.clear();
    };
    for (char c : text) {
        if (std::isalnum(static_cast<unsigned char>(c)))
            tok.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        else
            flush();
    }
    flush();
    if (ids.empty()) throw ValidationError("tokenize: no tokens in instruction");
    return ids;
}

Instruction make_instruction(const std::string& text, int vocab) { return {text, tokenize(text, vocab)}; }

loss::Members perturb_text(const std::vector<double>& v, const PerturbationConfig& cfg) {
    if (cfg.K < 1) throw ValidationError("perturb_text: K must be >= 1");
    if (cfg.sigma < 0.0) throw ValidationError("perturb_text: sigma must be >= 0");
    Rng rng(mix_seed(cfg.seed, 0x70657274ULL));
    loss::Members out(static_cast<size_t>(cfg.K), v);
    for (auto& m : out)
        for (double& x : m) x += cfg.sigma * rng.normal();
    return out;
}

// ---------------------------------------------------------------------------
// shared graph helpers

namespace {

VarId vec_linear(Tape& tape, VarId vec, VarId w, VarId bias) {
    const int in = tape.val(vec).shape[0];
    const int out = tape.val(w).shape[1];
    VarId row = tape.reshape(vec, {1, in});
    return tape.reshape(tape.linear(row, w, bias), {out});
}

Tensor sincos_positions(int ph, int pw, int dim) {
    Tensor pe({ph * pw, dim});
    const int quarter = dim / 4;
    for (int pr = 0; pr < ph; ++pr)
        for (int pc = 0; pc < pw; ++pc) {
            double* row = pe.v.data() + static_cast<size_t>(pr * pw + pc) * dim;
            for (int i = 0; i < quarter; ++i) {
                const double f = std::pow(10000.0, -4.0 * i / dim);
                row[4 * i] = std::sin(pr * f);
                row[4 * i + 1] = std::cos(pr * f);
                row[4 * i + 2] = std::sin(pc * f);
                row[4 * i + 3] = std::cos(pc * f);
            }
        }
    return pe;
}

}  // namespace

// ---------------------------------------------------------------------------
// DeskEncoder

DeskEncoder::DeskEncoder(EncoderConfig cfg, uint64_t seed) : cfg_(cfg) {
    if (cfg_.trunk_dim % cfg_.heads) throw ValidationError("encoder: trunk_dim must divide by heads");
    if (cfg_.trunk_dim % 4) throw ValidationError("encoder: trunk_dim must divide by 4");
    if (cfg_.blocks < 1) throw ValidationError("encoder: needs at least one block");
    const int d = cfg_.trunk_dim;
    const int dk = d / cfg_.heads;
    const int p2 = cfg_.patch * cfg_.patch;
    Rng rng(mix_seed(seed, 0x64656e63ULL));

    auto xavier = [&](int seg, int fan_in) {
        auto w = params_.values(seg);
        const double b = std::sqrt(6.0 / fan_in);
        for (double& v : w) v = rng.uniform(-b, b);
    };

    xavier(params_.add("patch.w", {p2, d}), p2);
    params_.add("patch.bias", {d});
    for (int b = 0; b < cfg_.blocks; ++b) {
        const std::string base = "b" + std::to_string(b);
        int g = params_.add(base + ".ln1.gamma", {d});
        std::fill(params_.values(g).begin(), params_.values(g).end(), 1.0);
        params_.add(base + ".ln1.beta", {d});
        for (int h = 0; h < cfg_.heads; ++h) {
            const std::string hb = base + ".attn.h" + std::to_string(h);
            xavier(params_.add(hb + ".wq", {d, dk}), d);
            xavier(params_.add(hb + ".wk", {d, dk}), d);
            xavier(params_.add(hb + ".wv", {d, dk}), d);
            xavier(params_.add(hb + ".wo", {dk, d}), dk);
        }
        g = params_.add(base + ".ln2.gamma", {d});
        std::fill(params_.values(g).begin(), params_.values(g).end(), 1.0);
        params_.add(base + ".ln2.beta", {d});
        xavier(params_.add(base + ".mlp.w1", {d, 2 * d}), d);
        params_.add(base + ".mlp.b1", {2 * d});
        xavier(params_.add(base + ".mlp.w2", {2 * d, d}), 2 * d);
        params_.add(base + ".mlp.b2", {d});
    }
    for (int l = 0; l < 3; ++l) {
        xavier(params_.add("tap" + std::to_string(l) + ".w", {d, cfg_.level_dims[static_cast<size_t>(l)]}), d);
        params_.add("tap" + std::to_string(l) + ".bias", {cfg_.level_dims[static_cast<size_t>(l)]});
    }
    int table = params_.add("text.table", {cfg_.vocab, cfg_.text_dim});
    for (double& v : params_.values(table)) v = rng.uniform(-0.05, 0.05);
    const int fuse_in = cfg_.level_dims[2] + cfg_.text_dim;
    const int fuse_hidden = 2 * cfg_.lang_dim;
    xavier(params_.add("fuse.w1", {fuse_in, fuse_hidden}), fuse_in);
    params_.add("fuse.b1", {fuse_hidden});
    xavier(params_.add("fuse.w2", {fuse_hidden, cfg_.lang_dim}), fuse_hidden);
    params_.add("fuse.b2", {cfg_.lang_dim});

    set_frozen(true);
}

void DeskEncoder::set_frozen(bool frozen) {
    frozen_ = frozen;
    for (int i = 0; i < params_.n_segments(); ++i) params_.set_trainable(i, !frozen);
}

std::array<VarId, 3> DeskEncoder::encode_image_node(Tape& tape, const std::vector<VarId>& bound,
                                                    VarId image) const {
    const auto& s = tape.val(image).shape;
    if (s.size() != 3 || s[0] != 2) throw DimensionError("encode_image: expected [2,H,W]");
    for (double v : tape.val(image).v)
        if (!std::isfinite(v)) throw ValidationError("encode_image: non-finite input");
    const int h = s[1], w = s[2];
    if (h % cfg_.patch || w % cfg_.patch) throw DimensionError("encode_image: H,W must divide by patch size");

    auto seg = [&](const std::string& n) {
        const int i = params_.index_of(n);
        if (i < 0) throw ValidationError("encoder: missing segment " + n);
        return bound[static_cast<size_t>(i)];
    };

    VarId mag = tape.complex_magnitude(image, cfg_.mag_eps);
    VarId x = tape.linear(tape.patchify(mag, cfg_.patch), seg("patch.w"), seg("patch.bias"));
    x = tape.add(x, tape.constant(sincos_positions(h / cfg_.patch, w / cfg_.patch, cfg_.trunk_dim)));

    const int dk = cfg_.trunk_dim / cfg_.heads;
    const std::array<int, 3> tap_after = {0, cfg_.blocks / 2, cfg_.blocks - 1};
    std::array<VarId, 3> taps{};
    int next_tap = 0;

    for (int b = 0; b < cfg_.blocks; ++b) {
        const std::string base = "b" + std::to_string(b);
        VarId hn = tape.layer_norm(x, seg(base + ".ln1.gamma"), seg(base + ".ln1.beta"), 1e-5);
        VarId attn = -1;
        for (int head = 0; head < cfg_.heads; ++head) {
            const std::string hb = base + ".attn.h" + std::to_string(head);
            VarId q = tape.matmul(hn, seg(hb + ".wq"));
            VarId k = tape.matmul(hn, seg(hb + ".wk"));
            VarId v = tape.matmul(hn, seg(hb + ".wv"));
            VarId a = tape.softmax_rows(tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / std::sqrt(dk)));
            VarId o = tape.matmul(tape.matmul(a, v), seg(hb + ".wo"));
            attn = head == 0 ? o : tape.add(attn, o);
        }
        x = tape.add(x, attn);
        VarId hn2 = tape.layer_norm(x, seg(base + ".ln2.gamma"), seg(base + ".ln2.beta"), 1e-5);
        VarId m = tape.linear(hn2, seg(base + ".mlp.w1"), seg(base + ".mlp.b1"));
        m = tape.linear(tape.gelu(m), seg(base + ".mlp.w2"), seg(base + ".mlp.b2"));
        x = tape.add(x, m);

        while (next_tap < 3 && tap_after[static_cast<size_t>(next_tap)] == b) {
            const std::string tp = "tap" + std::to_string(next_tap);
            taps[static_cast<size_t>(next_tap)] =
                tape.l2_normalize(vec_linear(tape, tape.mean_rows(x), seg(tp + ".w"), seg(tp + ".bias")));
            ++next_tap;
        }
    }
    return taps;
}

VarId DeskEncoder::text_node(Tape& tape, const std::vector<VarId>& bound, const Instruction& ins) const {
    if (ins.token_ids.empty()) throw ValidationError("text_node: empty instruction");
    const int table = params_.index_of("text.table");
    return tape.mean_rows(tape.rows(bound[static_cast<size_t>(table)], ins.token_ids));
}

VarId DeskEncoder::fuse_node(Tape& tape, const std::vector<VarId>& bound, VarId high_level,
                             VarId text_vec) const {
    if (tape.val(high_level).shape != std::vector<int>{cfg_.level_dims[2]} ||
        tape.val(text_vec).shape != std::vector<int>{cfg_.text_dim})
        throw DimensionError("fuse: embedding dimensions do not match the encoder");
    auto seg = [&](const std::string& n) { return bound[static_cast<size_t>(params_.index_of(n))]; };
    VarId z = tape.concat(high_level, text_vec);
    z = vec_linear(tape, z, seg("fuse.w1"), seg("fuse.b1"));
    z = tape.gelu(z);
    z = vec_linear(tape, z, seg("fuse.w2"), seg("fuse.b2"));
    return tape.l2_normalize(z);
}

void DeskEncoder::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    json j;
    j["kind"] = "desk";
    j["config"] = {{"patch", cfg_.patch},         {"trunk_dim", cfg_.trunk_dim},
                   {"heads", cfg_.heads},         {"blocks", cfg_.blocks},
                   {"level_dims", cfg_.level_dims}, {"text_dim", cfg_.text_dim},
                   {"lang_dim", cfg_.lang_dim},   {"vocab", cfg_.vocab},
                   {"mag_eps", cfg_.mag_eps}};
    std::ofstream f(dir / "encoder.json", std::ios::trunc);
    if (!f) throw IoError("cannot write encoder.json in " + dir.string());
    f << j.dump(2) << "\n";
    params_.save(dir / "params");
}

namespace {

EncoderConfig config_from_json(const json& jc) {
    EncoderConfig cfg;
    cfg.patch = jc.at("patch").get<int>();
    cfg.trunk_dim = jc.at("trunk_dim").get<int>();
    cfg.heads = jc.at("heads").get<int>();
    cfg.blocks = jc.at("blocks").get<int>();
    cfg.level_dims = jc.at("level_dims").get<std::array<int, 3>>();
    cfg.text_dim = jc.at("text_dim").get<int>();
    cfg.lang_dim = jc.at("lang_dim").get<int>();
    cfg.vocab = jc.at("vocab").get<int>();
    cfg.mag_eps = jc.at("mag_eps").get<double>();
    return cfg;
}

json read_encoder_json(const std::filesystem::path& dir) {
    std::ifstream f(dir / "encoder.json");
    if (!f) throw IoError("no encoder.json in " + dir.string());
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw FormatError("encoder.json: " + std::string(e.what()));
    }
    return j;
}

}  // namespace

DeskEncoder DeskEncoder::load_from(const std::filesystem::path& dir) {
    json j = read_encoder_json(dir);
    if (j.at("kind").get<std::string>() != "desk") throw FormatError("encoder.json: not a desk encoder");
    DeskEncoder e(config_from_json(j.at("config")), 0);
    nn::ParamStore loaded = nn::ParamStore::load(dir / "params");
    if (loaded.total_size() != e.params_.total_size())
        throw FormatError("encoder checkpoint does not match the recorded configuration");
    e.params_ = std::move(loaded);
    e.set_frozen(true);
    return e;
}

// ---------------------------------------------------------------------------
// AnalyticEncoder

AnalyticEncoder::AnalyticEncoder(EncoderConfig cfg, uint64_t seed) : cfg_(cfg), seed_(seed) {}

std::vector<double> AnalyticEncoder::projection(int rows, int cols, uint64_t stream) const {
    std::lock_guard<std::mutex> lock(cache_mu_);
    auto key = std::make_tuple(rows, cols, stream);
    auto it = proj_cache_.find(key);
    if (it != proj_cache_.end()) return it->second;
    Rng rng(mix_seed(seed_, mix_seed(stream, static_cast<uint64_t>(rows) * 131071u + static_cast<uint64_t>(cols))));
    std::vector<double> w(static_cast<size_t>(rows) * cols);
    const double scale = 1.0 / std::sqrt(static_cast<double>(rows));
    for (double& v : w) v = scale * rng.normal();
    return proj_cache_.emplace(key, std::move(w)).first->second;
}

std::array<VarId, 3> AnalyticEncoder::encode_image_node(Tape& tape, const std::vector<VarId>&,
                                                        VarId image) const {
    const auto& s = tape.val(image).shape;
    if (s.size() != 3 || s[0] != 2) throw DimensionError("encode_image: expected [2,H,W]");
    for (double v : tape.val(image).v)
        if (!std::isfinite(v)) throw ValidationError("encode_image: non-finite input");
    const int h = s[1], w = s[2];
    static constexpr int kScales[2] = {4, 8};
    for (int sc : kScales)
        if (h % sc || w % sc) throw DimensionError("encode_image: H,W must divide by 8");

    VarId mag = tape.complex_magnitude(image, cfg_.mag_eps);
    // per-patch mean and second moment at two scales
    VarId feats = -1;
    for (int sc : kScales) {
        VarId patches = tape.patchify(mag, sc);
        const int np = tape.val(patches).shape[0];
        Tensor avg({sc * sc, 1});
        std::fill(avg.v.begin(), avg.v.end(), 1.0 / (sc * sc));
        VarId pool = tape.constant(std::move(avg));
        VarId mean = tape.reshape(tape.matmul(patches, pool), {np});
        VarId mom = tape.reshape(tape.matmul(tape.mul(patches, patches), pool), {np});
        VarId pair = tape.concat(mean, mom);
        feats = feats < 0 ? pair : tape.concat(feats, pair);
    }
    const int flen = tape.val(feats).shape[0];
    std::array<VarId, 3> out{};
    for (int l = 0; l < 3; ++l) {
        const int dim = cfg_.level_dims[static_cast<size_t>(l)];
        VarId proj = tape.constant(Tensor({flen, dim}, projection(flen, dim, 100 + static_cast<uint64_t>(l))));
        out[static_cast<size_t>(l)] =
            tape.l2_normalize(tape.reshape(tape.matmul(tape.reshape(feats, {1, flen}), proj), {dim}));
    }
    return out;
}

VarId AnalyticEncoder::text_node(Tape& tape, const std::vector<VarId>&, const Instruction& ins) const {
    if (ins.token_ids.empty()) throw ValidationError("text_node: empty instruction");
    std::vector<double> acc(static_cast<size_t>(cfg_.text_dim), 0.0);
    for (int id : ins.token_ids) {
        Rng rng(mix_seed(seed_, 0x746f6bULL + static_cast<uint64_t>(id)));
        for (double& v : acc) v += rng.normal() / std::sqrt(static_cast<double>(cfg_.text_dim));
    }
    for (double& v : acc) v /= static_cast<double>(ins.token_ids.size());
    return tape.constant(Tensor({cfg_.text_dim}, std::move(acc)));
}

VarId AnalyticEncoder::fuse_node(Tape& tape, const std::vector<VarId>&, VarId high_level,
                                 VarId text_vec) const {
    if (tape.val(high_level).shape != std::vector<int>{cfg_.level_dims[2]} ||
        tape.val(text_vec).shape != std::vector<int>{cfg_.text_dim})
        throw DimensionError("fuse: embedding dimensions do not match the encoder");
    const int in = cfg_.level_dims[2] + cfg_.text_dim;
    VarId z = tape.concat(high_level, text_vec);
    VarId proj = tape.constant(Tensor({in, cfg_.lang_dim}, projection(in, cfg_.lang_dim, 200)));
    return tape.l2_normalize(tape.reshape(tape.matmul(tape.reshape(z, {1, in}), proj), {cfg_.lang_dim}));
}

void AnalyticEncoder::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    json j;
    j["kind"] = "analytic";
    j["seed"] = seed_;
    j["config"] = {{"patch", cfg_.patch},         {"trunk_dim", cfg_.trunk_dim},
                   {"heads", cfg_.heads},         {"blocks", cfg_.blocks},
                   {"level_dims", cfg_.level_dims}, {"text_dim", cfg_.text_dim},
                   {"lang_dim", cfg_.lang_dim},   {"vocab", cfg_.vocab},
                   {"mag_eps", cfg_.mag_eps}};
    std::ofstream f(dir / "encoder.json", std::ios::trunc);
    if (!f) throw IoError("cannot write encoder.json in " + dir.string());
    f << j.dump(2) << "\n";
}

std::unique_ptr<Encoder> load_encoder(const std::filesystem::path& dir) {
    json j = read_encoder_json(dir);
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "desk") return std::make_unique<DeskEncoder>(DeskEncoder::load_from(dir));
    if (kind == "analytic")
        return std::make_unique<AnalyticEncoder>(config_from_json(j.at("config")), j.at("seed").get<uint64_t>());
    throw FormatError("encoder.json: unknown kind " + kind);
}

// ---------------------------------------------------------------------------
// detached helpers

std::array<Embedding, 3> Encoder::encode_image(const ComplexImage& image) const {
    Tape tape;
    auto bound = bind(tape);
    auto ids = encode_image_node(tape, bound, tape.constant(nn::image_to_tensor(image)));
    std::array<Embedding, 3> out;
    for (int l = 0; l < 3; ++l)
        out[static_cast<size_t>(l)] = {static_cast<Level>(l), tape.val(ids[static_cast<size_t>(l)]).v};
    return out;
}

std::vector<double> Encoder::text_vector(const Instruction& instruction) const {
    Tape tape;
    auto bound = bind(tape);
    return tape.val(text_node(tape, bound, instruction)).v;
}

Embedding Encoder::fuse(const std::vector<double>& high_level, const std::vector<double>& text_vec) const {
    Tape tape;
    auto bound = bind(tape);
    VarId f = fuse_node(tape, bound, tape.constant(Tensor({static_cast<int>(high_level.size())}, high_level)),
                        tape.constant(Tensor({static_cast<int>(text_vec.size())}, text_vec)));
    return {Level::language, tape.val(f).v};
}

Embedding Encoder::encode_language(const ComplexImage& image, const Instruction& instruction) const {
    return fuse(encode_image(image)[2].v, text_vector(instruction));
}

// ---------------------------------------------------------------------------
// priors and quality response

PriorSet build_prior_image_only(const Encoder& encoder, const std::vector<ComplexImage>& pos_images,
                                const std::vector<ComplexImage>& neg_images) {
    if (pos_images.empty() || neg_images.empty())
        throw ValidationError("build_prior: image lists must be non-empty");
    PriorSet out;
    for (Level l : {Level::low, Level::mid, Level::high}) out.levels[l] = {};
    auto encode_into = [&](const std::vector<ComplexImage>& imgs, bool positive) {
        for (const auto& im : imgs) {
            auto embs = encoder.encode_image(im);
            for (const auto& e : embs) {
                auto& lp = out.levels[e.level];
                (positive ? lp.pos : lp.neg).push_back(e.v);
            }
        }
    };
    encode_into(pos_images, true);
    encode_into(neg_images, false);
    return out;
}

PriorSet build_prior_image_language(const Encoder& encoder, const std::vector<ComplexImage>& pos_images,
                                    const std::vector<ComplexImage>& neg_images, const Instruction& instruction,
                                    const PerturbationConfig& cfg) {
    if (pos_images.empty() || neg_images.empty())
        throw ValidationError("build_prior: image lists must be non-empty");
    const std::vector<double> text = encoder.text_vector(instruction);
    const loss::Members perturbed = perturb_text(text, cfg);  // shared across images and roles

    PriorSet out;
    out.levels[Level::language] = {};
    auto& lp = out.levels[Level::language];
    auto encode_into = [&](const std::vector<ComplexImage>& imgs, loss::Members& dst) {
        for (const auto& im : imgs) {
            const std::vector<double> high = encoder.encode_image(im)[2].v;
            for (const auto& t : perturbed) dst.push_back(encoder.fuse(high, t).v);
        }
    };
    encode_into(pos_images, lp.pos);
    encode_into(neg_images, lp.neg);
    return out;
}

QualityResponse classify_quality(std::span<const double> e, const LevelPriors& priors) {
    if (priors.pos.empty() || priors.neg.empty())
        throw ValidationError("classify_quality: prior sets must be non-empty");
    auto centroid = [](const loss::Members& m) {
        std::vector<double> c(m[0].size(), 0.0);
        for (const auto& v : m)
            for (size_t i = 0; i < c.size(); ++i) c[i] += v[i];
        for (double& x : c) x /= static_cast<double>(m.size());
        return c;
    };
    const auto cp = centroid(priors.pos);
    const auto cn = centroid(priors.neg);
    QualityResponse r;
    r.margin = loss::cosine_sim(e, cp) - loss::cosine_sim(e, cn);
    if (r.margin > 0.0)
        r.label = QualityLabel::positive;
    else if (r.margin < 0.0)
        r.label = QualityLabel::negative;
    else
        r.label = QualityLabel::undetermined;
    return r;
}

// ---------------------------------------------------------------------------
// pretraining

PretrainReport pretrain_encoder(DeskEncoder& encoder, const std::vector<ComplexImage>& clean,
                                const std::vector<ComplexImage>& degraded, const PretrainConfig& cfg) {
    if (clean.size() < 2 || degraded.size() < 2)
        throw ValidationError("pretrain: need at least 2 images per class");
    if (cfg.steps < 0) throw ValidationError("pretrain: steps must be >= 0");

    encoder.set_frozen(false);
    nn::ParamStore& store = encoder.params();
    nn::Adam adam(store.total_size(), cfg.lr);
    const auto mask = store.trainable_mask();
    Rng rng(mix_seed(cfg.seed, 0x70726574ULL));

    std::optional<Instruction> instr;
    if (!cfg.instruction_text.empty())
        instr = make_instruction(cfg.instruction_text, encoder.config().vocab);

    PretrainReport report;
    report.loss_curve.reserve(static_cast<size_t>(cfg.steps));

    auto pick = [&rng](size_t n, int want) {
        std::vector<size_t> idx(n);
        for (size_t i = 0; i < n; ++i) idx[i] = i;
        const size_t take = std::min<size_t>(static_cast<size_t>(want), n);
        for (size_t i = 0; i < take; ++i) {
            size_t j = i + rng.uniform_int(n - i);
            std::swap(idx[i], idx[j]);
        }
        idx.resize(take);
        return idx;
    };

    for (int step = 0; step < cfg.steps; ++step) {
        Tape tape;
        auto bound = store.bind(tape);

        auto encode_batch = [&](const std::vector<ComplexImage>& imgs, const std::vector<size_t>& idx) {
            std::vector<std::array<VarId, 3>> embs;
            for (size_t i : idx)
                embs.push_back(
                    encoder.encode_image_node(tape, bound, tape.constant(nn::image_to_tensor(imgs[i]))));
            return embs;
        };
        const auto ci = pick(clean.size(), cfg.batch);
        const auto di = pick(degraded.size(), cfg.batch);
        const auto ce = encode_batch(clean, ci);
        const auto de = encode_batch(degraded, di);

        std::vector<VarId> terms;
        auto add_class_terms = [&](const std::vector<std::array<VarId, 3>>& q,
                                   const std::vector<std::array<VarId, 3>>& other, int level, double weight) {
            for (size_t i = 0; i < q.size(); ++i) {
                std::vector<VarId> pos, neg;
                for (size_t j = 0; j < q.size(); ++j)
                    if (j != i) pos.push_back(q[j][static_cast<size_t>(level)]);
                for (const auto& o : other) neg.push_back(o[static_cast<size_t>(level)]);
                if (pos.empty()) continue;
                terms.push_back(tape.scale(
                    loss::multi_positive_node(tape, q[i][static_cast<size_t>(level)], pos, neg, cfg.tau),
                    weight));
            }
        };
        for (int level = 0; level < 3; ++level) {
            const double w = cfg.level_weights[static_cast<size_t>(level)];
            if (w == 0.0) continue;
            add_class_terms(ce, de, level, w);
            add_class_terms(de, ce, level, w);
        }
        if (instr && cfg.language_weight > 0.0) {
            VarId text = encoder.text_node(tape, bound, *instr);
            auto fuse_all = [&](const std::vector<std::array<VarId, 3>>& embs) {
                std::vector<VarId> out;
                for (const auto& e : embs) out.push_back(encoder.fuse_node(tape, bound, e[2], text));
                return out;
            };
            const auto cf = fuse_all(ce);
            const auto df = fuse_all(de);
            auto add_lang = [&](const std::vector<VarId>& q, const std::vector<VarId>& other) {
                for (size_t i = 0; i < q.size(); ++i) {
                    std::vector<VarId> pos;
                    for (size_t j = 0; j < q.size(); ++j)
                        if (j != i) pos.push_back(q[j]);
                    if (pos.empty()) continue;
                    terms.push_back(
                        tape.scale(loss::multi_positive_node(tape, q[i], pos, other, cfg.tau),
                                   cfg.language_weight));
                }
            };
            add_lang(cf, df);
            add_lang(df, cf);
        }
        if (terms.empty()) throw ValidationError("pretrain: no loss terms (batch too small)");

        VarId total = terms[0];
        for (size_t i = 1; i < terms.size(); ++i) total = tape.add(total, terms[i]);
        total = tape.scale(total, 1.0 / static_cast<double>(terms.size()));

        const double loss_value = tape.val(total).v[0];
        if (!std::isfinite(loss_value))
            throw DivergenceError("pretrain: non-finite loss at step " + std::to_string(step));
        report.loss_curve.push_back(loss_value);

        tape.backward(total);
        store.zero_grads();
        store.collect_grads(tape, bound);
        adam.step(store.values(), store.grads(), mask);
    }

    encoder.set_frozen(true);
    return report;
}

}  // namespace semrecon::enc
