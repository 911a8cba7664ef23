#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "semrecon/contrastive.hpp"
#include "semrecon/nn.hpp"
#include "semrecon/tape.hpp"

namespace semrecon::enc {

enum class Level { low = 0, mid = 1, high = 2, language = 3 };
const char* to_string(Level l);
Level level_from_string(const std::string& s);

struct Embedding {
    Level level;
    std::vector<double> v;  // unit L2 norm
};

enum class Role { positive, negative };

struct EmbeddingSet {
    Level level;
    Role role;
    loss::Members members;
};

struct Instruction {
    std::string text;
    std::vector<int> token_ids;
};

// lowercase, split on non-alphanumeric, hash into a fixed vocabulary
std::vector<int> tokenize(const std::string& text, int vocab = 4096);
Instruction make_instruction(const std::string& text, int vocab = 4096);

struct PerturbationConfig {
    int K = 100;
    double sigma = 0.03;
    uint64_t seed = 0;
};

// {v + eps_k}, eps_k ~ N(0, sigma^2) per component, deterministic per seed
loss::Members perturb_text(const std::vector<double>& v, const PerturbationConfig& cfg);

struct EncoderConfig {
    int patch = 8;
    int trunk_dim = 64;
    int heads = 4;
    int blocks = 3;
    std::array<int, 3> level_dims = {64, 128, 256};
    int text_dim = 128;
    int lang_dim = 128;
    int vocab = 4096;
    double mag_eps = 1e-6;  // smoothing of |.| at zero pixels
};

// Frozen feature extractor with hierarchical image taps, a text path, and an
// image-text fusion head. All node methods are differentiable with respect to
// the image input; encoder weights receive gradients only while training.
class Encoder {
  public:
    virtual ~Encoder() = default;
    virtual const EncoderConfig& config() const = 0;

    virtual std::vector<ad::VarId> bind(ad::Tape& tape) const = 0;
    virtual std::array<ad::VarId, 3> encode_image_node(ad::Tape& tape, const std::vector<ad::VarId>& bound,
                                                       ad::VarId image_2hw) const = 0;
    virtual ad::VarId text_node(ad::Tape& tape, const std::vector<ad::VarId>& bound,
                                const Instruction& instruction) const = 0;
    virtual ad::VarId fuse_node(ad::Tape& tape, const std::vector<ad::VarId>& bound, ad::VarId high_level,
                                ad::VarId text_vec) const = 0;
    virtual uint64_t weights_hash() const = 0;

    // detached conveniences
    std::array<Embedding, 3> encode_image(const ComplexImage& image) const;
    std::vector<double> text_vector(const Instruction& instruction) const;  // pre-fusion, unnormalized
    Embedding fuse(const std::vector<double>& high_level, const std::vector<double>& text_vec) const;
    Embedding encode_language(const ComplexImage& image, const Instruction& instruction) const;
};

// Patch embedding + small pre-norm transformer trunk with taps after the
// first, middle and last blocks; mean-pooled and projected per level.
class DeskEncoder final : public Encoder {
  public:
    DeskEncoder(EncoderConfig cfg, uint64_t seed);

    const EncoderConfig& config() const override { return cfg_; }
    std::vector<ad::VarId> bind(ad::Tape& tape) const override { return params_.bind(tape); }
    std::array<ad::VarId, 3> encode_image_node(ad::Tape& tape, const std::vector<ad::VarId>& bound,
                                               ad::VarId image_2hw) const override;
    ad::VarId text_node(ad::Tape& tape, const std::vector<ad::VarId>& bound,
                        const Instruction& instruction) const override;
    ad::VarId fuse_node(ad::Tape& tape, const std::vector<ad::VarId>& bound, ad::VarId high_level,
                        ad::VarId text_vec) const override;
    uint64_t weights_hash() const override { return params_.content_hash(); }

    nn::ParamStore& params() { return params_; }
    void set_frozen(bool frozen);
    bool frozen() const { return frozen_; }

    void save(const std::filesystem::path& dir) const;
    static DeskEncoder load_from(const std::filesystem::path& dir);

  private:
    EncoderConfig cfg_;
    nn::ParamStore params_;
    bool frozen_ = true;
};

// Training-free stand-in: multi-scale patch statistics through fixed seeded
// random projections. Deterministic, differentiable w.r.t. the image, fast;
// meant for unit tests.
class AnalyticEncoder final : public Encoder {
  public:
    AnalyticEncoder(EncoderConfig cfg, uint64_t seed);

    const EncoderConfig& config() const override { return cfg_; }
    std::vector<ad::VarId> bind(ad::Tape&) const override { return {}; }
    std::array<ad::VarId, 3> encode_image_node(ad::Tape& tape, const std::vector<ad::VarId>& bound,
                                               ad::VarId image_2hw) const override;
    ad::VarId text_node(ad::Tape& tape, const std::vector<ad::VarId>& bound,
                        const Instruction& instruction) const override;
    ad::VarId fuse_node(ad::Tape& tape, const std::vector<ad::VarId>& bound, ad::VarId high_level,
                        ad::VarId text_vec) const override;
    uint64_t weights_hash() const override { return seed_; }

    void save(const std::filesystem::path& dir) const;

  private:
    std::vector<double> projection(int rows, int cols, uint64_t stream) const;

    EncoderConfig cfg_;
    uint64_t seed_;
    mutable std::mutex cache_mu_;  // encoders are shared read-only across recon threads
    mutable std::map<std::tuple<int, int, uint64_t>, std::vector<double>> proj_cache_;
};

// checkpoint loader dispatching on the encoder kind recorded in the directory
std::unique_ptr<Encoder> load_encoder(const std::filesystem::path& dir);

struct LevelPriors {
    loss::Members pos, neg;
};

struct PriorSet {
    std::map<Level, LevelPriors> levels;
    bool has(Level l) const { return levels.count(l) != 0; }
};

// P from positives, N from negatives at all three image levels; detached.
PriorSet build_prior_image_only(const Encoder& encoder, const std::vector<ComplexImage>& pos_images,
                                const std::vector<ComplexImage>& neg_images);

// Language-level priors with |P| = M_pos*K and |N| = M_neg*K: each image is
// fused with every perturbed copy of the instruction embedding.
PriorSet build_prior_image_language(const Encoder& encoder, const std::vector<ComplexImage>& pos_images,
                                    const std::vector<ComplexImage>& neg_images, const Instruction& instruction,
                                    const PerturbationConfig& cfg);

enum class QualityLabel { positive, negative, undetermined };
const char* to_string(QualityLabel l);

struct QualityResponse {
    QualityLabel label = QualityLabel::undetermined;
    double margin = 0.0;  // cos(e, positive centroid) - cos(e, negative centroid)
};

// nearest-centroid response by cosine similarity
QualityResponse classify_quality(std::span<const double> e, const LevelPriors& priors);

struct PretrainConfig {
    int steps = 400;
    double lr = 1e-3;
    int batch = 4;  // per class
    uint64_t seed = 1;
    double tau = 0.07;
    std::array<double, 3> level_weights = {0.005, 0.5, 1.0};
    double language_weight = 1.0;
    std::string instruction_text;  // language-level term; empty disables it
};

struct PretrainReport {
    std::vector<double> loss_curve;  // one entry per step
};

// Multi-positive contrastive pretraining that pulls clean-image embeddings
// together and pushes degraded ones apart at every level, then freezes the
// encoder.
PretrainReport pretrain_encoder(DeskEncoder& encoder, const std::vector<ComplexImage>& clean,
                                const std::vector<ComplexImage>& degraded, const PretrainConfig& cfg);

}  // namespace semrecon::enc
