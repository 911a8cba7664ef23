#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "semrecon/mri.hpp"
#include "semrecon/tape.hpp"

namespace semrecon::nn {

// Flat parameter vector with named, shaped segments and a same-shape gradient
// buffer. Only trainable segments receive gradients and optimizer updates.
class ParamStore {
  public:
    struct Segment {
        std::string name;
        std::vector<int> shape;
        size_t offset = 0;
        size_t size = 0;
        bool trainable = true;
    };

    int add(const std::string& name, std::vector<int> shape, bool trainable = true);
    int index_of(const std::string& name) const;  // -1 when absent
    const Segment& segment(int i) const { return segments_[static_cast<size_t>(i)]; }
    int n_segments() const { return static_cast<int>(segments_.size()); }
    size_t total_size() const { return values_.size(); }
    size_t trainable_size() const;

    std::span<double> values(int i);
    std::span<const double> values(int i) const;
    std::span<double> grads(int i);
    std::vector<double>& values() { return values_; }
    const std::vector<double>& values() const { return values_; }
    std::vector<double>& grads() { return grads_; }
    void zero_grads();
    void set_trainable(int i, bool t) { segments_[static_cast<size_t>(i)].trainable = t; }
    std::vector<uint8_t> trainable_mask() const;

    uint64_t content_hash() const;

    // raw-array checkpoint: layout.json + one array file per segment
    void save(const std::filesystem::path& dir) const;
    static ParamStore load(const std::filesystem::path& dir);

    // tape bridge: trainable segments become grad-requiring leaves,
    // frozen ones become constants
    std::vector<ad::VarId> bind(ad::Tape& tape) const;
    void collect_grads(const ad::Tape& tape, const std::vector<ad::VarId>& bound);

  private:
    std::vector<double> values_, grads_;
    std::vector<Segment> segments_;
    std::unordered_map<std::string, int> by_name_;
};

struct UnetSpec {
    int levels = 3;
    std::vector<int> channels = {8, 16, 32};  // one entry per level
};

struct UnrolledSpec {
    int n_stages = 4;
    double cg_tol = 1e-6;
    int cg_iters = 20;
    bool shared_weights = false;
    double mu = 1.0;  // data-consistency weight inside each stage
    UnetSpec block{2, {8, 16}};
};

struct InrSpec {
    int n_layers = 8;
    int hidden_units = 256;
    double omega0 = 30.0;  // first-layer frequency scale
};

enum class BackboneKind { end_to_end_unet, unrolled, inr, pixel };

BackboneKind backbone_kind_from_string(const std::string& s);
std::string to_string(BackboneKind k);

struct BackboneSpec {
    BackboneKind kind = BackboneKind::inr;
    UnetSpec unet;
    UnrolledSpec unrolled;
    InrSpec inr;
    void validate() const;
};

struct LoraConfig {
    int rank = 4;
    double alpha = 4.0;
    std::vector<std::string> targets;  // weight segment names; empty = all matrix-like weights
};

// Differentiable reconstruction network f_theta. Input is a [2,H,W] image
// tensor for unet/unrolled/pixel and an [N,2] coordinate grid for inr.
class Backbone {
  public:
    Backbone(BackboneSpec spec, uint64_t seed);
    // pixel backbone: parameters are the image itself, seeded from init
    static Backbone pixel(const ComplexImage& init);

    const BackboneSpec& spec() const { return spec_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    bool has_lora() const { return lora_.has_value(); }

    // Builds the forward graph on the given tape. `acq` is required for the
    // unrolled backbone (its per-stage CG data-consistency step) and ignored
    // otherwise. Returns the [2,H,W] output node.
    ad::VarId forward(ad::Tape& tape, const std::vector<ad::VarId>& bound, ad::VarId input,
                      const mri::AcquisitionData* acq = nullptr) const;

    // Adds zero-initialized low-rank factors for the targeted weight segments
    // and freezes everything else. The augmented network equals the base
    // network until the factors are trained.
    void apply_lora(const LoraConfig& cfg, uint64_t seed);

  private:
    Backbone() = default;  // used by the pixel factory

    BackboneSpec spec_;
    ParamStore params_;
    struct LoraEntry {
        int base, a, b;
        double scale;
    };
    std::optional<std::vector<LoraEntry>> lora_;

    ad::VarId effective_weight(ad::Tape& tape, const std::vector<ad::VarId>& bound, int seg) const;
    ad::VarId unet_forward(ad::Tape& tape, const std::vector<ad::VarId>& bound, ad::VarId x,
                           const UnetSpec& spec, const std::string& prefix) const;
};

// CG data-consistency step as a differentiable node:
//   y = argmin_x ||A x - s||^2 + mu ||x - z||^2, solved by CG on the normal
//   equations; the backward pass solves the same SPD system.
ad::VarId cg_dc_node(ad::Tape& tape, ad::VarId z, const mri::AcquisitionData& acq, double mu, double tol,
                     int max_iter);

// [H*W, 2] coordinates in [-1,1]^2, row-major over pixels
ad::Tensor coordinate_grid(int height, int width);
ad::Tensor image_to_tensor(const ComplexImage& im);
ComplexImage tensor_to_image(const ad::Tensor& t);
// [N,2] per-pixel inr output -> [2,H,W] image tensor
ad::VarId inr_output_to_image_node(ad::Tape& tape, ad::VarId out, int height, int width);

// Central finite differences on n_probes random trainable coordinates.
// eval(true) must run forward+backward and leave gradients in params.grads;
// eval(false) must just return the loss at the current parameter values.
double gradcheck(const std::function<double(bool with_grad)>& eval, ParamStore& params, int n_probes,
                 double h, uint64_t seed);

class Adam {
  public:
    Adam(size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    void step(std::vector<double>& values, const std::vector<double>& grads,
              const std::vector<uint8_t>& trainable);
    double lr;

  private:
    std::vector<double> m_, v_;
    double beta1_, beta2_, eps_;
    long t_ = 0;
};

}  // namespace semrecon::nn
