#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "semrecon/encoder.hpp"
#include "semrecon/mri.hpp"
#include "semrecon/nn.hpp"

namespace semrecon::recon {

enum class Regularizer { none, tv, semantic_image, semantic_language };
Regularizer regularizer_from_string(const std::string& s);
std::string to_string(Regularizer r);

struct OptimizerConfig {
    double lr = 1e-3;
    int iterations = 1000;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct WarmStartConfig {
    int steps = 200;
    bool use_semantic = false;  // default: data consistency only on auxiliary scans
};

struct ReconConfig {
    nn::BackboneSpec backbone;
    Regularizer reg = Regularizer::none;
    double lambda = 0.1;  // applied after both terms are normalized by their iteration-0 magnitudes
    OptimizerConfig opt;
    std::optional<WarmStartConfig> warm_start;
    std::optional<nn::LoraConfig> lora;
    double tau = 0.07;
    std::array<double, 3> level_weights = {0.005, 0.5, 1.0};
    double tv_eps = 1e-3;
    uint64_t seed = 0;
    int log_every = 25;
};

struct TrajectoryRecord {
    int iteration = 0;
    double dc_loss = 0.0;
    double reg_loss = 0.0;
    std::map<enc::Level, std::vector<double>> embeddings;  // unit-norm, detached
    std::optional<enc::QualityResponse> quality;           // language mode
    std::optional<double> psnr;                            // when a reference is available
};

struct TrajectoryLog {
    std::vector<TrajectoryRecord> records;
};

struct ReconContext {
    const enc::Encoder* encoder = nullptr;
    const enc::PriorSet* priors = nullptr;
    const enc::Instruction* instruction = nullptr;        // language mode
    const ComplexImage* reference = nullptr;              // psnr snapshots in the log
    const std::vector<mri::AcquisitionData>* warm_aux = nullptr;  // warm-start scans
};

struct ReconResult {
    ComplexImage image;
    TrajectoryLog log;
    double final_dc = 0.0;
    double final_reg = 0.0;
};

// (1/2) sum_j ||S_j - A(x)_j||^2 and its gradient w.r.t. the image
double dc_loss(const ComplexImage& x, const mri::AcquisitionData& acq, ComplexImage* grad = nullptr);

// smoothed isotropic TV (forward differences, replicate boundary), summed
// over the real and imaginary planes
double tv_loss(const ComplexImage& x, double eps, ComplexImage* grad = nullptr);

ad::VarId dc_loss_node(ad::Tape& tape, ad::VarId x, const mri::AcquisitionData& acq);
ad::VarId tv_loss_node(ad::Tape& tape, ad::VarId x, double eps);

// Minimizes dc/dc0 + lambda * reg/reg0 over the backbone parameters with
// Adam; deterministic given (acq, cfg, encoder checkpoint).
ReconResult reconstruct(const mri::AcquisitionData& acq, const ReconConfig& cfg, const ReconContext& ctx = {});

struct ProjectedPoint {
    std::string kind;   // "pos" | "neg" | "traj"
    int index = 0;      // member index within its set, or record index
    int iteration = 0;  // trajectory points only
    double x = 0.0, y = 0.0;
};

// PCA fitted on the union of prior members at one level (deterministic sign
// convention), applied to prior members and logged trajectory embeddings.
std::vector<ProjectedPoint> project_trajectory(const TrajectoryLog& log, const enc::LevelPriors& priors,
                                               enc::Level level);

void write_trajectory_jsonl(const std::filesystem::path& path, const TrajectoryLog& log);
TrajectoryLog read_trajectory_jsonl(const std::filesystem::path& path);

void write_priors_json(const std::filesystem::path& path, const enc::PriorSet& priors);
enc::PriorSet read_priors_json(const std::filesystem::path& path);

}  // namespace semrecon::recon
