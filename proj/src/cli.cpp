#include "semrecon/cli.hpp"

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "semrecon/dataset.hpp"
#include "semrecon/metrics.hpp"
#include "semrecon/phantom.hpp"
#include "semrecon/recon.hpp"

namespace semrecon::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// shared helpers

int thread_budget() {
    if (const char* env = std::getenv("SEMRECON_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return hc ? static_cast<int>(hc) : 1;
}

template <typename F>
void parallel_for(int n, F&& body) {
    const int workers = std::min(thread_budget(), n);
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr first_error;
    std::mutex err_mu;
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t)
        pool.emplace_back([&]() {
            for (;;) {
                const int i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    body(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mu);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        });
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

void ensure_output_dir(const fs::path& dir, bool force) {
    if (fs::exists(dir) && !fs::is_directory(dir)) throw IoError(dir.string() + " exists and is not a directory");
    if (fs::exists(dir) && !fs::is_empty(dir) && !force)
        throw ValidationError(dir.string() + " is not empty (use --force to overwrite)");
    fs::create_directories(dir);
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::vector<std::string> read_lines(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (!line.empty()) lines.push_back(line);
    }
    return lines;
}

data::RealArray mask_to_grid(const mri::SamplingMask& m) {
    data::RealArray a;
    a.dims = {static_cast<uint32_t>(m.height), static_cast<uint32_t>(m.width)};
    a.v.resize(static_cast<size_t>(m.height) * m.width);
    for (int r = 0; r < m.height; ++r)
        std::fill_n(a.v.begin() + static_cast<long>(r) * m.width, m.width, m.sampled(r) ? 1.0 : 0.0);
    return a;
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataArgs {
    std::string out;
    int n = 5;
    int size = 64;
    int coils = 4;
    double R = 4.0;
    int acs = 0;  // 0 = size/8
    double noise_sigma = 0.01;
    uint64_t seed = 1;
    std::string kind = "shepp_logan";  // or random_ellipses / layered_rings / mixed
    std::vector<double> lesion;        // row,col,radius,delta
    bool force = false;
};

int cmd_gen_data(const GenDataArgs& a) {
    if (a.n < 1) throw ValidationError("gen-data: --n must be >= 1");
    const int acs = a.acs > 0 ? a.acs : a.size / 8;
    if (!a.lesion.empty() && a.lesion.size() != 4)
        throw ValidationError("gen-data: --lesion expects row,col,radius,delta");
    ensure_output_dir(a.out, a.force);

    static const data::PhantomKind cycle[3] = {data::PhantomKind::shepp_logan,
                                               data::PhantomKind::random_ellipses,
                                               data::PhantomKind::layered_rings};
    data::DatasetManifest manifest;
    const mri::CoilSensitivities coils = data::simulate_coils(a.coils, a.size, a.size);

    for (int i = 0; i < a.n; ++i) {
        data::PhantomSpec spec;
        spec.kind = a.kind == "mixed" ? cycle[i % 3] : data::phantom_kind_from_string(a.kind);
        spec.size = a.size;
        spec.seed = mix_seed(a.seed, static_cast<uint64_t>(i));
        if (!a.lesion.empty())
            spec.lesion = data::Lesion{a.lesion[0], a.lesion[1], a.lesion[2], a.lesion[3]};
        const ComplexImage image = data::make_phantom(spec);
        const mri::SamplingMask mask =
            mri::generate_mask(a.size, a.size, a.R, acs, mix_seed(spec.seed, 0x6d736bULL));
        const mri::AcquisitionData acq =
            mri::simulate_acquisition(image, coils, mask, a.noise_sigma, mix_seed(spec.seed, 0x6e7aULL));

        char id[32];
        std::snprintf(id, sizeof(id), "entry_%03d", i);
        data::ManifestEntry e;
        e.id = id;
        e.image = std::string(id) + "_image.arr";
        e.kspace = std::string(id) + "_kspace.arr";
        e.mask = std::string(id) + "_mask.arr";
        e.coils = std::string(id) + "_coils.arr";
        e.meta = {a.R, acs, a.noise_sigma, spec.seed};
        data::write_array(fs::path(a.out) / e.image, data::to_array(image));
        data::write_array(fs::path(a.out) / e.kspace, data::to_array(acq.kspace));
        data::write_array(fs::path(a.out) / e.mask, mask_to_grid(mask));
        data::write_array(fs::path(a.out) / e.coils, data::to_array(coils.maps));
        data::write_magnitude_png(fs::path(a.out) / (std::string(id) + "_image.png"), image);
        manifest.entries.push_back(std::move(e));

        std::printf("%s kind=%s size=%d coils=%d R=%g acs=%d rows=%d/%d sigma=%g\n", id,
                    data::to_string(spec.kind).c_str(), a.size, a.coils, a.R, acs, mask.sampled_rows(),
                    a.size, a.noise_sigma);
    }
    data::write_manifest(a.out, manifest);
    return 0;
}

// ---------------------------------------------------------------------------
// pretrain

struct PretrainArgs {
    std::string data, out;
    int steps = 400;
    double lr = 1e-3;
    int batch = 4;
    uint64_t seed = 1;
    std::string instruction_file;
    int instruction_line = 0;
    bool force = false;
};

int cmd_pretrain(const PretrainArgs& a) {
    ensure_output_dir(a.out, a.force);
    const data::DatasetManifest manifest = data::read_manifest(a.data);
    if (manifest.entries.empty()) throw ValidationError("pretrain: dataset is empty");

    std::vector<ComplexImage> clean, degraded;
    for (const auto& e : manifest.entries) {
        data::LoadedEntry le = data::load_entry(a.data, e);
        clean.push_back(le.image);
        degraded.push_back(mri::zero_filled(le.acq));
    }

    enc::DeskEncoder encoder(enc::EncoderConfig{}, a.seed);
    enc::PretrainConfig cfg;
    cfg.steps = a.steps;
    cfg.lr = a.lr;
    cfg.batch = a.batch;
    cfg.seed = a.seed;
    if (!a.instruction_file.empty()) {
        const auto lines = read_lines(a.instruction_file);
        if (a.instruction_line < 0 || a.instruction_line >= static_cast<int>(lines.size()))
            throw ValidationError("pretrain: instruction line out of range");
        cfg.instruction_text = lines[static_cast<size_t>(a.instruction_line)];
    }
    const enc::PretrainReport report = enc::pretrain_encoder(encoder, clean, degraded, cfg);
    encoder.save(a.out);

    std::ofstream csv(fs::path(a.out) / "pretrain_loss.csv", std::ios::trunc);
    csv << "step,loss\n";
    for (size_t i = 0; i < report.loss_curve.size(); ++i)
        csv << i << "," << fmt(report.loss_curve[i]) << "\n";
    if (!report.loss_curve.empty())
        std::printf("pretrain: %d steps, loss %.6f -> %.6f\n", a.steps, report.loss_curve.front(),
                    report.loss_curve.back());
    else
        std::printf("pretrain: 0 steps, checkpoint equals initialization\n");
    return 0;
}

// ---------------------------------------------------------------------------
// recon (and the config-file machinery it shares with prompt-robustness)

struct ReconArgs {
    std::string data, out, encoder_dir;
    std::string method = "inr";  // zero_filled | tv_cs | end_to_end | unrolled | inr
    std::string reg = "none";
    double lambda = 0.1;
    int iterations = -1;  // -1 = per-method default
    double lr = -1.0;     // -1 = per-backbone default
    uint64_t seed = 1;
    int log_every = 25;
    double tau = 0.07;
    double tv_eps = 1e-3;
    int warm_steps = 0;
    int lora_rank = 0;
    double lora_alpha = 4.0;
    // backbone shape
    int inr_layers = 5;
    int inr_hidden = 64;
    double inr_omega0 = 30.0;
    int unet_levels = 3;
    std::vector<int> unet_channels = {8, 16, 32};
    int unrolled_stages = 4;
    double unrolled_mu = 1.0;
    // priors
    std::string prior_data;  // defaults to data
    std::string prior_pos = "image";
    std::string prior_neg = "zero_filled";
    int prior_count = 3;
    std::string instruction_file;
    int instruction_line = 0;
    int perturb_k = 100;
    double perturb_sigma = 0.03;
    std::string entries;  // comma-separated ids; empty = all
    std::string run_id;
    bool force = false;
};

json recon_args_to_json(const ReconArgs& a) {
    return json{{"dataset", a.data},
                {"out", a.out},
                {"encoder", a.encoder_dir},
                {"recon",
                 {{"method", a.method},
                  {"reg", a.reg},
                  {"lambda", a.lambda},
                  {"iterations", a.iterations},
                  {"lr", a.lr},
                  {"seed", a.seed},
                  {"log_every", a.log_every},
                  {"tau", a.tau},
                  {"tv_eps", a.tv_eps},
                  {"warm_steps", a.warm_steps},
                  {"lora_rank", a.lora_rank},
                  {"lora_alpha", a.lora_alpha},
                  {"inr", {{"layers", a.inr_layers}, {"hidden", a.inr_hidden}, {"omega0", a.inr_omega0}}},
                  {"unet", {{"levels", a.unet_levels}, {"channels", a.unet_channels}}},
                  {"unrolled", {{"stages", a.unrolled_stages}, {"mu", a.unrolled_mu}}}}},
                {"prior",
                 {{"data", a.prior_data},
                  {"pos", a.prior_pos},
                  {"neg", a.prior_neg},
                  {"count", a.prior_count},
                  {"instruction_file", a.instruction_file},
                  {"instruction_line", a.instruction_line},
                  {"K", a.perturb_k},
                  {"sigma", a.perturb_sigma}}},
                {"entries", a.entries},
                {"run_id", a.run_id}};
}

void recon_args_from_json(const json& j, ReconArgs& a) {
    auto get = [](const json& obj, const char* key, auto& dst) {
        if (obj.contains(key)) dst = obj.at(key).get<std::decay_t<decltype(dst)>>();
    };
    get(j, "dataset", a.data);
    get(j, "out", a.out);
    get(j, "encoder", a.encoder_dir);
    if (j.contains("recon")) {
        const json& r = j.at("recon");
        get(r, "method", a.method);
        get(r, "reg", a.reg);
        get(r, "lambda", a.lambda);
        get(r, "iterations", a.iterations);
        get(r, "lr", a.lr);
        get(r, "seed", a.seed);
        get(r, "log_every", a.log_every);
        get(r, "tau", a.tau);
        get(r, "tv_eps", a.tv_eps);
        get(r, "warm_steps", a.warm_steps);
        get(r, "lora_rank", a.lora_rank);
        get(r, "lora_alpha", a.lora_alpha);
        if (r.contains("inr")) {
            get(r.at("inr"), "layers", a.inr_layers);
            get(r.at("inr"), "hidden", a.inr_hidden);
            get(r.at("inr"), "omega0", a.inr_omega0);
        }
        if (r.contains("unet")) {
            get(r.at("unet"), "levels", a.unet_levels);
            get(r.at("unet"), "channels", a.unet_channels);
        }
        if (r.contains("unrolled")) {
            get(r.at("unrolled"), "stages", a.unrolled_stages);
            get(r.at("unrolled"), "mu", a.unrolled_mu);
        }
    }
    if (j.contains("prior")) {
        const json& p = j.at("prior");
        get(p, "data", a.prior_data);
        get(p, "pos", a.prior_pos);
        get(p, "neg", a.prior_neg);
        get(p, "count", a.prior_count);
        get(p, "instruction_file", a.instruction_file);
        get(p, "instruction_line", a.instruction_line);
        get(p, "K", a.perturb_k);
        get(p, "sigma", a.perturb_sigma);
    }
    get(j, "entries", a.entries);
    get(j, "run_id", a.run_id);
}

nn::BackboneSpec backbone_from_args(const ReconArgs& a) {
    nn::BackboneSpec spec;
    if (a.method == "tv_cs") {
        spec.kind = nn::BackboneKind::pixel;
        return spec;
    }
    spec.kind = nn::backbone_kind_from_string(a.method);
    spec.unet.levels = a.unet_levels;
    spec.unet.channels = a.unet_channels;
    spec.unrolled.n_stages = a.unrolled_stages;
    spec.unrolled.mu = a.unrolled_mu;
    spec.inr.n_layers = a.inr_layers;
    spec.inr.hidden_units = a.inr_hidden;
    spec.inr.omega0 = a.inr_omega0;
    return spec;
}

int default_iterations(const std::string& method) {
    if (method == "tv_cs") return 400;
    if (method == "end_to_end") return 400;
    if (method == "unrolled") return 250;
    return 1500;  // inr
}

double default_lr(const std::string& method) {
    if (method == "tv_cs") return 1e-2;
    if (method == "inr") return 1e-3;
    return 1e-4;  // unet-based
}

recon::ReconConfig recon_config_from_args(const ReconArgs& a, uint64_t entry_seed) {
    recon::ReconConfig cfg;
    cfg.backbone = backbone_from_args(a);
    cfg.reg = a.method == "tv_cs" ? recon::Regularizer::tv : recon::regularizer_from_string(a.reg);
    cfg.lambda = a.lambda;
    cfg.opt.iterations = a.iterations > 0 ? a.iterations : default_iterations(a.method);
    cfg.opt.lr = a.lr > 0 ? a.lr : default_lr(a.method);
    cfg.seed = entry_seed;
    cfg.log_every = a.log_every;
    cfg.tau = a.tau;
    cfg.tv_eps = a.tv_eps;
    if (a.warm_steps > 0) cfg.warm_start = recon::WarmStartConfig{a.warm_steps, false};
    if (a.lora_rank > 0) cfg.lora = nn::LoraConfig{a.lora_rank, a.lora_alpha, {}};
    return cfg;
}

// reconstructions used as prior sources
ComplexImage tv_cs_for_prior(const data::LoadedEntry& le, uint64_t seed) {
    recon::ReconConfig cfg;
    cfg.backbone.kind = nn::BackboneKind::pixel;
    cfg.reg = recon::Regularizer::tv;
    cfg.lambda = 0.1;
    cfg.opt.iterations = 400;
    cfg.opt.lr = 1e-2;
    cfg.seed = seed;
    cfg.log_every = 1000000;  // endpoints only
    return recon::reconstruct(le.acq, cfg).image;
}

std::vector<ComplexImage> prior_source_images(const std::string& source, const fs::path& dir,
                                              const data::DatasetManifest& manifest, int count,
                                              uint64_t seed) {
    if (count < 1) throw ValidationError("priors: count must be >= 1");
    if (static_cast<int>(manifest.entries.size()) < count)
        throw ValidationError("priors: dataset has fewer entries than requested");
    std::vector<ComplexImage> out;
    for (int i = 0; i < count; ++i) {
        data::LoadedEntry le = data::load_entry(dir, manifest.entries[static_cast<size_t>(i)]);
        if (source == "image")
            out.push_back(std::move(le.image));
        else if (source == "zero_filled")
            out.push_back(mri::zero_filled(le.acq));
        else if (source == "tv_cs")
            out.push_back(tv_cs_for_prior(le, mix_seed(seed, 0x74766373ULL + static_cast<uint64_t>(i))));
        else
            throw ValidationError("priors: unknown source " + source);
    }
    return out;
}

struct EntryResult {
    std::string id;
    ComplexImage image;
    recon::TrajectoryLog log;
    bool has_log = false;
    metrics::MetricReport report;
};

void append_metrics_csv(const fs::path& path, const std::string& run_id, const std::string& method,
                        const std::string& backbone, double R,
                        const std::vector<EntryResult>& results) {
    const bool fresh = !fs::exists(path);
    std::ofstream csv(path, std::ios::app);
    if (!csv) throw IoError("cannot write " + path.string());
    if (fresh) csv << "run_id,method,backbone,R,psnr,ssim,tenengrad,feature_distance\n";
    for (const auto& r : results)
        csv << run_id << "_" << r.id << "," << method << "," << backbone << "," << fmt(R) << ","
            << fmt(r.report.psnr) << "," << fmt(r.report.ssim) << "," << fmt(r.report.tenengrad) << ","
            << fmt(r.report.feature_distance) << "\n";
}

int cmd_recon(ReconArgs a) {
    if (a.prior_data.empty()) a.prior_data = a.data;
    if (a.run_id.empty()) a.run_id = fs::path(a.out).filename().string();
    const bool semantic = a.reg == "semantic_image" || a.reg == "semantic_language";
    const bool language = a.reg == "semantic_language";
    const bool iterative = a.method != "zero_filled";
    if (language && a.instruction_file.empty())
        throw ValidationError("recon: semantic_language requires --instruction-file");
    if (semantic && a.encoder_dir.empty())
        throw ValidationError("recon: semantic regularizers require --encoder");
    if (a.method == "zero_filled" && semantic)
        throw ValidationError("recon: zero_filled does not take a regularizer");

    const data::DatasetManifest manifest = data::read_manifest(a.data);
    std::vector<data::ManifestEntry> selected;
    if (a.entries.empty()) {
        selected = manifest.entries;
    } else {
        std::string rest = a.entries;
        while (!rest.empty()) {
            const size_t comma = rest.find(',');
            const std::string id = rest.substr(0, comma);
            rest = comma == std::string::npos ? "" : rest.substr(comma + 1);
            auto it = std::find_if(manifest.entries.begin(), manifest.entries.end(),
                                   [&](const auto& e) { return e.id == id; });
            if (it == manifest.entries.end()) throw ValidationError("recon: no entry with id " + id);
            selected.push_back(*it);
        }
    }
    if (selected.empty()) throw ValidationError("recon: nothing to reconstruct");

    ensure_output_dir(a.out, a.force);
    {
        std::ofstream cfg_echo(fs::path(a.out) / "config.json", std::ios::trunc);
        cfg_echo << recon_args_to_json(a).dump(2) << "\n";
    }

    std::unique_ptr<enc::Encoder> encoder;
    if (!a.encoder_dir.empty()) encoder = enc::load_encoder(a.encoder_dir);

    enc::PriorSet priors;
    std::optional<enc::Instruction> instruction;
    if (semantic) {
        const data::DatasetManifest prior_manifest = data::read_manifest(a.prior_data);
        const auto pos = prior_source_images(a.prior_pos, a.prior_data, prior_manifest, a.prior_count, a.seed);
        const auto neg = prior_source_images(a.prior_neg, a.prior_data, prior_manifest, a.prior_count, a.seed);
        if (language) {
            const auto lines = read_lines(a.instruction_file);
            if (a.instruction_line < 0 || a.instruction_line >= static_cast<int>(lines.size()))
                throw ValidationError("recon: instruction line out of range");
            instruction = enc::make_instruction(lines[static_cast<size_t>(a.instruction_line)],
                                                encoder->config().vocab);
            priors = enc::build_prior_image_language(
                *encoder, pos, neg, *instruction,
                enc::PerturbationConfig{a.perturb_k, a.perturb_sigma, mix_seed(a.seed, 0x7065ULL)});
        } else {
            priors = enc::build_prior_image_only(*encoder, pos, neg);
        }
        recon::write_priors_json(fs::path(a.out) / "priors.json", priors);
    }

    const uint64_t encoder_hash_before = encoder ? encoder->weights_hash() : 0;

    std::vector<EntryResult> results(selected.size());
    parallel_for(static_cast<int>(selected.size()), [&](int i) {
        const auto& entry = selected[static_cast<size_t>(i)];
        data::LoadedEntry le = data::load_entry(a.data, entry);
        EntryResult r;
        r.id = entry.id;
        if (!iterative) {
            r.image = mri::zero_filled(le.acq);
        } else {
            recon::ReconConfig cfg = recon_config_from_args(a, mix_seed(a.seed, static_cast<uint64_t>(i)));
            recon::ReconContext ctx;
            ctx.encoder = encoder.get();
            ctx.priors = semantic ? &priors : nullptr;
            ctx.instruction = instruction ? &*instruction : nullptr;
            ctx.reference = &le.image;
            recon::ReconResult rr = recon::reconstruct(le.acq, cfg, ctx);
            r.image = std::move(rr.image);
            r.log = std::move(rr.log);
            r.has_log = true;
        }
        r.report = metrics::compute_report(r.image, le.image, encoder.get());
        results[static_cast<size_t>(i)] = std::move(r);
    });

    if (encoder && encoder->weights_hash() != encoder_hash_before)
        throw DivergenceError("recon: frozen encoder weights changed during reconstruction");

    for (const auto& r : results) {
        const fs::path edir = fs::path(a.out) / r.id;
        fs::create_directories(edir);
        data::write_array(edir / "image.arr", data::to_array(r.image));
        data::write_magnitude_png(edir / "image.png", r.image);
        if (r.has_log) recon::write_trajectory_jsonl(edir / "trajectory.jsonl", r.log);
    }
    const std::string method_label = a.method + (iterative && a.method != "tv_cs" ? "+" + a.reg : "");
    append_metrics_csv(fs::path(a.out) / "metrics.csv", a.run_id, method_label,
                       to_string(backbone_from_args(a).kind), selected[0].meta.R, results);
    for (const auto& r : results)
        std::printf("%s psnr=%.3f ssim=%.4f tenengrad=%.5f\n", r.id.c_str(), r.report.psnr, r.report.ssim,
                    r.report.tenengrad);
    return 0;
}

// ---------------------------------------------------------------------------
// prompt-robustness

struct PromptArgs {
    ReconArgs recon;          // shared machinery; method/reg forced below
    std::string instructions; // file with >= 2 lines
    std::string entry;        // default: first
};

int cmd_prompt_robustness(PromptArgs a) {
    a.recon.reg = "semantic_language";
    if (a.recon.method == "zero_filled" || a.recon.method == "tv_cs") a.recon.method = "inr";
    if (a.recon.prior_data.empty()) a.recon.prior_data = a.recon.data;
    if (a.recon.encoder_dir.empty()) throw ValidationError("prompt-robustness: --encoder is required");
    const auto instructions = read_lines(a.instructions);
    if (instructions.size() < 2)
        throw ValidationError("prompt-robustness: need at least 2 instructions");

    const data::DatasetManifest manifest = data::read_manifest(a.recon.data);
    const data::ManifestEntry* entry = &manifest.entries.at(0);
    if (!a.entry.empty()) {
        auto it = std::find_if(manifest.entries.begin(), manifest.entries.end(),
                               [&](const auto& e) { return e.id == a.entry; });
        if (it == manifest.entries.end()) throw ValidationError("prompt-robustness: no entry " + a.entry);
        entry = &*it;
    }
    ensure_output_dir(a.recon.out, a.recon.force);
    {
        json j = recon_args_to_json(a.recon);
        j["instructions"] = a.instructions;
        j["entry"] = entry->id;
        std::ofstream cfg_echo(fs::path(a.recon.out) / "config.json", std::ios::trunc);
        cfg_echo << j.dump(2) << "\n";
    }

    std::unique_ptr<enc::Encoder> encoder = enc::load_encoder(a.recon.encoder_dir);
    const data::DatasetManifest prior_manifest = data::read_manifest(a.recon.prior_data);
    const auto pos = prior_source_images(a.recon.prior_pos, a.recon.prior_data, prior_manifest,
                                         a.recon.prior_count, a.recon.seed);
    const auto neg = prior_source_images(a.recon.prior_neg, a.recon.prior_data, prior_manifest,
                                         a.recon.prior_count, a.recon.seed);
    data::LoadedEntry le = data::load_entry(a.recon.data, *entry);

    const int n = static_cast<int>(instructions.size());
    std::vector<ComplexImage> images(static_cast<size_t>(n));
    parallel_for(n, [&](int i) {
        enc::Instruction ins = enc::make_instruction(instructions[static_cast<size_t>(i)],
                                                     encoder->config().vocab);
        enc::PriorSet priors = enc::build_prior_image_language(
            *encoder, pos, neg, ins,
            enc::PerturbationConfig{a.recon.perturb_k, a.recon.perturb_sigma,
                                    mix_seed(a.recon.seed, 0x7065ULL)});
        // shared seed across instructions: only the instruction varies
        recon::ReconConfig cfg = recon_config_from_args(a.recon, mix_seed(a.recon.seed, 0x7072ULL));
        recon::ReconContext ctx;
        ctx.encoder = encoder.get();
        ctx.priors = &priors;
        ctx.instruction = &ins;
        ctx.reference = &le.image;
        images[static_cast<size_t>(i)] = recon::reconstruct(le.acq, cfg, ctx).image;
    });

    // pixel-wise std across max-normalized magnitudes
    const int h = le.acq.height(), w = le.acq.width();
    std::vector<std::vector<double>> mags;
    for (const auto& im : images) {
        std::vector<double> m = magnitude(im);
        const double peak = *std::max_element(m.begin(), m.end());
        if (peak > 0)
            for (double& v : m) v /= peak;
        mags.push_back(std::move(m));
    }
    std::vector<double> std_map(static_cast<size_t>(h) * w, 0.0);
    double spatial_mean = 0.0;
    for (size_t p = 0; p < std_map.size(); ++p) {
        double mean = 0.0;
        for (const auto& m : mags) mean += m[p];
        mean /= n;
        double var = 0.0;
        for (const auto& m : mags) var += (m[p] - mean) * (m[p] - mean);
        std_map[p] = std::sqrt(var / n);
        spatial_mean += std_map[p];
    }
    spatial_mean /= static_cast<double>(std_map.size());

    const fs::path out(a.recon.out);
    for (int i = 0; i < n; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "instruction_%02d", i);
        data::write_array(out / (std::string(name) + ".arr"), data::to_array(images[static_cast<size_t>(i)]));
        data::write_magnitude_png(out / (std::string(name) + ".png"), images[static_cast<size_t>(i)]);
    }
    data::RealArray sm;
    sm.dims = {static_cast<uint32_t>(h), static_cast<uint32_t>(w)};
    sm.v = std_map;
    data::write_array(out / "std_map.arr", sm);
    data::write_scalar_png(out / "std_map.png", std_map, h, w);
    {
        json j{{"n_instructions", n}, {"spatial_mean_std", spatial_mean}};
        std::ofstream f(out / "summary.json", std::ios::trunc);
        f << j.dump(2) << "\n";
    }
    std::printf("prompt-robustness: %d instructions, spatial mean std %.6f\n", n, spatial_mean);
    return 0;
}

// ---------------------------------------------------------------------------
// project

struct ProjectArgs {
    std::string trajectory, priors, out;
    std::string level = "high";
    bool force = false;
};

void write_scatter_png(const fs::path& path, const std::vector<recon::ProjectedPoint>& pts) {
    const int size = 512, margin = 24;
    double x0 = pts[0].x, x1 = pts[0].x, y0 = pts[0].y, y1 = pts[0].y;
    for (const auto& p : pts) {
        x0 = std::min(x0, p.x);
        x1 = std::max(x1, p.x);
        y0 = std::min(y0, p.y);
        y1 = std::max(y1, p.y);
    }
    const double xr = x1 > x0 ? x1 - x0 : 1.0, yr = y1 > y0 ? y1 - y0 : 1.0;
    std::vector<uint8_t> img(static_cast<size_t>(size) * size * 3, 255);
    auto put = [&](int r, int c, uint8_t red, uint8_t green, uint8_t blue) {
        if (r < 0 || r >= size || c < 0 || c >= size) return;
        uint8_t* px = img.data() + (static_cast<size_t>(r) * size + c) * 3;
        px[0] = red;
        px[1] = green;
        px[2] = blue;
    };
    for (int i = 0; i < size; ++i) {  // axes frame
        put(i, 0, 0, 0, 0);
        put(i, size - 1, 0, 0, 0);
        put(0, i, 0, 0, 0);
        put(size - 1, i, 0, 0, 0);
    }
    int max_iter = 1;
    for (const auto& p : pts)
        if (p.kind == "traj") max_iter = std::max(max_iter, p.iteration);
    for (const auto& p : pts) {
        const int c = margin + static_cast<int>((p.x - x0) / xr * (size - 2 * margin));
        const int r = size - margin - static_cast<int>((p.y - y0) / yr * (size - 2 * margin));
        uint8_t red = 0, green = 0, blue = 0;
        if (p.kind == "pos") {
            red = 220;
            green = 60;
            blue = 40;
        } else if (p.kind == "neg") {
            red = 40;
            green = 80;
            blue = 220;
        } else {  // trajectory shaded by iteration rank
            const double t = static_cast<double>(p.iteration) / max_iter;
            red = static_cast<uint8_t>(30 + 50 * t);
            green = static_cast<uint8_t>(180 - 120 * t);
            blue = static_cast<uint8_t>(60);
        }
        for (int dr = -1; dr <= 1; ++dr)
            for (int dc = -1; dc <= 1; ++dc) put(r + dr, c + dc, red, green, blue);
    }
    data::write_png_rgb8(path, img, size, size);
}

int cmd_project(const ProjectArgs& a) {
    const recon::TrajectoryLog log = recon::read_trajectory_jsonl(a.trajectory);
    const enc::PriorSet priors = recon::read_priors_json(a.priors);
    const enc::Level level = enc::level_from_string(a.level);
    if (!priors.has(level)) throw ValidationError("project: priors lack level " + a.level);
    if (!log.records.empty() && !log.records[0].embeddings.count(level))
        throw ValidationError("project: trajectory lacks level " + a.level);
    ensure_output_dir(a.out, a.force);

    const auto pts = recon::project_trajectory(log, priors.levels.at(level), level);
    std::ofstream csv(fs::path(a.out) / "projection.csv", std::ios::trunc);
    if (!csv) throw IoError("cannot write projection.csv");
    csv << "kind,id,iteration,x,y\n";
    for (const auto& p : pts)
        csv << p.kind << "," << p.index << "," << p.iteration << "," << fmt(p.x) << "," << fmt(p.y) << "\n";
    write_scatter_png(fs::path(a.out) / "scatter.png", pts);
    std::printf("project: %zu points at level %s\n", pts.size(), a.level.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
    std::string data, recon_dir, out, encoder_dir;
    std::string run_id = "eval";
    std::string method = "unknown";
    std::string backbone = "unknown";
};

int cmd_eval(const EvalArgs& a) {
    const data::DatasetManifest manifest = data::read_manifest(a.data);
    std::unique_ptr<enc::Encoder> encoder;
    if (!a.encoder_dir.empty()) encoder = enc::load_encoder(a.encoder_dir);

    std::string method = a.method, backbone = a.backbone;
    const fs::path cfg_path = fs::path(a.recon_dir) / "config.json";
    if (std::ifstream cfg_file(cfg_path); cfg_file) {
        try {
            json j;
            cfg_file >> j;
            ReconArgs recon_args;
            recon_args_from_json(j, recon_args);
            method = recon_args.method + "+" + recon_args.reg;
            backbone = to_string(backbone_from_args(recon_args).kind);
        } catch (const json::exception&) {
            // fall back to the flag values
        }
    }

    std::vector<EntryResult> results;
    double R = 0.0;
    for (const auto& e : manifest.entries) {
        const fs::path img_path = fs::path(a.recon_dir) / e.id / "image.arr";
        if (!fs::exists(img_path)) continue;
        data::LoadedEntry le = data::load_entry(a.data, e);
        EntryResult r;
        r.id = e.id;
        r.image = data::image_from_array(data::read_complex_array(img_path));
        r.report = metrics::compute_report(r.image, le.image, encoder.get());
        R = e.meta.R;
        results.push_back(std::move(r));
    }
    if (results.empty()) throw ValidationError("eval: no reconstructed entries found in " + a.recon_dir);
    const fs::path out = a.out.empty() ? fs::path(a.recon_dir) / "metrics_eval.csv" : fs::path(a.out);
    if (fs::exists(out)) fs::remove(out);
    append_metrics_csv(out, a.run_id, method, backbone, R, results);
    std::printf("eval: %zu entries -> %s\n", results.size(), out.string().c_str());
    return 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// argument wiring

int run(const std::vector<std::string>& args) {
    CLI::App app{"semantic-prior MRI reconstruction toolkit"};
    app.require_subcommand(1);

    GenDataArgs gd;
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic phantom dataset");
    gen->add_option("--out", gd.out, "output dataset directory")->required();
    gen->add_option("--n", gd.n, "number of entries");
    gen->add_option("--size", gd.size, "image size (H=W)");
    gen->add_option("--coils", gd.coils, "number of receiver coils");
    gen->add_option("--R", gd.R, "nominal acceleration");
    gen->add_option("--acs", gd.acs, "fully sampled central rows (0 = size/8)");
    gen->add_option("--noise-sigma", gd.noise_sigma, "k-space noise std per component");
    gen->add_option("--seed", gd.seed, "base seed");
    gen->add_option("--kind", gd.kind, "shepp_logan|random_ellipses|layered_rings|mixed");
    gen->add_option("--lesion", gd.lesion, "row,col,radius,delta")->expected(4);
    gen->add_flag("--force", gd.force, "overwrite a non-empty output directory");

    PretrainArgs pt;
    auto* pre = app.add_subcommand("pretrain", "contrastively pretrain the desk encoder");
    pre->add_option("--data", pt.data, "dataset directory")->required();
    pre->add_option("--out", pt.out, "checkpoint directory")->required();
    pre->add_option("--steps", pt.steps, "training steps");
    pre->add_option("--lr", pt.lr, "learning rate");
    pre->add_option("--batch", pt.batch, "images per class per step");
    pre->add_option("--seed", pt.seed, "seed");
    pre->add_option("--instruction-file", pt.instruction_file, "instruction list (one per line)");
    pre->add_option("--instruction-line", pt.instruction_line, "line index into the instruction file");
    pre->add_flag("--force", pt.force, "overwrite a non-empty output directory");

    ReconArgs rc;
    std::string rc_config;
    auto* rec = app.add_subcommand("recon", "reconstruct dataset entries");
    rec->add_option("--config", rc_config, "JSON config; flags override its fields");
    auto* rc_data = rec->add_option("--data", rc.data, "dataset directory");
    auto* rc_out = rec->add_option("--out", rc.out, "output directory");
    auto* rc_enc = rec->add_option("--encoder", rc.encoder_dir, "encoder checkpoint directory");
    auto* rc_method = rec->add_option("--method", rc.method, "zero_filled|tv_cs|end_to_end|unrolled|inr");
    auto* rc_reg = rec->add_option("--reg", rc.reg, "none|tv|semantic_image|semantic_language");
    auto* rc_lambda = rec->add_option("--lambda", rc.lambda, "regularization weight");
    auto* rc_iters = rec->add_option("--iters", rc.iterations, "optimizer iterations");
    auto* rc_lr = rec->add_option("--lr", rc.lr, "optimizer step size");
    auto* rc_seed = rec->add_option("--seed", rc.seed, "base seed");
    auto* rc_log = rec->add_option("--log-every", rc.log_every, "iterations between trajectory records");
    auto* rc_warm = rec->add_option("--warm-steps", rc.warm_steps, "warm-start steps on auxiliary scans");
    auto* rc_lora = rec->add_option("--lora-rank", rc.lora_rank, "low-rank adaptation rank (0 = off)");
    auto* rc_inr_l = rec->add_option("--inr-layers", rc.inr_layers, "inr layers");
    auto* rc_inr_h = rec->add_option("--inr-hidden", rc.inr_hidden, "inr hidden units");
    auto* rc_pd = rec->add_option("--prior-data", rc.prior_data, "dataset used for priors (default --data)");
    auto* rc_pp = rec->add_option("--prior-pos", rc.prior_pos, "positive source: image|zero_filled|tv_cs");
    auto* rc_pn = rec->add_option("--prior-neg", rc.prior_neg, "negative source: image|zero_filled|tv_cs");
    auto* rc_pc = rec->add_option("--prior-n", rc.prior_count, "auxiliary entries used for priors");
    auto* rc_if = rec->add_option("--instruction-file", rc.instruction_file, "instruction list");
    auto* rc_il = rec->add_option("--instruction-line", rc.instruction_line, "line index");
    auto* rc_k = rec->add_option("--K", rc.perturb_k, "text perturbation count");
    auto* rc_sg = rec->add_option("--sigma-text", rc.perturb_sigma, "text perturbation std");
    auto* rc_en = rec->add_option("--entries", rc.entries, "comma-separated entry ids (default all)");
    auto* rc_ri = rec->add_option("--run-id", rc.run_id, "metrics row prefix");
    rec->add_flag("--force", rc.force, "overwrite a non-empty output directory");

    PromptArgs pr;
    std::string pr_config;
    auto* prb = app.add_subcommand("prompt-robustness", "reconstruct once per instruction, map the variability");
    prb->add_option("--config", pr_config, "JSON config; flags override its fields");
    auto* pr_data = prb->add_option("--data", pr.recon.data, "dataset directory");
    auto* pr_out = prb->add_option("--out", pr.recon.out, "output directory");
    auto* pr_enc = prb->add_option("--encoder", pr.recon.encoder_dir, "encoder checkpoint");
    prb->add_option("--instructions", pr.instructions, "instruction file (>= 2 lines)")->required();
    prb->add_option("--entry", pr.entry, "entry id (default: first)");
    auto* pr_method = prb->add_option("--method", pr.recon.method, "end_to_end|unrolled|inr");
    auto* pr_iters = prb->add_option("--iters", pr.recon.iterations, "optimizer iterations");
    auto* pr_lr = prb->add_option("--lr", pr.recon.lr, "optimizer step size");
    auto* pr_seed = prb->add_option("--seed", pr.recon.seed, "shared seed");
    auto* pr_lambda = prb->add_option("--lambda", pr.recon.lambda, "regularization weight");
    auto* pr_pd = prb->add_option("--prior-data", pr.recon.prior_data, "dataset used for priors");
    auto* pr_pp = prb->add_option("--prior-pos", pr.recon.prior_pos, "positive source");
    auto* pr_pn = prb->add_option("--prior-neg", pr.recon.prior_neg, "negative source");
    auto* pr_pc = prb->add_option("--prior-n", pr.recon.prior_count, "auxiliary entries for priors");
    auto* pr_k = prb->add_option("--K", pr.recon.perturb_k, "text perturbation count");
    auto* pr_sg = prb->add_option("--sigma-text", pr.recon.perturb_sigma, "text perturbation std");
    auto* pr_inr_l = prb->add_option("--inr-layers", pr.recon.inr_layers, "inr layers");
    auto* pr_inr_h = prb->add_option("--inr-hidden", pr.recon.inr_hidden, "inr hidden units");
    prb->add_flag("--force", pr.recon.force, "overwrite a non-empty output directory");

    ProjectArgs pj;
    auto* prj = app.add_subcommand("project", "project prior + trajectory embeddings to 2-D");
    prj->add_option("--trajectory", pj.trajectory, "trajectory.jsonl from a recon run")->required();
    prj->add_option("--priors", pj.priors, "priors.json from a recon run")->required();
    prj->add_option("--level", pj.level, "low|mid|high|language");
    prj->add_option("--out", pj.out, "output directory")->required();
    prj->add_flag("--force", pj.force, "overwrite a non-empty output directory");

    EvalArgs ev;
    auto* evc = app.add_subcommand("eval", "recompute metrics for a recon output directory");
    evc->add_option("--data", ev.data, "dataset directory")->required();
    evc->add_option("--recon-dir", ev.recon_dir, "recon output directory")->required();
    evc->add_option("--out", ev.out, "metrics CSV path");
    evc->add_option("--encoder", ev.encoder_dir, "encoder for feature_distance");
    evc->add_option("--run-id", ev.run_id, "metrics row prefix");
    evc->add_option("--method", ev.method, "method label fallback");
    evc->add_option("--backbone", ev.backbone, "backbone label fallback");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(gd);
        if (pre->parsed()) return cmd_pretrain(pt);
        if (rec->parsed()) {
            if (!rc_config.empty()) {
                std::ifstream f(rc_config);
                if (!f) throw IoError("cannot open config " + rc_config);
                json j;
                try {
                    f >> j;
                } catch (const json::exception& e) {
                    throw FormatError(std::string("config: ") + e.what());
                }
                ReconArgs merged;
                recon_args_from_json(j, merged);
                // flags given on the command line win over config fields
                if (!rc_data->count()) rc.data = merged.data; else merged.data = rc.data;
                auto keep = [](CLI::Option* opt, auto& flag_val, auto& cfg_val) {
                    if (opt->count())
                        cfg_val = flag_val;
                    else
                        flag_val = cfg_val;
                };
                keep(rc_out, rc.out, merged.out);
                keep(rc_enc, rc.encoder_dir, merged.encoder_dir);
                keep(rc_method, rc.method, merged.method);
                keep(rc_reg, rc.reg, merged.reg);
                keep(rc_lambda, rc.lambda, merged.lambda);
                keep(rc_iters, rc.iterations, merged.iterations);
                keep(rc_lr, rc.lr, merged.lr);
                keep(rc_seed, rc.seed, merged.seed);
                keep(rc_log, rc.log_every, merged.log_every);
                keep(rc_warm, rc.warm_steps, merged.warm_steps);
                keep(rc_lora, rc.lora_rank, merged.lora_rank);
                keep(rc_inr_l, rc.inr_layers, merged.inr_layers);
                keep(rc_inr_h, rc.inr_hidden, merged.inr_hidden);
                keep(rc_pd, rc.prior_data, merged.prior_data);
                keep(rc_pp, rc.prior_pos, merged.prior_pos);
                keep(rc_pn, rc.prior_neg, merged.prior_neg);
                keep(rc_pc, rc.prior_count, merged.prior_count);
                keep(rc_if, rc.instruction_file, merged.instruction_file);
                keep(rc_il, rc.instruction_line, merged.instruction_line);
                keep(rc_k, rc.perturb_k, merged.perturb_k);
                keep(rc_sg, rc.perturb_sigma, merged.perturb_sigma);
                keep(rc_en, rc.entries, merged.entries);
                keep(rc_ri, rc.run_id, merged.run_id);
            }
            if (rc.data.empty()) throw ValidationError("recon: --data is required (flag or config)");
            if (rc.out.empty()) throw ValidationError("recon: --out is required (flag or config)");
            return cmd_recon(rc);
        }
        if (prb->parsed()) {
            if (!pr_config.empty()) {
                std::ifstream f(pr_config);
                if (!f) throw IoError("cannot open config " + pr_config);
                json j;
                try {
                    f >> j;
                } catch (const json::exception& e) {
                    throw FormatError(std::string("config: ") + e.what());
                }
                ReconArgs merged;
                recon_args_from_json(j, merged);
                auto keep = [](CLI::Option* opt, auto& flag_val, auto& cfg_val) {
                    if (opt->count())
                        cfg_val = flag_val;
                    else
                        flag_val = cfg_val;
                };
                keep(pr_data, pr.recon.data, merged.data);
                keep(pr_out, pr.recon.out, merged.out);
                keep(pr_enc, pr.recon.encoder_dir, merged.encoder_dir);
                keep(pr_method, pr.recon.method, merged.method);
                keep(pr_iters, pr.recon.iterations, merged.iterations);
                keep(pr_lr, pr.recon.lr, merged.lr);
                keep(pr_seed, pr.recon.seed, merged.seed);
                keep(pr_lambda, pr.recon.lambda, merged.lambda);
                keep(pr_pd, pr.recon.prior_data, merged.prior_data);
                keep(pr_pp, pr.recon.prior_pos, merged.prior_pos);
                keep(pr_pn, pr.recon.prior_neg, merged.prior_neg);
                keep(pr_pc, pr.recon.prior_count, merged.prior_count);
                keep(pr_k, pr.recon.perturb_k, merged.perturb_k);
                keep(pr_sg, pr.recon.perturb_sigma, merged.perturb_sigma);
                keep(pr_inr_l, pr.recon.inr_layers, merged.inr_layers);
                keep(pr_inr_h, pr.recon.inr_hidden, merged.inr_hidden);
            }
            if (pr.recon.data.empty())
                throw ValidationError("prompt-robustness: --data is required (flag or config)");
            if (pr.recon.out.empty())
                throw ValidationError("prompt-robustness: --out is required (flag or config)");
            return cmd_prompt_robustness(pr);
        }
        if (prj->parsed()) return cmd_project(pj);
        if (evc->parsed()) return cmd_eval(ev);
        throw ValidationError("no subcommand");
    } catch (const ValidationError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const DivergenceError& e) {
        std::fprintf(stderr, "divergence: %s\n", e.what());
        return 2;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "format error: %s\n", e.what());
        return 3;
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 3;
    }
}

int run(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args);
}

}  // namespace semrecon::cli
