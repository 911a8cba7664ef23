#define EIGEN_DONT_PARALLELIZE
#include "semrecon/recon.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "semrecon/contrastive.hpp"
#include "semrecon/metrics.hpp"

namespace semrecon::recon {

using ad::Tape;
using ad::Tensor;
using ad::VarId;
using nlohmann::json;

Regularizer regularizer_from_string(const std::string& s) {
    if (s == "none") return Regularizer::none;
    if (s == "tv") return Regularizer::tv;
    if (s == "semantic_image") return Regularizer::semantic_image;
    if (s == "semantic_language") return Regularizer::semantic_language;
    throw ValidationError("unknown regularizer: " + s);
}

std::string to_string(Regularizer r) {
    switch (r) {
        case Regularizer::none: return "none";
        case Regularizer::tv: return "tv";
        case Regularizer::semantic_image: return "semantic_image";
        case Regularizer::semantic_language: return "semantic_language";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// losses

double dc_loss(const ComplexImage& x, const mri::AcquisitionData& acq, ComplexImage* grad) {
    auto pred = mri::forward_model(x, acq.coils, acq.mask);
    double loss = 0.0;
    std::vector<ComplexImage> residual(pred.size());
    for (size_t j = 0; j < pred.size(); ++j) {
        residual[j] = ComplexImage(x.height, x.width);
        for (size_t i = 0; i < pred[j].size(); ++i) {
            const cplx r = acq.kspace[j].data[i] - pred[j].data[i];
            residual[j].data[i] = r;
            loss += 0.5 * std::norm(r);
        }
    }
    if (grad) {
        ComplexImage g = mri::adjoint(residual, acq.coils, acq.mask);
        for (auto& v : g.data) v = -v;
        *grad = std::move(g);
    }
    return loss;
}

double tv_loss(const ComplexImage& x, double eps, ComplexImage* grad) {
    if (eps <= 0.0) throw ValidationError("tv_loss: eps must be positive");
    const int h = x.height, w = x.width;
    double loss = 0.0;
    ComplexImage g;
    if (grad) g = ComplexImage(h, w);

    // real and imaginary planes are penalized independently
    for (int plane = 0; plane < 2; ++plane) {
        auto px = [&](int r, int c) {
            return plane == 0 ? x.at(r, c).real() : x.at(r, c).imag();
        };
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) {
                const double dx = c + 1 < w ? px(r, c + 1) - px(r, c) : 0.0;
                const double dy = r + 1 < h ? px(r + 1, c) - px(r, c) : 0.0;
                const double d = std::sqrt(dx * dx + dy * dy + eps * eps);
                loss += d - eps;
                if (grad) {
                    auto bump = [&](int rr, int cc, double v) {
                        cplx& t = g.at(rr, cc);
                        t += plane == 0 ? cplx{v, 0.0} : cplx{0.0, v};
                    };
                    bump(r, c, -(dx + dy) / d);
                    if (c + 1 < w) bump(r, c + 1, dx / d);
                    if (r + 1 < h) bump(r + 1, c, dy / d);
                }
            }
    }
    if (grad) *grad = std::move(g);
    return loss;
}

namespace {

Tensor image_grad_to_tensor(const ComplexImage& g) {
    Tensor t({2, g.height, g.width});
    const size_t plane = g.size();
    for (size_t i = 0; i < plane; ++i) {
        t.v[i] = g.data[i].real();
        t.v[plane + i] = g.data[i].imag();
    }
    return t;
}

}  // namespace

VarId dc_loss_node(Tape& tape, VarId x, const mri::AcquisitionData& acq) {
    ComplexImage xi = nn::tensor_to_image(tape.val(x));
    ComplexImage grad;
    const double value = dc_loss(xi, acq, &grad);
    Tensor gt = image_grad_to_tensor(grad);
    return tape.custom(Tensor::scalar(value), {x}, [gt](const Tensor& g, const std::vector<double*>& pg) {
        if (!pg[0]) return;
        for (size_t i = 0; i < gt.numel(); ++i) pg[0][i] += g.v[0] * gt.v[i];
    });
}

VarId tv_loss_node(Tape& tape, VarId x, double eps) {
    ComplexImage xi = nn::tensor_to_image(tape.val(x));
    ComplexImage grad;
    const double value = tv_loss(xi, eps, &grad);
    Tensor gt = image_grad_to_tensor(grad);
    return tape.custom(Tensor::scalar(value), {x}, [gt](const Tensor& g, const std::vector<double*>& pg) {
        if (!pg[0]) return;
        for (size_t i = 0; i < gt.numel(); ++i) pg[0][i] += g.v[0] * gt.v[i];
    });
}

// ---------------------------------------------------------------------------
// reconstruct

namespace {

struct PriorNodes {
    std::map<enc::Level, std::pair<std::vector<VarId>, std::vector<VarId>>> levels;
};

PriorNodes make_prior_nodes(Tape& tape, const enc::PriorSet& priors) {
    PriorNodes out;
    for (const auto& [level, lp] : priors.levels) {
        std::vector<VarId> pos, neg;
        for (const auto& m : lp.pos)
            pos.push_back(tape.constant(Tensor({static_cast<int>(m.size())}, m)));
        for (const auto& m : lp.neg)
            neg.push_back(tape.constant(Tensor({static_cast<int>(m.size())}, m)));
        out.levels[level] = {std::move(pos), std::move(neg)};
    }
    return out;
}

void validate_inputs(const mri::AcquisitionData& acq, const ReconConfig& cfg, const ReconContext& ctx) {
    acq.validate();
    cfg.backbone.validate();
    if (cfg.lambda < 0.0) throw ValidationError("reconstruct: lambda must be >= 0");
    if (cfg.opt.iterations < 1) throw ValidationError("reconstruct: iterations must be >= 1");
    if (cfg.log_every < 1) throw ValidationError("reconstruct: log_every must be >= 1");
    const bool semantic = cfg.reg == Regularizer::semantic_image || cfg.reg == Regularizer::semantic_language;
    if (semantic && cfg.lambda > 0.0) {
        if (!ctx.encoder || !ctx.priors)
            throw ValidationError("reconstruct: semantic mode needs an encoder and priors");
        if (cfg.reg == Regularizer::semantic_image) {
            for (enc::Level l : {enc::Level::low, enc::Level::mid, enc::Level::high})
                if (!ctx.priors->has(l))
                    throw ValidationError("reconstruct: image prior missing level " + std::string(to_string(l)));
        } else {
            if (!ctx.instruction) throw ValidationError("reconstruct: language mode needs an instruction");
            if (!ctx.priors->has(enc::Level::language))
                throw ValidationError("reconstruct: language prior missing");
        }
    }
}

}  // namespace

ReconResult reconstruct(const mri::AcquisitionData& acq, const ReconConfig& cfg, const ReconContext& ctx) {
    validate_inputs(acq, cfg, ctx);
    const int h = acq.height(), w = acq.width();
    const bool is_inr = cfg.backbone.kind == nn::BackboneKind::inr;
    const bool needs_dc_data = cfg.backbone.kind == nn::BackboneKind::unrolled;
    const bool semantic = (cfg.reg == Regularizer::semantic_image ||
                           cfg.reg == Regularizer::semantic_language) && cfg.lambda > 0.0;
    const bool language = cfg.reg == Regularizer::semantic_language && cfg.lambda > 0.0;

    const ComplexImage zf = mri::zero_filled(acq);
    nn::Backbone backbone = cfg.backbone.kind == nn::BackboneKind::pixel
                                ? nn::Backbone::pixel(zf)
                                : nn::Backbone(cfg.backbone, cfg.seed);
    const Tensor input = is_inr ? nn::coordinate_grid(h, w) : nn::image_to_tensor(zf);

    std::vector<double> text_vec;
    if (language) text_vec = ctx.encoder->text_vector(*ctx.instruction);

    // forward + losses on one tape; reg node only when lambda > 0
    auto evaluate = [&](Tape& tape, const std::vector<VarId>& bound, const mri::AcquisitionData& data,
                        const Tensor& in) {
        struct Eval {
            VarId out, dc, reg;
        } ev{};
        VarId in_node = tape.constant(in);
        ev.out = backbone.forward(tape, bound, in_node, needs_dc_data ? &data : nullptr);
        if (is_inr) ev.out = nn::inr_output_to_image_node(tape, ev.out, h, w);
        ev.dc = dc_loss_node(tape, ev.out, data);
        ev.reg = -1;
        if (cfg.lambda > 0.0) {
            if (cfg.reg == Regularizer::tv) {
                ev.reg = tv_loss_node(tape, ev.out, cfg.tv_eps);
            } else if (semantic) {
                auto ebound = ctx.encoder->bind(tape);
                auto levels = ctx.encoder->encode_image_node(tape, ebound, ev.out);
                PriorNodes pn = make_prior_nodes(tape, *ctx.priors);
                if (cfg.reg == Regularizer::semantic_image) {
                    std::vector<loss::LevelTerm> terms;
                    for (int l = 0; l < 3; ++l) {
                        auto& [pos, neg] = pn.levels.at(static_cast<enc::Level>(l));
                        terms.push_back({levels[static_cast<size_t>(l)], pos, neg,
                                         cfg.level_weights[static_cast<size_t>(l)]});
                    }
                    ev.reg = loss::hierarchical_node(tape, terms, cfg.tau);
                } else {
                    VarId text = tape.constant(Tensor({static_cast<int>(text_vec.size())}, text_vec));
                    VarId fused = ctx.encoder->fuse_node(tape, ebound, levels[2], text);
                    auto& [pos, neg] = pn.levels.at(enc::Level::language);
                    ev.reg = loss::multi_positive_node(tape, fused, pos, neg, cfg.tau);
                }
            }
        }
        return ev;
    };

    nn::ParamStore& params = backbone.params();

    // warm start on auxiliary scans, data-consistency only by default
    if (cfg.warm_start && cfg.warm_start->steps > 0) {
        if (cfg.backbone.kind == nn::BackboneKind::pixel)
            throw ValidationError("reconstruct: warm start is not applicable to the pixel backbone");
        if (!ctx.warm_aux || ctx.warm_aux->empty())
            throw ValidationError("reconstruct: warm start requested without auxiliary scans");
        nn::Adam warm_adam(params.total_size(), cfg.opt.lr, cfg.opt.beta1, cfg.opt.beta2, cfg.opt.eps);
        const auto mask = params.trainable_mask();
        std::vector<Tensor> aux_inputs;
        for (const auto& a : *ctx.warm_aux) {
            if (a.height() != h || a.width() != w)
                throw DimensionError("warm start: auxiliary scan shape mismatch");
            aux_inputs.push_back(is_inr ? nn::coordinate_grid(h, w)
                                        : nn::image_to_tensor(mri::zero_filled(a)));
        }
        for (int step = 0; step < cfg.warm_start->steps; ++step) {
            const size_t k = static_cast<size_t>(step) % ctx.warm_aux->size();
            Tape tape;
            auto bound = params.bind(tape);
            const bool with_sem = cfg.warm_start->use_semantic && semantic;
            VarId in_node = tape.constant(aux_inputs[k]);
            VarId out = backbone.forward(tape, bound, in_node, needs_dc_data ? &(*ctx.warm_aux)[k] : nullptr);
            if (is_inr) out = nn::inr_output_to_image_node(tape, out, h, w);
            VarId total = dc_loss_node(tape, out, (*ctx.warm_aux)[k]);
            if (with_sem) {
                auto ebound = ctx.encoder->bind(tape);
                auto levels = ctx.encoder->encode_image_node(tape, ebound, out);
                PriorNodes pn = make_prior_nodes(tape, *ctx.priors);
                if (cfg.reg == Regularizer::semantic_image) {
                    std::vector<loss::LevelTerm> terms;
                    for (int l = 0; l < 3; ++l) {
                        auto& [pos, neg] = pn.levels.at(static_cast<enc::Level>(l));
                        terms.push_back({levels[static_cast<size_t>(l)], pos, neg,
                                         cfg.level_weights[static_cast<size_t>(l)]});
                    }
                    total = tape.add(total, tape.scale(loss::hierarchical_node(tape, terms, cfg.tau), cfg.lambda));
                } else {
                    VarId text = tape.constant(Tensor({static_cast<int>(text_vec.size())}, text_vec));
                    VarId fused = ctx.encoder->fuse_node(tape, ebound, levels[2], text);
                    auto& [pos, neg] = pn.levels.at(enc::Level::language);
                    total = tape.add(
                        total,
                        tape.scale(loss::multi_positive_node(tape, fused, pos, neg, cfg.tau), cfg.lambda));
                }
            }
            if (!std::isfinite(tape.val(total).v[0]))
                throw DivergenceError("warm start: non-finite loss at step " + std::to_string(step));
            tape.backward(total);
            params.zero_grads();
            params.collect_grads(tape, bound);
            warm_adam.step(params.values(), params.grads(), mask);
        }
    }

    if (cfg.lora) backbone.apply_lora(*cfg.lora, mix_seed(cfg.seed, 0x6c6f7261ULL));

    nn::Adam adam(params.total_size(), cfg.opt.lr, cfg.opt.beta1, cfg.opt.beta2, cfg.opt.eps);
    const auto mask = params.trainable_mask();

    double dc0 = 1.0, reg0 = 1.0;
    TrajectoryLog log;

    auto snapshot = [&](int iteration, const ComplexImage& img, double dcv, double regv) {
        TrajectoryRecord rec;
        rec.iteration = iteration;
        rec.dc_loss = dcv;
        rec.reg_loss = regv;
        if (ctx.encoder) {
            auto embs = ctx.encoder->encode_image(img);
            for (const auto& e : embs) rec.embeddings[e.level] = e.v;
            if (language) {
                auto fused = ctx.encoder->fuse(embs[2].v, text_vec);
                rec.embeddings[enc::Level::language] = fused.v;
                rec.quality = enc::classify_quality(fused.v, ctx.priors->levels.at(enc::Level::language));
            }
        }
        if (ctx.reference) {
            std::vector<double> mt = magnitude(img), mr = magnitude(*ctx.reference);
            const double peak = *std::max_element(mr.begin(), mr.end());
            for (double& v : mt) v /= peak;
            for (double& v : mr) v /= peak;
            rec.psnr = metrics::psnr(mt, mr);
        }
        log.records.push_back(std::move(rec));
    };

    for (int iter = 0; iter < cfg.opt.iterations; ++iter) {
        Tape tape;
        auto bound = params.bind(tape);
        auto ev = evaluate(tape, bound, acq, input);
        const double dcv = tape.val(ev.dc).v[0];
        const double regv = ev.reg >= 0 ? tape.val(ev.reg).v[0] : 0.0;
        if (iter == 0) {
            dc0 = std::max(dcv, 1e-12);
            reg0 = std::max(std::abs(regv), 1e-12);
        }
        VarId total = tape.scale(ev.dc, 1.0 / dc0);
        if (ev.reg >= 0) total = tape.add(total, tape.scale(ev.reg, cfg.lambda / reg0));
        if (!std::isfinite(tape.val(total).v[0]))
            throw DivergenceError("reconstruct: non-finite loss at iteration " + std::to_string(iter));

        if (iter % cfg.log_every == 0)
            snapshot(iter, nn::tensor_to_image(tape.val(ev.out)), dcv, regv);

        tape.backward(total);
        params.zero_grads();
        params.collect_grads(tape, bound);
        adam.step(params.values(), params.grads(), mask);
    }

    // final state, detached
    ReconResult res;
    {
        Tape tape;
        auto bound = params.bind(tape);
        auto ev = evaluate(tape, bound, acq, input);
        res.image = nn::tensor_to_image(tape.val(ev.out));
        res.final_dc = tape.val(ev.dc).v[0];
        res.final_reg = ev.reg >= 0 ? tape.val(ev.reg).v[0] : 0.0;
        snapshot(cfg.opt.iterations, res.image, res.final_dc, res.final_reg);
    }
    res.log = std::move(log);
    return res;
}

// ---------------------------------------------------------------------------
// trajectory projection and export

std::vector<ProjectedPoint> project_trajectory(const TrajectoryLog& log, const enc::LevelPriors& priors,
                                               enc::Level level) {
    if (log.records.empty()) throw ValidationError("project: empty trajectory");
    const size_t n_fit = priors.pos.size() + priors.neg.size();
    if (n_fit < 3) throw ValidationError("project: need at least 3 prior embeddings");
    const size_t dim = priors.pos.empty() ? priors.neg[0].size() : priors.pos[0].size();

    Eigen::MatrixXd fit(static_cast<long>(n_fit), static_cast<long>(dim));
    long row = 0;
    for (const auto& m : priors.pos) fit.row(row++) = Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
    for (const auto& m : priors.neg) fit.row(row++) = Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());

    const Eigen::RowVectorXd mean = fit.colwise().mean();
    fit.rowwise() -= mean;
    Eigen::MatrixXd cov = fit.transpose() * fit / static_cast<double>(n_fit);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    if (eig.info() != Eigen::Success) throw DivergenceError("project: eigensolver failed");

    Eigen::MatrixXd basis(static_cast<long>(dim), 2);
    // eigenvalues ascend; take the top two, sign fixed by the largest component
    for (int k = 0; k < 2; ++k) {
        Eigen::VectorXd v = eig.eigenvectors().col(static_cast<long>(dim) - 1 - k);
        long imax = 0;
        v.cwiseAbs().maxCoeff(&imax);
        if (v(imax) < 0.0) v = -v;
        basis.col(k) = v;
    }

    std::vector<ProjectedPoint> out;
    auto project = [&](const std::vector<double>& m) {
        Eigen::RowVectorXd x = Eigen::Map<const Eigen::RowVectorXd>(m.data(), m.size());
        Eigen::RowVector2d p = (x - mean) * basis;
        return std::pair<double, double>{p(0), p(1)};
    };
    for (size_t i = 0; i < priors.pos.size(); ++i) {
        auto [x, y] = project(priors.pos[i]);
        out.push_back({"pos", static_cast<int>(i), 0, x, y});
    }
    for (size_t i = 0; i < priors.neg.size(); ++i) {
        auto [x, y] = project(priors.neg[i]);
        out.push_back({"neg", static_cast<int>(i), 0, x, y});
    }
    for (size_t i = 0; i < log.records.size(); ++i) {
        auto it = log.records[i].embeddings.find(level);
        if (it == log.records[i].embeddings.end())
            throw ValidationError("project: trajectory record lacks the requested level");
        if (it->second.size() != dim) throw DimensionError("project: embedding dimension mismatch");
        auto [x, y] = project(it->second);
        out.push_back({"traj", static_cast<int>(i), log.records[i].iteration, x, y});
    }
    return out;
}

void write_trajectory_jsonl(const std::filesystem::path& path, const TrajectoryLog& log) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    for (const auto& r : log.records) {
        json j;
        j["iteration"] = r.iteration;
        j["dc_loss"] = r.dc_loss;
        j["reg_loss"] = r.reg_loss;
        json je = json::object();
        for (const auto& [level, v] : r.embeddings) je[to_string(level)] = v;
        j["embeddings"] = je;
        if (r.quality)
            j["quality"] = {{"label", to_string(r.quality->label)}, {"margin", r.quality->margin}};
        if (r.psnr) j["psnr"] = *r.psnr;
        f << j.dump() << "\n";
    }
}

TrajectoryLog read_trajectory_jsonl(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path.string());
    TrajectoryLog log;
    std::string line;
    int prev_iter = -1;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw FormatError(path.string() + ": " + e.what());
        }
        TrajectoryRecord r;
        r.iteration = j.at("iteration").get<int>();
        if (r.iteration <= prev_iter) throw FormatError(path.string() + ": iterations not increasing");
        prev_iter = r.iteration;
        r.dc_loss = j.at("dc_loss").get<double>();
        r.reg_loss = j.at("reg_loss").get<double>();
        for (const auto& [key, val] : j.at("embeddings").items())
            r.embeddings[enc::level_from_string(key)] = val.get<std::vector<double>>();
        if (j.contains("quality")) {
            enc::QualityResponse q;
            const std::string lab = j["quality"].at("label").get<std::string>();
            q.label = lab == "positive"  ? enc::QualityLabel::positive
                      : lab == "negative" ? enc::QualityLabel::negative
                                          : enc::QualityLabel::undetermined;
            q.margin = j["quality"].at("margin").get<double>();
            r.quality = q;
        }
        if (j.contains("psnr")) r.psnr = j["psnr"].get<double>();
        log.records.push_back(std::move(r));
    }
    return log;
}

void write_priors_json(const std::filesystem::path& path, const enc::PriorSet& priors) {
    json j = json::object();
    for (const auto& [level, lp] : priors.levels)
        j[to_string(level)] = {{"pos", lp.pos}, {"neg", lp.neg}};
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f << j.dump() << "\n";
}

enc::PriorSet read_priors_json(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path.string());
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    enc::PriorSet out;
    for (const auto& [key, val] : j.items()) {
        enc::LevelPriors lp;
        lp.pos = val.at("pos").get<loss::Members>();
        lp.neg = val.at("neg").get<loss::Members>();
        out.levels[enc::level_from_string(key)] = std::move(lp);
    }
    return out;
}

}  // namespace semrecon::recon
