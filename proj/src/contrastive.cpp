#include "semrecon/contrastive.hpp"

#include <algorithm>
#include <cmath>

namespace semrecon::loss {

namespace {

double norm_of(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

void check_tau(double tau) {
    if (tau <= 0.0) throw ValidationError("contrastive: temperature must be positive");
}

// d sim(e,u) / d e accumulated with weight w
void accum_sim_grad(std::vector<double>& g, std::span<const double> e, std::span<const double> u,
                    double sim, double ne, double nu, double w) {
    for (size_t i = 0; i < g.size(); ++i) g[i] += w * (u[i] / (ne * nu) - sim * e[i] / (ne * ne));
}

struct Logit {
    double sim, norm_u;
    std::span<const double> u;
};

std::vector<Logit> logits_for(std::span<const double> e, const Members& set, double ne) {
    std::vector<Logit> out;
    out.reserve(set.size());
    for (const auto& u : set) {
        if (u.size() != e.size()) throw DimensionError("contrastive: embedding dimension mismatch");
        const double nu = norm_of(u);
        if (nu == 0.0) throw ValidationError("contrastive: zero-norm member");
        double d = 0.0;
        for (size_t i = 0; i < e.size(); ++i) d += e[i] * u[i];
        out.push_back({d / (ne * nu), nu, u});
    }
    return out;
}

}  // namespace

double cosine_sim(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("cosine_sim: dimension mismatch");
    const double na = norm_of(a), nb = norm_of(b);
    if (na == 0.0 || nb == 0.0) throw ValidationError("cosine_sim: zero vector");
    double d = 0.0;
    for (size_t i = 0; i < a.size(); ++i) d += a[i] * b[i];
    return d / (na * nb);
}

double infonce_as_printed(std::span<const double> e, std::span<const double> pos, const Members& negs,
                          double tau, std::vector<double>* grad_e) {
    check_tau(tau);
    if (negs.empty()) throw ValidationError("infonce: negatives must be non-empty");
    const double ne = norm_of(e);
    if (ne == 0.0) throw ValidationError("infonce: zero query");

    Members pos_set{std::vector<double>(pos.begin(), pos.end())};
    const Logit lp = logits_for(e, pos_set, ne)[0];
    const std::vector<Logit> ln = logits_for(e, negs, ne);

    double m = ln[0].sim;
    for (const Logit& l : ln) m = std::max(m, l.sim);
    double sn = 0.0;
    for (const Logit& l : ln) sn += std::exp((l.sim - m) / tau);
    // loss = LSE_n(sim_n/tau) - sim_p/tau
    const double loss = m / tau + std::log(sn) - lp.sim / tau;

    if (grad_e) {
        grad_e->assign(e.size(), 0.0);
        accum_sim_grad(*grad_e, e, pos, lp.sim, ne, lp.norm_u, -1.0 / tau);
        for (const Logit& l : ln) {
            const double w = std::exp((l.sim - m) / tau) / sn / tau;
            accum_sim_grad(*grad_e, e, l.u, l.sim, ne, l.norm_u, w);
        }
    }
    return loss;
}

double infonce_standard(std::span<const double> e, std::span<const double> pos, const Members& negs,
                        double tau, std::vector<double>* grad_e) {
    check_tau(tau);
    if (negs.empty()) throw ValidationError("infonce: negatives must be non-empty");
    Members pos_set{std::vector<double>(pos.begin(), pos.end())};
    return multi_positive(e, pos_set, negs, tau, grad_e);
}

double multi_positive(std::span<const double> e, const Members& pos, const Members& neg, double tau,
                      std::vector<double>* grad_e) {
    check_tau(tau);
    if (pos.empty() || neg.empty()) throw ValidationError("multi_positive: sets must be non-empty");
    const double ne = norm_of(e);
    if (ne == 0.0) throw ValidationError("multi_positive: zero query");

    const std::vector<Logit> lp = logits_for(e, pos, ne);
    const std::vector<Logit> ln = logits_for(e, neg, ne);

    double m = lp[0].sim;
    for (const Logit& l : lp) m = std::max(m, l.sim);
    for (const Logit& l : ln) m = std::max(m, l.sim);
    double sp = 0.0, sn = 0.0;
    for (const Logit& l : lp) sp += std::exp((l.sim - m) / tau);
    for (const Logit& l : ln) sn += std::exp((l.sim - m) / tau);
    // loss = log(SP + SN) - log(SP)
    const double loss = std::log(sp + sn) - std::log(sp);

    if (grad_e) {
        grad_e->assign(e.size(), 0.0);
        for (const Logit& l : lp) {
            const double w = std::exp((l.sim - m) / tau) / tau * (1.0 / (sp + sn) - 1.0 / sp);
            accum_sim_grad(*grad_e, e, l.u, l.sim, ne, l.norm_u, w);
        }
        for (const Logit& l : ln) {
            const double w = std::exp((l.sim - m) / tau) / tau / (sp + sn);
            accum_sim_grad(*grad_e, e, l.u, l.sim, ne, l.norm_u, w);
        }
    }
    return loss;
}

double hierarchical_loss(const std::vector<PlainLevelTerm>& terms, double tau) {
    if (terms.empty()) throw ValidationError("hierarchical_loss: no levels");
    double total = 0.0;
    for (const auto& t : terms) {
        if (t.weight < 0.0) throw ValidationError("hierarchical_loss: negative weight");
        if (t.weight == 0.0) continue;
        total += t.weight * multi_positive(*t.e, *t.pos, *t.neg, tau);
    }
    return total;
}

ad::VarId multi_positive_node(ad::Tape& tape, ad::VarId e, const std::vector<ad::VarId>& pos,
                              const std::vector<ad::VarId>& neg, double tau) {
    check_tau(tau);
    if (pos.empty() || neg.empty()) throw ValidationError("multi_positive: sets must be non-empty");
    std::vector<ad::VarId> pos_logits, all_logits;
    pos_logits.reserve(pos.size());
    all_logits.reserve(pos.size() + neg.size());
    for (ad::VarId p : pos) {
        ad::VarId l = tape.scale(tape.cosine(e, p), 1.0 / tau);
        pos_logits.push_back(l);
        all_logits.push_back(l);
    }
    for (ad::VarId n : neg) all_logits.push_back(tape.scale(tape.cosine(e, n), 1.0 / tau));
    return tape.sub(tape.logsumexp(tape.stack_scalars(all_logits)),
                    tape.logsumexp(tape.stack_scalars(pos_logits)));
}

ad::VarId infonce_as_printed_node(ad::Tape& tape, ad::VarId e, ad::VarId pos,
                                  const std::vector<ad::VarId>& neg, double tau) {
    check_tau(tau);
    if (neg.empty()) throw ValidationError("infonce: negatives must be non-empty");
    std::vector<ad::VarId> neg_logits;
    neg_logits.reserve(neg.size());
    for (ad::VarId n : neg) neg_logits.push_back(tape.scale(tape.cosine(e, n), 1.0 / tau));
    ad::VarId lp = tape.scale(tape.cosine(e, pos), 1.0 / tau);
    return tape.sub(tape.logsumexp(tape.stack_scalars(neg_logits)), lp);
}

ad::VarId hierarchical_node(ad::Tape& tape, const std::vector<LevelTerm>& terms, double tau) {
    if (terms.empty()) throw ValidationError("hierarchical_node: no levels");
    ad::VarId total = tape.constant(ad::Tensor::scalar(0.0));
    for (const auto& t : terms) {
        if (t.weight < 0.0) throw ValidationError("hierarchical_node: negative weight");
        if (t.weight == 0.0) continue;
        total = tape.add(total, tape.scale(multi_positive_node(tape, t.e, t.pos, t.neg, tau), t.weight));
    }
    return total;
}

}  // namespace semrecon::loss
