#pragma once

#include <span>
#include <vector>

#include "semrecon/tape.hpp"

namespace semrecon::loss {

using Members = std::vector<std::vector<double>>;

enum class ContrastiveVariant { as_printed_eq1, standard_infonce, multi_positive };

struct ContrastiveConfig {
    double temperature = 0.07;
    ContrastiveVariant variant = ContrastiveVariant::multi_positive;
};

// a.b / (|a||b|); throws on zero-norm input
double cosine_sim(std::span<const double> a, std::span<const double> b);

// -log[ exp(sim(e,pos)/tau) / sum_n exp(sim(e,n)/tau) ]
// denominator over negatives only, exactly as printed; log-sum-exp stabilized
double infonce_as_printed(std::span<const double> e, std::span<const double> pos, const Members& negs,
                          double tau, std::vector<double>* grad_e = nullptr);

// canonical variant: positive term included in the denominator
double infonce_standard(std::span<const double> e, std::span<const double> pos, const Members& negs,
                        double tau, std::vector<double>* grad_e = nullptr);

// -log[ SP / (SP + SN) ] with SP = sum_p exp(sim(e,p)/tau),
// SN = sum_n exp(sim(e,n)/tau)
double multi_positive(std::span<const double> e, const Members& pos, const Members& neg, double tau,
                      std::vector<double>* grad_e = nullptr);

struct PlainLevelTerm {
    const std::vector<double>* e;
    const Members* pos;
    const Members* neg;
    double weight;
};
double hierarchical_loss(const std::vector<PlainLevelTerm>& terms, double tau);

// --- tape builders (differentiable w.r.t. the query and any member that is a
// grad-requiring node; prior members passed as constants stay fixed) ---

ad::VarId multi_positive_node(ad::Tape& tape, ad::VarId e, const std::vector<ad::VarId>& pos,
                              const std::vector<ad::VarId>& neg, double tau);

ad::VarId infonce_as_printed_node(ad::Tape& tape, ad::VarId e, ad::VarId pos,
                                  const std::vector<ad::VarId>& neg, double tau);

struct LevelTerm {
    ad::VarId e;
    std::vector<ad::VarId> pos, neg;
    double weight;
};
ad::VarId hierarchical_node(ad::Tape& tape, const std::vector<LevelTerm>& terms, double tau);

}  // namespace semrecon::loss
