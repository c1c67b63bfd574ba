#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "damp/prompter.hpp"
#include "damp/tape.hpp"

namespace damp {

struct LossWeights {
    double lambda_c = 1.0;
    double lambda_i = 1.0;
    double tau = 0.01;

    void validate() const {
        if (lambda_c < 0 || lambda_i < 0) throw std::invalid_argument("LossWeights: lambdas must be >= 0");
        if (tau <= 0) throw std::invalid_argument("LossWeights: tau must be > 0");
    }
};

inline void validate_class_probabilities(const Matrix& probs, double tol = 1e-6) {
    if (probs.rows != 1 || probs.cols < 2)
        throw std::invalid_argument("class probabilities must be 1xK with K >= 2, got " + probs.shape_str());
    double sum = 0.0;
    for (double p : probs.data) {
        if (!(p >= 0.0 && p <= 1.0)) throw std::domain_error("class probability out of [0,1]: " + std::to_string(p));
        sum += p;
    }
    if (std::abs(sum - 1.0) > tol)
        throw std::domain_error("class probabilities sum to " + std::to_string(sum));
}

// cos(v, rows_k) for every row k; 1xK output.
inline Var cosine_to_rows(Tape& t, Var v, Var rows) {
    return t.matmul_nt(t.row_normalize(v), t.row_normalize(rows));
}

// softmax_k cos(v', s'_k)/tau — the cosine head over prompted embeddings.
inline Var classify_probs(Tape& t, Var v_prime, Var s_prime, double tau) {
    if (tau <= 0) throw std::invalid_argument("classify: tau must be > 0");
    const Matrix& s = t.value(s_prime);
    if (s.rows < 2) throw std::invalid_argument("classify: need K >= 2 classes, got " + std::to_string(s.rows));
    return t.softmax_rows(t.scale(cosine_to_rows(t, v_prime, s_prime), 1.0 / tau));
}

inline Matrix classify(const PromptedPair& pair, double tau) {
    Tape t(false);
    return t.value(classify_probs(t, t.constant(pair.v_prime), t.constant(pair.s_prime), tau));
}

// Same head on un-prompted embeddings.
inline Var zero_shot_probs(Tape& t, Var v, Var s_rows, double tau) { return classify_probs(t, v, s_rows, tau); }

inline Matrix zero_shot_classify(const Matrix& v, const Matrix& s_rows, double tau) {
    Tape t(false);
    return t.value(zero_shot_probs(t, t.constant(v), t.constant(s_rows), tau));
}

// ---- instance-discrimination contrastive loss ----
//
// sim(a,b) = (1/K) sum_k cos(s'_{a,k}, v'_b) / tau. Per anchor a the loss is
// -log( exp(sim(a,a)) / sum_b exp(sim(a,b)) ); the denominator includes the
// anchor term, and the batch value is the mean over anchors so lambda_c stays
// batch-size independent.
struct InstanceEmbeddings {
    Var v_prime;  // 1 x D
    Var s_prime;  // K x D
};

inline Var l_idc(Tape& t, const std::vector<InstanceEmbeddings>& batch, double tau) {
    if (batch.empty()) throw std::invalid_argument("l_idc: empty batch");
    if (tau <= 0) throw std::invalid_argument("l_idc: tau must be > 0");
    int k_classes = t.value(batch[0].s_prime).rows;
    std::vector<Var> text_rows, vis_rows;
    text_rows.reserve(batch.size());
    vis_rows.reserve(batch.size());
    for (const InstanceEmbeddings& e : batch) {
        // sum_k cos(s'_k, v') = (sum_k normalize(s'_k)) . normalize(v')
        text_rows.push_back(t.colsum(t.row_normalize(e.s_prime)));
        vis_rows.push_back(t.row_normalize(e.v_prime));
    }
    Var sims = t.scale(t.matmul_nt(t.concat_rows(text_rows), t.concat_rows(vis_rows)),
                       1.0 / (static_cast<double>(k_classes) * tau));
    Var per_anchor = t.sub(t.logsumexp_rows(sims), t.diag(sims));
    return t.mean_all(per_anchor);
}

inline double l_idc(const std::vector<PromptedPair>& batch, double tau) {
    Tape t(false);
    std::vector<InstanceEmbeddings> vars;
    vars.reserve(batch.size());
    for (const PromptedPair& p : batch) vars.push_back({t.constant(p.v_prime), t.constant(p.s_prime)});
    return t.scalar_value(l_idc(t, vars, tau));
}

// ---- cross-entropy terms ----

namespace detail {

inline void check_labels(const std::vector<Var>& probs, const std::vector<int>& labels, const Tape& t,
                         const char* op) {
    if (probs.size() != labels.size())
        throw std::invalid_argument(std::string(op) + ": " + std::to_string(probs.size()) + " prob rows vs " +
                                    std::to_string(labels.size()) + " labels");
    for (size_t i = 0; i < labels.size(); ++i) {
        int k = t.value(probs[i]).cols;
        if (labels[i] < 0 || labels[i] >= k)
            throw std::out_of_range(std::string(op) + ": label " + std::to_string(labels[i]) +
                                    " out of range [0," + std::to_string(k) + ")");
    }
}

// Mean over the whole batch of -log p[label], with per-sample inclusion mask.
// Excluded samples contribute zero but stay in the denominator.
inline Var masked_mean_ce(Tape& t, const std::vector<Var>& probs, const std::vector<int>& labels,
                          const std::vector<bool>& include) {
    std::vector<Var> terms;
    for (size_t i = 0; i < probs.size(); ++i) {
        if (!include[i]) continue;
        terms.push_back(t.neg(t.log_floor(t.pick(probs[i], 0, labels[i]))));
    }
    if (terms.empty()) return t.scalar(0.0);
    return t.scale(t.sum_all(t.concat_rows(terms)), 1.0 / static_cast<double>(probs.size()));
}

}  // namespace detail

// Source semantic-consistency: cross-entropy of strong-view predictions at the
// ground-truth labels.
inline Var l_sc_source(Tape& t, const std::vector<Var>& strong_probs, const std::vector<int>& labels) {
    detail::check_labels(strong_probs, labels, t, "l_sc_source");
    return detail::masked_mean_ce(t, strong_probs, labels, std::vector<bool>(strong_probs.size(), true));
}

// Target semantic-consistency: strong-view cross-entropy at pseudo-labels,
// gated by the weak-view confidence at the pseudo-label class (>= T includes).
inline Var l_sc_target(Tape& t, const std::vector<Var>& strong_probs, const std::vector<int>& pseudo_labels,
                       const std::vector<double>& weak_confidence, double threshold) {
    detail::check_labels(strong_probs, pseudo_labels, t, "l_sc_target");
    if (weak_confidence.size() != strong_probs.size())
        throw std::invalid_argument("l_sc_target: confidence count mismatch");
    std::vector<bool> include(strong_probs.size());
    for (size_t i = 0; i < include.size(); ++i) include[i] = weak_confidence[i] >= threshold;
    return detail::masked_mean_ce(t, strong_probs, pseudo_labels, include);
}

// Weak-view supervised losses (same gating convention on the target side).
inline Var l_sup_source(Tape& t, const std::vector<Var>& weak_probs, const std::vector<int>& labels) {
    detail::check_labels(weak_probs, labels, t, "l_sup_source");
    return detail::masked_mean_ce(t, weak_probs, labels, std::vector<bool>(weak_probs.size(), true));
}

inline Var l_sup_target(Tape& t, const std::vector<Var>& weak_probs, const std::vector<int>& pseudo_labels,
                        double threshold) {
    detail::check_labels(weak_probs, pseudo_labels, t, "l_sup_target");
    std::vector<bool> include(weak_probs.size());
    for (size_t i = 0; i < include.size(); ++i)
        include[i] = t.value(weak_probs[i])(0, pseudo_labels[i]) >= threshold;
    return detail::masked_mean_ce(t, weak_probs, pseudo_labels, include);
}

// ---- information maximization ----
//
// H_cond - H_marg: mean per-sample entropy minus entropy of the mean
// prediction. Concavity of entropy makes this <= 0, with equality exactly when
// all predictions coincide. Minimizing it pushes predictions locally confident
// and globally diverse.
inline Var l_im(Tape& t, const std::vector<Var>& target_probs) {
    if (target_probs.empty()) throw std::invalid_argument("l_im: empty prediction list");
    Var p = t.concat_rows(target_probs);
    int batch = t.value(p).rows;
    Var plogp = t.hadamard(p, t.log_floor(p));
    Var h_cond = t.neg(t.mean_all(t.rowsum(plogp)));
    Var p_mean = t.scale(t.colsum(p), 1.0 / static_cast<double>(batch));
    Var h_marg = t.neg(t.sum_all(t.hadamard(p_mean, t.log_floor(p_mean))));
    return t.sub(h_cond, h_marg);
}

inline double l_im(const std::vector<Matrix>& target_probs) {
    Tape t(false);
    std::vector<Var> vars;
    vars.reserve(target_probs.size());
    for (const Matrix& m : target_probs) vars.push_back(t.constant(m));
    return t.scalar_value(l_im(t, vars));
}

// ---- total objective ----

inline Var l_all(Tape& t, Var sup, Var sc, Var idc, Var im, const LossWeights& w) {
    w.validate();
    Var total = t.add(sup, sc);
    total = t.add(total, t.scale(idc, w.lambda_c));
    return t.add(total, t.scale(im, w.lambda_i));
}

}  // namespace damp
