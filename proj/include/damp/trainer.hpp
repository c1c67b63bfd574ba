#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "damp/config.hpp"
#include "damp/data.hpp"
#include "damp/encoder.hpp"
#include "damp/losses.hpp"
#include "damp/prompt_bank.hpp"
#include "damp/prompter.hpp"
#include "damp/pseudo_label.hpp"

namespace damp {

// Per-epoch cosine annealing from lr0 at epoch 0 down to 0 at the final epoch.
inline double cosine_lr(int epoch, int total_epochs, double lr0) {
    if (total_epochs < 1) throw std::invalid_argument("cosine_lr: total_epochs must be >= 1");
    if (epoch < 0) throw std::invalid_argument("cosine_lr: negative epoch");
    double f = std::min(1.0, static_cast<double>(epoch) / static_cast<double>(total_epochs));
    return lr0 * 0.5 * (1.0 + std::cos(M_PI * f));
}

// Adaptive-moment optimizer over exactly the registered trainable set.
struct AdamOptimizer {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int steps = 0;
    std::vector<Matrix> m, v;

    void init(const ParamSet& params) {
        steps = 0;
        m.clear();
        v.clear();
        for (const ParamRef& p : params) {
            m.emplace_back(p.value->rows, p.value->cols);
            v.emplace_back(p.value->rows, p.value->cols);
        }
    }

    void step(const ParamSet& params, const std::vector<Matrix>& grads, double lr) {
        if (params.size() != grads.size() || params.size() != m.size())
            throw std::invalid_argument("AdamOptimizer: parameter/gradient count mismatch");
        ++steps;
        double bc1 = 1.0 - std::pow(beta1, steps);
        double bc2 = 1.0 - std::pow(beta2, steps);
        for (size_t i = 0; i < params.size(); ++i) {
            Matrix& theta = *params[i].value;
            const Matrix& g = grads[i];
            check_shape(theta.same_shape(g), "AdamOptimizer.step", theta, g);
            for (size_t j = 0; j < theta.data.size(); ++j) {
                double gj = g.data[j];
                m[i].data[j] = beta1 * m[i].data[j] + (1.0 - beta1) * gj;
                v[i].data[j] = beta2 * v[i].data[j] + (1.0 - beta2) * gj * gj;
                theta.data[j] -= lr * (m[i].data[j] / bc1) / (std::sqrt(v[i].data[j] / bc2) + eps);
            }
        }
    }

    void save(BinWriter& w) const {
        w.u32(static_cast<uint32_t>(steps));
        w.u32(static_cast<uint32_t>(m.size()));
        for (size_t i = 0; i < m.size(); ++i) {
            w.matrix(m[i]);
            w.matrix(v[i]);
        }
    }

    void load(BinReader& r) {
        steps = static_cast<int>(r.u32());
        uint32_t n = r.u32();
        if (n != m.size()) throw std::runtime_error("AdamOptimizer::load: moment count mismatch");
        for (uint32_t i = 0; i < n; ++i) {
            m[i] = r.matrix();
            v[i] = r.matrix();
        }
    }
};

// ---- evaluation ----

struct EvalResult {
    double accuracy = 0.0;
    Matrix confusion;  // K x K integer counts, rows = true class
    std::vector<double> per_class_accuracy;
    int total = 0;
};

inline EvalResult evaluate_classifier(const PromptBank& bank, const FrozenTextEncoder& text_enc,
                                      const FrozenImageEncoder& img_enc, const MutualPrompter& prompter,
                                      const std::vector<Image>& xs, const std::vector<int>& ys, double tau,
                                      bool visual_on = true, bool textual_on = true) {
    if (xs.size() != ys.size()) throw std::invalid_argument("evaluate_classifier: image/label count mismatch");
    int K = bank.classes();
    std::vector<EncodedText> texts;
    texts.reserve(K);
    for (int k = 0; k < K; ++k) {
        auto asm_k = bank.assemble_prompt(k);
        texts.push_back(text_enc.encode(*asm_k.contexts, asm_k.class_tokens));
    }
    EvalResult res;
    res.confusion = Matrix(K, K);
    res.total = static_cast<int>(xs.size());
    int correct = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
        PromptedPair pair = prompter.prompt_pair(img_enc.encode(xs[i]), texts, visual_on, textual_on);
        Matrix probs = classify(pair, tau);
        int pred = static_cast<int>(std::max_element(probs.data.begin(), probs.data.end()) - probs.data.begin());
        res.confusion(ys[i], pred) += 1.0;
        if (pred == ys[i]) ++correct;
    }
    res.accuracy = xs.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(xs.size());
    res.per_class_accuracy.resize(K, 0.0);
    for (int k = 0; k < K; ++k) {
        double row_total = 0.0;
        for (int j = 0; j < K; ++j) row_total += res.confusion(k, j);
        res.per_class_accuracy[k] = row_total > 0 ? res.confusion(k, k) / row_total : 0.0;
    }
    return res;
}

// Zero-shot baseline: fixed naive prompts against raw visual embeddings.
inline double naive_zero_shot_accuracy(const PromptBank& bank, const FrozenTextEncoder& text_enc,
                                       const FrozenImageEncoder& img_enc, const std::vector<Image>& xs,
                                       const std::vector<int>& ys, double tau) {
    Matrix naive_s = naive_text_embeddings(bank, text_enc);
    int correct = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
        Matrix probs = zero_shot_classify(img_enc.encode(xs[i]).v, naive_s, tau);
        int pred = static_cast<int>(std::max_element(probs.data.begin(), probs.data.end()) - probs.data.begin());
        if (pred == ys[i]) ++correct;
    }
    return xs.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(xs.size());
}

// ---- step structures ----

struct LossBreakdown {
    double sup_s = 0.0;
    std::optional<double> sup_t, sc_s, sc_t, idc, im;
    double total = 0.0;

    json to_json() const {
        json j;
        j["sup_s"] = sup_s;
        if (sup_t) j["sup_t"] = *sup_t;
        if (sc_s) j["sc_s"] = *sc_s;
        if (sc_t) j["sc_t"] = *sc_t;
        if (idc) j["idc"] = *idc;
        if (im) j["im"] = *im;
        j["total"] = total;
        return j;
    }
};

// One step's already-augmented views. Target entries stay empty when the mode
// has no target domain; target batches never carry ground-truth labels.
struct FixedBatch {
    std::vector<std::vector<Image>> src_weak, src_strong;
    std::vector<std::vector<int>> src_labels;
    std::vector<Image> tgt_weak, tgt_strong;
    std::vector<int> tgt_pseudo;
};

struct MetricsRecord {
    int epoch = 0;
    double lr = 0.0;
    double alpha = 0.0;
    LossBreakdown losses;
    std::optional<double> target_accuracy;
    std::optional<double> pseudo_accept_rate;
    std::optional<double> pseudo_acc_naive, pseudo_acc_model, pseudo_acc_ensemble;

    json to_json() const {
        json j;
        j["epoch"] = epoch;
        j["lr"] = lr;
        j["alpha"] = alpha;
        j["loss"] = losses.to_json();
        if (target_accuracy) j["target_accuracy"] = *target_accuracy;
        if (pseudo_accept_rate) {
            json p;
            p["accept_rate"] = *pseudo_accept_rate;
            if (pseudo_acc_naive) p["acc_naive"] = *pseudo_acc_naive;
            if (pseudo_acc_model) p["acc_model"] = *pseudo_acc_model;
            if (pseudo_acc_ensemble) p["acc_ensemble"] = *pseudo_acc_ensemble;
            j["pseudo"] = p;
        }
        return j;
    }
};

enum class LossSelector { probe, sup, sc, idc, im, all };

inline LossSelector loss_selector_from_string(const std::string& s) {
    if (s == "probe") return LossSelector::probe;
    if (s == "sup") return LossSelector::sup;
    if (s == "sc") return LossSelector::sc;
    if (s == "idc") return LossSelector::idc;
    if (s == "im") return LossSelector::im;
    if (s == "all") return LossSelector::all;
    throw std::invalid_argument("unknown loss selector: " + s);
}

struct GradCheckGroup {
    std::string name;
    double max_rel_err = 0.0;
    int coords = 0;
};

struct GradCheckReport {
    std::vector<GradCheckGroup> groups;
    double worst() const {
        double w = 0.0;
        for (const auto& g : groups) w = std::max(w, g.max_rel_err);
        return w;
    }
};

// Holdout split with a read counter, proving the unseen domain stays untouched
// until evaluation.
struct CountingSet {
    std::vector<Image> x;
    std::vector<int> y;
    mutable size_t access_count = 0;

    const Image& image(size_t i) const {
        ++access_count;
        return x[i];
    }
};

// ---- trainer ----

class Trainer {
public:
    explicit Trainer(RunConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        text_enc_ = FrozenTextEncoder::init(cfg_.encoder);
        img_enc_ = FrozenImageEncoder::init(cfg_.encoder);
        bank_ = PromptBank::init(cfg_.context_len, cfg_.encoder.joint_dim,
                                 ClassNames::synthetic(cfg_.data.classes), cfg_.seed ^ fnv1a("prompt_bank"),
                                 cfg_.encoder.max_text_len);
        PrompterConfig pc = cfg_.prompter;
        pc.seed = cfg_.seed ^ fnv1a("prompter");
        prompter_ = MutualPrompter::init(pc, cfg_.encoder.joint_dim);

        DomainDatasetSpec base = cfg_.data.base_spec();
        for (size_t i = 0; i < cfg_.data.source_shifts.size(); ++i) {
            sources_.push_back(generate_domain(base, cfg_.data.source_shifts[i], "source" + std::to_string(i),
                                               cfg_.data.per_class_source));
        }
        if (cfg_.data.target_shift) {
            LabeledSet t = generate_domain(base, *cfg_.data.target_shift, "target", cfg_.data.per_class_target);
            target_.x = std::move(t.x);
            target_.eval_labels_ = std::move(t.y);
        }
        if (cfg_.mode == RunMode::dg) {
            LabeledSet h = generate_domain(base, *cfg_.data.dg_holdout_shift, "holdout",
                                           cfg_.data.per_class_target);
            holdout_.x = std::move(h.x);
            holdout_.y = std::move(h.y);
        }

        params_.push_back({"p", &bank_.contexts()});
        prompter_.collect_params(params_, visual_on(), textual_on());
        opt_.init(params_);
        rng_ = named_rng(cfg_.seed, "train");
        text_fp_ = weights_fingerprint(text_enc_.all_weights());
        img_fp_ = weights_fingerprint(img_enc_.all_weights());
    }

    const RunConfig& config() const { return cfg_; }
    PromptBank& bank() { return bank_; }
    MutualPrompter& prompter() { return prompter_; }
    const FrozenTextEncoder& text_encoder() const { return text_enc_; }
    const FrozenImageEncoder& image_encoder() const { return img_enc_; }
    const ParamSet& params() const { return params_; }
    const std::vector<LabeledSet>& sources() const { return sources_; }
    const TargetSet& target() const { return target_; }
    const CountingSet& holdout() const { return holdout_; }
    const std::vector<PseudoLabelRecord>& pseudo_labels() const { return pseudo_; }
    const std::vector<MetricsRecord>& history() const { return history_; }
    int epoch() const { return epoch_; }
    std::mt19937_64& rng() { return rng_; }

    bool has_target() const { return !target_.x.empty(); }
    bool visual_on() const { return cfg_.ablation.vp && cfg_.prompter.strategy != PromptStrategy::none; }
    bool textual_on() const { return cfg_.ablation.itp && cfg_.prompter.strategy != PromptStrategy::none; }

    bool frozen_intact() const {
        return weights_fingerprint(text_enc_.all_weights()) == text_fp_ &&
               weights_fingerprint(img_enc_.all_weights()) == img_fp_;
    }

    int iterations_per_epoch() const {
        if (cfg_.iterations_per_epoch > 0) return cfg_.iterations_per_epoch;
        size_t n = sources_[0].size();
        for (const LabeledSet& s : sources_) n = std::min(n, s.size());
        if (has_target()) n = std::min(n, target_.size());
        return static_cast<int>((n + cfg_.batch_size - 1) / cfg_.batch_size);
    }

    // ---- loss construction over a fixed batch ----
    //
    // Shared by the training step, the gradient checker, and the tests. Builds
    // the full objective on the tape; encoder weights enter as constants,
    // image encodings as plain data.
    struct LossVars {
        Var sup, sc, idc, im, total;
        LossBreakdown values;
    };

    LossVars build_losses(Tape& t, const MutualPrompter::Bound& bound, Var p_var, const FixedBatch& fb) const {
        if (cfg_.mode == RunMode::dg && !fb.tgt_weak.empty())
            throw std::logic_error("build_losses: target data reached the dg training path");
        double tau = cfg_.weights.tau;
        double T = cfg_.confidence_threshold;
        int K = bank_.classes();

        std::vector<Var> s_parts;
        Var s_tilde_sum;
        for (int k = 0; k < K; ++k) {
            auto asm_k = bank_.assemble_prompt(k);
            TextVars tv = text_enc_.encode(t, p_var, asm_k.class_tokens);
            s_parts.push_back(tv.s);
            s_tilde_sum = k == 0 ? tv.s_tilde : t.add(s_tilde_sum, tv.s_tilde);
        }
        Var s_rows = t.concat_rows(s_parts);
        Var s_tilde_mean = t.scale(s_tilde_sum, 1.0 / static_cast<double>(K));

        auto embed = [&](const Image& img) {
            EncodedImage e = img_enc_.encode(img);
            auto pair = prompter_.prompt_pair(t, bound, t.constant(e.v), t.constant(e.v_tilde), s_rows,
                                              s_tilde_mean, visual_on(), textual_on());
            return pair;
        };
        auto probs_of = [&](const MutualPrompter::PairVars& pair) {
            return classify_probs(t, pair.v_prime, pair.s_prime, tau);
        };

        bool use_sc = cfg_.ablation.l_sc;
        bool use_idc = cfg_.ablation.l_idc;
        bool use_im = cfg_.ablation.l_im && has_target() && cfg_.mode != RunMode::dg;
        int m = static_cast<int>(fb.src_weak.size());

        Var sup_s, sc_s, idc_s;
        for (int d = 0; d < m; ++d) {
            std::vector<Var> weak_probs, strong_probs;
            std::vector<InstanceEmbeddings> weak_pairs;
            for (const Image& img : fb.src_weak[d]) {
                auto pair = embed(img);
                weak_probs.push_back(probs_of(pair));
                if (use_idc) weak_pairs.push_back({pair.v_prime, pair.s_prime});
            }
            if (use_sc)
                for (const Image& img : fb.src_strong[d]) strong_probs.push_back(probs_of(embed(img)));

            Var d_sup = l_sup_source(t, weak_probs, fb.src_labels[d]);
            sup_s = d == 0 ? d_sup : t.add(sup_s, d_sup);
            if (use_sc) {
                Var d_sc = l_sc_source(t, strong_probs, fb.src_labels[d]);
                sc_s = d == 0 ? d_sc : t.add(sc_s, d_sc);
            }
            if (use_idc) {
                Var d_idc = l_idc(t, weak_pairs, tau);
                idc_s = d == 0 ? d_idc : t.add(idc_s, d_idc);
            }
        }
        // source domains enter with equal weight
        double inv_m = 1.0 / static_cast<double>(m);
        sup_s = t.scale(sup_s, inv_m);
        if (use_sc) sc_s = t.scale(sc_s, inv_m);
        if (use_idc) idc_s = t.scale(idc_s, inv_m);

        LossVars out;
        out.values.sup_s = t.scalar_value(sup_s);
        Var sup = sup_s, sc = use_sc ? sc_s : t.scalar(0.0);
        Var idc = use_idc ? t.scale(idc_s, cfg_.idc_source_weight) : t.scalar(0.0);
        Var im = t.scalar(0.0);
        if (use_sc) out.values.sc_s = t.scalar_value(sc_s);
        if (use_idc) out.values.idc = t.scalar_value(idc);

        if (!fb.tgt_weak.empty()) {
            std::vector<Var> weak_probs, strong_probs;
            std::vector<InstanceEmbeddings> weak_pairs;
            for (const Image& img : fb.tgt_weak) {
                auto pair = embed(img);
                weak_probs.push_back(probs_of(pair));
                if (use_idc) weak_pairs.push_back({pair.v_prime, pair.s_prime});
            }
            if (use_sc)
                for (const Image& img : fb.tgt_strong) strong_probs.push_back(probs_of(embed(img)));

            Var sup_t = l_sup_target(t, weak_probs, fb.tgt_pseudo, T);
            sup = t.add(sup, sup_t);
            out.values.sup_t = t.scalar_value(sup_t);
            if (use_sc) {
                std::vector<double> weak_conf(weak_probs.size());
                for (size_t i = 0; i < weak_probs.size(); ++i)
                    weak_conf[i] = t.value(weak_probs[i])(0, fb.tgt_pseudo[i]);
                Var sc_t = l_sc_target(t, strong_probs, fb.tgt_pseudo, weak_conf, T);
                sc = t.add(sc, sc_t);
                out.values.sc_t = t.scalar_value(sc_t);
            }
            if (use_idc) {
                Var idc_t = t.scale(l_idc(t, weak_pairs, tau), cfg_.idc_target_weight);
                idc = t.add(idc, idc_t);
                out.values.idc = t.scalar_value(idc);
            }
            if (use_im) {
                im = l_im(t, weak_probs);
                out.values.im = t.scalar_value(im);
            }
        }

        out.sup = sup;
        out.sc = sc;
        out.idc = idc;
        out.im = im;
        out.total = l_all(t, sup, sc, idc, im, cfg_.weights);
        out.values.total = t.scalar_value(out.total);
        return out;
    }

    // Augments one batch of raw indices into fixed views.
    FixedBatch augment_batch(const std::vector<std::vector<size_t>>& src_idx,
                             const std::vector<size_t>& tgt_idx) {
        FixedBatch fb;
        bool use_sc = cfg_.ablation.l_sc;
        fb.src_weak.resize(src_idx.size());
        fb.src_strong.resize(src_idx.size());
        fb.src_labels.resize(src_idx.size());
        for (size_t d = 0; d < src_idx.size(); ++d) {
            for (size_t i : src_idx[d]) {
                fb.src_weak[d].push_back(weak_augment(sources_[d].x[i], rng_));
                if (use_sc) fb.src_strong[d].push_back(strong_augment(sources_[d].x[i], rng_, cfg_.strong_aug));
                fb.src_labels[d].push_back(sources_[d].y[i]);
            }
        }
        for (size_t i : tgt_idx) {
            fb.tgt_weak.push_back(weak_augment(target_.x[i], rng_));
            if (use_sc) fb.tgt_strong.push_back(strong_augment(target_.x[i], rng_, cfg_.strong_aug));
            if (pseudo_.empty())
                throw std::logic_error("augment_batch: target batch before pseudo-label refresh");
            fb.tgt_pseudo.push_back(pseudo_[i].hard_label);
        }
        return fb;
    }

    // One optimization step on already-fixed views. Aborts (without touching
    // parameters) if any loss term is non-finite.
    LossBreakdown train_step_fixed(const FixedBatch& fb, double lr) {
        Tape t;
        std::vector<TapeBinding> bindings;
        Binder binder(t, &bindings);
        Var p_var = binder(bank_.contexts());
        auto bound = prompter_.bind(t, &bindings);
        LossVars lv = build_losses(t, bound, p_var, fb);

        auto finite = [](const std::optional<double>& v) { return !v || std::isfinite(*v); };
        if (!std::isfinite(lv.values.sup_s) || !std::isfinite(lv.values.total) || !finite(lv.values.sup_t) ||
            !finite(lv.values.sc_s) || !finite(lv.values.sc_t) || !finite(lv.values.idc) ||
            !finite(lv.values.im)) {
            throw std::runtime_error("train_step: non-finite loss, breakdown " + lv.values.to_json().dump());
        }

        t.backward(lv.total);
        std::vector<Matrix> grads = collect_grads(t, bindings);
        opt_.step(params_, grads, lr);
        return lv.values;
    }

    LossBreakdown train_step(const std::vector<std::vector<size_t>>& src_idx, const std::vector<size_t>& tgt_idx,
                             double lr) {
        return train_step_fixed(augment_batch(src_idx, tgt_idx), lr);
    }

    // Refreshes pseudo-labels for the whole target set on fresh weak views.
    void refresh_pseudo_labels(double alpha) {
        std::vector<Image> weak;
        weak.reserve(target_.x.size());
        for (const Image& img : target_.x) weak.push_back(weak_augment(img, rng_));
        pseudo_ = label_batch(weak, bank_, text_enc_, img_enc_, prompter_, cfg_.weights.tau, alpha,
                              cfg_.confidence_threshold);
    }

    EvalResult evaluate_target() const {
        return evaluate_classifier(bank_, text_enc_, img_enc_, prompter_, target_.x, target_.eval_labels(),
                                   cfg_.weights.tau, visual_on(), textual_on());
    }

    EvalResult evaluate_holdout() const {
        std::vector<Image> xs;
        xs.reserve(holdout_.x.size());
        for (size_t i = 0; i < holdout_.x.size(); ++i) xs.push_back(holdout_.image(i));
        return evaluate_classifier(bank_, text_enc_, img_enc_, prompter_, xs, holdout_.y, cfg_.weights.tau,
                                   visual_on(), textual_on());
    }

    // Full training loop (Algorithm-style): per epoch refresh pseudo-labels,
    // run the configured number of steps, evaluate, emit one metrics record.
    // stop_after_epoch pauses the run early (schedules still span cfg.epochs),
    // leaving a state a checkpoint can resume from.
    void train(const std::function<void(const MetricsRecord&)>& on_epoch = nullptr,
               const std::string& checkpoint_path = "", int stop_after_epoch = 0) {
        int n_steps = iterations_per_epoch();
        int last = stop_after_epoch > 0 ? std::min(stop_after_epoch, cfg_.epochs) : cfg_.epochs;
        for (int ep = epoch_ + 1; ep <= last; ++ep) {
            epoch_ = ep;
            double alpha = alpha_schedule(ep, cfg_.epochs, cfg_.alpha_kind);
            MetricsRecord rec;
            rec.epoch = ep;
            rec.alpha = alpha;
            rec.lr = cosine_lr(ep - 1, cfg_.epochs, cfg_.learning_rate);

            if (has_target()) {
                refresh_pseudo_labels(alpha);
                rec.pseudo_accept_rate = pseudo_accept_rate();
                auto acc = pseudo_accuracies();
                rec.pseudo_acc_naive = acc[0];
                rec.pseudo_acc_model = acc[1];
                rec.pseudo_acc_ensemble = acc[2];
            }

            std::vector<std::vector<size_t>> src_perms;
            for (const LabeledSet& s : sources_) src_perms.push_back(epoch_perm(s.size()));
            std::vector<size_t> tgt_perm = has_target() ? epoch_perm(target_.size()) : std::vector<size_t>{};

            LossBreakdown sum;
            int counted = 0;
            for (int it = 0; it < n_steps; ++it) {
                std::vector<std::vector<size_t>> src_idx;
                for (size_t d = 0; d < sources_.size(); ++d)
                    src_idx.push_back(batch_slice(src_perms[d], it, cfg_.batch_size));
                std::vector<size_t> tgt_idx =
                    has_target() ? batch_slice(tgt_perm, it, cfg_.batch_size) : std::vector<size_t>{};
                LossBreakdown lb = train_step(src_idx, tgt_idx, rec.lr);
                accumulate(sum, lb);
                ++counted;
            }
            rec.losses = mean_of(sum, counted);
            if (has_target()) rec.target_accuracy = evaluate_target().accuracy;

            history_.push_back(rec);
            if (on_epoch) on_epoch(rec);
            if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path);
        }
        if (!frozen_intact())
            throw std::runtime_error("train: frozen encoder weights changed during training");
    }

    double pseudo_accept_rate() const {
        if (pseudo_.empty()) return 0.0;
        size_t n = 0;
        for (const auto& r : pseudo_) n += r.accepted ? 1 : 0;
        return static_cast<double>(n) / static_cast<double>(pseudo_.size());
    }

    // naive / model / ensemble hard-label accuracy against held-out labels
    std::array<double, 3> pseudo_accuracies() const {
        const std::vector<int>& truth = target_.eval_labels();
        if (pseudo_.empty() || truth.size() != pseudo_.size()) return {0.0, 0.0, 0.0};
        auto argmax = [](const std::vector<double>& v) {
            return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
        };
        std::array<double, 3> acc{0, 0, 0};
        for (size_t i = 0; i < pseudo_.size(); ++i) {
            if (argmax(pseudo_[i].naive_soft) == truth[i]) acc[0] += 1;
            if (argmax(pseudo_[i].model_soft) == truth[i]) acc[1] += 1;
            if (pseudo_[i].hard_label == truth[i]) acc[2] += 1;
        }
        for (double& a : acc) a /= static_cast<double>(pseudo_.size());
        return acc;
    }

    // ---- checkpointing ----

    void save_checkpoint(const std::string& path) const {
        BinWriter w(path);
        w.header(ContainerKind::checkpoint, 1);
        w.str(to_json(cfg_).dump());
        w.u32(static_cast<uint32_t>(epoch_));
        w.u32(static_cast<uint32_t>(params_.size()));
        for (const ParamRef& p : params_) {
            w.str(p.name);
            w.matrix(*p.value);
        }
        opt_.save(w);
        std::ostringstream rng_state;
        rng_state << rng_;
        w.str(rng_state.str());
        w.finish();
    }

    void load_checkpoint(const std::string& path) {
        BinReader r(path);
        r.expect_kind(ContainerKind::checkpoint, 1, "checkpoint");
        r.str();  // config snapshot, informational
        epoch_ = static_cast<int>(r.u32());
        uint32_t n = r.u32();
        if (n != params_.size())
            throw std::runtime_error("load_checkpoint: " + std::to_string(n) + " parameters in file, registry has " +
                                     std::to_string(params_.size()));
        for (ParamRef& p : params_) {
            std::string name = r.str();
            if (name != p.name)
                throw std::runtime_error("load_checkpoint: parameter '" + name + "' where '" + p.name +
                                         "' expected (config mismatch)");
            *p.value = r.matrix();
        }
        opt_.load(r);
        std::istringstream rng_state(r.str());
        rng_state >> rng_;
    }

    // ---- gradient checking ----

    // Central differences against the analytic gradient on a fixed micro-batch,
    // a sampled subset of coordinates per trainable tensor. One backward pass
    // supplies the analytic gradients of every group (the quadratic probe runs
    // per group, since its loss is group-local).
    GradCheckReport grad_check(LossSelector selector, int coords_per_tensor = 4, double eps = 1e-5,
                               uint64_t sample_seed = 0, int micro_batch = 3) {
        if (eps <= 0.0) throw std::invalid_argument("grad_check: eps must be > 0");
        if (coords_per_tensor < 1) throw std::invalid_argument("grad_check: need at least one coordinate");
        FixedBatch fb = fixed_micro_batch(sample_seed, micro_batch);

        std::vector<Matrix> analytic(params_.size());
        if (selector == LossSelector::probe) {
            for (size_t i = 0; i < params_.size(); ++i) {
                Tape t;
                auto [_, root] = build_selected(t, fb, selector, &params_[i]);
                t.backward(root);
                analytic[i] = t.grad(last_bindings_[0].var);
            }
        } else {
            Tape t;
            auto [_, root] = build_selected(t, fb, selector, nullptr);
            t.backward(root);
            for (size_t i = 0; i < params_.size(); ++i) {
                bool found = false;
                for (const TapeBinding& b : last_bindings_)
                    if (b.param == params_[i].value) {
                        analytic[i] = t.grad(b.var);
                        found = true;
                        break;
                    }
                if (!found)
                    throw std::logic_error("grad_check: parameter '" + params_[i].name + "' was never bound");
            }
        }

        GradCheckReport report;
        auto sample_rng = named_rng(sample_seed, "grad_check_coords");
        for (size_t i = 0; i < params_.size(); ++i) {
            const ParamRef& p = params_[i];
            auto loss_value = [&]() {
                Tape t(false);
                return build_selected(t, fb, selector, &p).first;
            };
            GradCheckGroup group;
            group.name = p.name;
            int n = static_cast<int>(p.value->size());
            int coords = std::min(coords_per_tensor, n);
            std::uniform_int_distribution<int> pick(0, n - 1);
            for (int c = 0; c < coords; ++c) {
                int idx = coords == n ? c : pick(sample_rng);
                double orig = p.value->data[idx];
                p.value->data[idx] = orig + eps;
                double fp = loss_value();
                p.value->data[idx] = orig - eps;
                double fm = loss_value();
                p.value->data[idx] = orig;
                double fd = (fp - fm) / (2.0 * eps);
                double a = analytic[i].data[idx];
                double err = std::abs(a - fd) / (std::abs(a) + std::abs(fd) + 1e-6);
                group.max_rel_err = std::max(group.max_rel_err, err);
                ++group.coords;
            }
            report.groups.push_back(group);
        }
        return report;
    }

private:
    std::vector<size_t> epoch_perm(size_t n) {
        std::vector<size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng_);
        return perm;
    }

    static std::vector<size_t> batch_slice(const std::vector<size_t>& perm, int step, int batch_size) {
        std::vector<size_t> out;
        out.reserve(batch_size);
        for (int j = 0; j < batch_size; ++j)
            out.push_back(perm[(static_cast<size_t>(step) * batch_size + j) % perm.size()]);
        return out;
    }

    std::vector<Matrix> collect_grads(const Tape& t, const std::vector<TapeBinding>& bindings) const {
        std::vector<Matrix> grads;
        grads.reserve(params_.size());
        for (const ParamRef& p : params_) {
            const TapeBinding* found = nullptr;
            for (const TapeBinding& b : bindings)
                if (b.param == p.value) {
                    found = &b;
                    break;
                }
            if (!found) throw std::logic_error("collect_grads: parameter '" + p.name + "' was never bound");
            grads.push_back(t.grad(found->var));
        }
        return grads;
    }

    // Builds the selected scalar loss; for the quadratic probe the loss is
    // ||theta_group||^2 / 2 of the group under test (known gradient theta).
    std::pair<double, Var> build_selected(Tape& t, const FixedBatch& fb, LossSelector sel,
                                          const ParamRef* probe_group) {
        if (sel == LossSelector::probe) {
            Var theta = t.leaf(*probe_group->value);
            last_bindings_ = {{probe_group->value, theta}};
            Var root = t.scale(t.sum_all(t.hadamard(theta, theta)), 0.5);
            return {t.scalar_value(root), root};
        }
        last_bindings_.clear();
        Binder binder(t, &last_bindings_);
        Var p_var = binder(bank_.contexts());
        auto bound = prompter_.bind(t, &last_bindings_);
        LossVars lv = build_losses(t, bound, p_var, fb);
        Var root;
        switch (sel) {
            case LossSelector::sup: root = lv.sup; break;
            case LossSelector::sc: root = lv.sc; break;
            case LossSelector::idc: root = lv.idc; break;
            case LossSelector::im: root = lv.im; break;
            default: root = lv.total; break;
        }
        return {t.scalar_value(root), root};
    }

    FixedBatch fixed_micro_batch(uint64_t sample_seed, int micro_batch) {
        auto rng = named_rng(sample_seed, "grad_check_batch");
        FixedBatch fb;
        fb.src_weak.resize(sources_.size());
        fb.src_strong.resize(sources_.size());
        fb.src_labels.resize(sources_.size());
        for (size_t d = 0; d < sources_.size(); ++d) {
            std::uniform_int_distribution<size_t> pick(0, sources_[d].size() - 1);
            for (int i = 0; i < micro_batch; ++i) {
                size_t idx = pick(rng);
                fb.src_weak[d].push_back(weak_augment(sources_[d].x[idx], rng));
                fb.src_strong[d].push_back(strong_augment(sources_[d].x[idx], rng, cfg_.strong_aug));
                fb.src_labels[d].push_back(sources_[d].y[idx]);
            }
        }
        if (has_target()) {
            std::vector<Image> weak;
            std::uniform_int_distribution<size_t> pick(0, target_.size() - 1);
            std::vector<size_t> chosen;
            for (int i = 0; i < micro_batch; ++i) chosen.push_back(pick(rng));
            for (size_t idx : chosen) weak.push_back(weak_augment(target_.x[idx], rng));
            auto records = label_batch(weak, bank_, text_enc_, img_enc_, prompter_, cfg_.weights.tau, 0.5,
                                       cfg_.confidence_threshold);
            for (int i = 0; i < micro_batch; ++i) {
                fb.tgt_weak.push_back(weak[i]);
                fb.tgt_strong.push_back(strong_augment(target_.x[chosen[i]], rng, cfg_.strong_aug));
                fb.tgt_pseudo.push_back(records[i].hard_label);
            }
        }
        return fb;
    }

    static void accumulate(LossBreakdown& sum, const LossBreakdown& lb) {
        auto acc = [](std::optional<double>& a, const std::optional<double>& b) {
            if (b) a = a.value_or(0.0) + *b;
        };
        sum.sup_s += lb.sup_s;
        sum.total += lb.total;
        acc(sum.sup_t, lb.sup_t);
        acc(sum.sc_s, lb.sc_s);
        acc(sum.sc_t, lb.sc_t);
        acc(sum.idc, lb.idc);
        acc(sum.im, lb.im);
    }

    static LossBreakdown mean_of(LossBreakdown sum, int n) {
        if (n == 0) return sum;
        auto div = [n](std::optional<double>& a) {
            if (a) *a /= n;
        };
        sum.sup_s /= n;
        sum.total /= n;
        div(sum.sup_t);
        div(sum.sc_s);
        div(sum.sc_t);
        div(sum.idc);
        div(sum.im);
        return sum;
    }

    RunConfig cfg_;
    FrozenTextEncoder text_enc_;
    FrozenImageEncoder img_enc_;
    PromptBank bank_;
    MutualPrompter prompter_;
    ParamSet params_;
    AdamOptimizer opt_;
    std::mt19937_64 rng_;
    int epoch_ = 0;
    std::vector<LabeledSet> sources_;
    TargetSet target_;
    CountingSet holdout_;
    std::vector<PseudoLabelRecord> pseudo_;
    std::vector<MetricsRecord> history_;
    uint64_t text_fp_ = 0, img_fp_ = 0;
    std::vector<TapeBinding> last_bindings_;
};

// ---- reduced trainer over precomputed embeddings ----
//
// Consumes an EmbeddingArchive: text and image encodings are fixed data, only
// the prompting module and its gains train. Every record serves as both its
// weak and strong view, and target records are pseudo-labeled from the model
// prediction alone (the naive-prompt path needs a text encoder).
class EmbeddingTrainer {
public:
    EmbeddingTrainer(EmbeddingArchive archive, RunConfig cfg) : archive_(std::move(archive)), cfg_(std::move(cfg)) {
        PrompterConfig pc = cfg_.prompter;
        pc.seed = cfg_.seed ^ fnv1a("prompter");
        prompter_ = MutualPrompter::init(pc, archive_.joint_dim);
        prompter_.collect_params(params_, cfg_.ablation.vp, cfg_.ablation.itp);
        if (params_.empty()) throw std::invalid_argument("EmbeddingTrainer: no trainable parameters");
        opt_.init(params_);
        rng_ = named_rng(cfg_.seed, "train_embeddings");
        s_tilde_mean_ = Matrix(archive_.context_len, archive_.joint_dim);
        for (int k = 0; k < archive_.classes; ++k)
            for (int i = 0; i < archive_.context_len; ++i)
                for (int j = 0; j < archive_.joint_dim; ++j)
                    s_tilde_mean_(i, j) += archive_.s_tilde(k * archive_.context_len + i, j) / archive_.classes;
        for (size_t i = 0; i < archive_.records.size(); ++i)
            (archive_.records[i].domain_tag == 0 ? source_idx_ : target_idx_).push_back(i);
        if (source_idx_.empty()) throw std::invalid_argument("EmbeddingTrainer: archive has no source records");
    }

    const ParamSet& params() const { return params_; }
    MutualPrompter& prompter() { return prompter_; }
    const std::vector<LossBreakdown>& history() const { return history_; }

    std::vector<LossBreakdown> train() {
        int B = std::min<int>(cfg_.batch_size, static_cast<int>(source_idx_.size()));
        int steps = std::max<size_t>(1, source_idx_.size() / B);
        for (int ep = 1; ep <= cfg_.epochs; ++ep) {
            refresh_pseudo();
            double lr = cosine_lr(ep - 1, cfg_.epochs, cfg_.learning_rate);
            std::vector<size_t> sperm = perm(source_idx_.size());
            std::vector<size_t> tperm = perm(target_idx_.size());
            for (int it = 0; it < steps; ++it) {
                std::vector<size_t> sb, tb;
                for (int j = 0; j < B; ++j) sb.push_back(source_idx_[sperm[(it * B + j) % sperm.size()]]);
                if (!target_idx_.empty())
                    for (int j = 0; j < B; ++j) tb.push_back(target_idx_[tperm[(it * B + j) % tperm.size()]]);
                history_.push_back(step(sb, tb, lr));
            }
        }
        return history_;
    }

private:
    std::vector<size_t> perm(size_t n) {
        std::vector<size_t> p(n);
        std::iota(p.begin(), p.end(), 0);
        std::shuffle(p.begin(), p.end(), rng_);
        return p;
    }

    void refresh_pseudo() {
        pseudo_.assign(archive_.records.size(), -1);
        for (size_t i : target_idx_) {
            Matrix probs = record_probs(archive_.records[i]);
            pseudo_[i] = static_cast<int>(std::max_element(probs.data.begin(), probs.data.end()) -
                                          probs.data.begin());
        }
    }

    Matrix record_probs(const EmbeddingRecord& rec) const {
        Tape t(false);
        auto bound = prompter_.bind(t);
        auto pair = prompter_.prompt_pair(t, bound, t.constant(rec.v), t.constant(rec.v_tilde),
                                          t.constant(archive_.s), t.constant(s_tilde_mean_), cfg_.ablation.vp,
                                          cfg_.ablation.itp);
        return t.value(classify_probs(t, pair.v_prime, pair.s_prime, cfg_.weights.tau));
    }

    LossBreakdown step(const std::vector<size_t>& sb, const std::vector<size_t>& tb, double lr) {
        Tape t;
        std::vector<TapeBinding> bindings;
        auto bound = prompter_.bind(t, &bindings);
        Var s_rows = t.constant(archive_.s);
        Var stm = t.constant(s_tilde_mean_);

        auto embed = [&](const EmbeddingRecord& rec) {
            return prompter_.prompt_pair(t, bound, t.constant(rec.v), t.constant(rec.v_tilde), s_rows, stm,
                                         cfg_.ablation.vp, cfg_.ablation.itp);
        };
        double tau = cfg_.weights.tau;
        std::vector<Var> src_probs;
        std::vector<InstanceEmbeddings> src_pairs;
        std::vector<int> labels;
        for (size_t i : sb) {
            auto pair = embed(archive_.records[i]);
            src_probs.push_back(classify_probs(t, pair.v_prime, pair.s_prime, tau));
            src_pairs.push_back({pair.v_prime, pair.s_prime});
            labels.push_back(archive_.records[i].label);
        }
        LossBreakdown values;
        Var sup = l_sup_source(t, src_probs, labels);
        values.sup_s = t.scalar_value(sup);
        Var sc = cfg_.ablation.l_sc ? l_sc_source(t, src_probs, labels) : t.scalar(0.0);
        if (cfg_.ablation.l_sc) values.sc_s = t.scalar_value(sc);
        Var idc = cfg_.ablation.l_idc ? t.scale(l_idc(t, src_pairs, tau), cfg_.idc_source_weight) : t.scalar(0.0);
        Var im = t.scalar(0.0);
        if (!tb.empty()) {
            std::vector<Var> tgt_probs;
            std::vector<InstanceEmbeddings> tgt_pairs;
            std::vector<int> tgt_pseudo;
            for (size_t i : tb) {
                auto pair = embed(archive_.records[i]);
                tgt_probs.push_back(classify_probs(t, pair.v_prime, pair.s_prime, tau));
                tgt_pairs.push_back({pair.v_prime, pair.s_prime});
                tgt_pseudo.push_back(pseudo_[i]);
            }
            Var sup_t = l_sup_target(t, tgt_probs, tgt_pseudo, cfg_.confidence_threshold);
            sup = t.add(sup, sup_t);
            values.sup_t = t.scalar_value(sup_t);
            if (cfg_.ablation.l_sc) {
                std::vector<double> conf(tgt_probs.size());
                for (size_t i = 0; i < tgt_probs.size(); ++i) conf[i] = t.value(tgt_probs[i])(0, tgt_pseudo[i]);
                Var sc_t = l_sc_target(t, tgt_probs, tgt_pseudo, conf, cfg_.confidence_threshold);
                sc = t.add(sc, sc_t);
                values.sc_t = t.scalar_value(sc_t);
            }
            if (cfg_.ablation.l_idc) idc = t.add(idc, t.scale(l_idc(t, tgt_pairs, tau), cfg_.idc_target_weight));
            if (cfg_.ablation.l_im) {
                im = l_im(t, tgt_probs);
                values.im = t.scalar_value(im);
            }
        }
        if (cfg_.ablation.l_idc) values.idc = t.scalar_value(idc);
        Var total = l_all(t, sup, sc, idc, im, cfg_.weights);
        values.total = t.scalar_value(total);
        t.backward(total);
        std::vector<Matrix> grads;
        for (const ParamRef& p : params_) {
            for (const TapeBinding& b : bindings)
                if (b.param == p.value) {
                    grads.push_back(t.grad(b.var));
                    break;
                }
        }
        opt_.step(params_, grads, lr);
        return values;
    }

    EmbeddingArchive archive_;
    RunConfig cfg_;
    MutualPrompter prompter_;
    ParamSet params_;
    AdamOptimizer opt_;
    std::mt19937_64 rng_;
    Matrix s_tilde_mean_;
    std::vector<size_t> source_idx_, target_idx_;
    std::vector<int> pseudo_;
    std::vector<LossBreakdown> history_;
};

// Captures encoder outputs (and optionally post-prompting embeddings) for the
// archive data path and the embedding-dump command.
inline EmbeddingArchive build_embedding_archive(const FrozenTextEncoder& text_enc,
                                                const FrozenImageEncoder& img_enc, const PromptBank& bank,
                                                const std::vector<Image>& source_x,
                                                const std::vector<int>& source_y,
                                                const std::vector<Image>& target_x,
                                                const MutualPrompter* post = nullptr, bool visual_on = true,
                                                bool textual_on = true) {
    EmbeddingArchive a;
    a.joint_dim = text_enc.config().joint_dim;
    a.context_len = bank.context_len();
    a.grid_tokens = img_enc.config().grid_tokens();
    a.classes = bank.classes();
    std::vector<EncodedText> texts;
    a.s = Matrix(a.classes, a.joint_dim);
    a.s_tilde = Matrix(a.classes * a.context_len, a.joint_dim);
    for (int k = 0; k < a.classes; ++k) {
        auto asm_k = bank.assemble_prompt(k);
        EncodedText et = text_enc.encode(*asm_k.contexts, asm_k.class_tokens);
        texts.push_back(et);
        for (int j = 0; j < a.joint_dim; ++j) a.s(k, j) = et.s(0, j);
        for (int i = 0; i < a.context_len; ++i)
            for (int j = 0; j < a.joint_dim; ++j) a.s_tilde(k * a.context_len + i, j) = et.s_tilde(i, j);
    }
    auto add_records = [&](const std::vector<Image>& xs, const std::vector<int>* ys, int tag) {
        for (size_t i = 0; i < xs.size(); ++i) {
            EmbeddingRecord rec;
            rec.domain_tag = tag;
            rec.label = ys ? (*ys)[i] : -1;
            EncodedImage e = img_enc.encode(xs[i]);
            rec.v = e.v;
            rec.v_tilde = e.v_tilde;
            if (post) {
                PromptedPair pair = post->prompt_pair(e, texts, visual_on, textual_on);
                rec.has_post = true;
                rec.v_prime = pair.v_prime;
                rec.s_prime = pair.s_prime;
            }
            a.records.push_back(std::move(rec));
        }
    };
    add_records(source_x, &source_y, 0);
    add_records(target_x, nullptr, 1);
    return a;
}

}  // namespace damp
