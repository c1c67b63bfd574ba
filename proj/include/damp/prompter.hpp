#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "damp/encoder.hpp"
#include "damp/params.hpp"
#include "damp/rng.hpp"
#include "damp/tape.hpp"

namespace damp {

enum class PromptStrategy { none, independent, simple_synergy, cross_attention };

inline std::string to_string(PromptStrategy s) {
    switch (s) {
        case PromptStrategy::none: return "none";
        case PromptStrategy::independent: return "independent";
        case PromptStrategy::simple_synergy: return "simple_synergy";
        case PromptStrategy::cross_attention: return "cross_attention";
    }
    return "?";
}

inline PromptStrategy prompt_strategy_from_string(const std::string& s) {
    if (s == "none") return PromptStrategy::none;
    if (s == "independent") return PromptStrategy::independent;
    if (s == "simple_synergy") return PromptStrategy::simple_synergy;
    if (s == "cross_attention") return PromptStrategy::cross_attention;
    throw std::invalid_argument("unknown prompting strategy: " + s);
}

struct PrompterConfig {
    int layers = 2;
    int dim = 32;  // internal decoder width
    int heads = 4;
    double gamma_v_init = 0.1;
    double gamma_s_init = 0.5;
    bool share_parameters = true;
    PromptStrategy strategy = PromptStrategy::cross_attention;
    int ffn_mult = 4;
    uint64_t seed = 0;

    void validate() const {
        if (layers < 1 || dim < 1 || heads < 1 || ffn_mult < 1)
            throw std::invalid_argument("PrompterConfig: all dimensions must be positive");
        if (dim % heads != 0)
            throw std::invalid_argument("PrompterConfig: dim " + std::to_string(dim) +
                                        " not divisible by heads " + std::to_string(heads));
    }
};

// Post-prompting embeddings for one instance.
struct PromptedPair {
    Matrix v_prime;  // 1 x D
    Matrix s_prime;  // K x D, row k conditioned on this instance
};

// Tape handles for one prompting stack, produced per forward pass.
struct StackVars {
    PromptStrategy strategy = PromptStrategy::cross_attention;
    int heads = 1;
    Var in_w, in_b, in_ln_g, in_ln_b;
    struct LayerVars {
        Var self_wv, self_wo;
        MhsaVars cross;
        Var ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
        Var ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    };
    std::vector<LayerVars> layers;
    Var out_w, out_b, out_ln_g, out_ln_b;
    Var syn_w, syn_b;  // simple_synergy only
};

// The shared prompting module G: a stack of decoder layers applied to
// single-token query sequences against cross-modal context tokens, wrapped in
// per-token input/output projections. Both prompting directions run through the
// same weights when parameter sharing is on.
class MutualPrompter {
public:
    struct DecoderLayer {
        Matrix self_wv, self_wo;
        Matrix cross_wq, cross_wk, cross_wv, cross_wo;
        Matrix ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
        Matrix ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    };

    struct Stack {
        PromptStrategy strategy = PromptStrategy::cross_attention;
        int heads = 1;
        Matrix in_w, in_b, in_ln_g, in_ln_b;
        std::vector<DecoderLayer> layers;
        Matrix out_w, out_b, out_ln_g, out_ln_b;
        Matrix syn_w, syn_b;

        static Stack init(const PrompterConfig& cfg, int joint_dim, std::mt19937_64& rng) {
            Stack s;
            s.strategy = cfg.strategy;
            s.heads = cfg.heads;
            if (cfg.strategy == PromptStrategy::simple_synergy) {
                s.syn_w = randn(rng, joint_dim, joint_dim, 1.0 / std::sqrt(static_cast<double>(joint_dim)));
                s.syn_b = Matrix(1, joint_dim);
                return s;
            }
            int d = cfg.dim;
            double sd_in = 1.0 / std::sqrt(static_cast<double>(joint_dim));
            double sd_d = 1.0 / std::sqrt(static_cast<double>(d));
            s.in_w = randn(rng, joint_dim, d, sd_in);
            s.in_b = Matrix(1, d);
            s.in_ln_g = Matrix(1, d, 1.0);
            s.in_ln_b = Matrix(1, d);
            for (int l = 0; l < cfg.layers; ++l) {
                DecoderLayer dl;
                dl.self_wv = randn(rng, d, d, sd_d);
                dl.self_wo = randn(rng, d, d, sd_d);
                dl.ln1_g = Matrix(1, d, 1.0);
                dl.ln1_b = Matrix(1, d);
                if (cfg.strategy == PromptStrategy::cross_attention) {
                    dl.cross_wq = randn(rng, d, d, sd_d);
                    dl.cross_wk = randn(rng, d, d, sd_d);
                    dl.cross_wv = randn(rng, d, d, sd_d);
                    dl.cross_wo = randn(rng, d, d, sd_d);
                    dl.ln2_g = Matrix(1, d, 1.0);
                    dl.ln2_b = Matrix(1, d);
                }
                int hidden = cfg.ffn_mult * d;
                dl.ffn_w1 = randn(rng, d, hidden, sd_d);
                dl.ffn_b1 = Matrix(1, hidden);
                dl.ffn_w2 = randn(rng, hidden, d, 1.0 / std::sqrt(static_cast<double>(hidden)));
                dl.ffn_b2 = Matrix(1, d);
                dl.ln3_g = Matrix(1, d, 1.0);
                dl.ln3_b = Matrix(1, d);
                s.layers.push_back(std::move(dl));
            }
            s.out_w = randn(rng, d, joint_dim, sd_d);
            s.out_b = Matrix(1, joint_dim);
            s.out_ln_g = Matrix(1, joint_dim, 1.0);
            s.out_ln_b = Matrix(1, joint_dim);
            return s;
        }

        template <typename Self, typename F>
        static void visit(Self& s, F&& f) {
            if (s.strategy == PromptStrategy::simple_synergy) {
                f("syn_w", s.syn_w);
                f("syn_b", s.syn_b);
                return;
            }
            f("in.w", s.in_w);
            f("in.b", s.in_b);
            f("in.ln_g", s.in_ln_g);
            f("in.ln_b", s.in_ln_b);
            for (size_t l = 0; l < s.layers.size(); ++l) {
                auto& dl = s.layers[l];
                std::string p = "dec" + std::to_string(l) + ".";
                f(p + "self_wv", dl.self_wv);
                f(p + "self_wo", dl.self_wo);
                f(p + "ln1_g", dl.ln1_g);
                f(p + "ln1_b", dl.ln1_b);
                if (s.strategy == PromptStrategy::cross_attention) {
                    f(p + "cross_wq", dl.cross_wq);
                    f(p + "cross_wk", dl.cross_wk);
                    f(p + "cross_wv", dl.cross_wv);
                    f(p + "cross_wo", dl.cross_wo);
                    f(p + "ln2_g", dl.ln2_g);
                    f(p + "ln2_b", dl.ln2_b);
                }
                f(p + "ffn_w1", dl.ffn_w1);
                f(p + "ffn_b1", dl.ffn_b1);
                f(p + "ffn_w2", dl.ffn_w2);
                f(p + "ffn_b2", dl.ffn_b2);
                f(p + "ln3_g", dl.ln3_g);
                f(p + "ln3_b", dl.ln3_b);
            }
            f("out.w", s.out_w);
            f("out.b", s.out_b);
            f("out.ln_g", s.out_ln_g);
            f("out.ln_b", s.out_ln_b);
        }

        size_t element_count() const {
            size_t n = 0;
            visit(*this, [&](const std::string&, const Matrix& m) { n += m.size(); });
            return n;
        }

        void collect(const std::string& prefix, ParamSet& out) {
            visit(*this, [&](const std::string& name, Matrix& m) { out.push_back({prefix + name, &m}); });
        }

        StackVars bind(Binder& b) const {
            StackVars sv;
            sv.strategy = strategy;
            sv.heads = heads;
            if (strategy == PromptStrategy::simple_synergy) {
                sv.syn_w = b(syn_w);
                sv.syn_b = b(syn_b);
                return sv;
            }
            sv.in_w = b(in_w);
            sv.in_b = b(in_b);
            sv.in_ln_g = b(in_ln_g);
            sv.in_ln_b = b(in_ln_b);
            for (const DecoderLayer& dl : layers) {
                StackVars::LayerVars lv;
                lv.self_wv = b(dl.self_wv);
                lv.self_wo = b(dl.self_wo);
                lv.ln1_g = b(dl.ln1_g);
                lv.ln1_b = b(dl.ln1_b);
                if (strategy == PromptStrategy::cross_attention) {
                    lv.cross = MhsaVars{b(dl.cross_wq), b(dl.cross_wk), b(dl.cross_wv), b(dl.cross_wo), heads};
                    lv.ln2_g = b(dl.ln2_g);
                    lv.ln2_b = b(dl.ln2_b);
                }
                lv.ffn_w1 = b(dl.ffn_w1);
                lv.ffn_b1 = b(dl.ffn_b1);
                lv.ffn_w2 = b(dl.ffn_w2);
                lv.ffn_b2 = b(dl.ffn_b2);
                lv.ln3_g = b(dl.ln3_g);
                lv.ln3_b = b(dl.ln3_b);
                sv.layers.push_back(lv);
            }
            sv.out_w = b(out_w);
            sv.out_b = b(out_b);
            sv.out_ln_g = b(out_ln_g);
            sv.out_ln_b = b(out_ln_b);
            return sv;
        }

        void save(BinWriter& w) const {
            visit(*this, [&](const std::string&, const Matrix& m) { w.matrix(m); });
        }

        void load(BinReader& r) {
            visit(*this, [&](const std::string&, Matrix& m) { m = r.matrix(); });
        }
    };

    static MutualPrompter init(const PrompterConfig& cfg, int joint_dim) {
        cfg.validate();
        MutualPrompter g;
        g.cfg_ = cfg;
        g.joint_dim_ = joint_dim;
        g.gamma_v_ = Matrix(1, 1, cfg.gamma_v_init);
        g.gamma_s_ = Matrix(1, 1, cfg.gamma_s_init);
        auto rng = named_rng(cfg.seed, "prompter");
        if (cfg.strategy != PromptStrategy::none) {
            g.stacks_.push_back(Stack::init(cfg, joint_dim, rng));
            if (!cfg.share_parameters) g.stacks_.push_back(Stack::init(cfg, joint_dim, rng));
        }
        return g;
    }

    const PrompterConfig& config() const { return cfg_; }
    int joint_dim() const { return joint_dim_; }
    Matrix& gamma_v() { return gamma_v_; }
    Matrix& gamma_s() { return gamma_s_; }
    const Matrix& gamma_v() const { return gamma_v_; }
    const Matrix& gamma_s() const { return gamma_s_; }

    // G weights only; the gammas are counted separately.
    size_t parameter_count() const {
        size_t n = 0;
        for (const Stack& s : stacks_) n += s.element_count();
        return n;
    }

    // Trainable tensors for the active branches. With shared parameters one
    // stack serves both directions, so it is registered once.
    void collect_params(ParamSet& out, bool visual_active, bool textual_active) {
        if (cfg_.strategy == PromptStrategy::none) return;
        if (!visual_active && !textual_active) return;
        if (cfg_.share_parameters) {
            stacks_[0].collect("g.", out);
        } else {
            if (visual_active) stacks_[0].collect("g.vis.", out);
            if (textual_active) stacks_[1].collect("g.txt.", out);
        }
        if (visual_active) out.push_back({"gamma_v", &gamma_v_});
        if (textual_active) out.push_back({"gamma_s", &gamma_s_});
    }

    struct Bound {
        std::vector<StackVars> stacks;
        Var gamma_v, gamma_s;
    };

    Bound bind(Tape& t, std::vector<TapeBinding>* track = nullptr) const {
        Binder b(t, track);
        Bound bound;
        for (const Stack& s : stacks_) bound.stacks.push_back(s.bind(b));
        bound.gamma_v = b(gamma_v_);
        bound.gamma_s = b(gamma_s_);
        return bound;
    }

    // v' = v + gamma_v * G(v | s_tilde). queries: 1xD, context: NxD.
    Var prompt_visual(Tape& t, const Bound& bound, Var v, Var s_tilde, bool apply = true) const {
        if (!apply || cfg_.strategy == PromptStrategy::none) return v;
        Var star = forward_stack(t, bound.stacks[0], v, s_tilde);
        return t.add(v, t.mul_scalar(star, bound.gamma_v));
    }

    // Rows of s are independent single-token query sequences, one per class;
    // each row attends to the instance context v_tilde. s' = s + gamma_s * G(s | v_tilde).
    Var prompt_textual(Tape& t, const Bound& bound, Var s, Var v_tilde, bool apply = true) const {
        if (!apply || cfg_.strategy == PromptStrategy::none) return s;
        const StackVars& sv = cfg_.share_parameters ? bound.stacks[0] : bound.stacks[1];
        Var star = forward_stack(t, sv, s, v_tilde);
        return t.add(s, t.mul_scalar(star, bound.gamma_s));
    }

    struct PairVars {
        Var v_prime;  // 1 x D
        Var s_prime;  // K x D
    };

    PairVars prompt_pair(Tape& t, const Bound& bound, Var v, Var v_tilde, Var s_rows, Var s_tilde_mean,
                         bool visual_on = true, bool textual_on = true) const {
        return PairVars{prompt_visual(t, bound, v, s_tilde_mean, visual_on),
                        prompt_textual(t, bound, s_rows, v_tilde, textual_on)};
    }

    // ---- numeric wrappers ----

    Matrix prompt_visual(const Matrix& v, const Matrix& s_tilde) const {
        Tape t(false);
        return t.value(prompt_visual(t, bind(t), t.constant(v), t.constant(s_tilde)));
    }

    Matrix prompt_textual(const Matrix& s_k, const Matrix& v_tilde) const {
        Tape t(false);
        return t.value(prompt_textual(t, bind(t), t.constant(s_k), t.constant(v_tilde)));
    }

    PromptedPair prompt_pair(const EncodedImage& image, const std::vector<EncodedText>& texts,
                             bool visual_on = true, bool textual_on = true) const {
        if (texts.size() < 2)
            throw std::invalid_argument("prompt_pair: need at least 2 class encodings, got " +
                                        std::to_string(texts.size()));
        Tape t(false);
        std::vector<Var> s_parts;
        Matrix s_tilde_mean(texts[0].s_tilde.rows, texts[0].s_tilde.cols);
        for (const EncodedText& et : texts) {
            s_parts.push_back(t.constant(et.s));
            add_inplace(s_tilde_mean, et.s_tilde);
        }
        s_tilde_mean = damp::scale(s_tilde_mean, 1.0 / static_cast<double>(texts.size()));
        PairVars out = prompt_pair(t, bind(t), t.constant(image.v), t.constant(image.v_tilde),
                                   t.concat_rows(s_parts), t.constant(s_tilde_mean), visual_on, textual_on);
        return PromptedPair{t.value(out.v_prime), t.value(out.s_prime)};
    }

    void save(BinWriter& w) const {
        w.u32(static_cast<uint32_t>(stacks_.size()));
        for (const Stack& s : stacks_) s.save(w);
        w.matrix(gamma_v_);
        w.matrix(gamma_s_);
    }

    void load(BinReader& r) {
        uint32_t n = r.u32();
        if (n != stacks_.size())
            throw std::runtime_error("MutualPrompter::load: stack count mismatch (config change?)");
        for (Stack& s : stacks_) s.load(r);
        gamma_v_ = r.matrix();
        gamma_s_ = r.matrix();
    }

private:
    Var forward_stack(Tape& t, const StackVars& sv, Var queries, Var context) const {
        const Matrix& qm = t.value(queries);
        const Matrix& cm = t.value(context);
        if (qm.cols != joint_dim_ || cm.cols != joint_dim_)
            throw std::invalid_argument("prompter: token width " + std::to_string(qm.cols) + "/" +
                                        std::to_string(cm.cols) + " != joint_dim " + std::to_string(joint_dim_));
        if (sv.strategy == PromptStrategy::simple_synergy) {
            // one affine map from the mean-pooled opposite-modality context
            Var pooled = t.scale(t.colsum(context), 1.0 / static_cast<double>(cm.rows));
            Var delta = t.add_rowvec(t.matmul(pooled, sv.syn_w), sv.syn_b);
            return t.matmul(t.constant(Matrix(qm.rows, 1, 1.0)), delta);
        }
        Var q = t.layer_norm_rows(t.add_rowvec(t.matmul(queries, sv.in_w), sv.in_b), sv.in_ln_g, sv.in_ln_b);
        Var ctx;
        if (sv.strategy == PromptStrategy::cross_attention)
            ctx = t.layer_norm_rows(t.add_rowvec(t.matmul(context, sv.in_w), sv.in_b), sv.in_ln_g, sv.in_ln_b);
        for (const StackVars::LayerVars& lv : sv.layers) {
            // each query row is its own length-1 sequence: masked self-attention
            // reduces to the value and output projections
            Var sa = t.matmul(t.matmul(q, lv.self_wv), lv.self_wo);
            q = t.layer_norm_rows(t.add(sa, q), lv.ln1_g, lv.ln1_b);
            if (sv.strategy == PromptStrategy::cross_attention) {
                Var ca = mhca(t, q, ctx, lv.cross);
                q = t.layer_norm_rows(t.add(ca, q), lv.ln2_g, lv.ln2_b);
            }
            Var h = t.gelu(t.add_rowvec(t.matmul(q, lv.ffn_w1), lv.ffn_b1));
            Var ff = t.add_rowvec(t.matmul(h, lv.ffn_w2), lv.ffn_b2);
            q = t.layer_norm_rows(t.add(ff, q), lv.ln3_g, lv.ln3_b);
        }
        Var out = t.add_rowvec(t.matmul(q, sv.out_w), sv.out_b);
        return t.layer_norm_rows(out, sv.out_ln_g, sv.out_ln_b);
    }

    PrompterConfig cfg_;
    int joint_dim_ = 0;
    std::vector<Stack> stacks_;
    Matrix gamma_v_, gamma_s_;
};

}  // namespace damp
