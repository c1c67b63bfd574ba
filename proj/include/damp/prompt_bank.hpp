#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "damp/rng.hpp"

namespace damp {

// Toy vocabulary layout: low ids are reserved for the fixed naive template
// words, class-name tokens start at kClassTokenBase.
inline constexpr int kTokenA = 1;
inline constexpr int kTokenPhoto = 2;
inline constexpr int kTokenOf = 3;
inline constexpr int kClassTokenBase = 8;

// Per-class name token sequences r_k. Synthetic names alternate between length
// 1 and 2 so both name lengths stay exercised.
struct ClassNames {
    std::vector<std::vector<int>> tokens;

    int count() const { return static_cast<int>(tokens.size()); }

    int max_len() const {
        size_t m = 0;
        for (const auto& t : tokens) m = std::max(m, t.size());
        return static_cast<int>(m);
    }

    static ClassNames synthetic(int k_classes) {
        if (k_classes < 2) throw std::invalid_argument("ClassNames: need at least 2 classes");
        ClassNames names;
        int next = kClassTokenBase;
        for (int k = 0; k < k_classes; ++k) {
            int len = 1 + (k % 2);
            std::vector<int> seq;
            for (int i = 0; i < len; ++i) seq.push_back(next++);
            names.tokens.push_back(std::move(seq));
        }
        return names;
    }
};

// Owns the single learnable context matrix shared by every class and every
// domain, plus the fixed naive template used for pseudo-labeling.
class PromptBank {
public:
    static PromptBank init(int context_len, int dim, ClassNames names, uint64_t seed, int max_text_len) {
        if (context_len < 1) throw std::invalid_argument("PromptBank: context_len must be >= 1");
        if (names.count() < 2) throw std::invalid_argument("PromptBank: need K >= 2 classes");
        for (int k = 0; k < names.count(); ++k) {
            int len = context_len + static_cast<int>(names.tokens[k].size());
            if (len > max_text_len)
                throw std::invalid_argument("PromptBank: class " + std::to_string(k) + " prompt length " +
                                            std::to_string(len) + " exceeds max_text_len " +
                                            std::to_string(max_text_len));
        }
        PromptBank bank;
        auto rng = named_rng(seed, "prompt_contexts");
        bank.p_ = randn(rng, context_len, dim, 0.02);
        bank.names_ = std::move(names);
        return bank;
    }

    int classes() const { return names_.count(); }
    int context_len() const { return p_.rows; }
    const ClassNames& names() const { return names_; }

    // The learnable contexts; one object for the whole run, every class and
    // domain assembles against it.
    Matrix& contexts() { return p_; }
    const Matrix& contexts() const { return p_; }

    size_t parameter_count() const { return p_.size(); }

    struct Assembled {
        const Matrix* contexts;          // shared p, never a copy
        std::span<const int> class_tokens;
    };

    Assembled assemble_prompt(int k) const {
        check_class(k);
        return Assembled{&p_, std::span<const int>(names_.tokens[k])};
    }

    // Fixed "a photo of a [CLS]" template over the toy vocabulary; never
    // learnable, no gradient ever reaches it.
    std::vector<int> naive_prompt(int k) const {
        check_class(k);
        std::vector<int> seq{kTokenA, kTokenPhoto, kTokenOf, kTokenA};
        seq.insert(seq.end(), names_.tokens[k].begin(), names_.tokens[k].end());
        return seq;
    }

private:
    void check_class(int k) const {
        if (k < 0 || k >= names_.count())
            throw std::out_of_range("PromptBank: class index " + std::to_string(k) + " out of range [0," +
                                    std::to_string(names_.count()) + ")");
    }

    Matrix p_;
    ClassNames names_;
};

}  // namespace damp
