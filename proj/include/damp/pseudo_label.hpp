#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "damp/encoder.hpp"
#include "damp/image.hpp"
#include "damp/losses.hpp"
#include "damp/prompt_bank.hpp"
#include "damp/prompter.hpp"

namespace damp {

enum class AlphaSchedule { linear, cosine, step };

inline std::string to_string(AlphaSchedule s) {
    switch (s) {
        case AlphaSchedule::linear: return "linear";
        case AlphaSchedule::cosine: return "cosine";
        case AlphaSchedule::step: return "step";
    }
    return "?";
}

inline AlphaSchedule alpha_schedule_from_string(const std::string& s) {
    if (s == "linear") return AlphaSchedule::linear;
    if (s == "cosine") return AlphaSchedule::cosine;
    if (s == "step") return AlphaSchedule::step;
    throw std::invalid_argument("unknown alpha schedule: " + s);
}

// Ensemble weight schedule: monotone nondecreasing from alpha(0)=0 to
// alpha(E)=1. Epochs past E clamp to 1 with a warning.
inline double alpha_schedule(int epoch, int total_epochs, AlphaSchedule kind = AlphaSchedule::linear) {
    if (total_epochs < 1) throw std::invalid_argument("alpha_schedule: total_epochs must be >= 1");
    if (epoch < 0) throw std::invalid_argument("alpha_schedule: negative epoch");
    if (epoch > total_epochs) {
        std::cerr << "warning: alpha_schedule epoch " << epoch << " > total " << total_epochs
                  << ", clamping alpha to 1\n";
        return 1.0;
    }
    double f = static_cast<double>(epoch) / static_cast<double>(total_epochs);
    switch (kind) {
        case AlphaSchedule::linear: return f;
        case AlphaSchedule::cosine: return 0.5 * (1.0 - std::cos(M_PI * f));
        case AlphaSchedule::step: return 2 * epoch >= total_epochs ? 1.0 : 0.0;
    }
    return f;
}

struct PseudoLabelRecord {
    std::vector<double> naive_soft;     // zero-shot prediction from the fixed naive prompt
    std::vector<double> model_soft;     // full prompted-pipeline prediction (weak view)
    std::vector<double> ensemble_soft;  // (1-alpha)*naive + alpha*model
    int hard_label = -1;                // argmax of ensemble, ties to the lowest index
    double confidence = 0.0;            // model weak-view probability at hard_label
    bool accepted = false;              // confidence >= threshold
};

// The ensemble rule itself: convex combination, argmax with ties broken to the
// lowest class index, confidence read from the model's prediction.
inline PseudoLabelRecord make_ensemble_record(std::vector<double> naive_soft, std::vector<double> model_soft,
                                              double alpha, double threshold) {
    if (alpha < 0.0 || alpha > 1.0)
        throw std::invalid_argument("make_ensemble_record: alpha " + std::to_string(alpha) + " outside [0,1]");
    if (naive_soft.size() != model_soft.size() || naive_soft.empty())
        throw std::invalid_argument("make_ensemble_record: prediction size mismatch");
    PseudoLabelRecord rec;
    rec.ensemble_soft.resize(naive_soft.size());
    for (size_t k = 0; k < naive_soft.size(); ++k)
        rec.ensemble_soft[k] = (1.0 - alpha) * naive_soft[k] + alpha * model_soft[k];
    rec.hard_label = static_cast<int>(
        std::max_element(rec.ensemble_soft.begin(), rec.ensemble_soft.end()) - rec.ensemble_soft.begin());
    rec.confidence = model_soft[rec.hard_label];
    rec.accepted = rec.confidence >= threshold;
    rec.naive_soft = std::move(naive_soft);
    rec.model_soft = std::move(model_soft);
    return rec;
}

// Per-class text embeddings of the fixed naive template. These never change
// during a run; callers may cache the result.
inline Matrix naive_text_embeddings(const PromptBank& bank, const FrozenTextEncoder& text_enc) {
    Matrix s(bank.classes(), text_enc.config().joint_dim);
    for (int k = 0; k < bank.classes(); ++k) {
        std::vector<int> tokens = bank.naive_prompt(k);
        Matrix sk = text_enc.encode_tokens_only(tokens);
        for (int j = 0; j < s.cols; ++j) s(k, j) = sk(0, j);
    }
    return s;
}

// Labels a batch of weak-view target images. Runs entirely without gradient
// recording: pseudo-labels are constants inside a training step.
inline std::vector<PseudoLabelRecord> label_batch(const std::vector<Image>& weak_views, const PromptBank& bank,
                                                  const FrozenTextEncoder& text_enc,
                                                  const FrozenImageEncoder& img_enc,
                                                  const MutualPrompter& prompter, double tau, double alpha,
                                                  double threshold) {
    if (alpha < 0.0 || alpha > 1.0)
        throw std::invalid_argument("label_batch: alpha " + std::to_string(alpha) + " outside [0,1]");
    std::vector<PseudoLabelRecord> records;
    if (weak_views.empty()) return records;

    int K = bank.classes();
    Matrix naive_s = naive_text_embeddings(bank, text_enc);
    std::vector<EncodedText> texts;
    texts.reserve(K);
    for (int k = 0; k < K; ++k) {
        auto asm_k = bank.assemble_prompt(k);
        texts.push_back(text_enc.encode(*asm_k.contexts, asm_k.class_tokens));
    }

    records.reserve(weak_views.size());
    for (const Image& x : weak_views) {
        EncodedImage enc = img_enc.encode(x);
        Matrix naive_probs = zero_shot_classify(enc.v, naive_s, tau);
        Matrix model_probs = classify(prompter.prompt_pair(enc, texts), tau);
        records.push_back(make_ensemble_record(
            std::vector<double>(naive_probs.data.begin(), naive_probs.data.end()),
            std::vector<double>(model_probs.data.begin(), model_probs.data.end()), alpha, threshold));
    }
    return records;
}

}  // namespace damp
