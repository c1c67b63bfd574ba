#pragma once

#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "damp/data.hpp"
#include "damp/encoder.hpp"
#include "damp/losses.hpp"
#include "damp/prompter.hpp"
#include "damp/pseudo_label.hpp"

namespace damp {

using nlohmann::json;

enum class RunMode { uda, msda, dg };

inline std::string to_string(RunMode m) {
    switch (m) {
        case RunMode::uda: return "uda";
        case RunMode::msda: return "msda";
        case RunMode::dg: return "dg";
    }
    return "?";
}

inline RunMode run_mode_from_string(const std::string& s) {
    if (s == "uda") return RunMode::uda;
    if (s == "msda") return RunMode::msda;
    if (s == "dg") return RunMode::dg;
    throw std::invalid_argument("unknown run mode: " + s);
}

struct AblationToggles {
    bool itp = true;   // instance-level textual prompting branch
    bool vp = true;    // visual prompting branch
    bool l_sc = true;  // semantic-consistency terms
    bool l_idc = true;
    bool l_im = true;
};

struct TrainDataConfig {
    int classes = 6;
    int per_class_source = 12;
    int per_class_target = 12;
    uint64_t seed = 1;
    int image_h = 16;
    int image_w = 16;
    int channels = 3;
    double instance_noise = 0.08;
    std::vector<ShiftDescriptor> source_shifts{ShiftDescriptor{}};
    std::optional<ShiftDescriptor> target_shift;
    std::optional<ShiftDescriptor> dg_holdout_shift;

    DomainDatasetSpec base_spec() const {
        DomainDatasetSpec spec;
        spec.classes = classes;
        spec.per_class_source = per_class_source;
        spec.per_class_target = per_class_target;
        spec.seed = seed;
        spec.image_h = image_h;
        spec.image_w = image_w;
        spec.channels = channels;
        spec.instance_noise = instance_noise;
        if (!source_shifts.empty()) spec.source_shift = source_shifts[0];
        if (target_shift) spec.target_shift = *target_shift;
        return spec;
    }
};

struct RunConfig {
    RunMode mode = RunMode::uda;
    int epochs = 30;
    int iterations_per_epoch = 0;  // 0 derives ceil(min(Ns, Nt) / batch_size)
    int batch_size = 32;
    double learning_rate = 3e-3;
    double confidence_threshold = 0.6;
    LossWeights weights;
    int context_len = 32;
    uint64_t seed = 0;
    AlphaSchedule alpha_kind = AlphaSchedule::linear;
    AblationToggles ablation;
    double idc_source_weight = 1.0;
    double idc_target_weight = 1.0;
    EncoderConfig encoder;
    PrompterConfig prompter;
    TrainDataConfig data;
    StrongAugmentConfig strong_aug;
    std::vector<uint64_t> sweep_seeds{1, 2, 3};

    void validate() const {
        if (epochs < 1) throw std::invalid_argument("RunConfig: epochs must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("RunConfig: batch_size must be >= 1");
        if (iterations_per_epoch < 0) throw std::invalid_argument("RunConfig: negative iterations_per_epoch");
        if (learning_rate < 0) throw std::invalid_argument("RunConfig: negative learning_rate");
        if (confidence_threshold <= 0) throw std::invalid_argument("RunConfig: confidence_threshold must be > 0");
        if (context_len < 1) throw std::invalid_argument("RunConfig: context_len must be >= 1");
        weights.validate();
        encoder.validate();
        prompter.validate();
        if (data.classes < 2) throw std::invalid_argument("RunConfig: dataset needs K >= 2 classes");
        if (data.image_h != encoder.image_h() || data.image_w != encoder.image_w() ||
            data.channels != encoder.image_channels)
            throw std::invalid_argument(
                "RunConfig: dataset images " + std::to_string(data.image_h) + "x" + std::to_string(data.image_w) +
                "x" + std::to_string(data.channels) + " do not match encoder input " +
                std::to_string(encoder.image_h()) + "x" + std::to_string(encoder.image_w()) + "x" +
                std::to_string(encoder.image_channels));
        ClassNames names = ClassNames::synthetic(data.classes);
        int max_token = kClassTokenBase;
        for (const auto& seq : names.tokens)
            for (int id : seq) max_token = std::max(max_token, id);
        if (max_token >= encoder.vocab_size)
            throw std::invalid_argument("RunConfig: class-name tokens need vocab_size > " +
                                        std::to_string(max_token));
        if (encoder.max_text_len < context_len + names.max_len())
            throw std::invalid_argument("RunConfig: max_text_len " + std::to_string(encoder.max_text_len) +
                                        " < context_len + longest class name " +
                                        std::to_string(context_len + names.max_len()));
        switch (mode) {
            case RunMode::uda:
                if (data.source_shifts.size() != 1)
                    throw std::invalid_argument("RunConfig: uda mode takes exactly one source domain");
                if (!data.target_shift) throw std::invalid_argument("RunConfig: uda mode needs a target domain");
                break;
            case RunMode::msda:
                if (data.source_shifts.size() < 2)
                    throw std::invalid_argument("RunConfig: msda mode needs >= 2 source domains");
                if (!data.target_shift) throw std::invalid_argument("RunConfig: msda mode needs a target domain");
                break;
            case RunMode::dg:
                if (data.target_shift)
                    throw std::invalid_argument("RunConfig: dg mode forbids a target domain spec");
                if (data.source_shifts.empty())
                    throw std::invalid_argument("RunConfig: dg mode needs source domains");
                if (!data.dg_holdout_shift)
                    throw std::invalid_argument("RunConfig: dg mode needs a holdout domain for evaluation");
                break;
        }
    }
};

// ---- json mapping ----

inline json to_json(const ShiftDescriptor& s) {
    return json{{"rotation_deg", s.rotation_deg},
                {"channel_gain", s.channel_gain},
                {"bias_strength", s.bias_strength},
                {"noise_level", s.noise_level}};
}

inline ShiftDescriptor shift_from_json(const json& j) {
    ShiftDescriptor s;
    s.rotation_deg = j.value("rotation_deg", 0.0);
    s.channel_gain = j.value("channel_gain", std::vector<double>{});
    s.bias_strength = j.value("bias_strength", 0.0);
    s.noise_level = j.value("noise_level", 0.0);
    return s;
}

inline json to_json(const RunConfig& c) {
    json j;
    j["mode"] = to_string(c.mode);
    j["epochs"] = c.epochs;
    j["iterations_per_epoch"] = c.iterations_per_epoch;
    j["batch_size"] = c.batch_size;
    j["learning_rate"] = c.learning_rate;
    j["confidence_threshold"] = c.confidence_threshold;
    j["lambda_c"] = c.weights.lambda_c;
    j["lambda_i"] = c.weights.lambda_i;
    j["tau"] = c.weights.tau;
    j["context_len"] = c.context_len;
    j["seed"] = c.seed;
    j["alpha_schedule"] = to_string(c.alpha_kind);
    j["prompting_strategy"] = to_string(c.prompter.strategy);
    j["ablation"] = {{"itp", c.ablation.itp},
                     {"vp", c.ablation.vp},
                     {"l_sc", c.ablation.l_sc},
                     {"l_idc", c.ablation.l_idc},
                     {"l_im", c.ablation.l_im}};
    j["idc_source_weight"] = c.idc_source_weight;
    j["idc_target_weight"] = c.idc_target_weight;
    j["encoder"] = {{"joint_dim", c.encoder.joint_dim},     {"text_layers", c.encoder.text_layers},
                    {"text_heads", c.encoder.text_heads},   {"vocab_size", c.encoder.vocab_size},
                    {"max_text_len", c.encoder.max_text_len}, {"grid_h", c.encoder.grid_h},
                    {"grid_w", c.encoder.grid_w},           {"vision_channels", c.encoder.vision_channels},
                    {"image_channels", c.encoder.image_channels}, {"ffn_mult", c.encoder.ffn_mult},
                    {"seed", c.encoder.seed}};
    j["prompter"] = {{"layers", c.prompter.layers},
                     {"dim", c.prompter.dim},
                     {"heads", c.prompter.heads},
                     {"gamma_v_init", c.prompter.gamma_v_init},
                     {"gamma_s_init", c.prompter.gamma_s_init},
                     {"share_parameters", c.prompter.share_parameters},
                     {"ffn_mult", c.prompter.ffn_mult}};
    json d;
    d["classes"] = c.data.classes;
    d["per_class_source"] = c.data.per_class_source;
    d["per_class_target"] = c.data.per_class_target;
    d["seed"] = c.data.seed;
    d["image_h"] = c.data.image_h;
    d["image_w"] = c.data.image_w;
    d["channels"] = c.data.channels;
    d["instance_noise"] = c.data.instance_noise;
    d["source_shifts"] = json::array();
    for (const auto& s : c.data.source_shifts) d["source_shifts"].push_back(to_json(s));
    if (c.data.target_shift) d["target_shift"] = to_json(*c.data.target_shift);
    if (c.data.dg_holdout_shift) d["dg_holdout_shift"] = to_json(*c.data.dg_holdout_shift);
    j["dataset"] = d;
    j["strong_aug"] = {{"magnitude", c.strong_aug.magnitude},
                       {"max_rotate_deg", c.strong_aug.max_rotate_deg},
                       {"max_invert", c.strong_aug.max_invert},
                       {"max_contrast", c.strong_aug.max_contrast},
                       {"max_noise", c.strong_aug.max_noise},
                       {"max_cutout_frac", c.strong_aug.max_cutout_frac},
                       {"ops_per_sample", c.strong_aug.ops_per_sample}};
    j["sweep_seeds"] = c.sweep_seeds;
    return j;
}

inline RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    c.mode = run_mode_from_string(j.value("mode", "uda"));
    c.epochs = j.value("epochs", c.epochs);
    c.iterations_per_epoch = j.value("iterations_per_epoch", c.iterations_per_epoch);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.confidence_threshold = j.value("confidence_threshold", c.confidence_threshold);
    c.weights.lambda_c = j.value("lambda_c", c.weights.lambda_c);
    c.weights.lambda_i = j.value("lambda_i", c.weights.lambda_i);
    c.weights.tau = j.value("tau", c.weights.tau);
    c.context_len = j.value("context_len", c.context_len);
    c.seed = j.value("seed", c.seed);
    c.alpha_kind = alpha_schedule_from_string(j.value("alpha_schedule", "linear"));
    c.prompter.strategy = prompt_strategy_from_string(j.value("prompting_strategy", "cross_attention"));
    if (j.contains("ablation")) {
        const json& a = j["ablation"];
        c.ablation.itp = a.value("itp", true);
        c.ablation.vp = a.value("vp", true);
        c.ablation.l_sc = a.value("l_sc", true);
        c.ablation.l_idc = a.value("l_idc", true);
        c.ablation.l_im = a.value("l_im", true);
    }
    c.idc_source_weight = j.value("idc_source_weight", 1.0);
    c.idc_target_weight = j.value("idc_target_weight", 1.0);
    if (j.contains("encoder")) {
        const json& e = j["encoder"];
        c.encoder.joint_dim = e.value("joint_dim", c.encoder.joint_dim);
        c.encoder.text_layers = e.value("text_layers", c.encoder.text_layers);
        c.encoder.text_heads = e.value("text_heads", c.encoder.text_heads);
        c.encoder.vocab_size = e.value("vocab_size", c.encoder.vocab_size);
        c.encoder.max_text_len = e.value("max_text_len", c.encoder.max_text_len);
        c.encoder.grid_h = e.value("grid_h", c.encoder.grid_h);
        c.encoder.grid_w = e.value("grid_w", c.encoder.grid_w);
        c.encoder.vision_channels = e.value("vision_channels", c.encoder.vision_channels);
        c.encoder.image_channels = e.value("image_channels", c.encoder.image_channels);
        c.encoder.ffn_mult = e.value("ffn_mult", c.encoder.ffn_mult);
        c.encoder.seed = e.value("seed", c.encoder.seed);
    }
    if (j.contains("prompter")) {
        const json& p = j["prompter"];
        c.prompter.layers = p.value("layers", c.prompter.layers);
        c.prompter.dim = p.value("dim", c.prompter.dim);
        c.prompter.heads = p.value("heads", c.prompter.heads);
        c.prompter.gamma_v_init = p.value("gamma_v_init", c.prompter.gamma_v_init);
        c.prompter.gamma_s_init = p.value("gamma_s_init", c.prompter.gamma_s_init);
        c.prompter.share_parameters = p.value("share_parameters", c.prompter.share_parameters);
        c.prompter.ffn_mult = p.value("ffn_mult", c.prompter.ffn_mult);
    }
    if (j.contains("dataset")) {
        const json& d = j["dataset"];
        c.data.classes = d.value("classes", c.data.classes);
        c.data.per_class_source = d.value("per_class_source", c.data.per_class_source);
        c.data.per_class_target = d.value("per_class_target", c.data.per_class_target);
        c.data.seed = d.value("seed", c.data.seed);
        c.data.image_h = d.value("image_h", c.data.image_h);
        c.data.image_w = d.value("image_w", c.data.image_w);
        c.data.channels = d.value("channels", c.data.channels);
        c.data.instance_noise = d.value("instance_noise", c.data.instance_noise);
        if (d.contains("source_shifts")) {
            c.data.source_shifts.clear();
            for (const json& s : d["source_shifts"]) c.data.source_shifts.push_back(shift_from_json(s));
        }
        if (d.contains("target_shift")) c.data.target_shift = shift_from_json(d["target_shift"]);
        if (d.contains("dg_holdout_shift")) c.data.dg_holdout_shift = shift_from_json(d["dg_holdout_shift"]);
    }
    if (j.contains("strong_aug")) {
        const json& s = j["strong_aug"];
        c.strong_aug.magnitude = s.value("magnitude", c.strong_aug.magnitude);
        c.strong_aug.max_rotate_deg = s.value("max_rotate_deg", c.strong_aug.max_rotate_deg);
        c.strong_aug.max_invert = s.value("max_invert", c.strong_aug.max_invert);
        c.strong_aug.max_contrast = s.value("max_contrast", c.strong_aug.max_contrast);
        c.strong_aug.max_noise = s.value("max_noise", c.strong_aug.max_noise);
        c.strong_aug.max_cutout_frac = s.value("max_cutout_frac", c.strong_aug.max_cutout_frac);
        c.strong_aug.ops_per_sample = s.value("ops_per_sample", c.strong_aug.ops_per_sample);
    }
    if (j.contains("sweep_seeds")) c.sweep_seeds = j["sweep_seeds"].get<std::vector<uint64_t>>();
    return c;
}

// Applies "dotted.path=value" overrides on top of the file contents; values
// parse as json scalars, falling back to strings.
inline json apply_overrides(json base, const std::vector<std::string>& overrides) {
    for (const std::string& o : overrides) {
        auto eq = o.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("override '" + o + "' is not of the form key=value");
        std::string path = "/" + o.substr(0, eq);
        for (char& ch : path)
            if (ch == '.') ch = '/';
        std::string raw = o.substr(eq + 1);
        json value;
        try {
            value = json::parse(raw);
        } catch (const json::parse_error&) {
            value = raw;
        }
        base[json::json_pointer(path)] = value;
    }
    return base;
}

inline RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path);
    json j = json::parse(in);
    j = apply_overrides(std::move(j), overrides);
    RunConfig cfg = run_config_from_json(j);
    cfg.validate();
    return cfg;
}

}  // namespace damp
