#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "damp/image.hpp"
#include "damp/prompt_bank.hpp"
#include "damp/rng.hpp"
#include "damp/serialize.hpp"

namespace damp {

// Fixed transform applied to every sample of a domain. The identity descriptor
// leaves samples untouched, so source and target then share one distribution.
struct ShiftDescriptor {
    double rotation_deg = 0.0;
    std::vector<double> channel_gain;  // empty means unit gains
    double bias_strength = 0.0;        // planar additive bias field
    double noise_level = 0.0;          // extra per-pixel gaussian noise

    bool is_identity() const {
        if (rotation_deg != 0.0 || bias_strength != 0.0 || noise_level != 0.0) return false;
        for (double g : channel_gain)
            if (g != 1.0) return false;
        return true;
    }
};

struct DomainDatasetSpec {
    int classes = 6;
    int per_class_source = 12;
    int per_class_target = 12;
    uint64_t seed = 0;
    ShiftDescriptor source_shift;  // usually identity
    ShiftDescriptor target_shift;
    int image_h = 16;
    int image_w = 16;
    int channels = 3;
    double instance_noise = 0.08;
    ClassNames names;  // filled from classes when empty

    void validate() const {
        if (classes < 2) throw std::invalid_argument("DomainDatasetSpec: need K >= 2 classes");
        if (per_class_source < 1 || per_class_target < 1)
            throw std::invalid_argument("DomainDatasetSpec: per-class sample counts must be >= 1");
        if (image_h < 2 || image_w < 2 || channels < 1)
            throw std::invalid_argument("DomainDatasetSpec: degenerate image dimensions");
        if (instance_noise < 0) throw std::invalid_argument("DomainDatasetSpec: negative instance noise");
    }

    ClassNames resolved_names() const { return names.count() > 0 ? names : ClassNames::synthetic(classes); }
};

struct LabeledSet {
    std::vector<Image> x;
    std::vector<int> y;
    size_t size() const { return x.size(); }
};

// Target-domain samples; ground-truth labels are stored apart from the images
// and surface only through eval_labels(), never in a training batch.
struct TargetSet {
    std::vector<Image> x;
    size_t size() const { return x.size(); }
    const std::vector<int>& eval_labels() const { return eval_labels_; }
    std::vector<int> eval_labels_;
};

// ---- base patterns and shifts ----

namespace detail {

struct SinusoidComponent {
    double amp, fx, fy, phase;
};

inline std::vector<SinusoidComponent> class_pattern(uint64_t seed, int k) {
    auto rng = named_rng(seed, "pattern" + std::to_string(k));
    std::uniform_real_distribution<double> amp(0.5, 1.0), freq(0.5, 3.0), phase(0.0, 2.0 * M_PI);
    std::vector<SinusoidComponent> comps(3);
    for (auto& c : comps) c = {amp(rng), freq(rng), freq(rng), phase(rng)};
    return comps;
}

inline Image render_class(const std::vector<SinusoidComponent>& comps, int h, int w, int c) {
    Image img(h, w, c);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch) {
                double v = 0.0;
                for (const auto& comp : comps)
                    v += comp.amp * std::sin(2.0 * M_PI * (comp.fx * x + comp.fy * y) / w + comp.phase +
                                             0.9 * ch);
                img.at(y, x, ch) = 0.5 + 0.18 * v;
            }
    return img;
}

}  // namespace detail

// Bilinear rotation about the image center; samples falling outside are filled
// with mid-gray. Zero degrees is an exact identity.
inline Image rotate_image(const Image& img, double degrees) {
    if (degrees == 0.0) return img;
    double rad = degrees * M_PI / 180.0;
    double cs = std::cos(rad), sn = std::sin(rad);
    double cy = (img.h - 1) / 2.0, cx = (img.w - 1) / 2.0;
    Image out(img.h, img.w, img.c, 0.5);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) {
            double sx = cx + (x - cx) * cs - (y - cy) * sn;
            double sy = cy + (x - cx) * sn + (y - cy) * cs;
            int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
            double fx = sx - x0, fy = sy - y0;
            for (int ch = 0; ch < img.c; ++ch) {
                double acc = 0.0;
                for (int dy = 0; dy <= 1; ++dy)
                    for (int dx = 0; dx <= 1; ++dx) {
                        int yy = y0 + dy, xx = x0 + dx;
                        double wgt = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy);
                        double val = (yy >= 0 && yy < img.h && xx >= 0 && xx < img.w) ? img.at(yy, xx, ch) : 0.5;
                        acc += wgt * val;
                    }
                out.at(y, x, ch) = acc;
            }
        }
    }
    return out;
}

inline Image apply_shift(const Image& img, const ShiftDescriptor& shift, std::mt19937_64& rng) {
    if (!shift.channel_gain.empty() && static_cast<int>(shift.channel_gain.size()) != img.c)
        throw std::invalid_argument("apply_shift: " + std::to_string(shift.channel_gain.size()) +
                                    " channel gains for " + std::to_string(img.c) + " channels");
    Image out = rotate_image(img, shift.rotation_deg);
    if (!shift.channel_gain.empty())
        for (int y = 0; y < out.h; ++y)
            for (int x = 0; x < out.w; ++x)
                for (int ch = 0; ch < out.c; ++ch) out.at(y, x, ch) *= shift.channel_gain[ch];
    if (shift.bias_strength != 0.0)
        for (int y = 0; y < out.h; ++y)
            for (int x = 0; x < out.w; ++x) {
                double b = shift.bias_strength *
                           ((y / std::max(1.0, out.h - 1.0) - 0.5) + (x / std::max(1.0, out.w - 1.0) - 0.5));
                for (int ch = 0; ch < out.c; ++ch) out.at(y, x, ch) += b;
            }
    if (shift.noise_level > 0.0) {
        std::normal_distribution<double> dist(0.0, shift.noise_level);
        for (double& v : out.data) v += dist(rng);
    }
    return out;
}

// One domain: class pattern + per-instance noise, then the domain shift.
// Pure function of (spec, shift, stream, per_class).
inline LabeledSet generate_domain(const DomainDatasetSpec& spec, const ShiftDescriptor& shift,
                                  const std::string& stream, int per_class) {
    spec.validate();
    LabeledSet set;
    auto rng = named_rng(spec.seed, "domain_" + stream);
    std::normal_distribution<double> noise(0.0, spec.instance_noise);
    for (int k = 0; k < spec.classes; ++k) {
        Image base = detail::render_class(detail::class_pattern(spec.seed, k), spec.image_h, spec.image_w,
                                          spec.channels);
        for (int i = 0; i < per_class; ++i) {
            Image sample = base;
            for (double& v : sample.data) v += noise(rng);
            set.x.push_back(apply_shift(sample, shift, rng));
            set.y.push_back(k);
        }
    }
    return set;
}

struct GeneratedData {
    LabeledSet source;
    TargetSet target;
};

// Labeled source plus unlabeled target with held-out labels for evaluation.
inline GeneratedData generate(const DomainDatasetSpec& spec) {
    GeneratedData out;
    out.source = generate_domain(spec, spec.source_shift, "source0", spec.per_class_source);
    LabeledSet tgt = generate_domain(spec, spec.target_shift, "target", spec.per_class_target);
    out.target.x = std::move(tgt.x);
    out.target.eval_labels_ = std::move(tgt.y);
    return out;
}

// ---- augmentation ----

inline Image hflip(const Image& img) {
    Image out(img.h, img.w, img.c);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int ch = 0; ch < img.c; ++ch) out.at(y, x, ch) = img.at(y, img.w - 1 - x, ch);
    return out;
}

// Horizontal flip with probability 0.5 and nothing else.
inline Image weak_augment(const Image& img, std::mt19937_64& rng) {
    std::bernoulli_distribution flip(0.5);
    return flip(rng) ? hflip(img) : img;
}

struct StrongAugmentConfig {
    double magnitude = 1.0;  // scales every range below; 0 makes all ops identities
    double max_rotate_deg = 30.0;
    double max_invert = 1.0;
    double max_contrast = 0.8;
    double max_noise = 0.15;
    double max_cutout_frac = 0.4;
    int ops_per_sample = 2;
};

namespace detail {

inline Image op_invert(const Image& img, double m, std::mt19937_64&) {
    if (m == 0.0) return img;
    Image out = img;
    for (double& v : out.data) v = (1.0 - m) * v + m * (1.0 - v);
    return out;
}

inline Image op_rotate(const Image& img, double m, std::mt19937_64& rng) {
    if (m == 0.0) return img;
    std::bernoulli_distribution sign(0.5);
    return rotate_image(img, sign(rng) ? m : -m);
}

inline Image op_contrast(const Image& img, double m, std::mt19937_64& rng) {
    if (m == 0.0) return img;
    std::uniform_real_distribution<double> dist(-m, m);
    double s = dist(rng);
    double mean = 0.0;
    for (double v : img.data) mean += v;
    mean /= static_cast<double>(img.data.size());
    Image out = img;
    for (double& v : out.data) v = mean + (1.0 + s) * (v - mean);
    return out;
}

inline Image op_noise(const Image& img, double m, std::mt19937_64& rng) {
    if (m == 0.0) return img;
    std::normal_distribution<double> dist(0.0, m);
    Image out = img;
    for (double& v : out.data) v += dist(rng);
    return out;
}

inline Image op_cutout(const Image& img, double m, std::mt19937_64& rng) {
    int side = static_cast<int>(std::lround(m * std::min(img.h, img.w)));
    if (side <= 0) return img;
    std::uniform_int_distribution<int> ypos(0, img.h - side), xpos(0, img.w - side);
    int y0 = ypos(rng), x0 = xpos(rng);
    Image out = img;
    for (int y = y0; y < y0 + side; ++y)
        for (int x = x0; x < x0 + side; ++x)
            for (int ch = 0; ch < img.c; ++ch) out.at(y, x, ch) = 0.5;
    return out;
}

}  // namespace detail

// Composes ops_per_sample operations drawn from {invert, rotate, contrast,
// noise, cutout} with magnitudes drawn uniformly from the configured ranges.
inline Image strong_augment(const Image& img, std::mt19937_64& rng, const StrongAugmentConfig& cfg = {}) {
    std::uniform_int_distribution<int> pick_op(0, 4);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Image out = img;
    for (int i = 0; i < cfg.ops_per_sample; ++i) {
        int op = pick_op(rng);
        double u = unit(rng) * cfg.magnitude;
        switch (op) {
            case 0: out = detail::op_invert(out, u * cfg.max_invert, rng); break;
            case 1: out = detail::op_rotate(out, u * cfg.max_rotate_deg, rng); break;
            case 2: out = detail::op_contrast(out, u * cfg.max_contrast, rng); break;
            case 3: out = detail::op_noise(out, u * cfg.max_noise, rng); break;
            case 4: out = detail::op_cutout(out, u * cfg.max_cutout_frac, rng); break;
        }
    }
    return out;
}

// ---- dataset container ----

namespace detail {

inline void write_image(BinWriter& w, const Image& img) {
    w.u32(static_cast<uint32_t>(img.h));
    w.u32(static_cast<uint32_t>(img.w));
    w.u32(static_cast<uint32_t>(img.c));
    w.doubles(img.data);
}

inline Image read_image(BinReader& r) {
    Image img(static_cast<int>(r.u32()), static_cast<int>(r.u32()), static_cast<int>(r.u32()));
    img.data = r.doubles();
    return img;
}

inline void write_labeled(BinWriter& w, const std::vector<Image>& x, const std::vector<int>& y) {
    w.u64(x.size());
    for (const Image& img : x) write_image(w, img);
    w.u64(y.size());
    for (int v : y) w.i32(v);
}

}  // namespace detail

inline void save_dataset(const std::string& path, const DomainDatasetSpec& spec, const GeneratedData& data) {
    BinWriter w(path);
    w.header(ContainerKind::dataset, 1);
    w.u32(static_cast<uint32_t>(spec.classes));
    w.u64(spec.seed);
    detail::write_labeled(w, data.source.x, data.source.y);
    detail::write_labeled(w, data.target.x, data.target.eval_labels());
    w.finish();
}

inline GeneratedData load_dataset(const std::string& path, int* classes_out = nullptr) {
    BinReader r(path);
    r.expect_kind(ContainerKind::dataset, 1, "dataset");
    int classes = static_cast<int>(r.u32());
    if (classes_out) *classes_out = classes;
    r.u64();  // seed, informational
    GeneratedData data;
    uint64_t n = r.u64();
    for (uint64_t i = 0; i < n; ++i) data.source.x.push_back(detail::read_image(r));
    uint64_t ny = r.u64();
    for (uint64_t i = 0; i < ny; ++i) data.source.y.push_back(r.i32());
    n = r.u64();
    for (uint64_t i = 0; i < n; ++i) data.target.x.push_back(detail::read_image(r));
    ny = r.u64();
    for (uint64_t i = 0; i < ny; ++i) data.target.eval_labels_.push_back(r.i32());
    return data;
}

// ---- precomputed embedding archive ----

struct EmbeddingRecord {
    int domain_tag = 0;  // 0 source, 1 target
    int label = -1;      // -1 when unlabeled
    Matrix v;            // 1 x D
    Matrix v_tilde;      // HW x D
    bool has_post = false;
    Matrix v_prime;  // 1 x D, post-prompting (dump only)
    Matrix s_prime;  // K x D, post-prompting (dump only)
};

// Alternate data path: encoder outputs captured to disk. Training from an
// archive leaves only G and the gammas trainable, since there is no text
// encoder to backpropagate through.
struct EmbeddingArchive {
    int joint_dim = 0;
    int context_len = 0;
    int grid_tokens = 0;
    int classes = 0;
    Matrix s;        // K x D class text embeddings
    Matrix s_tilde;  // (K * context_len) x D stacked context outputs
    std::vector<EmbeddingRecord> records;

    void save(const std::string& path) const {
        BinWriter w(path);
        w.header(ContainerKind::embeddings, 1);
        w.u32(static_cast<uint32_t>(joint_dim));
        w.u32(static_cast<uint32_t>(context_len));
        w.u32(static_cast<uint32_t>(grid_tokens));
        w.u32(static_cast<uint32_t>(classes));
        w.matrix(s);
        w.matrix(s_tilde);
        w.u64(records.size());
        for (const EmbeddingRecord& rec : records) {
            w.i32(rec.domain_tag);
            w.i32(rec.label);
            w.matrix(rec.v);
            w.matrix(rec.v_tilde);
            w.u32(rec.has_post ? 1 : 0);
            if (rec.has_post) {
                w.matrix(rec.v_prime);
                w.matrix(rec.s_prime);
            }
        }
        w.finish();
    }

    static EmbeddingArchive load(const std::string& path) {
        BinReader r(path);
        r.expect_kind(ContainerKind::embeddings, 1, "embeddings");
        EmbeddingArchive a;
        a.joint_dim = static_cast<int>(r.u32());
        a.context_len = static_cast<int>(r.u32());
        a.grid_tokens = static_cast<int>(r.u32());
        a.classes = static_cast<int>(r.u32());
        a.s = r.matrix();
        a.s_tilde = r.matrix();
        uint64_t n = r.u64();
        a.records.reserve(n);
        for (uint64_t i = 0; i < n; ++i) {
            EmbeddingRecord rec;
            rec.domain_tag = r.i32();
            rec.label = r.i32();
            rec.v = r.matrix();
            rec.v_tilde = r.matrix();
            rec.has_post = r.u32() != 0;
            if (rec.has_post) {
                rec.v_prime = r.matrix();
                rec.s_prime = r.matrix();
            }
            a.records.push_back(std::move(rec));
        }
        return a;
    }
};

// Loads an archive and validates dimensions against the consuming
// configuration, naming both sides on mismatch.
inline EmbeddingArchive ingest_embeddings(const std::string& path, int joint_dim, int context_len,
                                          int grid_tokens) {
    EmbeddingArchive a = EmbeddingArchive::load(path);
    auto fail = [&](const std::string& field, int got, int want) {
        throw std::runtime_error("ingest_embeddings: archive " + field + " " + std::to_string(got) +
                                 " does not match configured " + field + " " + std::to_string(want));
    };
    if (a.joint_dim != joint_dim) fail("joint_dim", a.joint_dim, joint_dim);
    if (a.context_len != context_len) fail("context_len", a.context_len, context_len);
    if (a.grid_tokens != grid_tokens) fail("grid_tokens", a.grid_tokens, grid_tokens);
    return a;
}

}  // namespace damp
