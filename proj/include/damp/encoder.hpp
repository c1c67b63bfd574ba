#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "damp/image.hpp"
#include "damp/rng.hpp"
#include "damp/serialize.hpp"
#include "damp/tape.hpp"

namespace damp {

// Two stride-2 patch layers take the input image down to the token grid.
inline constexpr int kPatchStride = 2;
inline constexpr int kVisionLayers = 2;

struct EncoderConfig {
    int joint_dim = 64;     // shared text/vision embedding width
    int text_layers = 4;    // encoder depth J
    int text_heads = 4;
    int vocab_size = 64;
    int max_text_len = 48;
    int grid_h = 4;         // token grid after the vision stack
    int grid_w = 4;
    int vision_channels = 32;
    int image_channels = 3;
    int ffn_mult = 4;
    uint64_t seed = 0;

    int image_h() const { return grid_h * kPatchStride * kPatchStride; }
    int image_w() const { return grid_w * kPatchStride * kPatchStride; }
    int grid_tokens() const { return grid_h * grid_w; }

    void validate() const {
        if (joint_dim <= 0 || text_layers < 0 || text_heads <= 0 || vocab_size <= 0 || max_text_len <= 0 ||
            grid_h <= 0 || grid_w <= 0 || vision_channels <= 0 || image_channels <= 0 || ffn_mult <= 0)
            throw std::invalid_argument("EncoderConfig: all dimensions must be positive");
        if (joint_dim % text_heads != 0)
            throw std::invalid_argument("EncoderConfig: joint_dim " + std::to_string(joint_dim) +
                                        " not divisible by text_heads " + std::to_string(text_heads));
    }
};

// ---- attention primitives ----

// softmax(Q K^T / sqrt(dk)) V. Every output row is a convex combination of V rows.
inline Var attention(Tape& t, Var q, Var k, Var v) {
    const Matrix& qm = t.value(q);
    const Matrix& km = t.value(k);
    const Matrix& vm = t.value(v);
    if (qm.cols != km.cols)
        throw std::invalid_argument("attention: Q has " + std::to_string(qm.cols) + " columns, K has " +
                                    std::to_string(km.cols));
    if (km.rows != vm.rows)
        throw std::invalid_argument("attention: K has " + std::to_string(km.rows) + " rows, V has " +
                                    std::to_string(vm.rows));
    Var scores = t.scale(t.matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(qm.cols)));
    return t.matmul(t.softmax_rows(scores), v);
}

inline Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v) {
    Tape t(false);
    return t.value(attention(t, t.constant(q), t.constant(k), t.constant(v)));
}

// Packed multi-head projections. wq/wk/wv map the input width to heads*head_dim
// laid out head-major; wo maps heads*head_dim to the output width.
struct MhsaWeights {
    Matrix wq, wk, wv, wo;
    int heads = 1;

    int head_dim() const { return wq.cols / heads; }

    static MhsaWeights init(std::mt19937_64& rng, int in_dim, int inner_dim, int out_dim, int heads) {
        if (inner_dim % heads != 0)
            throw std::invalid_argument("MhsaWeights: inner dim " + std::to_string(inner_dim) +
                                        " not divisible by " + std::to_string(heads) + " heads");
        double sd = 1.0 / std::sqrt(static_cast<double>(in_dim));
        MhsaWeights w;
        w.wq = randn(rng, in_dim, inner_dim, sd);
        w.wk = randn(rng, in_dim, inner_dim, sd);
        w.wv = randn(rng, in_dim, inner_dim, sd);
        w.wo = randn(rng, inner_dim, out_dim, 1.0 / std::sqrt(static_cast<double>(inner_dim)));
        w.heads = heads;
        return w;
    }
};

struct MhsaVars {
    Var wq, wk, wv, wo;
    int heads = 1;
};

inline MhsaVars inject_const(Tape& t, const MhsaWeights& w) {
    return MhsaVars{t.constant(w.wq), t.constant(w.wk), t.constant(w.wv), t.constant(w.wo), w.heads};
}

// Cross-attention: queries from x_q, keys/values from x_kv. Self-attention is
// the x_q == x_kv case.
inline Var mhca(Tape& t, Var x_q, Var x_kv, const MhsaVars& w) {
    Var q_all = t.matmul(x_q, w.wq);
    Var k_all = t.matmul(x_kv, w.wk);
    Var v_all = t.matmul(x_kv, w.wv);
    int inner = t.value(q_all).cols;
    int dh = inner / w.heads;
    std::vector<Var> heads;
    heads.reserve(w.heads);
    for (int h = 0; h < w.heads; ++h) {
        Var qh = t.slice_cols(q_all, h * dh, dh);
        Var kh = t.slice_cols(k_all, h * dh, dh);
        Var vh = t.slice_cols(v_all, h * dh, dh);
        heads.push_back(attention(t, qh, kh, vh));
    }
    return t.matmul(t.concat_cols(heads), w.wo);
}

inline Var mhsa(Tape& t, Var tokens, const MhsaVars& w) { return mhca(t, tokens, tokens, w); }

inline Matrix mhsa(const Matrix& tokens, const MhsaWeights& w) {
    Tape t(false);
    return t.value(mhsa(t, t.constant(tokens), inject_const(t, w)));
}

// ---- frozen text encoder ----

struct EncodedText {
    Matrix s;        // 1 x D class embedding (last-position output)
    Matrix s_tilde;  // N x D context-position outputs
};

struct TextVars {
    Var s;
    Var s_tilde;  // invalid when encoded without learnable contexts
};

struct TextLayerWeights {
    MhsaWeights attn;
    Matrix ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    Matrix ln1_g, ln1_b, ln2_g, ln2_b;
};

// Scaled so a position row has roughly unit norm, comparable to the token
// embeddings it is added to.
inline Matrix sinusoidal_positions(int len, int dim) {
    Matrix pe(len, dim);
    double scale = std::sqrt(2.0 / static_cast<double>(dim));
    for (int pos = 0; pos < len; ++pos) {
        for (int i = 0; i < dim; ++i) {
            double rate = std::pow(10000.0, -2.0 * (i / 2) / static_cast<double>(dim));
            pe(pos, i) = scale * ((i % 2 == 0) ? std::sin(pos * rate) : std::cos(pos * rate));
        }
    }
    return pe;
}

class FrozenTextEncoder {
public:
    static FrozenTextEncoder init(const EncoderConfig& cfg) {
        cfg.validate();
        FrozenTextEncoder enc;
        enc.cfg_ = cfg;
        auto rng = named_rng(cfg.seed, "text_encoder");
        int D = cfg.joint_dim;
        double sd = 1.0 / std::sqrt(static_cast<double>(D));
        enc.token_table_ = randn(rng, cfg.vocab_size, D, sd);
        enc.pos_enc_ = sinusoidal_positions(cfg.max_text_len, D);
        enc.layers_.reserve(cfg.text_layers);
        for (int j = 0; j < cfg.text_layers; ++j) {
            TextLayerWeights lw;
            lw.attn = MhsaWeights::init(rng, D, D, D, cfg.text_heads);
            int hidden = cfg.ffn_mult * D;
            lw.ffn_w1 = randn(rng, D, hidden, sd);
            lw.ffn_b1 = Matrix(1, hidden);
            lw.ffn_w2 = randn(rng, hidden, D, 1.0 / std::sqrt(static_cast<double>(hidden)));
            lw.ffn_b2 = Matrix(1, D);
            lw.ln1_g = Matrix(1, D, 1.0);
            lw.ln1_b = Matrix(1, D);
            lw.ln2_g = Matrix(1, D, 1.0);
            lw.ln2_b = Matrix(1, D);
            enc.layers_.push_back(std::move(lw));
        }
        return enc;
    }

    const EncoderConfig& config() const { return cfg_; }
    const Matrix& token_table() const { return token_table_; }

    // Runs the J encoder layers over [contexts, class-name token embeddings].
    // Encoder weights enter the tape as constants: they stay out of the
    // optimizer but remain in the differentiation graph, so gradients reach the
    // learnable contexts.
    TextVars encode(Tape& t, std::optional<Var> contexts, std::span<const int> tokens) const {
        int n_ctx = contexts ? t.value(*contexts).rows : 0;
        int len = n_ctx + static_cast<int>(tokens.size());
        if (len > cfg_.max_text_len)
            throw std::invalid_argument("encode_text: sequence length " + std::to_string(len) +
                                        " exceeds max_text_len " + std::to_string(cfg_.max_text_len));
        if (tokens.empty()) throw std::invalid_argument("encode_text: empty class-name token sequence");
        if (contexts && t.value(*contexts).cols != cfg_.joint_dim)
            throw std::invalid_argument("encode_text: context width " +
                                        std::to_string(t.value(*contexts).cols) + " != joint_dim " +
                                        std::to_string(cfg_.joint_dim));
        Matrix tok_rows(static_cast<int>(tokens.size()), cfg_.joint_dim);
        for (size_t i = 0; i < tokens.size(); ++i) {
            int id = tokens[i];
            if (id < 0 || id >= cfg_.vocab_size)
                throw std::invalid_argument("encode_text: token id " + std::to_string(id) +
                                            " outside vocabulary of size " + std::to_string(cfg_.vocab_size));
            for (int j = 0; j < cfg_.joint_dim; ++j) tok_rows(i, j) = token_table_(id, j);
        }
        Var x;
        if (contexts) {
            x = t.concat_rows({*contexts, t.constant(std::move(tok_rows))});
        } else {
            x = t.constant(std::move(tok_rows));
        }
        Matrix pe(len, cfg_.joint_dim);
        for (int p = 0; p < len; ++p)
            for (int j = 0; j < cfg_.joint_dim; ++j) pe(p, j) = pos_enc_(p, j);
        x = t.add(x, t.constant(std::move(pe)));
        for (const TextLayerWeights& lw : layers_) x = encoder_layer(t, x, lw);
        TextVars out;
        out.s = t.row(x, len - 1);
        if (n_ctx > 0) out.s_tilde = t.slice_rows(x, 0, n_ctx);
        return out;
    }

    EncodedText encode(const Matrix& contexts, std::span<const int> tokens) const {
        Tape t(false);
        TextVars v = encode(t, t.constant(contexts), tokens);
        return EncodedText{t.value(v.s), t.value(v.s_tilde)};
    }

    // Fixed-template path (no learnable contexts), used for naive prompts.
    Matrix encode_tokens_only(std::span<const int> tokens) const {
        Tape t(false);
        return t.value(encode(t, std::nullopt, tokens).s);
    }

    std::vector<const Matrix*> all_weights() const {
        std::vector<const Matrix*> ws{&token_table_};
        for (const auto& lw : layers_) {
            for (const Matrix* m : {&lw.attn.wq, &lw.attn.wk, &lw.attn.wv, &lw.attn.wo, &lw.ffn_w1, &lw.ffn_b1,
                                    &lw.ffn_w2, &lw.ffn_b2, &lw.ln1_g, &lw.ln1_b, &lw.ln2_g, &lw.ln2_b})
                ws.push_back(m);
        }
        return ws;
    }

    void save(BinWriter& w) const {
        w.u32(static_cast<uint32_t>(layers_.size()));
        w.u32(static_cast<uint32_t>(cfg_.text_heads));
        for (const Matrix* m : all_weights()) w.matrix(*m);
    }

    static FrozenTextEncoder load(BinReader& r, const EncoderConfig& cfg) {
        FrozenTextEncoder enc = init(cfg);
        uint32_t nl = r.u32();
        uint32_t heads = r.u32();
        if (nl != enc.layers_.size() || heads != static_cast<uint32_t>(cfg.text_heads))
            throw std::runtime_error("FrozenTextEncoder::load: layer/head mismatch with config");
        enc.token_table_ = r.matrix();
        for (auto& lw : enc.layers_) {
            for (Matrix* m : {&lw.attn.wq, &lw.attn.wk, &lw.attn.wv, &lw.attn.wo, &lw.ffn_w1, &lw.ffn_b1,
                              &lw.ffn_w2, &lw.ffn_b2, &lw.ln1_g, &lw.ln1_b, &lw.ln2_g, &lw.ln2_b})
                *m = r.matrix();
        }
        return enc;
    }

private:
    Var encoder_layer(Tape& t, Var x, const TextLayerWeights& lw) const {
        Var attn = mhsa(t, x, inject_const(t, lw.attn));
        Var x1 = t.layer_norm_rows(t.add(attn, x), t.constant(lw.ln1_g), t.constant(lw.ln1_b));
        Var h = t.gelu(t.add_rowvec(t.matmul(x1, t.constant(lw.ffn_w1)), t.constant(lw.ffn_b1)));
        Var ff = t.add_rowvec(t.matmul(h, t.constant(lw.ffn_w2)), t.constant(lw.ffn_b2));
        return t.layer_norm_rows(t.add(ff, x1), t.constant(lw.ln2_g), t.constant(lw.ln2_b));
    }

    EncoderConfig cfg_;
    Matrix token_table_;
    Matrix pos_enc_;
    std::vector<TextLayerWeights> layers_;
};

// ---- frozen image encoder ----

struct EncodedImage {
    Matrix v;        // 1 x D class-token embedding
    Matrix v_tilde;  // (grid_h*grid_w) x D spatial-position embeddings
    Matrix z;        // (grid_h*grid_w) x C feature map, rows in row-major grid order
    Matrix z_bar;    // 1 x C global average pool of z
};

class FrozenImageEncoder {
public:
    static FrozenImageEncoder init(const EncoderConfig& cfg) {
        cfg.validate();
        FrozenImageEncoder enc;
        enc.cfg_ = cfg;
        auto rng = named_rng(cfg.seed, "image_encoder");
        int C = cfg.vision_channels;
        int patch1 = kPatchStride * kPatchStride * cfg.image_channels;
        int patch2 = kPatchStride * kPatchStride * C;
        enc.w1_ = randn(rng, patch1, C, 1.0 / std::sqrt(static_cast<double>(patch1)));
        enc.b1_ = Matrix(1, C);
        // second layer filters are untied per output position, so channel
        // activations stay position-aware and spatial class structure survives
        // the global average pool
        enc.w2_ = randn(rng, cfg.grid_tokens() * patch2, C, 1.0 / std::sqrt(static_cast<double>(patch2)));
        enc.b2_ = Matrix(1, C);
        enc.pool_ = MhsaWeights::init(rng, C, cfg.joint_dim, cfg.joint_dim, cfg.text_heads);
        return enc;
    }

    const EncoderConfig& config() const { return cfg_; }

    // Feature map from the two patch layers, then attention pooling over
    // [GAP(z), z] tokens. Purely numeric: nothing learnable feeds this path.
    EncodedImage encode(const Image& x) const {
        if (x.h != cfg_.image_h() || x.w != cfg_.image_w() || x.c != cfg_.image_channels)
            throw std::invalid_argument("encode_image: input " + x.shape_str() + ", config expects " +
                                        std::to_string(cfg_.image_h()) + "x" + std::to_string(cfg_.image_w()) +
                                        "x" + std::to_string(cfg_.image_channels));
        Matrix f1 = patch_layer(as_tokens(x), x.h, x.w, x.c, w1_, b1_, true);
        Matrix z = patch_layer(f1, x.h / kPatchStride, x.w / kPatchStride, cfg_.vision_channels, w2_, b2_, false);

        EncodedImage out;
        out.z = z;
        out.z_bar = Matrix(1, z.cols);
        for (int i = 0; i < z.rows; ++i)
            for (int j = 0; j < z.cols; ++j) out.z_bar(0, j) += z(i, j) / z.rows;

        Tape t(false);
        std::vector<Var> toks{t.constant(out.z_bar), t.constant(z)};
        Var pooled = mhsa(t, t.concat_rows(toks), inject_const(t, pool_));
        out.v = t.value(t.row(pooled, 0));
        out.v_tilde = t.value(t.slice_rows(pooled, 1, z.rows));
        return out;
    }

    std::vector<const Matrix*> all_weights() const {
        return {&w1_, &b1_, &w2_, &b2_, &pool_.wq, &pool_.wk, &pool_.wv, &pool_.wo};
    }

    void save(BinWriter& w) const {
        for (const Matrix* m : all_weights()) w.matrix(*m);
    }

    static FrozenImageEncoder load(BinReader& r, const EncoderConfig& cfg) {
        FrozenImageEncoder enc = init(cfg);
        for (Matrix* m : {&enc.w1_, &enc.b1_, &enc.w2_, &enc.b2_, &enc.pool_.wq, &enc.pool_.wk, &enc.pool_.wv,
                          &enc.pool_.wo})
            *m = r.matrix();
        return enc;
    }

private:
    static Matrix as_tokens(const Image& x) {
        Matrix m(x.h * x.w, x.c);
        std::copy(x.data.begin(), x.data.end(), m.data.begin());
        return m;
    }

    // 2x2 stride-2 patches, flattened patch -> linear -> GELU -> per-position
    // normalization. The normalization strips the common-mode component that
    // otherwise swamps cosine similarities downstream. Tied filters share one
    // weight block across positions; untied filters use one block per position.
    static Matrix patch_layer(const Matrix& grid, int h, int w, int c, const Matrix& weight, const Matrix& bias,
                              bool tied) {
        int oh = h / kPatchStride, ow = w / kPatchStride;
        int patch_dim = kPatchStride * kPatchStride * c;
        Matrix patches(oh * ow, patch_dim);
        for (int py = 0; py < oh; ++py) {
            for (int px = 0; px < ow; ++px) {
                int col = 0;
                for (int dy = 0; dy < kPatchStride; ++dy)
                    for (int dx = 0; dx < kPatchStride; ++dx)
                        for (int ch = 0; ch < c; ++ch)
                            patches(py * ow + px, col++) =
                                grid((py * kPatchStride + dy) * w + (px * kPatchStride + dx), ch);
            }
        }
        Matrix pre(oh * ow, weight.cols);
        if (tied) {
            pre = matmul(patches, weight);
        } else {
            if (weight.rows != (oh * ow) * patch_dim)
                throw std::invalid_argument("patch_layer: untied weight rows " + std::to_string(weight.rows) +
                                            " != positions*patch " + std::to_string((oh * ow) * patch_dim));
            for (int pos = 0; pos < oh * ow; ++pos)
                for (int k = 0; k < patch_dim; ++k) {
                    double xk = patches(pos, k);
                    if (xk == 0.0) continue;
                    for (int j = 0; j < weight.cols; ++j) pre(pos, j) += xk * weight(pos * patch_dim + k, j);
                }
        }
        Tape t(false);
        Var act = t.gelu(t.add_rowvec(t.constant(std::move(pre)), t.constant(bias)));
        int width = t.value(act).cols;
        Var out = t.layer_norm_rows(act, t.constant(Matrix(1, width, 1.0)), t.constant(Matrix(1, width)));
        return t.value(out);
    }

    EncoderConfig cfg_;
    Matrix w1_, b1_, w2_, b2_;
    MhsaWeights pool_;
};

// Byte-level fingerprint of frozen weights, used by the frozen-contract checks.
inline uint64_t weights_fingerprint(const std::vector<const Matrix*>& ws) {
    uint64_t h = 14695981039346656037ull;
    for (const Matrix* m : ws) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(m->data.data());
        for (size_t i = 0; i < m->data.size() * sizeof(double); ++i) {
            h ^= bytes[i];
            h *= 1099511628211ull;
        }
    }
    return h;
}

inline void save_encoders(const std::string& path, const FrozenTextEncoder& text, const FrozenImageEncoder& image) {
    BinWriter w(path);
    w.header(ContainerKind::encoder_weights, 1);
    text.save(w);
    image.save(w);
    w.finish();
}

inline std::pair<FrozenTextEncoder, FrozenImageEncoder> load_encoders(const std::string& path,
                                                                      const EncoderConfig& cfg) {
    BinReader r(path);
    r.expect_kind(ContainerKind::encoder_weights, 1, "encoder_weights");
    FrozenTextEncoder text = FrozenTextEncoder::load(r, cfg);
    FrozenImageEncoder image = FrozenImageEncoder::load(r, cfg);
    return {std::move(text), std::move(image)};
}

}  // namespace damp
