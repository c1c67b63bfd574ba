#include <catch2/catch_amalgamated.hpp>

#include "damp/losses.hpp"
#include "damp/prompt_bank.hpp"
#include "damp/prompter.hpp"
#include "test_helpers.hpp"

using namespace damp;
using damp::testing::max_fd_rel_error;

namespace {

constexpr int kJointDim = 16;
constexpr int kContexts = 4;
constexpr int kGridTokens = 4;

PrompterConfig small_prompter() {
    PrompterConfig cfg;
    cfg.layers = 2;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.seed = 3;
    return cfg;
}

Matrix rmat(int r, int c, uint64_t seed, double sd = 0.5) {
    auto rng = named_rng(seed, "prompter_test");
    return randn(rng, r, c, sd);
}

}  // namespace

TEST_CASE("gamma_v = 0 makes visual prompting an exact identity") {
    PrompterConfig cfg = small_prompter();
    cfg.gamma_v_init = 0.0;
    MutualPrompter g = MutualPrompter::init(cfg, kJointDim);
    Matrix v = rmat(1, kJointDim, 1);
    Matrix s_tilde = rmat(kContexts, kJointDim, 2);
    CHECK(g.prompt_visual(v, s_tilde).data == v.data);
}

TEST_CASE("gamma_s = 0 makes textual prompting an exact identity") {
    PrompterConfig cfg = small_prompter();
    cfg.gamma_s_init = 0.0;
    MutualPrompter g = MutualPrompter::init(cfg, kJointDim);
    Matrix s = rmat(3, kJointDim, 3);
    Matrix v_tilde = rmat(kGridTokens, kJointDim, 4);
    CHECK(g.prompt_textual(s, v_tilde).data == s.data);
}

TEST_CASE("gradient of a probe loss w.r.t. gamma_v matches finite differences") {
    MutualPrompter g = MutualPrompter::init(small_prompter(), kJointDim);
    Matrix v = rmat(1, kJointDim, 5);
    Matrix s_tilde = rmat(kContexts, kJointDim, 6);
    Matrix probe = rmat(1, kJointDim, 7);

    auto eval = [&]() {
        Tape t(false);
        Var out = g.prompt_visual(t, g.bind(t), t.constant(v), t.constant(s_tilde));
        return t.scalar_value(t.sum_all(t.hadamard(out, t.constant(probe))));
    };
    Tape t;
    std::vector<TapeBinding> bindings;
    auto bound = g.bind(t, &bindings);
    Var out = g.prompt_visual(t, bound, t.constant(v), t.constant(s_tilde));
    t.backward(t.sum_all(t.hadamard(out, t.constant(probe))));
    Matrix analytic = t.grad(bound.gamma_v);
    CHECK(max_fd_rel_error(g.gamma_v(), eval, analytic) < 1e-4);
}

TEST_CASE("permuting context rows leaves prompted outputs unchanged") {
    MutualPrompter g = MutualPrompter::init(small_prompter(), kJointDim);
    Matrix v = rmat(1, kJointDim, 8);
    Matrix s_tilde = rmat(kContexts, kJointDim, 9);
    Matrix out = g.prompt_visual(v, s_tilde);

    std::vector<int> perm{2, 0, 3, 1};
    Matrix permuted(kContexts, kJointDim);
    for (int i = 0; i < kContexts; ++i)
        for (int j = 0; j < kJointDim; ++j) permuted(i, j) = s_tilde(perm[i], j);
    CHECK(max_abs_diff(g.prompt_visual(v, permuted), out) < 1e-12);
}

TEST_CASE("textual prompting is instance-conditioned") {
    MutualPrompter g = MutualPrompter::init(small_prompter(), kJointDim);
    Matrix s = rmat(2, kJointDim, 10);
    Matrix va = rmat(kGridTokens, kJointDim, 11);
    Matrix vb = rmat(kGridTokens, kJointDim, 12);
    Matrix sa = g.prompt_textual(s, va);
    Matrix sb = g.prompt_textual(s, vb);
    CHECK(frobenius_norm(sub(sa, sb)) > 1e-8);
}

TEST_CASE("disabling parameter sharing doubles the module parameter count") {
    PrompterConfig cfg = small_prompter();
    MutualPrompter shared = MutualPrompter::init(cfg, kJointDim);
    cfg.share_parameters = false;
    MutualPrompter split = MutualPrompter::init(cfg, kJointDim);
    CHECK(split.parameter_count() == 2 * shared.parameter_count());
}

TEST_CASE("batched class rows equal per-class single-row prompting") {
    MutualPrompter g = MutualPrompter::init(small_prompter(), kJointDim);
    Matrix s = rmat(5, kJointDim, 13);
    Matrix v_tilde = rmat(kGridTokens, kJointDim, 14);
    Matrix batched = g.prompt_textual(s, v_tilde);
    for (int k = 0; k < 5; ++k) {
        Matrix row(1, kJointDim);
        for (int j = 0; j < kJointDim; ++j) row(0, j) = s(k, j);
        Matrix single = g.prompt_textual(row, v_tilde);
        for (int j = 0; j < kJointDim; ++j) CHECK(batched(k, j) == Catch::Approx(single(0, j)).margin(1e-12));
    }
}

TEST_CASE("prompt_pair with zero gammas reduces to the raw embeddings") {
    PrompterConfig cfg = small_prompter();
    cfg.gamma_v_init = 0.0;
    cfg.gamma_s_init = 0.0;
    MutualPrompter g = MutualPrompter::init(cfg, kJointDim);

    EncodedImage img;
    img.v = rmat(1, kJointDim, 15);
    img.v_tilde = rmat(kGridTokens, kJointDim, 16);
    std::vector<EncodedText> texts(3);
    for (int k = 0; k < 3; ++k) {
        texts[k].s = rmat(1, kJointDim, 17 + k);
        texts[k].s_tilde = rmat(kContexts, kJointDim, 27 + k);
    }
    PromptedPair pair = g.prompt_pair(img, texts);
    CHECK(pair.v_prime.data == img.v.data);
    for (int k = 0; k < 3; ++k)
        for (int j = 0; j < kJointDim; ++j) CHECK(pair.s_prime(k, j) == texts[k].s(0, j));

    // downstream heads then agree
    Matrix s_rows(3, kJointDim);
    for (int k = 0; k < 3; ++k)
        for (int j = 0; j < kJointDim; ++j) s_rows(k, j) = texts[k].s(0, j);
    CHECK(max_abs_diff(classify(pair, 0.01), zero_shot_classify(img.v, s_rows, 0.01)) < 1e-12);
}

TEST_CASE("prompt_pair is deterministic and rejects short text lists") {
    MutualPrompter g = MutualPrompter::init(small_prompter(), kJointDim);
    EncodedImage img;
    img.v = rmat(1, kJointDim, 30);
    img.v_tilde = rmat(kGridTokens, kJointDim, 31);
    std::vector<EncodedText> texts(2);
    for (int k = 0; k < 2; ++k) {
        texts[k].s = rmat(1, kJointDim, 32 + k);
        texts[k].s_tilde = rmat(kContexts, kJointDim, 34 + k);
    }
    PromptedPair a = g.prompt_pair(img, texts);
    PromptedPair b = g.prompt_pair(img, texts);
    CHECK(a.v_prime.data == b.v_prime.data);
    CHECK(a.s_prime.data == b.s_prime.data);
    CHECK_THROWS_WITH(g.prompt_pair(img, std::vector<EncodedText>(1, texts[0])),
                      Catch::Matchers::ContainsSubstring("at least 2"));
}

TEST_CASE("gradients reach the contexts through the visual branch alone") {
    // zeroing gamma_s keeps a live path from p to the loss via the mean context
    EncoderConfig ecfg;
    ecfg.joint_dim = kJointDim;
    ecfg.text_layers = 1;
    ecfg.text_heads = 2;
    ecfg.vocab_size = 32;
    ecfg.max_text_len = 12;
    ecfg.seed = 40;
    FrozenTextEncoder enc = FrozenTextEncoder::init(ecfg);
    PromptBank bank = PromptBank::init(kContexts, kJointDim, ClassNames::synthetic(2), 41, ecfg.max_text_len);

    PrompterConfig cfg = small_prompter();
    cfg.gamma_s_init = 0.0;
    MutualPrompter g = MutualPrompter::init(cfg, kJointDim);

    Matrix v = rmat(1, kJointDim, 42);
    Matrix probe = rmat(1, kJointDim, 43);
    Tape t;
    Var p_var = t.leaf(bank.contexts());
    std::vector<Var> tilde;
    for (int k = 0; k < 2; ++k) {
        auto asm_k = bank.assemble_prompt(k);
        tilde.push_back(enc.encode(t, p_var, asm_k.class_tokens).s_tilde);
    }
    Var s_tilde_mean = t.scale(t.add(tilde[0], tilde[1]), 0.5);
    Var v_prime = g.prompt_visual(t, g.bind(t), t.constant(v), s_tilde_mean);
    t.backward(t.sum_all(t.hadamard(v_prime, t.constant(probe))));
    CHECK(frobenius_norm(t.grad(p_var)) > 1e-10);
}

TEST_CASE("independent strategy ignores the opposite modality") {
    PrompterConfig cfg = small_prompter();
    cfg.strategy = PromptStrategy::independent;
    MutualPrompter g = MutualPrompter::init(cfg, kJointDim);
    Matrix v = rmat(1, kJointDim, 50);
    Matrix ca = g.prompt_visual(v, rmat(kContexts, kJointDim, 51));
    Matrix cb = g.prompt_visual(v, rmat(kContexts, kJointDim, 52));
    CHECK(ca.data == cb.data);
    CHECK(frobenius_norm(sub(ca, v)) > 1e-10);  // still adjusts the embedding
}

TEST_CASE("simple synergy applies one class-independent shift per instance") {
    PrompterConfig cfg = small_prompter();
    cfg.strategy = PromptStrategy::simple_synergy;
    MutualPrompter g = MutualPrompter::init(cfg, kJointDim);
    Matrix s = rmat(3, kJointDim, 53);
    Matrix v_tilde = rmat(kGridTokens, kJointDim, 54);
    Matrix out = g.prompt_textual(s, v_tilde);
    Matrix delta0(1, kJointDim), delta1(1, kJointDim);
    for (int j = 0; j < kJointDim; ++j) {
        delta0(0, j) = out(0, j) - s(0, j);
        delta1(0, j) = out(1, j) - s(1, j);
    }
    CHECK(max_abs_diff(delta0, delta1) < 1e-12);
    CHECK(frobenius_norm(delta0) > 1e-10);
}

TEST_CASE("strategy none has no parameters and passes embeddings through") {
    PrompterConfig cfg = small_prompter();
    cfg.strategy = PromptStrategy::none;
    MutualPrompter g = MutualPrompter::init(cfg, kJointDim);
    CHECK(g.parameter_count() == 0);
    Matrix v = rmat(1, kJointDim, 55);
    CHECK(g.prompt_visual(v, rmat(kContexts, kJointDim, 56)).data == v.data);
    ParamSet params;
    g.collect_params(params, true, true);
    CHECK(params.empty());
}

TEST_CASE("prompter checkpoint round-trips") {
    MutualPrompter g = MutualPrompter::init(small_prompter(), kJointDim);
    g.gamma_v()(0, 0) = 0.77;
    std::string path = "prompter_test.dampbin";
    {
        BinWriter w(path);
        w.header(ContainerKind::checkpoint, 1);
        g.save(w);
        w.finish();
    }
    MutualPrompter g2 = MutualPrompter::init(small_prompter(), kJointDim);
    {
        BinReader r(path);
        r.expect_kind(ContainerKind::checkpoint, 1, "checkpoint");
        g2.load(r);
    }
    std::remove(path.c_str());
    CHECK(g2.gamma_v()(0, 0) == 0.77);
    Matrix v = rmat(1, kJointDim, 57);
    Matrix s_tilde = rmat(kContexts, kJointDim, 58);
    CHECK(g.prompt_visual(v, s_tilde).data == g2.prompt_visual(v, s_tilde).data);
}
