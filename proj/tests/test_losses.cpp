#include <catch2/catch_amalgamated.hpp>

#include "damp/losses.hpp"
#include "test_helpers.hpp"

using namespace damp;

namespace {

Matrix rmat(int r, int c, uint64_t seed, double sd = 1.0) {
    auto rng = named_rng(seed, "loss_test");
    return randn(rng, r, c, sd);
}

Matrix unit_row(int dim, int axis) {
    Matrix m(1, dim);
    m(0, axis) = 1.0;
    return m;
}

Matrix probs_row(std::initializer_list<double> vals) {
    Matrix m(1, static_cast<int>(vals.size()));
    std::copy(vals.begin(), vals.end(), m.data.begin());
    return m;
}

// Direct per-anchor evaluation of the instance-discrimination loss, written
// independently of the production path.
double idc_bruteforce(const std::vector<PromptedPair>& batch, double tau) {
    int B = static_cast<int>(batch.size());
    int K = batch[0].s_prime.rows;
    auto cos_sim = [](const double* a, const double* b, int n) {
        double ab = 0, aa = 0, bb = 0;
        for (int i = 0; i < n; ++i) {
            ab += a[i] * b[i];
            aa += a[i] * a[i];
            bb += b[i] * b[i];
        }
        return ab / std::sqrt(aa * bb);
    };
    double total = 0.0;
    for (int a = 0; a < B; ++a) {
        std::vector<double> sims(B);
        for (int b = 0; b < B; ++b) {
            double acc = 0.0;
            for (int k = 0; k < K; ++k)
                acc += cos_sim(&batch[a].s_prime.data[static_cast<size_t>(k) * batch[a].s_prime.cols],
                               batch[b].v_prime.data.data(), batch[b].v_prime.cols);
            sims[b] = acc / (K * tau);
        }
        double m = *std::max_element(sims.begin(), sims.end());
        double z = 0.0;
        for (double s : sims) z += std::exp(s - m);
        total += -(sims[a] - m) + std::log(z);
    }
    return total / B;
}

std::vector<PromptedPair> random_batch(int B, int K, int D, uint64_t seed) {
    std::vector<PromptedPair> batch(B);
    for (int b = 0; b < B; ++b) {
        batch[b].v_prime = rmat(1, D, seed + b * 31);
        batch[b].s_prime = rmat(K, D, seed + b * 31 + 7);
    }
    return batch;
}

}  // namespace

// ---- classification heads ----

TEST_CASE("identical class embeddings give uniform probabilities") {
    Matrix v = rmat(1, 8, 1);
    Matrix s(4, 8);
    for (int k = 0; k < 4; ++k)
        for (int j = 0; j < 8; ++j) s(k, j) = 0.3 * j - 1.0;
    PromptedPair pair{v, s};
    Matrix probs = classify(pair, 0.01);
    validate_class_probabilities(probs);
    for (int k = 0; k < 4; ++k) CHECK(probs(0, k) == Catch::Approx(0.25).margin(1e-12));
}

TEST_CASE("classification is invariant to positive rescaling of embeddings") {
    Matrix v = rmat(1, 8, 2);
    Matrix s = rmat(5, 8, 3);
    Matrix base = classify(PromptedPair{v, s}, 0.01);
    Matrix v2 = scale(v, 7.3);
    Matrix s2 = s;
    for (int j = 0; j < 8; ++j) s2(2, j) *= 0.05;  // rescale one class alone
    Matrix rescaled = classify(PromptedPair{v2, s2}, 0.01);
    CHECK(max_abs_diff(base, rescaled) < 1e-10);
}

TEST_CASE("two-class head at tau=0.01 matches the direct softmax oracle") {
    // cos values (1, 0): logits (100, 0)
    Matrix v = unit_row(4, 0);
    Matrix s(2, 4);
    s(0, 0) = 1.0;  // cos = 1
    s(1, 1) = 1.0;  // cos = 0
    Matrix probs = classify(PromptedPair{v, s}, 0.01);
    double z = std::exp(100.0) + std::exp(0.0);
    CHECK(probs(0, 0) == Catch::Approx(std::exp(100.0) / z).epsilon(1e-10));
    CHECK(probs(0, 1) == Catch::Approx(std::exp(0.0) / z).epsilon(1e-6));
    CHECK(probs(0, 1) == Catch::Approx(3.72e-44).epsilon(0.01));
}

TEST_CASE("zero-norm embeddings are rejected with a diagnostic") {
    Matrix v(1, 4);  // all zeros
    Matrix s = rmat(2, 4, 4);
    CHECK_THROWS_AS(classify(PromptedPair{v, s}, 0.01), std::domain_error);
}

TEST_CASE("zero_shot_classify argmax is stable under rescaling one class") {
    Matrix v = rmat(1, 8, 5);
    Matrix s = rmat(3, 8, 6);
    Matrix base = zero_shot_classify(v, s, 0.01);
    int argmax_base = static_cast<int>(std::max_element(base.data.begin(), base.data.end()) - base.data.begin());
    Matrix s2 = s;
    for (int j = 0; j < 8; ++j) s2(argmax_base, j) *= 12.0;
    Matrix res = zero_shot_classify(v, s2, 0.01);
    int argmax_res = static_cast<int>(std::max_element(res.data.begin(), res.data.end()) - res.data.begin());
    CHECK(argmax_base == argmax_res);
    CHECK(max_abs_diff(base, res) < 1e-10);
}

TEST_CASE("classify requires at least two classes") {
    CHECK_THROWS_WITH(classify(PromptedPair{unit_row(4, 0), unit_row(4, 1)}, 0.01),
                      Catch::Matchers::ContainsSubstring("K >= 2"));
}

// ---- instance discrimination ----

TEST_CASE("l_idc is zero for a single-instance batch") {
    auto batch = random_batch(1, 3, 8, 10);
    CHECK(l_idc(batch, 0.01) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("l_idc is nonnegative on random batches") {
    for (uint64_t s = 0; s < 50; ++s) {
        auto batch = random_batch(4, 3, 8, 100 + s * 97);
        CHECK(l_idc(batch, 0.05) >= 0.0);
    }
}

TEST_CASE("l_idc matches the pinned two-instance value") {
    // construction: K=1, orthonormal per-instance embeddings, tau=0.1 gives the
    // sim matrix [[10,0],[0,10]]
    std::vector<PromptedPair> batch(2);
    batch[0].v_prime = unit_row(4, 0);
    batch[0].s_prime = unit_row(4, 0);
    batch[1].v_prime = unit_row(4, 1);
    batch[1].s_prime = unit_row(4, 1);
    double loss = l_idc(batch, 0.1);
    double expect = std::log(1.0 + std::exp(-10.0));  // per-anchor, both anchors equal
    CHECK(loss == Catch::Approx(expect).epsilon(1e-10));
    CHECK(loss == Catch::Approx(4.54e-5).epsilon(0.01));
}

TEST_CASE("l_idc equals an independent brute-force evaluation") {
    for (uint64_t s = 0; s < 10; ++s) {
        auto batch = random_batch(5, 4, 8, 500 + s * 13);
        CHECK(l_idc(batch, 0.05) == Catch::Approx(idc_bruteforce(batch, 0.05)).margin(1e-10));
    }
}

TEST_CASE("l_idc decreases as off-diagonal similarity decreases") {
    auto make = [](double theta) {
        std::vector<PromptedPair> batch(2);
        batch[0].v_prime = unit_row(3, 0);
        batch[0].s_prime = unit_row(3, 0);
        Matrix dir(1, 3);
        dir(0, 0) = std::cos(theta);
        dir(0, 2) = std::sin(theta);
        batch[1].v_prime = dir;
        batch[1].s_prime = dir;
        return batch;
    };
    double prev = l_idc(make(0.2), 0.1);
    for (double theta : {0.5, 0.9, 1.3}) {
        double cur = l_idc(make(theta), 0.1);
        CHECK(cur < prev);
        prev = cur;
    }
}

TEST_CASE("l_idc rejects an empty batch") {
    Tape t;
    CHECK_THROWS_WITH(l_idc(t, {}, 0.01), Catch::Matchers::ContainsSubstring("empty"));
}

// ---- consistency and supervised terms ----

TEST_CASE("probability one at the label contributes zero loss") {
    Tape t;
    std::vector<Var> probs{t.constant(probs_row({1.0, 0.0, 0.0}))};
    CHECK(t.scalar_value(l_sc_source(t, probs, {0})) == 0.0);
    CHECK(t.scalar_value(l_sup_source(t, probs, {0})) == 0.0);
}

TEST_CASE("target terms vanish when no sample passes the gate") {
    Tape t;
    std::vector<Var> probs{t.constant(probs_row({0.4, 0.6})), t.constant(probs_row({0.5, 0.5}))};
    CHECK(t.scalar_value(l_sc_target(t, probs, {1, 0}, {0.3, 0.2}, 0.6)) == 0.0);
    CHECK(t.scalar_value(l_sup_target(t, probs, {1, 0}, 0.95)) == 0.0);
}

TEST_CASE("mean cross-entropy matches the hand-evaluated oracle") {
    Tape t;
    std::vector<Var> probs{t.constant(probs_row({0.5, 0.5})), t.constant(probs_row({0.25, 0.75}))};
    double expect = (std::log(2.0) + std::log(4.0)) / 2.0;
    CHECK(t.scalar_value(l_sc_source(t, probs, {0, 0})) == Catch::Approx(expect).margin(1e-12));
}

TEST_CASE("uniform three-class prediction at the true label costs ln 3") {
    Tape t;
    std::vector<Var> probs{t.constant(probs_row({1.0 / 3, 1.0 / 3, 1.0 / 3}))};
    CHECK(t.scalar_value(l_sup_source(t, probs, {1})) == Catch::Approx(std::log(3.0)).margin(1e-12));
}

TEST_CASE("confidence exactly at the threshold is included") {
    Tape t;
    std::vector<Var> probs{t.constant(probs_row({0.6, 0.4}))};
    double loss = t.scalar_value(l_sup_target(t, probs, {0}, 0.6));
    CHECK(loss == Catch::Approx(-std::log(0.6)).margin(1e-12));
    // same boundary convention for the consistency gate
    double loss_sc = t.scalar_value(l_sc_target(t, probs, {0}, {0.6}, 0.6));
    CHECK(loss_sc == Catch::Approx(-std::log(0.6)).margin(1e-12));
}

TEST_CASE("gated means divide by the full batch size") {
    Tape t;
    std::vector<Var> probs{t.constant(probs_row({0.5, 0.5})), t.constant(probs_row({0.9, 0.1}))};
    // only the second sample passes at T = 0.8
    double loss = t.scalar_value(l_sup_target(t, probs, {0, 0}, 0.8));
    CHECK(loss == Catch::Approx(-std::log(0.9) / 2.0).margin(1e-12));
}

TEST_CASE("labels out of range are rejected") {
    Tape t;
    std::vector<Var> probs{t.constant(probs_row({0.5, 0.5}))};
    CHECK_THROWS_AS(l_sc_source(t, probs, {2}), std::out_of_range);
    CHECK_THROWS_AS(l_sup_source(t, probs, {-1}), std::out_of_range);
}

// ---- information maximization ----

TEST_CASE("uniform predictions give zero information-maximization loss") {
    std::vector<Matrix> probs(5, probs_row({0.25, 0.25, 0.25, 0.25}));
    CHECK(l_im(probs) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("distinct one-hot predictions give -log 2") {
    std::vector<Matrix> probs{probs_row({1.0, 0.0}), probs_row({0.0, 1.0})};
    CHECK(l_im(probs) == Catch::Approx(-std::log(2.0)).margin(1e-12));
}

TEST_CASE("information maximization is nonpositive, zero only for identical predictions") {
    auto rng = named_rng(77, "im");
    std::uniform_real_distribution<double> unit(0.01, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        int B = 2 + trial % 5, K = 2 + trial % 4;
        std::vector<Matrix> probs;
        for (int b = 0; b < B; ++b) {
            Matrix p(1, K);
            double z = 0.0;
            for (int k = 0; k < K; ++k) {
                p(0, k) = unit(rng);
                z += p(0, k);
            }
            for (int k = 0; k < K; ++k) p(0, k) /= z;
            probs.push_back(p);
        }
        CHECK(l_im(probs) <= 1e-12);
        std::vector<Matrix> same(B, probs[0]);
        CHECK(l_im(same) == Catch::Approx(0.0).margin(1e-12));
    }
}

// ---- total objective ----

TEST_CASE("zero trade-off weights reduce the total to sup + sc") {
    Tape t;
    Var sup = t.scalar(1.25), sc = t.scalar(0.5), idc = t.scalar(3.0), im = t.scalar(-0.7);
    LossWeights w;
    w.lambda_c = 0.0;
    w.lambda_i = 0.0;
    CHECK(t.scalar_value(l_all(t, sup, sc, idc, im, w)) == Catch::Approx(1.75).margin(1e-15));
}

TEST_CASE("the total objective is affine in lambda_i with slope l_im") {
    Tape t;
    Var sup = t.scalar(1.0), sc = t.scalar(2.0), idc = t.scalar(0.3), im = t.scalar(-0.9);
    auto total = [&](double li) {
        LossWeights w;
        w.lambda_i = li;
        return t.scalar_value(l_all(t, sup, sc, idc, im, w));
    };
    double slope = (total(1.5) - total(0.5)) / 1.0;
    CHECK(slope == Catch::Approx(-0.9).margin(1e-12));
}

TEST_CASE("default weights are unit trade-offs at tau 0.01") {
    LossWeights w;
    CHECK(w.lambda_c == 1.0);
    CHECK(w.lambda_i == 1.0);
    CHECK(w.tau == 0.01);
    w.validate();
    w.tau = 0.0;
    CHECK_THROWS_AS(w.validate(), std::invalid_argument);
}

TEST_CASE("probability validation rejects malformed vectors") {
    CHECK_THROWS_AS(validate_class_probabilities(probs_row({0.7, 0.7})), std::domain_error);
    CHECK_THROWS_AS(validate_class_probabilities(probs_row({1.2, -0.2})), std::domain_error);
    Matrix two_rows(2, 2, 0.5);
    CHECK_THROWS_AS(validate_class_probabilities(two_rows), std::invalid_argument);
}
