#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "mole/losses.hpp"
#include "mole/ops.hpp"
#include "oracles.hpp"
#include "testutil.hpp"

using namespace mole;
using testutil::close;

namespace {

// Random normalized log-probs over a (V+1)-token alphabet.
Tensor random_log_probs(int t, int vocab_with_blank, Rng& rng) {
    Tensor lp(Shape{t, vocab_with_blank});
    for (int r = 0; r < t; ++r) {
        double z = 0;
        std::vector<double> p(static_cast<std::size_t>(vocab_with_blank));
        for (int v = 0; v < vocab_with_blank; ++v) {
            p[static_cast<std::size_t>(v)] = 0.05 + rng.uniform();
            z += p[static_cast<std::size_t>(v)];
        }
        for (int v = 0; v < vocab_with_blank; ++v) {
            lp(r, v) = std::log(p[static_cast<std::size_t>(v)] / z);
        }
    }
    return lp;
}

}  // namespace

TEST_CASE("ctc single-frame single-token closed form") {
    Tensor lp(Shape{1, 2}, {std::log(0.4), std::log(0.6)});
    CtcResult res = ctc_loss({lp, {1}, 1});
    CHECK(!res.infeasible);
    CHECK(close(res.loss.item(), -std::log(0.6), 1e-12));
    CHECK(close(res.loss.item(), 0.5108256237659907, 1e-12));
}

TEST_CASE("ctc two uniform frames, one token: three valid paths") {
    Tensor lp(Shape{2, 2}, {std::log(0.5), std::log(0.5), std::log(0.5), std::log(0.5)});
    CtcResult res = ctc_loss({lp, {1}, 2});
    // (a,a), (a,-), (-,a) each 0.25 -> 0.75 total.
    CHECK(close(res.loss.item(), -std::log(0.75), 1e-12));
}

TEST_CASE("ctc empty target is the all-blank path") {
    Rng rng(1);
    Tensor lp = random_log_probs(2, 3, rng);
    CtcResult res = ctc_loss({lp, {}, 2});
    CHECK(close(res.loss.item(), -(lp(0, 0) + lp(1, 0)), 1e-12));
}

TEST_CASE("ctc matches exhaustive path enumeration") {
    Rng rng(2);
    for (int trial = 0; trial < 40; ++trial) {
        const int t = 1 + rng.randint(0, 5);
        const int vocab = 1 + rng.randint(0, 3);
        Tensor lp = random_log_probs(t, vocab + 1, rng);
        std::vector<int> targets;
        const int n_targets = rng.randint(0, std::min(t, 3));
        for (int i = 0; i < n_targets; ++i) targets.push_back(rng.randint(1, vocab));
        CtcResult res = ctc_loss({lp, targets, t});
        const double expect = oracles::ctc_brute_force(lp, targets, t);
        if (std::isinf(expect)) {
            CHECK(res.infeasible);
        } else {
            CHECK(close(res.loss.item(), expect, 1e-9));
        }
    }
}

TEST_CASE("ctc gradient passes finite differences through log_softmax") {
    Rng rng(3);
    Tensor logits = rand_normal(Shape{4, 4}, 0.0, 1.0, rng);
    auto rep = gradcheck_params(
        [&] {
            CtcResult res = ctc_loss({log_softmax(logits), {2, 1}, 4});
            return res.loss;
        },
        {logits}, 1e-5, 1e-5);
    CHECK(rep.passed);
}

TEST_CASE("ctc infeasible target returns +inf flagged, never NaN") {
    Tensor lp(Shape{1, 3}, {std::log(1.0 / 3), std::log(1.0 / 3), std::log(1.0 / 3)});
    CtcResult res = ctc_loss({lp, {1, 1}, 1});
    CHECK(res.infeasible);
    CHECK(std::isinf(res.loss.item()));
    CHECK(!std::isnan(res.loss.item()));
}

TEST_CASE("ctc rejects blank in targets and unnormalized rows") {
    Tensor lp(Shape{2, 2}, {std::log(0.5), std::log(0.5), std::log(0.5), std::log(0.5)});
    CHECK_THROWS_AS(ctc_loss({lp, {0}, 2}), ContractError);
    Tensor bad(Shape{1, 2}, {std::log(0.9), std::log(0.9)});
    CHECK_THROWS_AS(ctc_loss({bad, {1}, 1}), NumericError);
}

TEST_CASE("greedy decode collapse rules") {
    auto lp_from_argmax = [](const std::vector<int>& frames, int vocab) {
        Tensor lp(Shape{static_cast<int>(frames.size()), vocab}, -10.0);
        for (std::size_t t = 0; t < frames.size(); ++t) {
            lp(static_cast<int>(t), frames[t]) = -0.1;
        }
        return lp;
    };
    CHECK(greedy_ctc_decode(lp_from_argmax({1, 1, 0, 2}, 3), 4) == std::vector<int>{1, 2});
    CHECK(greedy_ctc_decode(lp_from_argmax({0, 0, 0}, 3), 3).empty());
    CHECK(greedy_ctc_decode(lp_from_argmax({1, 0, 1}, 3), 3) == std::vector<int>{1, 1});
}

TEST_CASE("lrl closed form for two orthogonal singleton languages") {
    LrlBatch batch;
    batch.embeddings = {Tensor(Shape{2}, {1.0, 0.0}), Tensor(Shape{2}, {0.0, 1.0})};
    batch.labels = {0, 1};
    // cos(own) = 1, cos(other) = 0: loss = ln(1 + e^-1) per sample.
    const double expect = std::log(1.0 + std::exp(-1.0));
    CHECK(close(lrl(batch).item(), expect, 1e-12));
    CHECK(close(expect, 0.3132616875182228, 1e-12));
}

TEST_CASE("lrl of identical embeddings is ln N") {
    for (int n : {2, 3, 5}) {
        LrlBatch batch;
        for (int i = 0; i < n; ++i) {
            batch.embeddings.push_back(Tensor(Shape{3}, {0.4, -0.2, 0.9}));
            batch.labels.push_back(i);
        }
        CHECK(close(lrl(batch).item(), std::log(static_cast<double>(n)), 1e-12));
    }
}

TEST_CASE("lrl matches independent centroid computation") {
    Rng rng(4);
    LrlBatch batch;
    std::vector<std::vector<double>> raw;
    std::vector<int> labels;
    for (int i = 0; i < 9; ++i) {
        Tensor z = rand_normal(Shape{5}, 0.0, 1.0, rng);
        batch.embeddings.push_back(z);
        raw.push_back(z.values());
        const int label = i % 3;
        batch.labels.push_back(label);
        labels.push_back(label);
    }
    CHECK(close(lrl(batch).item(), oracles::lrl_reference(raw, labels), 1e-12));
}

TEST_CASE("lrl invariant to batch order and to uniform positive scaling") {
    Rng rng(5);
    LrlBatch batch;
    for (int i = 0; i < 6; ++i) {
        batch.embeddings.push_back(rand_normal(Shape{4}, 0.0, 1.0, rng));
        batch.labels.push_back(i % 2);
    }
    const double base = lrl(batch).item();

    LrlBatch shuffled;
    for (int i : {3, 0, 5, 2, 4, 1}) {
        shuffled.embeddings.push_back(batch.embeddings[static_cast<std::size_t>(i)]);
        shuffled.labels.push_back(batch.labels[static_cast<std::size_t>(i)]);
    }
    CHECK(close(lrl(shuffled).item(), base, 1e-12));

    LrlBatch scaled;
    for (int i = 0; i < 6; ++i) {
        Tensor z = scale(batch.embeddings[static_cast<std::size_t>(i)], 7.25);
        scaled.embeddings.push_back(z);
        scaled.labels.push_back(batch.labels[static_cast<std::size_t>(i)]);
    }
    CHECK(close(lrl(scaled).item(), base, 1e-12));
}

TEST_CASE("lrl rejects zero-norm embeddings and empty batches") {
    LrlBatch empty;
    CHECK_THROWS_AS(lrl(empty), ContractError);

    LrlBatch degenerate;
    degenerate.embeddings = {Tensor(Shape{2}, {0.0, 0.0}), Tensor(Shape{2}, {1.0, 0.0})};
    degenerate.labels = {0, 1};
    CHECK_THROWS_AS(lrl(degenerate), DegenerateInputError);
}

TEST_CASE("lrl decreases under a gradient step on a separable batch") {
    Rng rng(6);
    LrlBatch batch;
    for (int i = 0; i < 8; ++i) {
        const int label = i % 2;
        Tensor z = rand_normal(Shape{4}, 0.0, 0.3, rng);
        z(label) += 1.0;  // two loose clusters
        z.set_requires_grad(true);
        batch.embeddings.push_back(z);
        batch.labels.push_back(label);
    }
    double before;
    {
        Graph g;
        GraphScope scope(g);
        Tensor loss = lrl(batch);
        before = loss.item();
        g.backward(loss);
    }
    for (Tensor& z : batch.embeddings) {
        for (std::int64_t i = 0; i < z.size(); ++i) {
            z.values()[i] -= 0.5 * z.grad()[static_cast<std::size_t>(i)];
        }
    }
    CHECK(lrl(batch).item() < before);
}

TEST_CASE("lrl gradcheck") {
    Rng rng(7);
    LrlBatch batch;
    std::vector<Tensor> wrt;
    for (int i = 0; i < 6; ++i) {
        Tensor z = rand_normal(Shape{4}, 0.0, 1.0, rng);
        batch.embeddings.push_back(z);
        batch.labels.push_back(i % 3);
        wrt.push_back(z);
    }
    auto rep = gradcheck_params([&] { return lrl(batch); }, wrt, 1e-5, 1e-5);
    CHECK(rep.passed);
}

TEST_CASE("total_loss composition") {
    Tensor ctc = Tensor::scalar(2.5);
    CHECK(total_loss(ctc, {}, {}, {0.0, 0.0}).item() == 2.5);

    Tensor v = Tensor::scalar(0.8);
    CHECK(close(total_loss(ctc, {v}, {}, {1.0, 0.0}).item(), 3.3, 1e-15));

    // Three-layer LRL terms averaged: 2.5 + 0.1 * (0.3 + 0.6 + 0.9) / 3 = 2.56.
    std::vector<Tensor> terms = {Tensor::scalar(0.3), Tensor::scalar(0.6), Tensor::scalar(0.9)};
    CHECK(close(total_loss(ctc, terms, {}, {0.1, 0.0}).item(), 2.56, 1e-12));

    CHECK_THROWS_AS(total_loss(ctc, {v}, {}, {-0.1, 0.0}), ConfigError);
}

TEST_CASE("cer cases") {
    CHECK(cer(std::string("abc"), std::string("abc")) == 0.0);
    CHECK(close(cer(std::string("kitten"), std::string("sitting")), 3.0 / 7.0, 1e-15));
    CHECK(cer(std::string(""), std::string("abcd")) == 1.0);
    CHECK_THROWS_AS(cer(std::string("a"), std::string("")), ContractError);
    // distance symmetry
    CHECK(edit_distance(std::string("kitten"), std::string("sitting")) ==
          edit_distance(std::string("sitting"), std::string("kitten")));
    CHECK(cer(std::vector<int>{1, 2, 3}, std::vector<int>{1, 9, 3}) == doctest::Approx(1.0 / 3));
}

namespace {

GatingDecision fake_decision(int language, int selected, int n_experts, double gamma) {
    GatingDecision d;
    d.true_language = language;
    d.selected = selected;
    d.gamma_value = gamma;
    d.posterior = Tensor::full(Shape{n_experts}, (1.0 - gamma) / (n_experts - 1));
    d.posterior(selected) = gamma;
    d.gamma = Tensor::scalar(gamma);
    return d;
}

}  // namespace

TEST_CASE("routing_report perfect routing") {
    std::vector<GatingDecision> decisions;
    for (int lang = 0; lang < 3; ++lang) {
        for (int i = 0; i < 4; ++i) {
            decisions.push_back(fake_decision(lang, 2 - lang, 3, 0.9));
        }
    }
    RoutingReport report = routing_report(decisions);
    CHECK(report.total == 12);
    for (const auto& row : report.per_language) {
        CHECK(row.consistency == 1.0);
        CHECK(row.count == 4);
        CHECK(close(row.mean_gamma, 0.9, 1e-15));
    }
    CHECK(report.distinct_majority_experts == 3);
    CHECK(report.language_id_accuracy == 1.0);
    std::int64_t util_total = 0;
    for (auto u : report.utilization) util_total += u;
    CHECK(util_total == 12);
}

TEST_CASE("routing_report uniform random routing has consistency near 1/N") {
    Rng rng(8);
    const int n = 5, per_lang = 2000;
    std::vector<GatingDecision> decisions;
    for (int lang = 0; lang < n; ++lang) {
        for (int i = 0; i < per_lang; ++i) {
            decisions.push_back(fake_decision(lang, rng.randint(0, n - 1), n, 0.5));
        }
    }
    RoutingReport report = routing_report(decisions);
    CHECK(report.total == n * per_lang);
    for (const auto& row : report.per_language) {
        CHECK(std::abs(row.consistency - 1.0 / n) < 0.04);
    }
}

TEST_CASE("routing_report rejects missing labels and empty input") {
    CHECK_THROWS_AS(routing_report({}), ContractError);
    std::vector<GatingDecision> decisions = {fake_decision(-1, 0, 3, 0.5)};
    CHECK_THROWS_AS(routing_report(decisions), ContractError);
}

TEST_CASE("routing_report csv and table render") {
    std::vector<GatingDecision> decisions;
    for (int i = 0; i < 6; ++i) decisions.push_back(fake_decision(i % 2, i % 2, 2, 0.7));
    RoutingReport report = routing_report(decisions);
    CHECK(report.to_csv().find("language,count,majority_expert") == 0);
    CHECK(report.to_table().find("language-id accuracy") != std::string::npos);
}
