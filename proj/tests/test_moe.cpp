#include <doctest.h>

#include <cmath>
#include <vector>

#include "mole/meter.hpp"
#include "mole/moe.hpp"
#include "mole/ops.hpp"
#include "testutil.hpp"

using namespace mole;
using testutil::close;
using testutil::tensors_bitwise_equal;
using testutil::tensors_close;

namespace {

void zero_gate(MoeLayer& layer) {
    for (auto& v : layer.gate1.w.values()) v = 0;
    for (auto& v : layer.gate1.b.values()) v = 0;
    for (auto& v : layer.gate2.w.values()) v = 0;
    for (auto& v : layer.gate2.b.values()) v = 0;
}

void make_identity_ffn(Ffn& ffn, double sign) {
    const int d = ffn.fc1.w.dim(0);
    for (auto& v : ffn.fc1.w.values()) v = 0;
    for (auto& v : ffn.fc1.b.values()) v = 0;
    for (auto& v : ffn.fc2.w.values()) v = 0;
    for (auto& v : ffn.fc2.b.values()) v = 0;
    for (int i = 0; i < d; ++i) {
        ffn.fc1.w(i, i) = 1.0;
        ffn.fc2.w(i, i) = sign;
    }
}

}  // namespace

TEST_CASE("moe_dense symmetric experts cancel") {
    Rng rng(1);
    MoeLayer layer = make_moe(3, 3, 2, 1, /*use_common=*/false, rng);
    zero_gate(layer);  // uniform posterior (0.5, 0.5)
    make_identity_ffn(layer.experts[0], +1.0);
    make_identity_ffn(layer.experts[1], -1.0);
    Tensor x = rand_uniform(Shape{4, 3}, 0.0, 2.0, rng);  // keep relu linear
    Tensor y = moe_dense(x, 4, layer);
    // 0.5*x - 0.5*x = 0, so only the skip path remains.
    CHECK(tensors_close(y, x, 1e-15));
}

TEST_CASE("moe_dense one-hot posterior reduces to the selected expert") {
    Rng rng(2);
    MoeLayer layer = make_moe(3, 6, 3, 1, /*use_common=*/false, rng);
    zero_gate(layer);
    layer.gate2.b(1) = 1000.0;  // exp(-1000) underflows: posterior exactly one-hot
    Tensor x = rand_normal(Shape{5, 3}, 0.0, 1.0, rng);
    Tensor y = moe_dense(x, 5, layer);
    Tensor expert_only = ffn_forward(x, layer.experts[1]);
    Tensor diff = sub(y, x);
    CHECK(tensors_close(diff, expert_only, 1e-12));
}

TEST_CASE("moe_dense matches independent per-expert summation") {
    Rng rng(3);
    const int d = 4, t = 6, n = 3;
    MoeLayer layer = make_moe(d, 8, n, 1, /*use_common=*/true, rng);
    Tensor x = rand_normal(Shape{t, d}, 0.0, 1.0, rng);
    Tensor y = moe_dense(x, t, layer);

    // Oracle: posterior via plain loops, then y = x + common(x) + sum_i p_i e_i(x).
    const int gh = layer.gate1.w.dim(1);
    Tensor expect(Shape{t, d});
    for (int r = 0; r < t; ++r) {
        std::vector<double> hidden(gh);
        for (int j = 0; j < gh; ++j) {
            double s = layer.gate1.b(j);
            for (int c = 0; c < d; ++c) s += x(r, c) * layer.gate1.w(c, j);
            hidden[j] = s > 0 ? s : 0;
        }
        std::vector<double> logits(n);
        double mx = -1e300;
        for (int i = 0; i < n; ++i) {
            double s = layer.gate2.b(i);
            for (int j = 0; j < gh; ++j) s += hidden[j] * layer.gate2.w(j, i);
            logits[i] = s;
            mx = std::max(mx, s);
        }
        double z = 0;
        for (int i = 0; i < n; ++i) z += std::exp(logits[i] - mx);
        for (int c = 0; c < d; ++c) expect(r, c) = x(r, c);
        for (int i = 0; i < n; ++i) {
            const double p = std::exp(logits[i] - mx) / z;
            Tensor row = slice_rows(x, r, 1);
            Tensor e = ffn_forward(row, layer.experts[i]);
            for (int c = 0; c < d; ++c) expect(r, c) += p * e(0, c);
        }
        Tensor common = ffn_forward(slice_rows(x, r, 1), layer.common);
        for (int c = 0; c < d; ++c) expect(r, c) += common(0, c);
    }
    CHECK(tensors_close(y, expect, 1e-10));
}

TEST_CASE("moe_sparse with k=N equals moe_dense bitwise") {
    Rng rng(4);
    for (int trial = 0; trial < 5; ++trial) {
        MoeLayer layer = make_moe(4, 8, 3, 3, /*use_common=*/true, rng);
        Tensor x = rand_normal(Shape{5, 4}, 0.0, 1.0, rng);
        RoutingTrace trace;
        Tensor ys = moe_sparse(x, 5, layer, trace);
        Tensor yd = moe_dense(x, 5, layer);
        CHECK(tensors_bitwise_equal(ys, yd));
    }
}

TEST_CASE("moe_sparse k=1 evaluates only the argmax expert") {
    Rng rng(5);
    MoeLayer layer = make_moe(3, 6, 3, 1, /*use_common=*/false, rng);
    zero_gate(layer);
    layer.gate2.b(0) = std::log(0.1);
    layer.gate2.b(1) = std::log(0.7);
    layer.gate2.b(2) = std::log(0.2);
    Tensor x = rand_normal(Shape{4, 3}, 0.0, 1.0, rng);

    ExpertMeter::instance().reset();
    RoutingTrace trace;
    Tensor y = moe_sparse(x, 4, layer, trace);
    CHECK(ExpertMeter::instance().routed_invocations == 1);
    CHECK(ExpertMeter::instance().routed_row_evals == 4);

    const auto& u = trace.utterances[0];
    for (int f = 0; f < 4; ++f) {
        CHECK(u.top1[f] == 1);
        CHECK(u.topk[f] == std::vector<int>{1});
        CHECK(close(u.posteriors(f, 1), 0.7, 1e-12));
    }
    Tensor expect = add(x, scale(ffn_forward(x, layer.experts[1]), 0.7));
    CHECK(tensors_close(y, expect, 1e-12));
}

TEST_CASE("moe_sparse expert evaluations per frame equal k") {
    Rng rng(6);
    for (int k = 1; k <= 3; ++k) {
        MoeLayer layer = make_moe(4, 8, 4, k, /*use_common=*/true, rng);
        Tensor x = rand_normal(Shape{7, 4}, 0.0, 1.0, rng);
        ExpertMeter::instance().reset();
        RoutingTrace trace;
        moe_sparse(x, 7, layer, trace);
        CHECK(ExpertMeter::instance().routed_row_evals == static_cast<std::uint64_t>(7 * k));
        for (const auto& sel : trace.utterances[0].topk) {
            CHECK(static_cast<int>(sel.size()) == k);
        }
    }
}

TEST_CASE("moe_sparse expert flops independent of expert count") {
    std::vector<std::uint64_t> flops;
    for (int n : {2, 5, 8}) {
        Rng rng(7);
        MoeLayer layer = make_moe(4, 8, n, 1, /*use_common=*/true, rng);
        Tensor x = rand_normal(Shape{6, 4}, 0.0, 1.0, rng);
        ExpertMeter::instance().reset();
        RoutingTrace trace;
        moe_sparse(x, 6, layer, trace);
        flops.push_back(ExpertMeter::instance().total_flops());
    }
    CHECK(flops[0] == flops[1]);
    CHECK(flops[1] == flops[2]);
}

TEST_CASE("moe_sparse routes frames of one utterance to different experts") {
    Rng rng(8);
    MoeLayer layer = make_moe(2, 4, 2, 1, /*use_common=*/false, rng, /*gate_hidden=*/2);
    zero_gate(layer);
    layer.gate1.w(0, 0) = 1.0;
    layer.gate1.w(1, 1) = 1.0;
    layer.gate2.w(0, 0) = 1.0;
    layer.gate2.w(1, 1) = 1.0;
    Tensor x(Shape{2, 2}, {5.0, 0.0, 0.0, 5.0});
    RoutingTrace trace;
    moe_sparse(x, 2, layer, trace);
    const auto& u = trace.utterances[0];
    CHECK(u.top1[0] == 0);
    CHECK(u.top1[1] == 1);  // framewise routing loses within-utterance consistency
}

TEST_CASE("moe gradients flow only through evaluated experts") {
    Rng rng(9);
    MoeLayer layer = make_moe(3, 4, 3, 1, /*use_common=*/false, rng);
    zero_gate(layer);
    layer.gate2.b(2) = 1000.0;  // route everything to expert 2
    Tensor x = rand_normal(Shape{4, 3}, 0.0, 1.0, rng);
    x.set_requires_grad(true);

    Graph g;
    GraphScope scope(g);
    RoutingTrace trace;
    Tensor y = moe_sparse(x, 4, layer, trace);
    g.backward(mean(y));

    CHECK(!layer.experts[0].fc1.w.has_grad());
    CHECK(!layer.experts[1].fc1.w.has_grad());
    bool any_nonzero = false;
    for (double v : layer.experts[2].fc1.w.grad()) any_nonzero = any_nonzero || v != 0.0;
    CHECK(any_nonzero);
}

TEST_CASE("moe_sparse gradcheck") {
    Rng rng(10);
    MoeLayer layer = make_moe(3, 4, 3, 2, /*use_common=*/true, rng);
    Tensor x = rand_normal(Shape{4, 3}, 0.0, 1.0, rng);
    std::vector<NamedParam> params;
    collect_params(layer, "moe", params);
    std::vector<Tensor> wrt = {x};
    for (auto& p : params) wrt.push_back(p.tensor);
    auto rep = gradcheck_params(
        [&] {
            RoutingTrace trace;
            return mean(moe_sparse(x, 4, layer, trace));
        },
        wrt, 1e-5, 1e-5);
    CHECK(rep.passed);
}

TEST_CASE("balance_loss uniform routing gives exactly one") {
    const int n = 4;
    RoutingTrace trace;
    trace.n_experts = n;
    UtteranceRouting u;
    u.length = n;
    u.posteriors = Tensor::full(Shape{n, n}, 1.0 / n);
    for (int f = 0; f < n; ++f) {
        u.top1.push_back(f);
        u.topk.push_back({f});
    }
    trace.utterances.push_back(u);
    CHECK(close(balance_loss(trace, n).item(), 1.0, 1e-12));
}

TEST_CASE("balance_loss degenerate routing gives N") {
    const int n = 5;
    RoutingTrace trace;
    trace.n_experts = n;
    UtteranceRouting u;
    u.length = 3;
    u.posteriors = Tensor::zeros(Shape{3, n});
    for (int f = 0; f < 3; ++f) {
        u.posteriors(f, 2) = 1.0;
        u.top1.push_back(2);
        u.topk.push_back({2});
    }
    trace.utterances.push_back(u);
    CHECK(close(balance_loss(trace, n).item(), static_cast<double>(n), 1e-12));
}

TEST_CASE("balance_loss matches hand-computed dispatch and mass sums") {
    Rng rng(11);
    const int n = 3;
    RoutingTrace trace;
    trace.n_experts = n;
    std::vector<double> mass(n, 0.0);
    std::vector<double> counts(n, 0.0);
    int frames = 0;
    for (int utt = 0; utt < 3; ++utt) {
        UtteranceRouting u;
        u.length = 2 + utt;
        u.posteriors = Tensor(Shape{u.length, n});
        for (int f = 0; f < u.length; ++f) {
            double z = 0;
            std::vector<double> p(n);
            for (int i = 0; i < n; ++i) {
                p[i] = std::exp(rng.normal());
                z += p[i];
            }
            for (int i = 0; i < n; ++i) {
                p[i] /= z;
                u.posteriors(f, i) = p[i];
                mass[i] += p[i];
            }
            const int best = argmax(p);
            counts[best] += 1.0;
            u.top1.push_back(best);
            u.topk.push_back({best});
        }
        frames += u.length;
        trace.utterances.push_back(u);
    }
    double expect = 0;
    for (int i = 0; i < n; ++i) expect += (counts[i] / frames) * (mass[i] / frames);
    expect *= n;
    CHECK(close(balance_loss(trace, n).item(), expect, 1e-12));
}

TEST_CASE("balance_loss at least one, equality only at uniform routing") {
    // With posterior mass consistent with dispatch (P_i == f_i) the loss is
    // N * sum f_i^2, minimized at exactly 1 by the uniform distribution.
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed);
        const int n = 4;
        RoutingTrace trace;
        trace.n_experts = n;
        UtteranceRouting u;
        u.length = 100;
        u.posteriors = Tensor::zeros(Shape{u.length, n});
        std::vector<int> counts(n, 0);
        for (int f = 0; f < u.length; ++f) {
            const int sel = rng.randint(0, n - 1);
            u.posteriors(f, sel) = 1.0;
            u.top1.push_back(sel);
            u.topk.push_back({sel});
            ++counts[sel];
        }
        trace.utterances.push_back(u);
        const double loss = balance_loss(trace, n).item();
        CHECK(loss >= 1.0 - 1e-12);
        const bool uniform =
            counts[0] == counts[1] && counts[1] == counts[2] && counts[2] == counts[3];
        if (std::abs(loss - 1.0) < 1e-12) {
            CHECK(uniform);
        }
        if (!uniform) {
            CHECK(loss > 1.0 + 1e-12);
        }
    }
}

TEST_CASE("balance_loss empty trace is a contract error") {
    RoutingTrace trace;
    CHECK_THROWS_AS(balance_loss(trace, 3), ContractError);
}

TEST_CASE("balance_loss is differentiable through the posteriors") {
    Rng rng(12);
    MoeLayer layer = make_moe(3, 4, 3, 1, /*use_common=*/false, rng);
    Tensor x = rand_normal(Shape{5, 3}, 0.0, 1.0, rng);
    auto rep = gradcheck_params(
        [&] {
            RoutingTrace trace;
            moe_sparse(x, 5, layer, trace);
            return balance_loss(trace, 3);
        },
        {layer.gate1.w, layer.gate2.w}, 1e-5, 1e-5);
    CHECK(rep.passed);
}

TEST_CASE("routing trace exports csv rows per frame") {
    Rng rng(13);
    MoeLayer layer = make_moe(3, 4, 2, 1, /*use_common=*/false, rng);
    Tensor x = rand_normal(Shape{3, 3}, 0.0, 1.0, rng);
    RoutingTrace trace;
    moe_sparse(x, 3, layer, trace, "utt-7");
    const std::string csv = trace.to_csv();
    CHECK(csv.find("frame,utterance_id,selected,posteriors") == 0);
    int lines = 0;
    for (char c : csv) lines += c == '\n';
    CHECK(lines == 4);  // header + one row per valid frame
    CHECK(csv.find("utt-7") != std::string::npos);
}

TEST_CASE("moe pads pass through unchanged") {
    Rng rng(14);
    MoeLayer layer = make_moe(3, 4, 2, 1, /*use_common=*/true, rng);
    Tensor x = rand_normal(Shape{6, 3}, 0.0, 1.0, rng);
    RoutingTrace trace;
    Tensor y = moe_sparse(x, 4, layer, trace);
    for (int r = 4; r < 6; ++r) {
        for (int c = 0; c < 3; ++c) CHECK(y(r, c) == x(r, c));
    }
    CHECK(trace.utterances[0].length == 4);
}
