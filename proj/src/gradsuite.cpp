#include "mole/gradsuite.hpp"

#include "mole/losses.hpp"
#include "mole/model.hpp"

namespace mole {

namespace {

void add_params(std::vector<Tensor>& wrt, std::vector<NamedParam>& params) {
    for (auto& p : params) wrt.push_back(p.tensor);
}

}  // namespace

std::vector<GradSuiteEntry> run_gradient_suite(const std::string& filter) {
    std::vector<GradSuiteEntry> entries;
    auto run = [&](const std::string& name, double tol, auto&& fn) {
        if (!filter.empty() && name.find(filter) == std::string::npos) return;
        GradSuiteEntry entry;
        entry.name = name;
        entry.tol = tol;
        entry.report = fn(tol);
        entries.push_back(std::move(entry));
    };

    run("tensor/matmul", 1e-6, [](double tol) {
        Rng rng(101);
        Tensor a = rand_normal(Shape{3, 4}, 0.0, 1.0, rng);
        Tensor b = rand_normal(Shape{4, 2}, 0.0, 1.0, rng);
        return gradcheck_params([&] { return mean(matmul(a, b)); }, {a, b}, 1e-5, tol);
    });

    run("tensor/elementwise", 1e-5, [](double tol) {
        Rng rng(102);
        Tensor x = rand_normal(Shape{4, 3}, 0.0, 1.0, rng);
        for (auto& v : x.values()) {
            if (std::abs(v) < 1e-2) v += 0.2;  // keep relu off its kink
        }
        Tensor y = rand_normal(Shape{4, 3}, 0.0, 1.0, rng);
        return gradcheck_params(
            [&] {
                Tensor h = add(mul(tanh(x), sigmoid(y)), relu(x));
                return mean(sub(h, scale(exp(scale(y, 0.5)), 0.1)));
            },
            {x, y}, 1e-5, tol);
    });

    run("tensor/softmax", 1e-5, [](double tol) {
        Rng rng(103);
        Tensor x = rand_normal(Shape{3, 5}, 0.0, 2.0, rng);
        return gradcheck_params([&] { return mean(mul(softmax(x), x)); }, {x}, 1e-5, tol);
    });

    run("tensor/cosine", 1e-5, [](double tol) {
        Rng rng(104);
        Tensor u = rand_normal(Shape{6}, 0.0, 1.0, rng);
        Tensor v = rand_normal(Shape{6}, 0.0, 1.0, rng);
        return gradcheck_params([&] { return cosine_similarity(u, v); }, {u, v}, 1e-5, tol);
    });

    run("tensor/layer_norm", 1e-5, [](double tol) {
        Rng rng(105);
        Tensor x = rand_normal(Shape{3, 6}, 0.0, 1.5, rng);
        Tensor gain = rand_uniform(Shape{6}, 0.5, 1.5, rng);
        Tensor bias = rand_normal(Shape{6}, 0.0, 0.2, rng);
        return gradcheck_params([&] { return mean(mul(layer_norm(x, gain, bias), x)); },
                                {x, gain, bias}, 1e-5, tol);
    });

    run("layers/ffn", 1e-5, [](double tol) {
        Rng rng(106);
        Ffn ffn = make_ffn(4, 8, rng);
        Tensor x = rand_normal(Shape{3, 4}, 0.0, 1.0, rng);
        std::vector<NamedParam> params;
        collect_params(ffn, "ffn", params);
        std::vector<Tensor> wrt = {x};
        add_params(wrt, params);
        return gradcheck_params([&] { return mean(ffn_forward(x, ffn)); }, wrt, 1e-5, tol);
    });

    run("layers/mhsa", 1e-5, [](double tol) {
        Rng rng(107);
        Mhsa attn = make_mhsa(6, 2, rng);
        Tensor x = rand_normal(Shape{4, 6}, 0.0, 1.0, rng);
        std::vector<NamedParam> params;
        collect_params(attn, "attn", params);
        std::vector<Tensor> wrt = {x};
        add_params(wrt, params);
        return gradcheck_params([&] { return mean(mhsa_forward(x, 3, attn)); }, wrt, 1e-5, tol);
    });

    run("layers/transformer_block", 1e-5, [](double tol) {
        Rng rng(108);
        TransformerBlock block = make_transformer_block(6, 2, 8, rng);
        Tensor x = rand_normal(Shape{4, 6}, 0.0, 1.0, rng);
        std::vector<NamedParam> params;
        collect_params(block, "block", params);
        std::vector<Tensor> wrt = {x};
        add_params(wrt, params);
        return gradcheck_params([&] { return mean(transformer_block_forward(x, 3, block)); }, wrt,
                                1e-5, tol);
    });

    run("layers/lstm", 1e-5, [](double tol) {
        Rng rng(109);
        LstmCell cell = make_lstm(4, 5, rng);
        Tensor x = rand_normal(Shape{6, 4}, 0.0, 1.0, rng);
        return gradcheck_params([&] { return mean(lstm_last_state(x, 5, cell)); },
                                {x, cell.w, cell.b}, 1e-5, tol);
    });

    run("moe/sparse", 1e-5, [](double tol) {
        Rng rng(110);
        MoeLayer layer = make_moe(4, 6, 3, 2, /*use_common=*/true, rng);
        Tensor x = rand_normal(Shape{4, 4}, 0.0, 1.0, rng);
        std::vector<NamedParam> params;
        collect_params(layer, "moe", params);
        std::vector<Tensor> wrt = {x};
        add_params(wrt, params);
        return gradcheck_params(
            [&] {
                RoutingTrace trace;
                return mean(moe_sparse(x, 4, layer, trace));
            },
            wrt, 1e-5, tol);
    });

    run("moe/balance", 1e-5, [](double tol) {
        Rng rng(111);
        MoeLayer layer = make_moe(3, 4, 3, 1, /*use_common=*/false, rng);
        Tensor x = rand_normal(Shape{5, 3}, 0.0, 1.0, rng);
        return gradcheck_params(
            [&] {
                RoutingTrace trace;
                moe_sparse(x, 5, layer, trace);
                return balance_loss(trace, 3);
            },
            {x, layer.gate1.w, layer.gate1.b, layer.gate2.w, layer.gate2.b}, 1e-5, tol);
    });

    run("mole/block", 1e-4, [](double tol) {
        Rng rng(112);
        MoleLayer layer = make_mole(4, 6, 3, 4, rng);
        Tensor x = rand_normal(Shape{5, 4}, 0.0, 1.0, rng);
        std::vector<NamedParam> params;
        collect_params(layer, "mole", params);
        std::vector<Tensor> wrt = {x};
        add_params(wrt, params);
        return gradcheck_params([&] { return mean(mole_forward(x, 5, layer)); }, wrt, 1e-5, tol);
    });

    run("losses/ctc", 1e-5, [](double tol) {
        Rng rng(113);
        Tensor logits = rand_normal(Shape{5, 4}, 0.0, 1.0, rng);
        return gradcheck_params(
            [&] { return ctc_loss({log_softmax(logits), {2, 1, 3}, 5}).loss; }, {logits}, 1e-5,
            tol);
    });

    run("losses/lrl", 1e-5, [](double tol) {
        Rng rng(114);
        LrlBatch batch;
        std::vector<Tensor> wrt;
        for (int i = 0; i < 6; ++i) {
            Tensor z = rand_normal(Shape{4}, 0.0, 1.0, rng);
            batch.embeddings.push_back(z);
            batch.labels.push_back(i % 3);
            wrt.push_back(z);
        }
        return gradcheck_params([&] { return lrl(batch); }, wrt, 1e-5, tol);
    });

    run("model/mole-e2e", 1e-4, [](double tol) {
        ModelConfig config;
        config.kind = ModelKind::MoLE;
        config.num_blocks = 2;
        config.expert_positions = {2};
        config.d_model = 8;
        config.heads = 2;
        config.d_ff = 12;
        config.gate_hidden = 5;
        config.n_languages = 3;
        config.use_lrl = true;
        config.use_lae = true;
        config.use_calibration = true;
        config.dropout = 0.0;
        config.feature_dim = 6;
        config.vocab_size = 4;
        config.seed = 115;
        Model model = build_model(config);
        Rng rng(116);
        Tensor features = rand_normal(Shape{5, 6}, 0.0, 1.0, rng);
        std::vector<Tensor> wrt;
        auto params = named_params(model);
        add_params(wrt, params);
        return gradcheck_params(
            [&] {
                ForwardResult fwd = model_forward(model, features, 5);
                Tensor ctc = ctc_loss({fwd.log_probs, {2, 1}, 5}).loss;
                // gamma folds the gate path into the scalar (a single-sample
                // LRL would be constant)
                return add(ctc, fwd.decisions[0].gamma);
            },
            wrt, 1e-5, tol);
    });

    return entries;
}

}  // namespace mole
