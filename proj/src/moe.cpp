#include "mole/moe.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

#include "mole/meter.hpp"
#include "mole/ops.hpp"

namespace mole {

ExpertMeter& ExpertMeter::instance() {
    thread_local ExpertMeter meter;
    return meter;
}

namespace {

Tensor expert_apply(const Ffn& expert, const Tensor& rows, bool shared) {
    auto& m = ExpertMeter::instance();
    const auto n_rows = static_cast<std::uint64_t>(rows.dim(0));
    const auto flops =
        n_rows * static_cast<std::uint64_t>(ffn_flops_per_row(rows.dim(1), expert.fc1.w.dim(1)));
    if (shared) {
        m.shared_invocations += 1;
        m.shared_row_evals += n_rows;
        m.shared_flops += flops;
    } else {
        m.routed_invocations += 1;
        m.routed_row_evals += n_rows;
        m.routed_flops += flops;
    }
    return ffn_forward(rows, expert);
}

// Indices of the k highest posteriors; ties break to the lowest index.
// Returned ascending by expert index so combination order is fixed.
std::vector<int> select_topk(const double* p, int n, int k) {
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [p](int a, int b) { return p[a] > p[b]; });
    order.resize(static_cast<std::size_t>(k));
    std::sort(order.begin(), order.end());
    return order;
}

Tensor moe_core(const Tensor& x, int length, const MoeLayer& layer, int k, RoutingTrace* trace,
                const std::string& utterance_id) {
    if (x.rank() != 2) throw DimensionError("moe: [t, d] input expected");
    const int t = x.dim(0);
    const int n = static_cast<int>(layer.experts.size());
    if (n < 1) throw ConfigError("moe: layer has no experts");
    if (k < 1 || k > n) {
        throw ConfigError("moe: k = " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
    }
    if (length < 1 || length > t) throw ContractError("moe: length out of range");

    Tensor x_valid = length == t ? x : slice_rows(x, 0, length);
    Tensor logits = linear_forward(relu(linear_forward(x_valid, layer.gate1)), layer.gate2);
    Tensor posterior = softmax(logits);

    std::vector<int> top1(static_cast<std::size_t>(length));
    std::vector<std::vector<int>> topk(static_cast<std::size_t>(length));
    for (int f = 0; f < length; ++f) {
        const double* row = posterior.data() + static_cast<std::size_t>(f) * n;
        auto sel = select_topk(row, n, k);
        int best = sel[0];
        for (int idx : sel) {
            if (row[idx] > row[best]) best = idx;
        }
        top1[static_cast<std::size_t>(f)] = best;
        topk[static_cast<std::size_t>(f)] = std::move(sel);
    }

    Tensor out = x_valid;
    if (layer.use_common) out = add(out, expert_apply(layer.common, x_valid, /*shared=*/true));
    for (int i = 0; i < n; ++i) {
        std::vector<int> frames;
        std::vector<std::pair<int, int>> cells;
        for (int f = 0; f < length; ++f) {
            const auto& sel = topk[static_cast<std::size_t>(f)];
            if (std::binary_search(sel.begin(), sel.end(), i)) {
                frames.push_back(f);
                cells.emplace_back(f, i);
            }
        }
        if (frames.empty()) continue;
        Tensor rows = gather_rows(x_valid, frames);
        Tensor evaluated = expert_apply(layer.experts[static_cast<std::size_t>(i)], rows,
                                        /*shared=*/false);
        Tensor weighted = mul_colvec(evaluated, gather_cells(posterior, cells));
        out = scatter_rows_add(out, weighted, frames);
    }
    if (length < t) out = concat_rows(out, slice_rows(x, length, t - length));

    if (trace) {
        if (trace->n_experts == 0) trace->n_experts = n;
        UtteranceRouting rec;
        rec.utterance_id = utterance_id;
        rec.length = length;
        rec.posteriors = posterior;
        rec.top1 = std::move(top1);
        rec.topk = std::move(topk);
        trace->utterances.push_back(std::move(rec));
    }
    return out;
}

}  // namespace

MoeLayer make_moe(int d_model, int d_ff, int n_experts, int k, bool use_common, Rng& rng,
                  int gate_hidden) {
    if (n_experts < 1) throw ConfigError("make_moe: need at least one expert");
    if (k < 1 || k > n_experts) throw ConfigError("make_moe: k outside [1, N]");
    if (gate_hidden <= 0) gate_hidden = d_model;
    MoeLayer layer;
    layer.k = k;
    layer.use_common = use_common;
    for (int i = 0; i < n_experts; ++i) layer.experts.push_back(make_ffn(d_model, d_ff, rng));
    layer.common = make_ffn(d_model, d_ff, rng);
    layer.gate1 = make_linear(d_model, gate_hidden, rng);
    layer.gate2 = make_linear(gate_hidden, n_experts, rng);
    return layer;
}

void collect_params(MoeLayer& layer, const std::string& prefix, std::vector<NamedParam>& out) {
    for (std::size_t i = 0; i < layer.experts.size(); ++i) {
        collect_params(layer.experts[i], prefix + ".expert" + std::to_string(i), out);
    }
    if (layer.use_common) collect_params(layer.common, prefix + ".common", out);
    collect_params(layer.gate1, prefix + ".gate1", out);
    collect_params(layer.gate2, prefix + ".gate2", out);
}

int64_t param_count(const MoeLayer& layer) {
    int64_t n = 0;
    for (const auto& e : layer.experts) n += param_count(e);
    if (layer.use_common) n += param_count(layer.common);
    return n + param_count(layer.gate1) + param_count(layer.gate2);
}

std::int64_t RoutingTrace::total_frames() const {
    std::int64_t n = 0;
    for (const auto& u : utterances) n += u.length;
    return n;
}

std::string RoutingTrace::to_csv() const {
    std::string csv = "frame,utterance_id,selected,posteriors\n";
    char buf[32];
    for (const auto& u : utterances) {
        for (int f = 0; f < u.length; ++f) {
            csv += std::to_string(f) + "," + u.utterance_id + ",";
            const auto& sel = u.topk[static_cast<std::size_t>(f)];
            for (std::size_t j = 0; j < sel.size(); ++j) {
                if (j) csv += ";";
                csv += std::to_string(sel[j]);
            }
            csv += ",";
            for (int i = 0; i < n_experts; ++i) {
                if (i) csv += ";";
                std::snprintf(buf, sizeof(buf), "%.6f", u.posteriors(f, i));
                csv += buf;
            }
            csv += "\n";
        }
    }
    return csv;
}

Tensor moe_dense(const Tensor& x, int length, const MoeLayer& layer, RoutingTrace* trace,
                 const std::string& utterance_id) {
    return moe_core(x, length, layer, static_cast<int>(layer.experts.size()), trace, utterance_id);
}

Tensor moe_sparse(const Tensor& x, int length, const MoeLayer& layer, RoutingTrace& trace,
                  const std::string& utterance_id) {
    return moe_core(x, length, layer, layer.k, &trace, utterance_id);
}

Tensor balance_loss(const RoutingTrace& trace, int n_experts) {
    const std::int64_t frames = trace.total_frames();
    if (frames == 0) throw ContractError("balance_loss: empty routing trace");

    Tensor dispatch(Shape{n_experts});  // f_i, constant w.r.t. the tape
    for (const auto& u : trace.utterances) {
        for (int sel : u.top1) dispatch(sel) += 1.0;
    }
    for (int i = 0; i < n_experts; ++i) dispatch(i) /= static_cast<double>(frames);

    // P_i: frame-weighted mean posterior, kept on the tape.
    Tensor mean_posterior;
    for (const auto& u : trace.utterances) {
        Tensor contrib =
            scale(mean_rows(u.posteriors), static_cast<double>(u.length) / static_cast<double>(frames));
        mean_posterior = mean_posterior.defined() ? add(mean_posterior, contrib) : contrib;
    }
    return scale(sum(mul(mean_posterior, dispatch)), static_cast<double>(n_experts));
}

}  // namespace mole
