#include "mole/mole_block.hpp"

#include "mole/meter.hpp"
#include "mole/ops.hpp"

namespace mole {

namespace {

Tensor counted_expert(const Ffn& expert, const Tensor& rows, bool shared) {
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

}  // namespace

MoleLayer make_mole(int d_model, int d_ff, int n_languages, int gate_hidden, Rng& rng) {
    if (n_languages < 1) throw ConfigError("make_mole: need at least one language expert");
    MoleLayer layer;
    for (int i = 0; i < n_languages; ++i) layer.lse.push_back(make_ffn(d_model, d_ff, rng));
    layer.lae = make_ffn(d_model, d_ff, rng);
    layer.gate_lstm = make_lstm(d_model, gate_hidden, rng);
    layer.gate_fc = make_linear(gate_hidden, n_languages, rng);
    return layer;
}

void collect_params(MoleLayer& layer, const std::string& prefix, std::vector<NamedParam>& out) {
    for (std::size_t i = 0; i < layer.lse.size(); ++i) {
        collect_params(layer.lse[i], prefix + ".lse" + std::to_string(i), out);
    }
    if (layer.use_lae) collect_params(layer.lae, prefix + ".lae", out);
    collect_params(layer.gate_lstm, prefix + ".gate_lstm", out);
    collect_params(layer.gate_fc, prefix + ".gate_fc", out);
}

int64_t param_count(const MoleLayer& layer) {
    int64_t n = 0;
    for (const auto& e : layer.lse) n += param_count(e);
    if (layer.use_lae) n += param_count(layer.lae);
    return n + layer.gate_lstm.w.size() + layer.gate_lstm.b.size() + param_count(layer.gate_fc);
}

GatingDecision gate(const Tensor& x, int length, const MoleLayer& layer) {
    if (length < 1 || length > x.dim(0)) {
        throw ContractError("gate: length " + std::to_string(length) + " invalid for " +
                            std::to_string(x.dim(0)) + " frames");
    }
    GatingDecision d;
    d.z = lstm_last_state(layer.gate_stop_gradient ? detach(x) : x, length, layer.gate_lstm);
    d.posterior = softmax(linear_forward(d.z, layer.gate_fc));
    d.selected = argmax(d.posterior.values());
    d.gamma = reshape(gather_elems(d.posterior, {d.selected}), Shape{1});
    d.gamma_value = d.gamma.values()[0];
    return d;
}

Tensor mole_forward(const Tensor& x, int length, const MoleLayer& layer, GatingDecision* decision,
                    const std::string& utterance_id) {
    if (x.rank() != 2) throw DimensionError("mole_forward: [t, d] input expected");
    const int t = x.dim(0);
    GatingDecision d = gate(x, length, layer);
    d.utterance_id = utterance_id;

    Tensor x_valid = length == t ? x : slice_rows(x, 0, length);
    Tensor selected_out = counted_expert(layer.lse[static_cast<std::size_t>(d.selected)], x_valid,
                                         /*shared=*/false);
    Tensor out = add(x_valid, smul(selected_out, d.gamma));
    if (layer.use_lae) {
        Tensor lae_out = counted_expert(layer.lae, x_valid, /*shared=*/true);
        if (layer.use_calibration) {
            Tensor lae_weight = sub(Tensor::scalar(1.0), d.gamma);
            out = add(out, smul(lae_out, lae_weight));
        } else {
            out = add(out, lae_out);
        }
    }
    if (length < t) out = concat_rows(out, slice_rows(x, length, t - length));
    if (decision) *decision = std::move(d);
    return out;
}

std::vector<LrlBatch> collect_gate_embeddings(const SequenceBatch& batch,
                                              const std::vector<MoleLayer>& layers) {
    if (batch.size() == 0) throw ContractError("collect_gate_embeddings: empty batch");
    if (batch.languages.size() != batch.size()) {
        throw ContractError("collect_gate_embeddings: batch carries no language labels");
    }
    for (int label : batch.languages) {
        if (label < 0) throw ContractError("collect_gate_embeddings: missing language label");
    }
    std::vector<LrlBatch> out(layers.size());
    for (std::size_t li = 0; li < layers.size(); ++li) {
        for (std::size_t u = 0; u < batch.size(); ++u) {
            GatingDecision d = gate(batch.features[u], batch.lengths[u], layers[li]);
            out[li].embeddings.push_back(d.z);
            out[li].labels.push_back(batch.languages[u]);
        }
    }
    return out;
}

}  // namespace mole
