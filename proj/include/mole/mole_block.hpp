#pragma once

#include <string>
#include <vector>

#include "mole/batch.hpp"
#include "mole/layers.hpp"
#include "mole/tensor.hpp"

namespace mole {

// The MoLE block: N language-specific experts routed once per utterance by
// an LSTM gate, plus an always-on language-agnostic expert whose weight is
// calibrated by the gate's confidence.
struct MoleLayer {
    std::vector<Ffn> lse;  // language-specific experts
    Ffn lae;               // language-agnostic expert
    LstmCell gate_lstm;
    Linear gate_fc;  // gate hidden -> N
    bool use_lae = true;
    bool use_calibration = true;
    // Detach the gate input so gate-origin gradients stay out of the
    // encoder below.
    bool gate_stop_gradient = false;
};

MoleLayer make_mole(int d_model, int d_ff, int n_languages, int gate_hidden, Rng& rng);
void collect_params(MoleLayer& layer, const std::string& prefix, std::vector<NamedParam>& out);
int64_t param_count(const MoleLayer& layer);

// One routing decision per utterance.
struct GatingDecision {
    std::string utterance_id;
    int true_language = -1;  // metadata for reporting; never used in forward
    Tensor z;                // gate hidden embedding [H]
    Tensor posterior;        // [N], sums to 1
    Tensor gamma;            // scalar == max(posterior), tape-connected
    int selected = 0;        // argmax, ties to the lowest index
    double gamma_value = 0.0;
};

// z = lstm_last_state(x[0:length]); posterior = softmax(fc(z)).
GatingDecision gate(const Tensor& x, int length, const MoleLayer& layer);

// y = x + gamma * lse[selected](x) + (1 - gamma) * lae(x), with the single
// utterance-level (selected, gamma) applied to every valid frame. With
// use_lae off the LaE term vanishes; with use_calibration off the LaE is
// added unweighted.
Tensor mole_forward(const Tensor& x, int length, const MoleLayer& layer,
                    GatingDecision* decision = nullptr, const std::string& utterance_id = "");

// Gate embeddings with language labels, grouped per layer; the input the
// language representation loss consumes.
struct LrlBatch {
    std::vector<Tensor> embeddings;  // z_r, each [H]
    std::vector<int> labels;
};

std::vector<LrlBatch> collect_gate_embeddings(const SequenceBatch& batch,
                                              const std::vector<MoleLayer>& layers);

}  // namespace mole
