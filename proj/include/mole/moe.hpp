#pragma once

#include <string>
#include <vector>

#include "mole/layers.hpp"
#include "mole/tensor.hpp"

namespace mole {

// Sparse top-k mixture of experts with framewise routing, a two-layer
// fully-connected gate, and an ungated common expert on the skip path.
struct MoeLayer {
    std::vector<Ffn> experts;
    Ffn common;
    bool use_common = true;
    Linear gate1;  // d_model -> gate_hidden
    Linear gate2;  // gate_hidden -> N
    int k = 1;
};

MoeLayer make_moe(int d_model, int d_ff, int n_experts, int k, bool use_common, Rng& rng,
                  int gate_hidden = 0 /* 0 = d_model */);
void collect_params(MoeLayer& layer, const std::string& prefix, std::vector<NamedParam>& out);
int64_t param_count(const MoeLayer& layer);

// Per-utterance record of framewise routing decisions over valid frames.
struct UtteranceRouting {
    std::string utterance_id;
    int length = 0;
    Tensor posteriors;                    // [length, N], tape-connected
    std::vector<int> top1;                // [length]
    std::vector<std::vector<int>> topk;   // [length], ascending expert index
};

struct RoutingTrace {
    int n_experts = 0;
    std::vector<UtteranceRouting> utterances;

    std::int64_t total_frames() const;
    // frame, utterance-id, selected-indices, posteriors
    std::string to_csv() const;
};

// Dense mixture (every expert evaluated, posterior-weighted). layer.k is
// ignored. Rows past `length` pass through untouched.
Tensor moe_dense(const Tensor& x, int length, const MoeLayer& layer, RoutingTrace* trace = nullptr,
                 const std::string& utterance_id = "");

// Top-k sparse mixture; evaluates only the selected experts per frame and
// appends the routing decisions to `trace`.
Tensor moe_sparse(const Tensor& x, int length, const MoeLayer& layer, RoutingTrace& trace,
                  const std::string& utterance_id = "");

// Switch-style balancing loss: N * sum_i f_i * P_i with f_i the top-1
// dispatch fraction and P_i the mean posterior mass of expert i.
// Equals 1 at perfectly uniform routing, N when one expert takes all.
Tensor balance_loss(const RoutingTrace& trace, int n_experts);

}  // namespace mole
