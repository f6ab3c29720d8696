#pragma once

#include <string>
#include <vector>

#include "mole/ops.hpp"
#include "mole/tensor.hpp"

namespace mole {

struct NamedParam {
    std::string name;
    Tensor tensor;
};

struct Linear {
    Tensor w;  // [in, out]
    Tensor b;  // [out]
};

Linear make_linear(int in, int out, Rng& rng);
// x may be [t, in] or [in].
Tensor linear_forward(const Tensor& x, const Linear& lin);
void collect_params(Linear& lin, const std::string& prefix, std::vector<NamedParam>& out);
std::int64_t param_count(const Linear& lin);

struct LayerNorm {
    Tensor gain;  // [d]
    Tensor bias;  // [d]
    double eps = 1e-5;
};

LayerNorm make_layer_norm(int d);
Tensor layer_norm_forward(const Tensor& x, const LayerNorm& ln);
void collect_params(LayerNorm& ln, const std::string& prefix, std::vector<NamedParam>& out);

// Two-layer position-wise network: w2 * relu(w1 * x + b1) + b2.
struct Ffn {
    Linear fc1;  // d_model -> d_ff
    Linear fc2;  // d_ff -> d_model
};

Ffn make_ffn(int d_model, int d_ff, Rng& rng);
Tensor ffn_forward(const Tensor& x, const Ffn& ffn);
void collect_params(Ffn& ffn, const std::string& prefix, std::vector<NamedParam>& out);
std::int64_t param_count(const Ffn& ffn);
std::int64_t ffn_flops_per_row(int d_model, int d_ff);

struct Mhsa {
    Linear wq, wk, wv, wo;
    int heads = 1;
};

Mhsa make_mhsa(int d_model, int heads, Rng& rng);
// Scaled dot-product attention with a padding mask: positions >= length
// receive exactly zero attention weight. Optionally exposes the per-head
// attention matrices for inspection.
Tensor mhsa_forward(const Tensor& x, int length, const Mhsa& attn,
                    std::vector<Tensor>* attention_out = nullptr);
void collect_params(Mhsa& attn, const std::string& prefix, std::vector<NamedParam>& out);

struct TransformerBlock {
    Mhsa attn;
    Ffn ffn;
    LayerNorm norm1, norm2;
    double dropout_rate = 0.1;
};

TransformerBlock make_transformer_block(int d_model, int heads, int d_ff, Rng& rng);
// Post-norm residual block. Dropout is applied only when rng is given and
// the configured rate is positive.
Tensor transformer_block_forward(const Tensor& x, int length, const TransformerBlock& block,
                                 Rng* dropout_rng = nullptr);
void collect_params(TransformerBlock& block, const std::string& prefix, std::vector<NamedParam>& out);

// Single LSTM cell over concatenated [input, hidden]. Gate order in the
// packed weight matrix is input, forget, output, candidate.
struct LstmCell {
    Tensor w;  // [(input_dim + hidden), 4*hidden]
    Tensor b;  // [4*hidden]
    int input_dim = 0;
    int hidden = 0;
};

LstmCell make_lstm(int input_dim, int hidden, Rng& rng);
// Runs the recurrence over the first `length` frames and returns the
// hidden state at the last valid frame (the utterance's global token).
Tensor lstm_last_state(const Tensor& x, int length, const LstmCell& cell);
void collect_params(LstmCell& cell, const std::string& prefix, std::vector<NamedParam>& out);

// Constant [t, d] sinusoidal table.
Tensor sinusoidal_encoding(int t, int d);

Tensor dropout(const Tensor& x, double rate, Rng& rng);

}  // namespace mole
