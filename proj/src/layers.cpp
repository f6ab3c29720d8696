#include "mole/layers.hpp"

#include <cmath>

namespace mole {

Linear make_linear(int in, int out, Rng& rng) {
    const double r = 1.0 / std::sqrt(static_cast<double>(in));
    Linear lin;
    lin.w = rand_uniform(Shape{in, out}, -r, r, rng);
    lin.b = Tensor::zeros(Shape{out});
    lin.w.set_requires_grad(true);
    lin.b.set_requires_grad(true);
    return lin;
}

Tensor linear_forward(const Tensor& x, const Linear& lin) {
    if (x.rank() == 1) {
        Tensor row = reshape(x, Shape{1, x.dim(0)});
        Tensor y = add_rowvec(matmul(row, lin.w), lin.b);
        return reshape(y, Shape{y.dim(1)});
    }
    return add_rowvec(matmul(x, lin.w), lin.b);
}

void collect_params(Linear& lin, const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + ".w", lin.w});
    out.push_back({prefix + ".b", lin.b});
}

std::int64_t param_count(const Linear& lin) { return lin.w.size() + lin.b.size(); }

LayerNorm make_layer_norm(int d) {
    LayerNorm ln;
    ln.gain = Tensor::full(Shape{d}, 1.0);
    ln.bias = Tensor::zeros(Shape{d});
    ln.gain.set_requires_grad(true);
    ln.bias.set_requires_grad(true);
    return ln;
}

Tensor layer_norm_forward(const Tensor& x, const LayerNorm& ln) {
    return layer_norm(x, ln.gain, ln.bias, ln.eps);
}

void collect_params(LayerNorm& ln, const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + ".gain", ln.gain});
    out.push_back({prefix + ".bias", ln.bias});
}

Ffn make_ffn(int d_model, int d_ff, Rng& rng) {
    Ffn ffn;
    ffn.fc1 = make_linear(d_model, d_ff, rng);
    ffn.fc2 = make_linear(d_ff, d_model, rng);
    return ffn;
}

Tensor ffn_forward(const Tensor& x, const Ffn& ffn) {
    return linear_forward(relu(linear_forward(x, ffn.fc1)), ffn.fc2);
}

void collect_params(Ffn& ffn, const std::string& prefix, std::vector<NamedParam>& out) {
    collect_params(ffn.fc1, prefix + ".fc1", out);
    collect_params(ffn.fc2, prefix + ".fc2", out);
}

std::int64_t param_count(const Ffn& ffn) { return param_count(ffn.fc1) + param_count(ffn.fc2); }

std::int64_t ffn_flops_per_row(int d_model, int d_ff) {
    // two matmuls + two bias adds + relu
    return 4LL * d_model * d_ff + 3LL * d_ff + d_model;
}

Mhsa make_mhsa(int d_model, int heads, Rng& rng) {
    if (heads < 1 || d_model % heads != 0) {
        throw ConfigError("mhsa: d_model " + std::to_string(d_model) + " not divisible by heads " +
                          std::to_string(heads));
    }
    Mhsa attn;
    attn.heads = heads;
    attn.wq = make_linear(d_model, d_model, rng);
    attn.wk = make_linear(d_model, d_model, rng);
    attn.wv = make_linear(d_model, d_model, rng);
    attn.wo = make_linear(d_model, d_model, rng);
    return attn;
}

namespace {

// 0 on valid key columns, -1e30 on padding; underflows to exactly zero
// weight after the softmax.
Tensor padding_mask(int t, int length) {
    Tensor mask(Shape{t, t});
    for (int r = 0; r < t; ++r) {
        for (int c = length; c < t; ++c) mask(r, c) = -1e30;
    }
    return mask;
}

}  // namespace

Tensor mhsa_forward(const Tensor& x, int length, const Mhsa& attn, std::vector<Tensor>* attention_out) {
    if (x.rank() != 2) throw DimensionError("mhsa_forward: [t, d] input expected");
    const int t = x.dim(0), d = x.dim(1);
    if (length < 0 || length > t) throw ContractError("mhsa_forward: length out of range");
    const int dh = d / attn.heads;
    Tensor q = linear_forward(x, attn.wq);
    Tensor k = linear_forward(x, attn.wk);
    Tensor v = linear_forward(x, attn.wv);
    Tensor mask = padding_mask(t, length);
    std::vector<Tensor> heads;
    heads.reserve(static_cast<std::size_t>(attn.heads));
    for (int h = 0; h < attn.heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, dh);
        Tensor kh = slice_cols(k, h * dh, dh);
        Tensor vh = slice_cols(v, h * dh, dh);
        Tensor scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
        Tensor weights = softmax(add(scores, mask));
        if (attention_out) attention_out->push_back(weights);
        heads.push_back(matmul(weights, vh));
    }
    return linear_forward(concat_cols(heads), attn.wo);
}

void collect_params(Mhsa& attn, const std::string& prefix, std::vector<NamedParam>& out) {
    collect_params(attn.wq, prefix + ".wq", out);
    collect_params(attn.wk, prefix + ".wk", out);
    collect_params(attn.wv, prefix + ".wv", out);
    collect_params(attn.wo, prefix + ".wo", out);
}

TransformerBlock make_transformer_block(int d_model, int heads, int d_ff, Rng& rng) {
    TransformerBlock block;
    block.attn = make_mhsa(d_model, heads, rng);
    block.ffn = make_ffn(d_model, d_ff, rng);
    block.norm1 = make_layer_norm(d_model);
    block.norm2 = make_layer_norm(d_model);
    return block;
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
    if (rate <= 0.0) return x;
    if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
    Tensor mask(x.shape());
    const double keep = 1.0 - rate;
    for (auto& m : mask.values()) m = rng.uniform() < rate ? 0.0 : 1.0 / keep;
    return mul(x, mask);
}

Tensor transformer_block_forward(const Tensor& x, int length, const TransformerBlock& block,
                                 Rng* dropout_rng) {
    Tensor a = mhsa_forward(x, length, block.attn);
    if (dropout_rng) a = dropout(a, block.dropout_rate, *dropout_rng);
    Tensor h = layer_norm_forward(add(x, a), block.norm1);
    Tensor f = ffn_forward(h, block.ffn);
    if (dropout_rng) f = dropout(f, block.dropout_rate, *dropout_rng);
    return layer_norm_forward(add(h, f), block.norm2);
}

void collect_params(TransformerBlock& block, const std::string& prefix, std::vector<NamedParam>& out) {
    collect_params(block.attn, prefix + ".attn", out);
    collect_params(block.ffn, prefix + ".ffn", out);
    collect_params(block.norm1, prefix + ".norm1", out);
    collect_params(block.norm2, prefix + ".norm2", out);
}

LstmCell make_lstm(int input_dim, int hidden, Rng& rng) {
    LstmCell cell;
    cell.input_dim = input_dim;
    cell.hidden = hidden;
    const double r = 1.0 / std::sqrt(static_cast<double>(input_dim + hidden));
    cell.w = rand_uniform(Shape{input_dim + hidden, 4 * hidden}, -r, r, rng);
    cell.b = Tensor::zeros(Shape{4 * hidden});
    // forget-gate bias starts at 1
    for (int i = hidden; i < 2 * hidden; ++i) cell.b(i) = 1.0;
    cell.w.set_requires_grad(true);
    cell.b.set_requires_grad(true);
    return cell;
}

Tensor lstm_last_state(const Tensor& x, int length, const LstmCell& cell) {
    if (x.rank() != 2 || x.dim(1) != cell.input_dim) {
        throw DimensionError("lstm_last_state: input " + shape_str(x.shape()) +
                             " does not match cell input_dim " + std::to_string(cell.input_dim));
    }
    if (length < 1 || length > x.dim(0)) {
        throw ContractError("lstm_last_state: length " + std::to_string(length) +
                            " invalid for " + std::to_string(x.dim(0)) + " frames");
    }
    const int h_dim = cell.hidden;
    Tensor h = Tensor::zeros(Shape{1, h_dim});
    Tensor c = Tensor::zeros(Shape{1, h_dim});
    for (int t = 0; t < length; ++t) {
        Tensor xt = slice_rows(x, t, 1);
        Tensor z = add_rowvec(matmul(concat_cols({xt, h}), cell.w), cell.b);
        Tensor i_gate = sigmoid(slice_cols(z, 0, h_dim));
        Tensor f_gate = sigmoid(slice_cols(z, h_dim, h_dim));
        Tensor o_gate = sigmoid(slice_cols(z, 2 * h_dim, h_dim));
        Tensor g_cand = tanh(slice_cols(z, 3 * h_dim, h_dim));
        c = add(mul(f_gate, c), mul(i_gate, g_cand));
        h = mul(o_gate, tanh(c));
    }
    return reshape(h, Shape{h_dim});
}

void collect_params(LstmCell& cell, const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + ".w", cell.w});
    out.push_back({prefix + ".b", cell.b});
}

Tensor sinusoidal_encoding(int t, int d) {
    Tensor pe(Shape{t, d});
    for (int pos = 0; pos < t; ++pos) {
        for (int i = 0; i < d; i += 2) {
            const double angle = pos / std::pow(10000.0, static_cast<double>(i) / d);
            pe(pos, i) = std::sin(angle);
            if (i + 1 < d) pe(pos, i + 1) = std::cos(angle);
        }
    }
    return pe;
}

}  // namespace mole
