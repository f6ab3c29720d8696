#include "mole/model.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "mole/ops.hpp"

namespace mole {

std::string kind_name(ModelKind kind) {
    switch (kind) {
        case ModelKind::TFM: return "TFM";
        case ModelKind::MoE: return "MoE";
        case ModelKind::MoLE: return "MoLE";
    }
    return "?";
}

ModelKind kind_from_name(const std::string& name) {
    if (name == "TFM") return ModelKind::TFM;
    if (name == "MoE") return ModelKind::MoE;
    if (name == "MoLE") return ModelKind::MoLE;
    throw ConfigError("unknown model kind '" + name + "' (TFM|MoE|MoLE)");
}

std::vector<int> ModelConfig::effective_positions() const {
    if (kind == ModelKind::TFM) return {};
    if (!expert_positions.empty()) return expert_positions;
    // Last block, then every second block walking down: 4 -> {2, 4},
    // 6 -> {4, 6}, 12 -> {8, 10, 12}.
    int count = std::max(2, (num_blocks + 2) / 4);
    count = std::min(count, (num_blocks + 1) / 2);
    count = std::max(count, 1);
    std::vector<int> positions;
    for (int i = count - 1; i >= 0; --i) positions.push_back(num_blocks - 2 * i);
    return positions;
}

void ModelConfig::validate() const {
    if (num_blocks < 1) throw ConfigError("config: num_blocks must be >= 1");
    if (d_model < 1 || d_ff < 1 || heads < 1) throw ConfigError("config: bad dimensions");
    if (d_model % heads != 0) throw ConfigError("config: d_model not divisible by heads");
    if (vocab_size < 1) throw ConfigError("config: vocab_size must be set from the corpus");
    if (feature_dim < 1) throw ConfigError("config: feature_dim must be >= 1");
    if (dropout < 0 || dropout >= 1) throw ConfigError("config: dropout outside [0, 1)");
    if (lambda_lr < 0 || lambda_bal < 0) throw ConfigError("config: negative loss weight");
    if (batch_size < 1 || steps < 0) throw ConfigError("config: bad training sizes");

    if (kind == ModelKind::TFM) {
        if (!expert_positions.empty() || use_lrl || use_lae || use_calibration) {
            throw ConfigError("config: kind TFM forbids expert settings");
        }
        return;
    }
    for (int p : effective_positions()) {
        if (p < 1 || p > num_blocks) {
            throw ConfigError("config: expert position " + std::to_string(p) + " outside [1, " +
                              std::to_string(num_blocks) + "]");
        }
    }
    if (n_languages < 1) throw ConfigError("config: n_languages must be >= 1");
    if (kind == ModelKind::MoE) {
        if (use_lrl) throw ConfigError("config: the MoE baseline has no LRL");
        if (use_calibration) throw ConfigError("config: calibration applies to MoLE only");
        if (k < 1 || k > n_languages) throw ConfigError("config: k outside [1, N]");
    }
    if (kind == ModelKind::MoLE) {
        if (use_calibration && !use_lae) {
            throw ConfigError("config: calibration requires the language-agnostic expert");
        }
        if (gate_hidden < 1) throw ConfigError("config: gate_hidden must be >= 1");
    }
}

std::string ModelConfig::serialize() const {
    std::ostringstream out;
    out << "kind " << kind_name(kind) << "\n";
    out << "num_blocks " << num_blocks << "\n";
    out << "expert_positions";
    for (int p : expert_positions) out << " " << p;
    out << "\n";
    out << "d_model " << d_model << "\n";
    out << "heads " << heads << "\n";
    out << "d_ff " << d_ff << "\n";
    out << "gate_hidden " << gate_hidden << "\n";
    out << "n_languages " << n_languages << "\n";
    out << "k " << k << "\n";
    out << "use_lrl " << use_lrl << "\n";
    out << "use_lae " << use_lae << "\n";
    out << "use_calibration " << use_calibration << "\n";
    out << "lrl_stop_gradient " << lrl_stop_gradient << "\n";
    out << "lambda_lr " << lambda_lr << "\n";
    out << "lambda_bal " << lambda_bal << "\n";
    out << "dropout " << dropout << "\n";
    out << "lr " << lr << "\n";
    out << "grad_clip " << grad_clip << "\n";
    out << "warmup_steps " << warmup_steps << "\n";
    out << "steps " << steps << "\n";
    out << "batch_size " << batch_size << "\n";
    out << "eval_interval " << eval_interval << "\n";
    out << "seed " << seed << "\n";
    out << "feature_dim " << feature_dim << "\n";
    out << "vocab_size " << vocab_size << "\n";
    return out.str();
}

ModelConfig ModelConfig::parse(const std::string& text) {
    ModelConfig c;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::istringstream ls(line);
        std::string key;
        if (!(ls >> key)) continue;
        if (key == "kind") {
            std::string v;
            ls >> v;
            c.kind = kind_from_name(v);
        } else if (key == "num_blocks") {
            ls >> c.num_blocks;
        } else if (key == "expert_positions") {
            c.expert_positions.clear();
            int p;
            while (ls >> p) c.expert_positions.push_back(p);
            continue;  // list may legitimately be empty
        } else if (key == "d_model") {
            ls >> c.d_model;
        } else if (key == "heads") {
            ls >> c.heads;
        } else if (key == "d_ff") {
            ls >> c.d_ff;
        } else if (key == "gate_hidden") {
            ls >> c.gate_hidden;
        } else if (key == "n_languages") {
            ls >> c.n_languages;
        } else if (key == "k") {
            ls >> c.k;
        } else if (key == "use_lrl") {
            ls >> c.use_lrl;
        } else if (key == "use_lae") {
            ls >> c.use_lae;
        } else if (key == "use_calibration") {
            ls >> c.use_calibration;
        } else if (key == "lrl_stop_gradient") {
            ls >> c.lrl_stop_gradient;
        } else if (key == "lambda_lr") {
            ls >> c.lambda_lr;
        } else if (key == "lambda_bal") {
            ls >> c.lambda_bal;
        } else if (key == "dropout") {
            ls >> c.dropout;
        } else if (key == "lr") {
            ls >> c.lr;
        } else if (key == "grad_clip") {
            ls >> c.grad_clip;
        } else if (key == "warmup_steps") {
            ls >> c.warmup_steps;
        } else if (key == "steps") {
            ls >> c.steps;
        } else if (key == "batch_size") {
            ls >> c.batch_size;
        } else if (key == "eval_interval") {
            ls >> c.eval_interval;
        } else if (key == "seed") {
            ls >> c.seed;
        } else if (key == "feature_dim") {
            ls >> c.feature_dim;
        } else if (key == "vocab_size") {
            ls >> c.vocab_size;
        } else {
            throw ConfigError("config: unknown key '" + key + "'");
        }
        if (ls.fail()) throw ConfigError("config: malformed line '" + line + "'");
    }
    return c;
}

ModelConfig ModelConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    ModelConfig c = parse(buf.str());
    c.apply_env_overrides();
    return c;
}

void ModelConfig::apply_env_overrides() {
    if (const char* env = std::getenv("MOLE_SEED")) {
        seed = std::strtoull(env, nullptr, 10);
    }
}

Model build_model(const ModelConfig& config) {
    config.validate();
    Model model;
    model.config = config;
    Rng rng(derive_stream(config.seed, 0x11));
    model.input_proj = make_linear(config.feature_dim, config.d_model, rng);
    for (int b = 0; b < config.num_blocks; ++b) {
        model.blocks.push_back(make_transformer_block(config.d_model, config.heads, config.d_ff, rng));
        model.blocks.back().dropout_rate = config.dropout;
    }
    const auto positions = config.effective_positions();
    for (std::size_t i = 0; i < positions.size(); ++i) {
        if (config.kind == ModelKind::MoE) {
            model.moe_layers.push_back(make_moe(config.d_model, config.d_ff, config.n_languages,
                                                config.k, config.use_lae, rng));
        } else if (config.kind == ModelKind::MoLE) {
            MoleLayer layer = make_mole(config.d_model, config.d_ff, config.n_languages,
                                        config.gate_hidden, rng);
            layer.use_lae = config.use_lae;
            layer.use_calibration = config.use_calibration;
            layer.gate_stop_gradient = config.lrl_stop_gradient;
            model.mole_layers.push_back(std::move(layer));
        }
    }
    model.output_proj = make_linear(config.d_model, config.vocab_size + 1, rng);
    return model;
}

std::vector<NamedParam> named_params(Model& model) {
    std::vector<NamedParam> params;
    collect_params(model.input_proj, "input_proj", params);
    for (std::size_t b = 0; b < model.blocks.size(); ++b) {
        collect_params(model.blocks[b], "block" + std::to_string(b + 1), params);
    }
    const auto positions = model.config.effective_positions();
    for (std::size_t i = 0; i < model.moe_layers.size(); ++i) {
        collect_params(model.moe_layers[i], "moe" + std::to_string(positions[i]), params);
    }
    for (std::size_t i = 0; i < model.mole_layers.size(); ++i) {
        collect_params(model.mole_layers[i], "mole" + std::to_string(positions[i]), params);
    }
    collect_params(model.output_proj, "output_proj", params);
    return params;
}

std::int64_t param_count(Model& model) {
    std::int64_t n = 0;
    for (const auto& p : named_params(model)) n += p.tensor.size();
    return n;
}

std::int64_t expert_ffn_count(const Model& model) {
    std::int64_t n = 0;
    for (const auto& layer : model.moe_layers) {
        n += static_cast<std::int64_t>(layer.experts.size()) + (layer.use_common ? 1 : 0);
    }
    for (const auto& layer : model.mole_layers) {
        n += static_cast<std::int64_t>(layer.lse.size()) + (layer.use_lae ? 1 : 0);
    }
    return n;
}

ForwardResult model_forward(const Model& model, const Tensor& features, int length,
                            const ForwardOptions& opts) {
    const ModelConfig& config = model.config;
    if (features.rank() != 2 || features.dim(1) != config.feature_dim) {
        throw DimensionError("model_forward: features " + shape_str(features.shape()) +
                             " do not match feature_dim " + std::to_string(config.feature_dim));
    }
    if (length < 1 || length > features.dim(0)) {
        throw ContractError("model_forward: length out of range");
    }

    ForwardResult result;
    const int t = features.dim(0);
    Tensor h = linear_forward(features, model.input_proj);
    h = add(h, sinusoidal_encoding(t, config.d_model));

    const auto positions = config.effective_positions();
    RoutingTrace local_trace;
    for (int b = 1; b <= config.num_blocks; ++b) {
        h = transformer_block_forward(h, length, model.blocks[static_cast<std::size_t>(b - 1)],
                                      opts.dropout_rng);
        const auto it = std::find(positions.begin(), positions.end(), b);
        if (it == positions.end()) continue;
        const auto idx = static_cast<std::size_t>(it - positions.begin());
        if (config.kind == ModelKind::MoE) {
            RoutingTrace& trace = opts.moe_trace ? *opts.moe_trace : local_trace;
            h = moe_sparse(h, length, model.moe_layers[idx], trace, opts.utterance_id);
        } else if (config.kind == ModelKind::MoLE) {
            GatingDecision decision;
            h = mole_forward(h, length, model.mole_layers[idx], &decision, opts.utterance_id);
            result.decisions.push_back(std::move(decision));
        }
    }
    result.log_probs = log_softmax(linear_forward(h, model.output_proj));
    return result;
}

}  // namespace mole
