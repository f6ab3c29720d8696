#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mole/layers.hpp"
#include "mole/moe.hpp"
#include "mole/mole_block.hpp"
#include "mole/tensor.hpp"

namespace mole {

enum class ModelKind { TFM, MoE, MoLE };

std::string kind_name(ModelKind kind);
ModelKind kind_from_name(const std::string& name);

// Full architecture plus ablation flags and training hyperparameters.
struct ModelConfig {
    ModelKind kind = ModelKind::TFM;
    int num_blocks = 4;
    std::vector<int> expert_positions;  // 1-based; empty = derived default
    int d_model = 24;
    int heads = 2;
    int d_ff = 32;
    int gate_hidden = 16;
    int n_languages = 5;
    int k = 1;  // MoE top-k
    bool use_lrl = false;
    bool use_lae = false;
    bool use_calibration = false;
    bool lrl_stop_gradient = false;
    double lambda_lr = 0.1;
    double lambda_bal = 0.01;
    double dropout = 0.1;
    double lr = 1e-3;
    double grad_clip = 0.0;  // global-norm cap; 0 disables
    int warmup_steps = 100;
    int steps = 4000;
    int batch_size = 8;
    int eval_interval = 500;
    std::uint64_t seed = 1;
    int feature_dim = 16;
    int vocab_size = 0;  // total token vocabulary without blank

    // Expert positions actually used (derived when unset): the last block
    // and every second block below it, covering the trailing third.
    std::vector<int> effective_positions() const;

    void validate() const;
    std::string serialize() const;           // canonical key/value text
    static ModelConfig parse(const std::string& text);
    static ModelConfig load(const std::string& path);
    // Applies MOLE_SEED when set in the environment.
    void apply_env_overrides();
};

struct Model {
    ModelConfig config;
    Linear input_proj;
    std::vector<TransformerBlock> blocks;
    std::vector<MoeLayer> moe_layers;    // parallel to effective_positions()
    std::vector<MoleLayer> mole_layers;  // parallel to effective_positions()
    Linear output_proj;
};

Model build_model(const ModelConfig& config);
std::vector<NamedParam> named_params(Model& model);
std::int64_t param_count(Model& model);
std::int64_t expert_ffn_count(const Model& model);

struct ForwardOptions {
    RoutingTrace* moe_trace = nullptr;   // per-frame routing (MoE only)
    Rng* dropout_rng = nullptr;          // training only
    std::string utterance_id;
};

struct ForwardResult {
    Tensor log_probs;                       // [T, vocab+1], blank at 0
    std::vector<GatingDecision> decisions;  // one per MoLE layer
};

// Runs one utterance through the encoder. Consumes no language label.
ForwardResult model_forward(const Model& model, const Tensor& features, int length,
                            const ForwardOptions& opts = {});

}  // namespace mole
