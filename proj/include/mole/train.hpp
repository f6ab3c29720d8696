#pragma once

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "mole/checkpoint.hpp"
#include "mole/corpus.hpp"
#include "mole/losses.hpp"
#include "mole/model.hpp"

namespace mole {

// Adam with linear warmup then a constant rate.
class AdamOptimizer {
public:
    AdamOptimizer(std::vector<NamedParam> params, double lr, int warmup_steps);

    void step();  // applies accumulated grads, then clears them
    // Scales all gradients so their global norm is at most max_norm.
    void clip_gradients(double max_norm);
    std::int64_t steps_taken() const { return t_; }
    double current_lr() const;

    OptimizerState state() const;
    void load_state(const OptimizerState& state);

private:
    std::vector<NamedParam> params_;
    double lr_;
    int warmup_;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    std::int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

struct StepStats {
    double total = 0.0;
    double ctc = 0.0;
    double lrl = 0.0;
    double balance = 0.0;
};

// One optimizer step over a batch: CTC (+ LRL per MoLE layer, + balancing
// loss per MoE layer), single backward, Adam update.
StepStats train_step(Model& model, const SequenceBatch& batch, AdamOptimizer& adam,
                     Rng* dropout_rng = nullptr);

struct LanguageCer {
    int language = 0;
    std::int64_t distance = 0;
    std::int64_t chars = 0;
    int utterances = 0;
    double cer = 0.0;
};

struct EvalResult {
    std::vector<LanguageCer> per_language;
    std::int64_t total_distance = 0;
    std::int64_t total_chars = 0;
    double ovr = 0.0;  // character-weighted over all test utterances
    bool has_routing = false;
    RoutingReport routing;

    double language_cer(int language) const;
    std::string to_csv() const;
    std::string to_table() const;
};

struct EvalOptions {
    std::string split = "test";
    int threads = 0;  // 0 = MOLE_THREADS or a small default
    // Test seam: replaces the model decode path.
    std::function<std::vector<int>(const Utterance&)> decode_override;
};

EvalResult evaluate(const Model& model, const Corpus& corpus, const EvalOptions& opts = {});

struct TrainResult {
    bool aborted = false;  // loss diverged; checkpoint holds the last good state
    std::uint64_t steps_done = 0;
    StepStats last_stats;
    std::string metrics_log;
    std::string checkpoint_path;
};

// Deterministic given config.seed. Logs one line per step plus dev CER at
// every eval_interval; echoes to `echo` when given.
TrainResult train(const ModelConfig& config, const Corpus& corpus,
                  const std::string& checkpoint_path, std::ostream* echo = nullptr);

// Fills vocab_size / feature_dim / n_languages from the corpus when unset
// and validates compatibility.
ModelConfig config_for_corpus(ModelConfig config, const Corpus& corpus);

struct AblationRow {
    std::string name;
    ModelConfig config;
    EvalResult eval;
    StepStats final_stats;
    bool aborted = false;
};

// Table-2-style flag grid: TFM; MoE, MoE+LaE; MoLE with LRL / LaE /
// LRL+LaE / LRL+LaE+Calib. Shared seed and corpus across rows.
std::vector<AblationRow> ablation_matrix(const ModelConfig& base, const Corpus& corpus,
                                         std::ostream* echo = nullptr);
std::string ablation_csv(const std::vector<AblationRow>& rows, int n_languages);

int resolve_threads(int requested);

}  // namespace mole
