#include "mole/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <thread>

#include "mole/ops.hpp"

namespace mole {

AdamOptimizer::AdamOptimizer(std::vector<NamedParam> params, double lr, int warmup_steps)
    : params_(std::move(params)), lr_(lr), warmup_(std::max(warmup_steps, 0)) {
    for (const auto& p : params_) {
        m_.emplace_back(static_cast<std::size_t>(p.tensor.size()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(p.tensor.size()), 0.0);
    }
}

double AdamOptimizer::current_lr() const {
    if (warmup_ == 0) return lr_;
    return lr_ * std::min(1.0, static_cast<double>(t_) / warmup_);
}

void AdamOptimizer::clip_gradients(double max_norm) {
    if (max_norm <= 0) return;
    double norm2 = 0.0;
    for (auto& p : params_) {
        if (!p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad()) norm2 += g * g;
    }
    const double norm = std::sqrt(norm2);
    if (norm <= max_norm) return;
    const double scale = max_norm / norm;
    for (auto& p : params_) {
        if (!p.tensor.has_grad()) continue;
        for (double& g : p.tensor.grad()) g *= scale;
    }
}

void AdamOptimizer::step() {
    ++t_;
    const double lr_t = current_lr();
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i].tensor;
        auto& m = m_[i];
        auto& v = v_[i];
        const bool has_grad = p.has_grad();
        for (std::int64_t j = 0; j < p.size(); ++j) {
            const double g = has_grad ? p.grad()[static_cast<std::size_t>(j)] : 0.0;
            m[static_cast<std::size_t>(j)] = beta1_ * m[static_cast<std::size_t>(j)] + (1.0 - beta1_) * g;
            v[static_cast<std::size_t>(j)] = beta2_ * v[static_cast<std::size_t>(j)] + (1.0 - beta2_) * g * g;
            const double mhat = m[static_cast<std::size_t>(j)] / bc1;
            const double vhat = v[static_cast<std::size_t>(j)] / bc2;
            p.values()[static_cast<std::size_t>(j)] -= lr_t * mhat / (std::sqrt(vhat) + eps_);
        }
        p.zero_grad();
    }
}

OptimizerState AdamOptimizer::state() const {
    OptimizerState s;
    s.t = t_;
    s.m = m_;
    s.v = v_;
    return s;
}

void AdamOptimizer::load_state(const OptimizerState& state) {
    if (state.m.size() != m_.size() || state.v.size() != v_.size()) {
        throw ConfigError("optimizer state does not match parameter list");
    }
    t_ = state.t;
    m_ = state.m;
    v_ = state.v;
}

StepStats train_step(Model& model, const SequenceBatch& batch, AdamOptimizer& adam,
                     Rng* dropout_rng) {
    const ModelConfig& config = model.config;
    if (batch.size() == 0) throw ContractError("train_step: empty batch");

    Graph graph;
    GraphScope scope(graph);

    const auto positions = config.effective_positions();
    std::vector<RoutingTrace> moe_traces(config.kind == ModelKind::MoE ? positions.size() : 0);
    std::vector<LrlBatch> lrl_batches(config.kind == ModelKind::MoLE ? positions.size() : 0);

    Tensor ctc_sum;
    int ctc_count = 0;
    for (std::size_t u = 0; u < batch.size(); ++u) {
        ForwardOptions opts;
        opts.dropout_rng = dropout_rng;
        opts.utterance_id = batch.ids[u];
        RoutingTrace merged;  // per-utterance collection split by layer below
        if (config.kind == ModelKind::MoE) opts.moe_trace = &merged;
        ForwardResult fwd = model_forward(model, batch.features[u], batch.lengths[u], opts);

        if (config.kind == ModelKind::MoE) {
            // model_forward appends one routing record per MoE layer, in order.
            if (merged.utterances.size() != positions.size()) {
                throw ContractError("train_step: unexpected routing trace layout");
            }
            for (std::size_t li = 0; li < positions.size(); ++li) {
                moe_traces[li].n_experts = merged.n_experts;
                moe_traces[li].utterances.push_back(std::move(merged.utterances[li]));
            }
        }
        if (config.kind == ModelKind::MoLE && config.use_lrl) {
            for (std::size_t li = 0; li < fwd.decisions.size(); ++li) {
                lrl_batches[li].embeddings.push_back(fwd.decisions[li].z);
                lrl_batches[li].labels.push_back(batch.languages[u]);
            }
        }

        CtcResult ctc = ctc_loss({fwd.log_probs, batch.targets[u], batch.lengths[u]});
        if (ctc.infeasible) continue;  // cannot happen on generated corpora
        ctc_sum = ctc_sum.defined() ? add(ctc_sum, ctc.loss) : ctc.loss;
        ++ctc_count;
    }
    if (ctc_count == 0) throw ContractError("train_step: no feasible utterance in batch");
    Tensor ctc_mean = scale(ctc_sum, 1.0 / ctc_count);

    std::vector<Tensor> lrl_terms;
    if (config.kind == ModelKind::MoLE && config.use_lrl) {
        for (auto& lb : lrl_batches) lrl_terms.push_back(lrl(lb));
    }
    std::vector<Tensor> balance_terms;
    if (config.kind == ModelKind::MoE) {
        for (auto& trace : moe_traces) {
            balance_terms.push_back(balance_loss(trace, config.n_languages));
        }
    }

    Tensor total = total_loss(ctc_mean, lrl_terms, balance_terms,
                              {config.lambda_lr, config.lambda_bal});

    StepStats stats;
    stats.total = total.item();
    stats.ctc = ctc_mean.item();
    for (const Tensor& t : lrl_terms) stats.lrl += t.item() / lrl_terms.size();
    for (const Tensor& t : balance_terms) stats.balance += t.item() / balance_terms.size();

    if (!std::isfinite(stats.total)) return stats;  // caller aborts, no update

    graph.backward(total);
    adam.clip_gradients(model.config.grad_clip);
    adam.step();
    return stats;
}

ModelConfig config_for_corpus(ModelConfig config, const Corpus& corpus) {
    if (config.vocab_size == 0) config.vocab_size = corpus.total_vocab();
    if (config.vocab_size != corpus.total_vocab()) {
        throw ConfigError("config vocab_size " + std::to_string(config.vocab_size) +
                          " does not match corpus vocabulary " +
                          std::to_string(corpus.total_vocab()));
    }
    if (config.feature_dim != corpus.manifest.feature_dim) {
        throw ConfigError("config feature_dim " + std::to_string(config.feature_dim) +
                          " does not match corpus feature_dim " +
                          std::to_string(corpus.manifest.feature_dim));
    }
    if (config.kind != ModelKind::TFM && config.n_languages != corpus.num_languages()) {
        throw ConfigError("config n_languages " + std::to_string(config.n_languages) +
                          " does not match corpus languages " +
                          std::to_string(corpus.num_languages()));
    }
    return config;
}

namespace {

std::string format_eval_line(std::uint64_t step, const EvalResult& eval, int n_languages) {
    char buf[64];
    std::string line = "eval step " + std::to_string(step);
    for (int lang = 0; lang < n_languages; ++lang) {
        std::snprintf(buf, sizeof(buf), " cer_L%d %.6f", lang, eval.language_cer(lang));
        line += buf;
    }
    std::snprintf(buf, sizeof(buf), " ovr %.6f", eval.ovr);
    line += buf;
    return line;
}

}  // namespace

TrainResult train(const ModelConfig& raw_config, const Corpus& corpus,
                  const std::string& checkpoint_path, std::ostream* echo) {
    ModelConfig config = config_for_corpus(raw_config, corpus);
    config.validate();

    Model model = build_model(config);
    AdamOptimizer adam(named_params(model), config.lr, config.warmup_steps);
    Rng batch_rng(derive_stream(config.seed, 0x51));
    Rng dropout_rng(derive_stream(config.seed, 0x52));

    std::ostringstream log;
    auto emit = [&](const std::string& line) {
        log << line << "\n";
        if (echo) *echo << line << "\n";
    };

    TrainResult result;
    Checkpoint last_good = snapshot_model(model, 0, batch_rng.state());

    char buf[256];
    for (int step = 1; step <= config.steps; ++step) {
        SequenceBatch batch = sample_batch(corpus, "train", config.batch_size, batch_rng);
        StepStats stats;
        bool diverged = false;
        try {
            stats = train_step(model, batch, adam, config.dropout > 0 ? &dropout_rng : nullptr);
        } catch (const NumericError&) {
            // Overflowed activations surface as numeric errors before the
            // loss itself goes NaN; both mean divergence.
            diverged = true;
        }
        if (diverged || !std::isfinite(stats.total)) {
            emit("abort step " + std::to_string(step) + " loss diverged");
            save_checkpoint(checkpoint_path, last_good);
            result.aborted = true;
            result.steps_done = static_cast<std::uint64_t>(step - 1);
            result.metrics_log = log.str();
            result.checkpoint_path = checkpoint_path;
            return result;
        }
        result.last_stats = stats;
        std::snprintf(buf, sizeof(buf),
                      "step %d total %.6f ctc %.6f lrl %.6f balance %.6f lr %.6g", step,
                      stats.total, stats.ctc, stats.lrl, stats.balance, adam.current_lr());
        emit(buf);

        if (config.eval_interval > 0 &&
            (step % config.eval_interval == 0 || step == config.steps)) {
            EvalOptions eopts;
            eopts.split = "dev";
            EvalResult eval = evaluate(model, corpus, eopts);
            emit(format_eval_line(static_cast<std::uint64_t>(step), eval, config.n_languages));
            last_good = snapshot_model(model, static_cast<std::uint64_t>(step), batch_rng.state());
            last_good.has_optimizer = true;
            last_good.optimizer = adam.state();
        }
    }

    Checkpoint final = snapshot_model(model, static_cast<std::uint64_t>(config.steps),
                                      batch_rng.state());
    final.has_optimizer = true;
    final.optimizer = adam.state();
    save_checkpoint(checkpoint_path, final);

    result.steps_done = static_cast<std::uint64_t>(config.steps);
    result.metrics_log = log.str();
    result.checkpoint_path = checkpoint_path;
    return result;
}

int resolve_threads(int requested) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("MOLE_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return static_cast<int>(std::min(hw == 0 ? 1u : hw, 4u));
}

double EvalResult::language_cer(int language) const {
    for (const auto& row : per_language) {
        if (row.language == language) return row.cer;
    }
    return 0.0;
}

std::string EvalResult::to_csv() const {
    std::string csv = "language,utterances,distance,chars,cer\n";
    char buf[96];
    for (const auto& row : per_language) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%lld,%lld,%.6f\n", row.language, row.utterances,
                      static_cast<long long>(row.distance), static_cast<long long>(row.chars),
                      row.cer);
        csv += buf;
    }
    int total_utts = 0;
    for (const auto& row : per_language) total_utts += row.utterances;
    std::snprintf(buf, sizeof(buf), "OVR,%d,%lld,%lld,%.6f\n", total_utts,
                  static_cast<long long>(total_distance), static_cast<long long>(total_chars), ovr);
    csv += buf;
    return csv;
}

std::string EvalResult::to_table() const {
    char buf[128];
    std::string out = "lang  utts  distance  chars     CER\n";
    for (const auto& row : per_language) {
        std::snprintf(buf, sizeof(buf), "%4d  %4d  %8lld  %5lld  %6.4f\n", row.language,
                      row.utterances, static_cast<long long>(row.distance),
                      static_cast<long long>(row.chars), row.cer);
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), " OVR        %8lld  %5lld  %6.4f\n",
                  static_cast<long long>(total_distance), static_cast<long long>(total_chars), ovr);
    out += buf;
    if (has_routing) out += routing.to_table();
    return out;
}

EvalResult evaluate(const Model& model, const Corpus& corpus, const EvalOptions& opts) {
    const auto& utts = corpus.split(opts.split);
    const int n = static_cast<int>(utts.size());
    const int threads = std::max(1, std::min(resolve_threads(opts.threads), n));

    std::vector<std::vector<int>> hyps(static_cast<std::size_t>(n));
    // Headline routing uses the first expert layer: its gate sees the purest
    // acoustic representation. route-inspect exports every layer.
    std::vector<GatingDecision> first_layer_decisions(static_cast<std::size_t>(n));
    const bool is_mole = model.config.kind == ModelKind::MoLE;

    auto worker = [&](int begin, int end) {
        for (int i = begin; i < end; ++i) {
            const Utterance& utt = utts[static_cast<std::size_t>(i)];
            if (opts.decode_override) {
                hyps[static_cast<std::size_t>(i)] = opts.decode_override(utt);
                continue;
            }
            ForwardResult fwd = model_forward(model, utt.features, utt.length);
            hyps[static_cast<std::size_t>(i)] = greedy_ctc_decode(fwd.log_probs, utt.length);
            if (is_mole && !fwd.decisions.empty()) {
                first_layer_decisions[static_cast<std::size_t>(i)] = std::move(fwd.decisions.front());
            }
        }
    };
    if (threads == 1) {
        worker(0, n);
    } else {
        std::vector<std::thread> pool;
        const int chunk = (n + threads - 1) / threads;
        for (int t = 0; t < threads; ++t) {
            const int begin = t * chunk, end = std::min(n, begin + chunk);
            if (begin < end) pool.emplace_back(worker, begin, end);
        }
        for (auto& th : pool) th.join();
    }

    EvalResult result;
    std::map<int, LanguageCer> by_lang;
    for (int i = 0; i < n; ++i) {
        const Utterance& utt = utts[static_cast<std::size_t>(i)];
        const auto dist = edit_distance(hyps[static_cast<std::size_t>(i)], utt.targets);
        auto& row = by_lang[utt.language];
        row.language = utt.language;
        row.distance += dist;
        row.chars += static_cast<std::int64_t>(utt.targets.size());
        row.utterances += 1;
        result.total_distance += dist;
        result.total_chars += static_cast<std::int64_t>(utt.targets.size());
    }
    for (auto& [lang, row] : by_lang) {
        row.cer = row.chars ? static_cast<double>(row.distance) / row.chars : 0.0;
        result.per_language.push_back(row);
    }
    result.ovr = result.total_chars ? static_cast<double>(result.total_distance) / result.total_chars
                                    : 0.0;

    if (is_mole && !model.mole_layers.empty() && !opts.decode_override) {
        // Labels attach only here, for metrics; the forward pass never saw them.
        for (int i = 0; i < n; ++i) {
            first_layer_decisions[static_cast<std::size_t>(i)].true_language =
                utts[static_cast<std::size_t>(i)].language;
        }
        result.routing = routing_report(first_layer_decisions);
        result.has_routing = true;
    }
    return result;
}

std::vector<AblationRow> ablation_matrix(const ModelConfig& base, const Corpus& corpus,
                                         std::ostream* echo) {
    struct RowSpec {
        const char* name;
        ModelKind kind;
        bool lrl, lae, calib;
    };
    const RowSpec grid[] = {
        {"TFM", ModelKind::TFM, false, false, false},
        {"MoE", ModelKind::MoE, false, false, false},
        {"MoE+LaE", ModelKind::MoE, false, true, false},
        {"MoLE+LRL", ModelKind::MoLE, true, false, false},
        {"MoLE+LaE", ModelKind::MoLE, false, true, false},
        {"MoLE+LRL+LaE", ModelKind::MoLE, true, true, false},
        {"MoLE+LRL+LaE+Calib", ModelKind::MoLE, true, true, true},
    };

    std::vector<AblationRow> rows;
    for (const auto& spec : grid) {
        ModelConfig config = base;
        config.kind = spec.kind;
        config.use_lrl = spec.lrl;
        config.use_lae = spec.lae;
        config.use_calibration = spec.calib;
        if (spec.kind == ModelKind::TFM) config.expert_positions.clear();

        if (echo) *echo << "== ablation " << spec.name << "\n";
        const std::string ckpt = "/tmp/mole_ablate_" + std::to_string(config.seed) + "_" +
                                 std::string(spec.name) + ".ckpt";
        TrainResult trained = train(config, corpus, ckpt, nullptr);

        AblationRow row;
        row.name = spec.name;
        row.config = config;
        row.aborted = trained.aborted;
        row.final_stats = trained.last_stats;
        Model model = restore_model(load_checkpoint(ckpt));
        row.eval = evaluate(model, corpus, {});
        if (echo) {
            *echo << "   ovr " << row.eval.ovr << (trained.aborted ? " (aborted)" : "") << "\n";
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows, int n_languages) {
    std::string csv = "name,kind,use_lrl,use_lae,use_calibration";
    for (int lang = 0; lang < n_languages; ++lang) csv += ",cer_L" + std::to_string(lang);
    csv += ",ovr,final_lrl,final_balance\n";
    char buf[64];
    for (const auto& row : rows) {
        csv += row.name + "," + kind_name(row.config.kind) + "," +
               std::to_string(row.config.use_lrl ? 1 : 0) + "," +
               std::to_string(row.config.use_lae ? 1 : 0) + "," +
               std::to_string(row.config.use_calibration ? 1 : 0);
        for (int lang = 0; lang < n_languages; ++lang) {
            std::snprintf(buf, sizeof(buf), ",%.6f", row.eval.language_cer(lang));
            csv += buf;
        }
        std::snprintf(buf, sizeof(buf), ",%.6f,%.6f,%.6f\n", row.eval.ovr, row.final_stats.lrl,
                      row.final_stats.balance);
        csv += buf;
    }
    return csv;
}

}  // namespace mole
