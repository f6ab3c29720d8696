// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Heavy criteria (routing specialization, the directional flag
// grid) train real models on the default synthetic corpus; budget is a few
// minutes of CPU for the light half and tens of minutes for the grid.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mole/checkpoint.hpp"
#include "mole/gradsuite.hpp"
#include "mole/losses.hpp"
#include "mole/meter.hpp"
#include "mole/moe.hpp"
#include "mole/train.hpp"
#include "oracles.hpp"

using namespace mole;

namespace {

int g_failures = 0;

void report(const std::string& name, bool passed, const std::string& detail) {
    std::printf("[%s] %s: %s\n", passed ? "PASS" : "FAIL", name.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!passed) ++g_failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::filesystem::path scratch_dir() {
    auto dir = std::filesystem::temp_directory_path() / "mole_acceptance";
    std::filesystem::create_directories(dir);
    return dir;
}

std::string file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------- criteria

void ctc_oracle_equivalence() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(2024);
    double max_err = 0.0;
    int checked = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const int t = 1 + rng.randint(0, 5);
        const int vocab = 1 + rng.randint(0, 3);
        Tensor lp(Shape{t, vocab + 1});
        for (int r = 0; r < t; ++r) {
            double z = 0;
            std::vector<double> p(static_cast<std::size_t>(vocab + 1));
            for (auto& v : p) {
                v = 0.05 + rng.uniform();
                z += v;
            }
            for (int c = 0; c <= vocab; ++c) lp(r, c) = std::log(p[static_cast<std::size_t>(c)] / z);
        }
        std::vector<int> targets;
        for (int i = rng.randint(0, std::min(t, 3)); i > 0; --i) targets.push_back(rng.randint(1, vocab));

        CtcResult res = ctc_loss({lp, targets, t});
        const double expect = oracles::ctc_brute_force(lp, targets, t);
        if (std::isinf(expect)) {
            if (!res.infeasible) max_err = 1.0;
            continue;
        }
        max_err = std::max(max_err, std::abs(res.loss.item() - expect));
        ++checked;
    }
    const double el = seconds_since(t0);
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%d instances, max |loss - enumeration| = %.3e, %.2fs", checked,
                  max_err, el);
    report("ctc-oracle-equivalence", max_err < 1e-9 && el < 10.0, buf);
}

void gradient_suite() {
    const auto t0 = std::chrono::steady_clock::now();
    auto entries = run_gradient_suite();
    bool ok = !entries.empty();
    double worst = 0.0;
    std::string worst_name = "-";
    for (const auto& e : entries) {
        if (!e.report.passed) ok = false;
        if (e.report.max_rel_err > worst) {
            worst = e.report.max_rel_err;
            worst_name = e.name;
        }
    }
    const double el = seconds_since(t0);
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%zu checks, worst rel err %.3e (%s), %.2fs", entries.size(),
                  worst, worst_name.c_str(), el);
    report("gradient-suite", ok && el < 60.0, buf);
}

void sparse_dense_equivalence() {
    Rng rng(7);
    double max_diff = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 2 + rng.randint(0, 3);
        MoeLayer layer = make_moe(6, 10, n, n, /*use_common=*/trial % 2 == 0, rng);
        Tensor x = rand_normal(Shape{5, 6}, 0.0, 1.0, rng);
        RoutingTrace trace;
        Tensor ys = moe_sparse(x, 5, layer, trace);
        Tensor yd = moe_dense(x, 5, layer);
        for (std::int64_t i = 0; i < ys.size(); ++i) {
            max_diff = std::max(max_diff, std::abs(ys.values()[i] - yd.values()[i]));
        }
    }
    char buf[120];
    std::snprintf(buf, sizeof(buf), "50 instances, max |sparse(k=N) - dense| = %.3e", max_diff);
    report("moe-sparse-dense-equivalence", max_diff < 1e-12, buf);
}

void sparsity_complexity() {
    std::vector<std::uint64_t> flops;
    bool single_lse = true;
    for (int n : {2, 5, 8}) {
        Rng rng(11);
        MoleLayer layer = make_mole(6, 10, n, 5, rng);
        Tensor x = rand_normal(Shape{7, 6}, 0.0, 1.0, rng);
        ExpertMeter::instance().reset();
        mole_forward(x, 7, layer);
        flops.push_back(ExpertMeter::instance().total_flops());
        single_lse = single_lse && ExpertMeter::instance().routed_invocations == 1;
    }
    const bool equal = flops[0] == flops[1] && flops[1] == flops[2];
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "expert flops N={2,5,8}: %llu/%llu/%llu, one LsE eval per utterance: %s",
                  static_cast<unsigned long long>(flops[0]), static_cast<unsigned long long>(flops[1]),
                  static_cast<unsigned long long>(flops[2]), single_lse ? "yes" : "no");
    report("mole-sparsity-complexity", equal && single_lse, buf);
}

void calibration_contract() {
    Rng rng(13);
    bool ok = true;
    std::string detail;

    {  // forced one-hot posterior: LaE contribution exactly zero
        MoleLayer layer = make_mole(4, 6, 3, 5, rng);
        layer.gate_fc.b(1) = 1000.0;
        Tensor x = rand_normal(Shape{5, 4}, 0.0, 1.0, rng);
        GatingDecision d;
        Tensor y = mole_forward(x, 5, layer, &d);
        Tensor expect = add(x, ffn_forward(x, layer.lse[1]));
        double diff = 0.0;
        for (std::int64_t i = 0; i < y.size(); ++i) {
            diff = std::max(diff, std::abs(y.values()[i] - expect.values()[i]));
        }
        ok = ok && d.gamma_value == 1.0 && diff == 0.0;
        detail += "one-hot: gamma=" + std::to_string(d.gamma_value) + " lae-residual=" +
                  std::to_string(diff);
    }
    {  // uniform posterior over N=5: weights exactly (0.2, 0.8)
        MoleLayer layer = make_mole(4, 6, 5, 5, rng);
        for (auto& v : layer.gate_lstm.w.values()) v = 0;
        for (auto& v : layer.gate_lstm.b.values()) v = 0;
        for (auto& v : layer.gate_fc.w.values()) v = 0;
        for (auto& v : layer.gate_fc.b.values()) v = 0;
        Tensor x = rand_normal(Shape{4, 4}, 0.0, 1.0, rng);
        GatingDecision d;
        mole_forward(x, 4, layer, &d);
        ok = ok && d.gamma_value == 0.2;
        detail += ", uniform: (gamma, 1-gamma) = (" + std::to_string(d.gamma_value) + ", " +
                  std::to_string(1.0 - d.gamma_value) + ")";
    }
    {  // LaE weight strictly decreasing in gamma
        MoleLayer layer = make_mole(4, 6, 3, 5, rng);
        Tensor x = rand_normal(Shape{4, 4}, 0.0, 1.0, rng);
        double prev_gamma = -1.0, prev_weight = 2.0;
        bool monotone = true;
        for (double bias : {0.0, 0.4, 0.8, 1.6, 3.2, 6.4, 12.8}) {
            for (auto& v : layer.gate_lstm.w.values()) v = 0;
            for (auto& v : layer.gate_lstm.b.values()) v = 0;
            for (auto& v : layer.gate_fc.w.values()) v = 0;
            for (auto& v : layer.gate_fc.b.values()) v = 0;
            layer.gate_fc.b(0) = bias;
            GatingDecision d = gate(x, 4, layer);
            monotone = monotone && d.gamma_value > prev_gamma && (1.0 - d.gamma_value) < prev_weight;
            prev_gamma = d.gamma_value;
            prev_weight = 1.0 - d.gamma_value;
        }
        ok = ok && monotone;
        detail += std::string(", monotone LaE weight: ") + (monotone ? "yes" : "no");
    }
    report("calibration-contract", ok, detail);
}

Corpus ensure_default_corpus(const std::filesystem::path& dir) {
    std::filesystem::remove_all(dir);
    generate_corpus(CorpusManifest::toy_default(42), dir.string());
    return load_corpus(dir.string());
}

ModelConfig acceptance_base_config(ModelKind kind, std::uint64_t seed) {
    ModelConfig c;
    c.kind = kind;
    c.num_blocks = 4;
    c.expert_positions = kind == ModelKind::TFM ? std::vector<int>{} : std::vector<int>{2, 4};
    c.d_model = 24;
    c.heads = 2;
    c.d_ff = 32;
    c.gate_hidden = 16;
    c.n_languages = 5;
    c.lambda_lr = 0.5;
    c.lambda_bal = 0.01;
    c.dropout = 0.0;
    c.lr = 1.5e-3;
    c.warmup_steps = 100;
    c.steps = 8000;
    c.batch_size = 8;
    c.eval_interval = 0;
    c.seed = seed;
    c.feature_dim = 16;
    return c;
}

void routing_specialization(const Corpus& corpus, const std::filesystem::path& dir) {
    const auto t0 = std::chrono::steady_clock::now();
    ModelConfig config = acceptance_base_config(ModelKind::MoLE, 1);
    config.use_lrl = true;
    config.use_lae = true;
    config.use_calibration = true;
    config.steps = 12000;

    const std::string ckpt = (dir / "routing.ckpt").string();
    TrainResult trained = train(config, corpus, ckpt);
    Model model = restore_model(load_checkpoint(ckpt));
    EvalResult eval = evaluate(model, corpus, {});

    double min_consistency = 1.0;
    for (const auto& row : eval.routing.per_language) {
        min_consistency = std::min(min_consistency, row.consistency);
    }
    const bool ok = !trained.aborted && min_consistency >= 0.95 &&
                    eval.routing.distinct_majority_experts >= 4 &&
                    eval.routing.language_id_accuracy >= 0.99;
    char buf[200];
    std::snprintf(buf, sizeof(buf),
                  "min consistency %.3f, %d distinct majority experts, language-id %.4f, %.0fs",
                  min_consistency, eval.routing.distinct_majority_experts,
                  eval.routing.language_id_accuracy, seconds_since(t0));
    report("routing-specialization", ok && seconds_since(t0) < 600.0, buf);
}

double low_budget_cer(const EvalResult& eval) {
    std::int64_t dist = 0, chars = 0;
    for (const auto& row : eval.per_language) {
        if (row.language >= 3) {  // budgets mirror 600:320:400:122:43
            dist += row.distance;
            chars += row.chars;
        }
    }
    return chars ? static_cast<double>(dist) / chars : 0.0;
}

void directional_table(const Corpus& corpus, const std::filesystem::path& dir) {
    const auto t0 = std::chrono::steady_clock::now();
    int a_wins = 0, b_wins = 0, c_wins = 0;
    std::string per_seed;
    for (std::uint64_t seed : {1, 2, 3}) {
        ModelConfig base = acceptance_base_config(ModelKind::MoLE, seed);
        base.use_lrl = true;
        base.use_lae = true;
        base.use_calibration = true;
        auto rows = ablation_matrix(base, corpus);

        auto find = [&rows](const std::string& name) -> const AblationRow& {
            for (const auto& r : rows) {
                if (r.name == name) return r;
            }
            throw ContractError("ablation row missing: " + name);
        };
        const auto& tfm = find("TFM");
        const auto& moe = find("MoE");
        const auto& moe_lae = find("MoE+LaE");
        const auto& mole_lrl = find("MoLE+LRL");
        const auto& mole_lrl_lae = find("MoLE+LRL+LaE");
        const auto& mole_full = find("MoLE+LRL+LaE+Calib");

        const bool a = mole_full.eval.ovr < tfm.eval.ovr;
        const bool b = low_budget_cer(mole_full.eval) < low_budget_cer(moe_lae.eval);
        const bool c = moe_lae.eval.ovr < moe.eval.ovr && mole_lrl_lae.eval.ovr < mole_lrl.eval.ovr;
        a_wins += a;
        b_wins += b;
        c_wins += c;
        char buf[200];
        std::snprintf(buf, sizeof(buf), " seed%llu[a:%d b:%d c:%d ovr mole=%.3f tfm=%.3f]",
                      static_cast<unsigned long long>(seed), a ? 1 : 0, b ? 1 : 0, c ? 1 : 0,
                      mole_full.eval.ovr, tfm.eval.ovr);
        per_seed += buf;

        std::ofstream csv(dir / ("ablation_seed" + std::to_string(seed) + ".csv"));
        csv << ablation_csv(rows, base.n_languages);
    }
    const double el = seconds_since(t0);
    const bool ok = a_wins == 3 && b_wins >= 2 && c_wins >= 2 && el < 2700.0;
    char buf[320];
    std::snprintf(buf, sizeof(buf), "a(MoLE<TFM) %d/3, b(low-budget MoLE<MoE+LaE) %d/3, "
                  "c(LaE helps both) %d/3,%s %.0fs",
                  a_wins, b_wins, c_wins, per_seed.c_str(), el);
    report("directional-table2", ok, buf);
}

void determinism(const std::filesystem::path& dir) {
    // Corpus: same seed, two generations, identical bytes.
    CorpusManifest manifest = CorpusManifest::toy_default(99);
    for (auto& lang : manifest.languages) {
        lang.train_frames /= 4;
        lang.dev_frames = std::max<std::int64_t>(lang.dev_frames / 4, 30);
        lang.test_frames = std::max<std::int64_t>(lang.test_frames / 8, 30);
    }
    const auto dir_a = dir / "det_a", dir_b = dir / "det_b";
    std::filesystem::remove_all(dir_a);
    std::filesystem::remove_all(dir_b);
    generate_corpus(manifest, dir_a.string());
    generate_corpus(manifest, dir_b.string());
    bool files_equal = true;
    for (const char* name :
         {"manifest.txt", "features_train.bin", "features_dev.bin", "features_test.bin",
          "transcripts_train.txt", "transcripts_dev.txt", "transcripts_test.txt"}) {
        files_equal = files_equal && file_bytes(dir_a / name) == file_bytes(dir_b / name);
    }

    // Training: same seed, two runs, identical metric logs.
    Corpus corpus = load_corpus(dir_a.string());
    ModelConfig config = acceptance_base_config(ModelKind::MoLE, 5);
    config.use_lrl = true;
    config.use_lae = true;
    config.use_calibration = true;
    config.steps = 120;
    config.eval_interval = 60;
    TrainResult r1 = train(config, corpus, (dir / "det1.ckpt").string());
    TrainResult r2 = train(config, corpus, (dir / "det2.ckpt").string());
    const bool logs_equal = !r1.metrics_log.empty() && r1.metrics_log == r2.metrics_log;
    const bool ckpt_equal = file_bytes(dir / "det1.ckpt") == file_bytes(dir / "det2.ckpt");

    char buf[160];
    std::snprintf(buf, sizeof(buf), "corpus bytes equal: %s, metric logs equal: %s, checkpoints equal: %s",
                  files_equal ? "yes" : "no", logs_equal ? "yes" : "no", ckpt_equal ? "yes" : "no");
    report("determinism", files_equal && logs_equal && ckpt_equal, buf);
}

void cer_metric() {
    const double ks = cer(std::string("kitten"), std::string("sitting"));
    const double id = cer(std::string("abcde"), std::string("abcde"));
    const double empty = cer(std::string(""), std::string("xyzw"));
    const bool ok = ks == 3.0 / 7.0 && id == 0.0 && empty == 1.0;
    char buf[120];
    std::snprintf(buf, sizeof(buf), "kitten/sitting = %.6f (3/7), identity = %g, empty hyp = %g", ks,
                  id, empty);
    report("cer-metric", ok, buf);
}

void checkpoint_roundtrip(const Corpus& corpus, const std::filesystem::path& dir) {
    ModelConfig config = acceptance_base_config(ModelKind::MoLE, 21);
    config.use_lrl = true;
    config.use_lae = true;
    config.use_calibration = true;
    config = config_for_corpus(config, corpus);
    Model model = build_model(config);

    const auto path = dir / "roundtrip.ckpt";
    Checkpoint ckpt = snapshot_model(model, 0, 777);
    save_checkpoint(path.string(), ckpt);
    Model restored = restore_model(load_checkpoint(path.string()));

    Rng rng(3);
    SequenceBatch probe = sample_batch(corpus, "dev", 8, rng);
    bool bitwise = true;
    for (std::size_t u = 0; u < probe.size(); ++u) {
        ForwardResult a = model_forward(model, probe.features[u], probe.lengths[u]);
        ForwardResult b = model_forward(restored, probe.features[u], probe.lengths[u]);
        for (std::int64_t i = 0; i < a.log_probs.size(); ++i) {
            bitwise = bitwise && a.log_probs.values()[i] == b.log_probs.values()[i];
        }
    }

    // save(load(f)) must be byte-identical to f.
    const auto path2 = dir / "roundtrip2.ckpt";
    save_checkpoint(path2.string(), load_checkpoint(path.string()));
    const bool bytes_stable = file_bytes(path) == file_bytes(path2);

    char buf[120];
    std::snprintf(buf, sizeof(buf), "forward bitwise stable: %s, save-load-save bytes equal: %s",
                  bitwise ? "yes" : "no", bytes_stable ? "yes" : "no");
    report("checkpoint-roundtrip", bitwise && bytes_stable, buf);
}

}  // namespace

int main(int argc, char** argv) {
    const bool quick = argc > 1 && std::string(argv[1]) == "--quick";
    const auto dir = scratch_dir();

    ctc_oracle_equivalence();
    gradient_suite();
    sparse_dense_equivalence();
    sparsity_complexity();
    calibration_contract();
    cer_metric();

    const auto corpus_dir = dir / "default_corpus";
    Corpus corpus = ensure_default_corpus(corpus_dir);
    checkpoint_roundtrip(corpus, dir);
    determinism(dir);

    if (!quick) {
        routing_specialization(corpus, dir);
        directional_table(corpus, dir);
    } else {
        std::printf("[SKIP] routing-specialization: --quick\n");
        std::printf("[SKIP] directional-table2: --quick\n");
    }

    if (g_failures == 0) {
        std::printf("acceptance: all criteria passed\n");
        return 0;
    }
    std::printf("acceptance: %d criterion(s) FAILED\n", g_failures);
    return 1;
}
