#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "mole/checkpoint.hpp"
#include "mole/frontend.hpp"
#include "mole/gradsuite.hpp"
#include "mole/train.hpp"

using namespace mole;

namespace {

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << content;
}

int cmd_gen_corpus(const std::string& spec_path, const std::string& out_dir, std::uint64_t seed_flag) {
    CorpusManifest manifest =
        spec_path.empty() ? CorpusManifest::toy_default() : CorpusManifest::load(spec_path);
    if (seed_flag) manifest.seed = seed_flag;
    if (const char* env = std::getenv("MOLE_SEED")) manifest.seed = std::strtoull(env, nullptr, 10);
    generate_corpus(manifest, out_dir);
    Corpus corpus = load_corpus(out_dir);
    std::printf("corpus written to %s\n", out_dir.c_str());
    for (const char* split : {"train", "dev", "test"}) {
        std::printf("  %s: %zu utterances\n", split, corpus.split(split).size());
    }
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& corpus_dir,
              const std::string& out_ckpt, const std::string& log_path) {
    ModelConfig config = ModelConfig::load(config_path);
    Corpus corpus = load_corpus(corpus_dir);
    TrainResult result = train(config, corpus, out_ckpt, &std::cout);
    if (!log_path.empty()) write_file(log_path, result.metrics_log);
    std::printf("%s after %llu steps -> %s\n", result.aborted ? "ABORTED" : "done",
                static_cast<unsigned long long>(result.steps_done), out_ckpt.c_str());
    return result.aborted ? 2 : 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& corpus_dir, const std::string& split,
             const std::string& report) {
    Model model = restore_model(load_checkpoint(ckpt_path));
    Corpus corpus = load_corpus(corpus_dir);
    EvalOptions opts;
    opts.split = split;
    EvalResult result = evaluate(model, corpus, opts);
    if (report == "csv") {
        std::fputs(result.to_csv().c_str(), stdout);
        if (result.has_routing) std::fputs(result.routing.to_csv().c_str(), stdout);
    } else {
        std::fputs(result.to_table().c_str(), stdout);
    }
    return 0;
}

int cmd_route_inspect(const std::string& ckpt_path, const std::string& corpus_dir,
                      const std::string& split, const std::string& out_path) {
    Model model = restore_model(load_checkpoint(ckpt_path));
    Corpus corpus = load_corpus(corpus_dir);
    const auto& utts = corpus.split(split);
    const auto positions = model.config.effective_positions();

    std::string csv;
    char buf[64];
    if (model.config.kind == ModelKind::MoLE) {
        csv = "layer,utterance_id,true_language,selected,gamma,posterior\n";
        for (const auto& utt : utts) {
            ForwardOptions opts;
            opts.utterance_id = utt.id;
            ForwardResult fwd = model_forward(model, utt.features, utt.length, opts);
            for (std::size_t li = 0; li < fwd.decisions.size(); ++li) {
                const GatingDecision& d = fwd.decisions[li];
                csv += std::to_string(positions[li]) + "," + utt.id + "," +
                       std::to_string(utt.language) + "," + std::to_string(d.selected);
                std::snprintf(buf, sizeof(buf), ",%.6f,", d.gamma_value);
                csv += buf;
                for (int i = 0; i < d.posterior.dim(0); ++i) {
                    if (i) csv += ";";
                    std::snprintf(buf, sizeof(buf), "%.6f", d.posterior(i));
                    csv += buf;
                }
                csv += "\n";
            }
        }
    } else if (model.config.kind == ModelKind::MoE) {
        csv = "layer,frame,utterance_id,selected,posteriors\n";
        for (const auto& utt : utts) {
            RoutingTrace trace;
            ForwardOptions opts;
            opts.moe_trace = &trace;
            opts.utterance_id = utt.id;
            model_forward(model, utt.features, utt.length, opts);
            for (std::size_t li = 0; li < trace.utterances.size(); ++li) {
                const auto& rec = trace.utterances[li];
                for (int f = 0; f < rec.length; ++f) {
                    csv += std::to_string(positions[li]) + "," + std::to_string(f) + "," + utt.id + ",";
                    const auto& sel = rec.topk[static_cast<std::size_t>(f)];
                    for (std::size_t j = 0; j < sel.size(); ++j) {
                        if (j) csv += ";";
                        csv += std::to_string(sel[j]);
                    }
                    csv += ",";
                    for (int i = 0; i < trace.n_experts; ++i) {
                        if (i) csv += ";";
                        std::snprintf(buf, sizeof(buf), "%.6f", rec.posteriors(f, i));
                        csv += buf;
                    }
                    csv += "\n";
                }
            }
        }
    } else {
        std::fprintf(stderr, "route-inspect: TFM checkpoints carry no routing\n");
        return 1;
    }
    write_file(out_path, csv);
    std::printf("routing written to %s\n", out_path.c_str());
    return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& corpus_dir,
               const std::string& out_path) {
    ModelConfig base = ModelConfig::load(config_path);
    Corpus corpus = load_corpus(corpus_dir);
    auto rows = ablation_matrix(base, corpus, &std::cout);
    const std::string csv = ablation_csv(rows, base.n_languages);
    write_file(out_path, csv);
    std::printf("ablation written to %s\n", out_path.c_str());
    return 0;
}

int cmd_gradcheck(const std::string& module) {
    bool all_passed = true;
    for (const auto& entry : run_gradient_suite(module)) {
        std::printf("%-26s rel_err %.3e tol %.0e  %s\n", entry.name.c_str(),
                    entry.report.max_rel_err, entry.tol, entry.report.passed ? "ok" : "FAIL");
        all_passed = all_passed && entry.report.passed;
    }
    return all_passed ? 0 : 1;
}

int cmd_logmel(const std::string& wav_path, const std::string& out_path) {
    WavData wav = read_wav_pcm16_mono(wav_path);
    Tensor feats = logmel(wav.samples, wav.sample_rate);
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw IoError("cannot write " + out_path);
    const auto t = static_cast<std::uint32_t>(feats.dim(0));
    const auto d = static_cast<std::uint32_t>(feats.dim(1));
    out.write(reinterpret_cast<const char*>(&t), 4);
    out.write(reinterpret_cast<const char*>(&d), 4);
    std::vector<float> row(static_cast<std::size_t>(feats.size()));
    for (std::int64_t i = 0; i < feats.size(); ++i) {
        row[static_cast<std::size_t>(i)] = static_cast<float>(feats.values()[i]);
    }
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size() * sizeof(float)));
    std::printf("%u frames x %u mel bins -> %s\n", t, d, out_path.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MoLE multilingual CTC-ASR toolkit"};
    app.require_subcommand(1);

    std::string spec_path, out_dir;
    std::uint64_t seed_flag = 0;
    auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic multilingual corpus");
    gen->add_option("--spec", spec_path, "corpus spec file (defaults to the toy 5-language setup)");
    gen->add_option("--out", out_dir, "output directory")->required();
    gen->add_option("--seed", seed_flag, "override the manifest seed");

    std::string config_path, corpus_dir, ckpt_path, log_path;
    auto* tr = app.add_subcommand("train", "train a model");
    tr->add_option("--config", config_path, "model config file")->required();
    tr->add_option("--corpus", corpus_dir, "corpus directory")->required();
    tr->add_option("--out", ckpt_path, "output checkpoint")->required();
    tr->add_option("--log", log_path, "write the metrics log to this file");

    std::string split = "test", report = "table";
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    ev->add_option("--corpus", corpus_dir, "corpus directory")->required();
    ev->add_option("--split", split, "corpus split (default test)");
    ev->add_option("--report", report, "csv|table");

    std::string route_out;
    auto* ri = app.add_subcommand("route-inspect", "export routing decisions as CSV");
    ri->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    ri->add_option("--corpus", corpus_dir, "corpus directory")->required();
    ri->add_option("--split", split, "corpus split (default test)");
    ri->add_option("--out", route_out, "output CSV path")->required();

    std::string ablate_out;
    auto* ab = app.add_subcommand("ablate", "run the flag-grid ablation matrix");
    ab->add_option("--config", config_path, "base model config")->required();
    ab->add_option("--corpus", corpus_dir, "corpus directory")->required();
    ab->add_option("--out", ablate_out, "output CSV path")->required();

    std::string module;
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    gc->add_option("--module", module, "filter entries by substring");

    std::string wav_path, mel_out;
    auto* lm = app.add_subcommand("logmel", "extract log-Mel features from a WAV file");
    lm->add_option("--wav", wav_path, "input PCM16 mono 16 kHz WAV")->required();
    lm->add_option("--out", mel_out, "output binary feature file")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_corpus(spec_path, out_dir, seed_flag);
        if (tr->parsed()) return cmd_train(config_path, corpus_dir, ckpt_path, log_path);
        if (ev->parsed()) return cmd_eval(ckpt_path, corpus_dir, split, report);
        if (ri->parsed()) return cmd_route_inspect(ckpt_path, corpus_dir, split, route_out);
        if (ab->parsed()) return cmd_ablate(config_path, corpus_dir, ablate_out);
        if (gc->parsed()) return cmd_gradcheck(module);
        if (lm->parsed()) return cmd_logmel(wav_path, mel_out);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
