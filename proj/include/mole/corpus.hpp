#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mole/batch.hpp"
#include "mole/tensor.hpp"

namespace mole {

// Synthetic language: a character vocabulary whose tokens map to prototype
// frame vectors, plus a language-coloring vector added to every frame so
// language identity is acoustically inferable. Prototype dimensions are
// shared across languages by default (confusable "pronunciations" mapping
// to disjoint vocabularies); coloring lives on its own dimensions.
struct SyntheticLanguageSpec {
    int id = 0;
    int vocab_size = 0;
    std::vector<std::vector<double>> token_prototypes;  // [vocab][feature_dim]
    std::vector<double> coloring;                       // [feature_dim]
    int frames_per_token_min = 2;
    int frames_per_token_max = 4;
    double noise_sigma = 0.3;
};

struct LanguageBudget {
    int id = 0;
    int vocab_size = 8;
    std::int64_t train_frames = 0;
    std::int64_t dev_frames = 0;
    std::int64_t test_frames = 0;
};

// Generation recipe; determines the corpus bit for bit given the seed.
struct CorpusManifest {
    std::uint64_t seed = 42;
    int feature_dim = 16;
    double noise_sigma = 0.3;
    int frames_per_token_min = 2;
    int frames_per_token_max = 4;
    int tokens_min = 3;
    int tokens_max = 8;
    // Tokens draw prototypes from one shared pool under a per-language
    // permutation: the same sound maps to a different symbol in every
    // language, which is the confusion a shared model has to memorize.
    bool shared_prototypes = true;
    // Fraction of each vocabulary mapped to shared token ids (same id and
    // sound in every language). 0 = fully disjoint vocabularies.
    double vocab_overlap = 0.0;
    std::vector<LanguageBudget> languages;

    static CorpusManifest toy_default(std::uint64_t seed = 42);
    static CorpusManifest parse(const std::string& text);
    static CorpusManifest load(const std::string& path);
    std::string serialize() const;
    void validate() const;

    int shared_tokens() const;  // token ids common to all languages
    int total_vocab() const;    // without blank
    // Global id (blank = 0 reserved) of a language-local token index.
    int global_token(int lang_index, int local) const;
};

struct Utterance {
    std::string id;
    int language = 0;
    int length = 0;
    Tensor features;           // [length, feature_dim]
    std::vector<int> targets;  // global token ids (blank = 0 excluded)
};

struct Corpus {
    CorpusManifest manifest;
    std::map<std::string, std::vector<Utterance>> splits;  // train / dev / test

    int total_vocab() const { return manifest.total_vocab(); }
    int num_languages() const { return static_cast<int>(manifest.languages.size()); }
    const std::vector<Utterance>& split(const std::string& name) const;
};

// Language specs realized from the manifest (deterministic in the seed).
std::vector<SyntheticLanguageSpec> build_language_specs(const CorpusManifest& manifest);

// Writes manifest.txt, features_<split>.bin and transcripts_<split>.txt
// under out_dir. Same manifest -> bit-identical files.
void generate_corpus(const CorpusManifest& manifest, const std::string& out_dir);

Corpus load_corpus(const std::string& dir);

// Draws batch_size distinct utterances uniformly from the split (with
// replacement, flagged, when batch_size exceeds the split). Features are
// zero-padded to the longest utterance in the batch.
SequenceBatch sample_batch(const Corpus& corpus, const std::string& split, int batch_size, Rng& rng);

}  // namespace mole
