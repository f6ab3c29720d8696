#include "mole/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace mole {

namespace {

constexpr const char* kSplits[] = {"train", "dev", "test"};

// Stream tags keep prototype / permutation / utterance draws independent.
constexpr std::uint64_t kProtoStream = 0xA1;
constexpr std::uint64_t kUttStream = 0xB2;
constexpr std::uint64_t kPermStream = 0xC3;

std::uint64_t split_tag(const std::string& split) {
    if (split == "train") return 1;
    if (split == "dev") return 2;
    if (split == "test") return 3;
    throw ConfigError("unknown split '" + split + "'");
}

}  // namespace

CorpusManifest CorpusManifest::toy_default(std::uint64_t seed) {
    CorpusManifest m;
    m.seed = seed;
    m.noise_sigma = 0.8;
    m.frames_per_token_min = 2;
    m.frames_per_token_max = 3;
    m.tokens_min = 4;
    m.tokens_max = 9;
    // Train frame budgets proportional to 600:320:400:122:43; test and dev
    // proportional to 26:26:26:17:6.
    const std::int64_t train_scale = 8, dev_scale = 14, test_scale = 150;
    const std::int64_t train_hours[] = {600, 320, 400, 122, 43};
    const std::int64_t eval_hours[] = {26, 26, 26, 17, 6};
    for (int i = 0; i < 5; ++i) {
        LanguageBudget b;
        b.id = i;
        b.vocab_size = 32;
        b.train_frames = train_hours[i] * train_scale;
        b.dev_frames = eval_hours[i] * dev_scale;
        b.test_frames = eval_hours[i] * test_scale;
        m.languages.push_back(b);
    }
    return m;
}

void CorpusManifest::validate() const {
    if (languages.empty()) throw ConfigError("corpus manifest: no languages");
    std::set<int> ids;
    for (const auto& lang : languages) {
        if (!ids.insert(lang.id).second) {
            throw ConfigError("corpus manifest: duplicate language id " + std::to_string(lang.id));
        }
        if (lang.vocab_size < 1) throw ConfigError("corpus manifest: vocab_size must be >= 1");
        if (lang.train_frames <= 0 || lang.dev_frames <= 0 || lang.test_frames <= 0) {
            throw ConfigError("corpus manifest: frame budgets must be positive");
        }
    }
    if (feature_dim < static_cast<int>(languages.size()) + 1) {
        throw ConfigError("corpus manifest: feature_dim must exceed the language count");
    }
    if (frames_per_token_min < 1 || frames_per_token_max < frames_per_token_min) {
        throw ConfigError("corpus manifest: bad frames_per_token range");
    }
    if (tokens_min < 1 || tokens_max < tokens_min) {
        throw ConfigError("corpus manifest: bad tokens range");
    }
    if (noise_sigma < 0) throw ConfigError("corpus manifest: negative noise_sigma");
    if (vocab_overlap < 0.0 || vocab_overlap > 1.0) {
        throw ConfigError("corpus manifest: vocab_overlap outside [0, 1]");
    }
}

int CorpusManifest::shared_tokens() const {
    if (vocab_overlap <= 0.0) return 0;
    int min_vocab = languages.front().vocab_size;
    for (const auto& lang : languages) min_vocab = std::min(min_vocab, lang.vocab_size);
    const int shared = static_cast<int>(std::lround(vocab_overlap * min_vocab));
    return std::min(shared, min_vocab);
}

int CorpusManifest::total_vocab() const {
    const int shared = shared_tokens();
    int total = shared;
    for (const auto& lang : languages) total += lang.vocab_size - shared;
    return total;
}

int CorpusManifest::global_token(int lang_index, int local) const {
    const int shared = shared_tokens();
    if (local < shared) return local + 1;
    int offset = shared;
    for (int li = 0; li < lang_index; ++li) {
        offset += languages[static_cast<std::size_t>(li)].vocab_size - shared;
    }
    return offset + (local - shared) + 1;
}

std::string CorpusManifest::serialize() const {
    std::ostringstream out;
    out << "format mole-corpus\n";
    out << "version 1\n";
    out << "seed " << seed << "\n";
    out << "feature_dim " << feature_dim << "\n";
    out << "noise_sigma " << noise_sigma << "\n";
    out << "frames_per_token " << frames_per_token_min << " " << frames_per_token_max << "\n";
    out << "tokens " << tokens_min << " " << tokens_max << "\n";
    out << "shared_prototypes " << (shared_prototypes ? 1 : 0) << "\n";
    out << "vocab_overlap " << vocab_overlap << "\n";
    out << "num_languages " << languages.size() << "\n";
    for (const auto& lang : languages) {
        out << "language " << lang.id << " vocab " << lang.vocab_size << " train "
            << lang.train_frames << " dev " << lang.dev_frames << " test " << lang.test_frames
            << "\n";
    }
    return out.str();
}

CorpusManifest CorpusManifest::parse(const std::string& text) {
    CorpusManifest m;
    m.languages.clear();
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "format" || key == "version") {
            continue;
        } else if (key == "seed") {
            ls >> m.seed;
        } else if (key == "feature_dim") {
            ls >> m.feature_dim;
        } else if (key == "noise_sigma") {
            ls >> m.noise_sigma;
        } else if (key == "frames_per_token") {
            ls >> m.frames_per_token_min >> m.frames_per_token_max;
        } else if (key == "tokens") {
            ls >> m.tokens_min >> m.tokens_max;
        } else if (key == "shared_prototypes") {
            int v;
            ls >> v;
            m.shared_prototypes = v != 0;
        } else if (key == "vocab_overlap") {
            ls >> m.vocab_overlap;
        } else if (key == "num_languages") {
            continue;  // implied by language lines
        } else if (key == "language") {
            LanguageBudget b;
            std::string tag;
            ls >> b.id >> tag >> b.vocab_size >> tag >> b.train_frames >> tag >> b.dev_frames >>
                tag >> b.test_frames;
            m.languages.push_back(b);
        } else if (key == "split" || key == "utterance") {
            continue;  // index section, handled by load_corpus
        } else {
            throw ConfigError("corpus manifest: unknown key '" + key + "'");
        }
        if (!ls && key != "format") {
            throw ConfigError("corpus manifest: malformed line '" + line + "'");
        }
    }
    m.validate();
    return m;
}

CorpusManifest CorpusManifest::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse(buf.str());
}

std::vector<SyntheticLanguageSpec> build_language_specs(const CorpusManifest& manifest) {
    manifest.validate();
    const int n = static_cast<int>(manifest.languages.size());
    const int d = manifest.feature_dim;
    // Coloring occupies the trailing dimensions, one axis per language, so
    // prototypes never interfere with language identity.
    const int proto_dim = d - n;
    // Coloring must dominate per-utterance prototype-mix variation so
    // mean-frame nearest-centroid classification stays exact at sigma = 0.
    const double color_mag = std::max(4.0, 4.0 * manifest.noise_sigma);

    std::vector<SyntheticLanguageSpec> specs;
    for (int li = 0; li < n; ++li) {
        const auto& budget = manifest.languages[static_cast<std::size_t>(li)];
        SyntheticLanguageSpec spec;
        spec.id = budget.id;
        spec.vocab_size = budget.vocab_size;
        spec.frames_per_token_min = manifest.frames_per_token_min;
        spec.frames_per_token_max = manifest.frames_per_token_max;
        spec.noise_sigma = manifest.noise_sigma;
        spec.coloring.assign(static_cast<std::size_t>(d), 0.0);
        spec.coloring[static_cast<std::size_t>(proto_dim + li)] = color_mag;

        int pool_size = 0;
        for (const auto& lang : manifest.languages) pool_size = std::max(pool_size, lang.vocab_size);
        const int shared = manifest.shared_tokens();

        // With a shared pool, every language hears the same sound inventory
        // but assigns the non-shared sounds to its own symbols through a
        // per-language permutation. That permutation is what a shared model
        // has to memorize per language and what an expert can own.
        std::vector<int> perm;
        for (int j = shared; j < pool_size; ++j) perm.push_back(j);
        if (manifest.shared_prototypes) {
            Rng perm_rng(derive_stream(manifest.seed, kPermStream, static_cast<std::uint64_t>(li)));
            for (int j = static_cast<int>(perm.size()) - 1; j > 0; --j) {
                std::swap(perm[static_cast<std::size_t>(j)],
                          perm[static_cast<std::size_t>(perm_rng.randint(0, j))]);
            }
        }

        for (int tok = 0; tok < budget.vocab_size; ++tok) {
            const int pool_idx =
                tok < shared ? tok : perm[static_cast<std::size_t>(tok - shared)];
            const std::uint64_t stream =
                manifest.shared_prototypes
                    ? derive_stream(manifest.seed, kProtoStream, static_cast<std::uint64_t>(pool_idx))
                    : derive_stream(manifest.seed, kProtoStream + 1 + static_cast<std::uint64_t>(li),
                                    static_cast<std::uint64_t>(tok));
            Rng rng(stream);
            std::vector<double> proto(static_cast<std::size_t>(d), 0.0);
            for (int k = 0; k < proto_dim; ++k) proto[static_cast<std::size_t>(k)] = rng.normal();
            spec.token_prototypes.push_back(std::move(proto));
        }
        specs.push_back(std::move(spec));
    }

    // Separability invariant: min pairwise coloring distance >= 4 sigma.
    for (int a = 0; a < n; ++a) {
        for (int b = a + 1; b < n; ++b) {
            double d2 = 0;
            for (int k = 0; k < d; ++k) {
                const double diff = specs[a].coloring[static_cast<std::size_t>(k)] -
                                    specs[b].coloring[static_cast<std::size_t>(k)];
                d2 += diff * diff;
            }
            if (std::sqrt(d2) < 4.0 * manifest.noise_sigma) {
                throw ConfigError("corpus: coloring separation below 4 sigma");
            }
        }
    }
    return specs;
}

namespace {

Utterance generate_utterance(const CorpusManifest& manifest, const SyntheticLanguageSpec& spec,
                             int lang_index, const std::string& split, int index) {
    Rng rng(derive_stream(manifest.seed,
                          kUttStream + split_tag(split) * 64 + static_cast<std::uint64_t>(spec.id),
                          static_cast<std::uint64_t>(index)));
    Utterance utt;
    utt.id = "L" + std::to_string(spec.id) + "-" + split + "-" + std::to_string(index);
    utt.language = spec.id;

    const int n_tokens = rng.randint(manifest.tokens_min, manifest.tokens_max);
    std::vector<int> locals;
    std::vector<int> frames_per;
    int total = 0;
    for (int i = 0; i < n_tokens; ++i) {
        locals.push_back(rng.randint(0, spec.vocab_size - 1));
        frames_per.push_back(rng.randint(spec.frames_per_token_min, spec.frames_per_token_max));
        total += frames_per.back();
        utt.targets.push_back(manifest.global_token(lang_index, locals.back()));
    }
    utt.length = total;

    const int d = manifest.feature_dim;
    utt.features = Tensor(Shape{total, d});
    int row = 0;
    for (int i = 0; i < n_tokens; ++i) {
        const auto& proto = spec.token_prototypes[static_cast<std::size_t>(locals[i])];
        for (int f = 0; f < frames_per[i]; ++f, ++row) {
            for (int k = 0; k < d; ++k) {
                double v = proto[static_cast<std::size_t>(k)] + spec.coloring[static_cast<std::size_t>(k)];
                if (spec.noise_sigma > 0) v += spec.noise_sigma * rng.normal();
                utt.features(row, k) = v;
            }
        }
    }
    return utt;
}

void write_u32(std::ofstream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::ifstream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

std::int64_t budget_for(const LanguageBudget& b, const std::string& split) {
    if (split == "train") return b.train_frames;
    if (split == "dev") return b.dev_frames;
    return b.test_frames;
}

}  // namespace

void generate_corpus(const CorpusManifest& manifest, const std::string& out_dir) {
    manifest.validate();
    const auto specs = build_language_specs(manifest);
    std::filesystem::create_directories(out_dir);

    std::ostringstream index;
    for (const char* split : kSplits) {
        const std::string bin_name = std::string("features_") + split + ".bin";
        const std::string txt_name = std::string("transcripts_") + split + ".txt";
        std::ofstream bin(std::filesystem::path(out_dir) / bin_name, std::ios::binary);
        std::ofstream txt(std::filesystem::path(out_dir) / txt_name);
        if (!bin || !txt) throw IoError("cannot write corpus files under " + out_dir);

        int count = 0;
        std::ostringstream utt_lines;
        std::uint64_t byte_offset = 0;
        for (std::size_t li = 0; li < specs.size(); ++li) {
            const std::int64_t budget = budget_for(manifest.languages[li], split);
            std::int64_t emitted = 0;
            for (int idx = 0; emitted < budget; ++idx) {
                Utterance utt = generate_utterance(manifest, specs[li],
                                                   static_cast<int>(li), split, idx);
                emitted += utt.length;

                write_u32(bin, static_cast<std::uint32_t>(utt.length));
                write_u32(bin, static_cast<std::uint32_t>(manifest.feature_dim));
                std::vector<float> row(static_cast<std::size_t>(utt.features.size()));
                for (std::int64_t i = 0; i < utt.features.size(); ++i) {
                    row[static_cast<std::size_t>(i)] = static_cast<float>(utt.features.values()[i]);
                }
                bin.write(reinterpret_cast<const char*>(row.data()),
                          static_cast<std::streamsize>(row.size() * sizeof(float)));

                txt << utt.id << " " << utt.language;
                for (int tok : utt.targets) txt << " " << tok;
                txt << "\n";

                utt_lines << "utterance " << split << " " << count << " id " << utt.id
                          << " language " << utt.language << " frames " << utt.length << " offset "
                          << byte_offset << "\n";
                byte_offset += 8 + row.size() * sizeof(float);
                ++count;
            }
        }
        index << "split " << split << " count " << count << " features " << bin_name
              << " transcripts " << txt_name << "\n";
        index << utt_lines.str();
    }

    std::ofstream manifest_out(std::filesystem::path(out_dir) / "manifest.txt");
    if (!manifest_out) throw IoError("cannot write manifest under " + out_dir);
    manifest_out << manifest.serialize() << index.str();
}

Corpus load_corpus(const std::string& dir) {
    Corpus corpus;
    corpus.manifest = CorpusManifest::load((std::filesystem::path(dir) / "manifest.txt").string());

    for (const char* split : kSplits) {
        std::ifstream bin(std::filesystem::path(dir) / ("features_" + std::string(split) + ".bin"),
                          std::ios::binary);
        std::ifstream txt(std::filesystem::path(dir) / ("transcripts_" + std::string(split) + ".txt"));
        if (!bin || !txt) throw IoError("corpus files missing under " + dir);

        std::vector<Utterance>& utts = corpus.splits[split];
        std::string line;
        while (std::getline(txt, line)) {
            if (line.empty()) continue;
            std::istringstream ls(line);
            Utterance utt;
            ls >> utt.id >> utt.language;
            int tok;
            while (ls >> tok) utt.targets.push_back(tok);

            const auto t = read_u32(bin);
            const auto d = read_u32(bin);
            if (!bin) throw IoError("corpus feature file truncated");
            if (static_cast<int>(d) != corpus.manifest.feature_dim) {
                throw IoError("corpus feature dim mismatch");
            }
            utt.length = static_cast<int>(t);
            utt.features = Tensor(Shape{utt.length, static_cast<int>(d)});
            std::vector<float> raw(static_cast<std::size_t>(t) * d);
            bin.read(reinterpret_cast<char*>(raw.data()),
                     static_cast<std::streamsize>(raw.size() * sizeof(float)));
            if (!bin) throw IoError("corpus feature file truncated");
            for (std::size_t i = 0; i < raw.size(); ++i) {
                utt.features.values()[i] = static_cast<double>(raw[i]);
            }
            utts.push_back(std::move(utt));
        }
    }
    return corpus;
}

const std::vector<Utterance>& Corpus::split(const std::string& name) const {
    auto it = splits.find(name);
    if (it == splits.end() || it->second.empty()) {
        throw ContractError("corpus split '" + name + "' is missing or empty");
    }
    return it->second;
}

SequenceBatch sample_batch(const Corpus& corpus, const std::string& split, int batch_size, Rng& rng) {
    const auto& utts = corpus.split(split);
    if (batch_size < 1) throw ContractError("sample_batch: batch_size must be positive");
    const int n = static_cast<int>(utts.size());

    std::vector<int> picks;
    SequenceBatch batch;
    if (batch_size > n) {
        batch.sampled_with_replacement = true;
        for (int i = 0; i < batch_size; ++i) picks.push_back(rng.randint(0, n - 1));
    } else {
        // Partial Fisher-Yates: distinct utterances, uniform over the pool.
        std::vector<int> order(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
        for (int i = 0; i < batch_size; ++i) {
            const int j = rng.randint(i, n - 1);
            std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
            picks.push_back(order[static_cast<std::size_t>(i)]);
        }
    }

    int max_len = 0;
    for (int p : picks) max_len = std::max(max_len, utts[static_cast<std::size_t>(p)].length);
    batch.max_len = max_len;
    const int d = corpus.manifest.feature_dim;
    for (int p : picks) {
        const Utterance& utt = utts[static_cast<std::size_t>(p)];
        Tensor padded = Tensor::zeros(Shape{max_len, d});
        std::copy_n(utt.features.data(), utt.features.size(), padded.data());
        batch.features.push_back(padded);
        batch.lengths.push_back(utt.length);
        batch.languages.push_back(utt.language);
        batch.targets.push_back(utt.targets);
        batch.ids.push_back(utt.id);
    }
    return batch;
}

}  // namespace mole
