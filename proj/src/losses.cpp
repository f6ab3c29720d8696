#include "mole/losses.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <set>

#include "mole/ops.hpp"

namespace mole {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr int kBlank = 0;

}  // namespace

CtcResult ctc_loss(const CtcInput& input) {
    const Tensor& lp = input.log_probs;
    if (lp.rank() != 2) throw DimensionError("ctc_loss: [T, V+1] log-probs expected");
    const int t_max = lp.dim(0), vocab = lp.dim(1);
    const int length = input.length;
    if (length < 1 || length > t_max) throw ContractError("ctc_loss: invalid length");
    for (int tok : input.targets) {
        if (tok <= kBlank || tok >= vocab) {
            throw ContractError("ctc_loss: target token " + std::to_string(tok) +
                                " outside vocabulary (blank is 0)");
        }
    }
    for (int t = 0; t < length; ++t) {
        double s = 0.0;
        for (int v = 0; v < vocab; ++v) {
            const double w = lp(t, v);
            if (std::isnan(w)) throw NumericError("ctc_loss: NaN log-prob");
            s += std::exp(w);
        }
        if (std::abs(s - 1.0) > 1e-4) {
            throw NumericError("ctc_loss: frame " + std::to_string(t) +
                               " log-probs exponentiate-sum to " + std::to_string(s));
        }
    }

    const int n_targets = static_cast<int>(input.targets.size());
    int min_frames = n_targets;
    for (int i = 1; i < n_targets; ++i) {
        if (input.targets[i] == input.targets[i - 1]) ++min_frames;  // repeat needs a blank
    }
    if (min_frames > length) {
        CtcResult res;
        res.loss = Tensor::scalar(std::numeric_limits<double>::infinity());
        res.infeasible = true;
        return res;
    }

    // Extended label sequence: blank between and around targets.
    const int s_len = 2 * n_targets + 1;
    std::vector<int> ext(static_cast<std::size_t>(s_len), kBlank);
    for (int i = 0; i < n_targets; ++i) ext[static_cast<std::size_t>(2 * i + 1)] = input.targets[i];

    // Constant masks: initial states and the allowed skip transitions.
    Tensor init_mask(Shape{s_len}, kNegInf);
    init_mask(0) = 0.0;
    if (s_len > 1) init_mask(1) = 0.0;
    Tensor skip_mask(Shape{s_len}, kNegInf);
    for (int s = 2; s < s_len; ++s) {
        if (ext[static_cast<std::size_t>(s)] != kBlank &&
            ext[static_cast<std::size_t>(s)] != ext[static_cast<std::size_t>(s - 2)]) {
            skip_mask(s) = 0.0;
        }
    }

    Tensor alpha = add(gather_elems(take_row(lp, 0), ext), init_mask);
    for (int t = 1; t < length; ++t) {
        Tensor stay = alpha;
        Tensor step = shift_down(alpha, 1, kNegInf);
        Tensor skip = add(shift_down(alpha, 2, kNegInf), skip_mask);
        alpha = add(logsumexp3(stay, step, skip), gather_elems(take_row(lp, t), ext));
    }

    Tensor total = s_len > 1 ? logsumexp_vec(gather_elems(alpha, {s_len - 2, s_len - 1}))
                             : reshape(alpha, Shape{1});
    CtcResult res;
    if (total.values()[0] == kNegInf) {
        // No feasible alignment carries mass (can only happen through exact
        // zero probabilities in the input).
        res.loss = Tensor::scalar(std::numeric_limits<double>::infinity());
        res.infeasible = true;
        return res;
    }
    res.loss = scale(total, -1.0);
    return res;
}

std::vector<int> greedy_ctc_decode(const Tensor& log_probs, int length) {
    if (log_probs.rank() != 2) throw DimensionError("greedy_ctc_decode: [T, V+1] input expected");
    if (length < 0 || length > log_probs.dim(0)) {
        throw ContractError("greedy_ctc_decode: invalid length");
    }
    const int vocab = log_probs.dim(1);
    std::vector<int> out;
    int prev = kBlank;
    for (int t = 0; t < length; ++t) {
        int best = 0;
        for (int v = 1; v < vocab; ++v) {
            if (log_probs(t, v) > log_probs(t, best)) best = v;
        }
        if (best != kBlank && best != prev) out.push_back(best);
        prev = best;
    }
    return out;
}

Tensor lrl(const LrlBatch& batch) {
    const std::size_t n = batch.embeddings.size();
    if (n == 0) throw ContractError("lrl: empty batch");
    if (batch.labels.size() != n) throw ContractError("lrl: labels do not match embeddings");
    for (int label : batch.labels) {
        if (label < 0) throw ContractError("lrl: negative language label");
    }

    std::vector<int> present;
    for (int label : batch.labels) {
        if (std::find(present.begin(), present.end(), label) == present.end()) {
            present.push_back(label);
        }
    }
    std::sort(present.begin(), present.end());

    // Batch-local centroids over the languages present.
    std::map<int, Tensor> centroids;
    for (int lang : present) {
        Tensor acc;
        int count = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (batch.labels[i] != lang) continue;
            acc = acc.defined() ? add(acc, batch.embeddings[i]) : batch.embeddings[i];
            ++count;
        }
        centroids.emplace(lang, scale(acc, 1.0 / count));
    }

    Tensor loss_sum;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<Tensor> cos_all;
        Tensor cos_own;
        for (int lang : present) {
            Tensor c = cosine_similarity(batch.embeddings[i], centroids.at(lang));
            if (lang == batch.labels[i]) cos_own = c;
            cos_all.push_back(c);
        }
        Tensor term = sub(logsumexp_vec(stack_scalars(cos_all)), cos_own);
        loss_sum = loss_sum.defined() ? add(loss_sum, term) : term;
    }
    return scale(loss_sum, 1.0 / static_cast<double>(n));
}

namespace {

Tensor mean_of_terms(const std::vector<Tensor>& terms) {
    Tensor acc;
    for (const Tensor& t : terms) acc = acc.defined() ? add(acc, t) : t;
    return scale(acc, 1.0 / static_cast<double>(terms.size()));
}

}  // namespace

Tensor total_loss(const Tensor& ctc, const std::vector<Tensor>& lrl_terms,
                  const std::vector<Tensor>& balance_terms, const LossWeights& weights) {
    if (weights.lambda_lr < 0 || weights.lambda_bal < 0) {
        throw ConfigError("total_loss: loss weights must be non-negative");
    }
    Tensor total = ctc;
    if (!lrl_terms.empty()) total = add(total, scale(mean_of_terms(lrl_terms), weights.lambda_lr));
    if (!balance_terms.empty()) {
        total = add(total, scale(mean_of_terms(balance_terms), weights.lambda_bal));
    }
    return total;
}

namespace {

template <typename Seq>
std::int64_t levenshtein(const Seq& a, const Seq& b) {
    const std::size_t m = a.size(), n = b.size();
    std::vector<std::int64_t> prev(n + 1), cur(n + 1);
    for (std::size_t j = 0; j <= n; ++j) prev[j] = static_cast<std::int64_t>(j);
    for (std::size_t i = 1; i <= m; ++i) {
        cur[0] = static_cast<std::int64_t>(i);
        for (std::size_t j = 1; j <= n; ++j) {
            const std::int64_t sub_cost = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub_cost});
        }
        std::swap(prev, cur);
    }
    return prev[n];
}

}  // namespace

std::int64_t edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
    return levenshtein(a, b);
}

std::int64_t edit_distance(const std::string& a, const std::string& b) {
    return levenshtein(a, b);
}

double cer(const std::vector<int>& hyp, const std::vector<int>& ref) {
    if (ref.empty()) throw ContractError("cer: empty reference");
    return static_cast<double>(edit_distance(hyp, ref)) / static_cast<double>(ref.size());
}

double cer(const std::string& hyp, const std::string& ref) {
    if (ref.empty()) throw ContractError("cer: empty reference");
    return static_cast<double>(edit_distance(hyp, ref)) / static_cast<double>(ref.size());
}

namespace {

// Best injective expert-per-language assignment accuracy, brute force.
double assignment_accuracy(const std::vector<std::vector<std::int64_t>>& lang_expert_counts,
                           std::int64_t total) {
    const std::size_t langs = lang_expert_counts.size();
    if (langs == 0 || total == 0) return 0.0;
    const std::size_t experts = lang_expert_counts[0].size();
    std::vector<bool> used(experts, false);
    std::int64_t best = 0;
    std::function<void(std::size_t, std::int64_t)> rec = [&](std::size_t li, std::int64_t acc) {
        if (li == langs) {
            best = std::max(best, acc);
            return;
        }
        for (std::size_t e = 0; e < experts; ++e) {
            if (used[e]) continue;
            used[e] = true;
            rec(li + 1, acc + lang_expert_counts[li][e]);
            used[e] = false;
        }
    };
    rec(0, 0);
    return static_cast<double>(best) / static_cast<double>(total);
}

}  // namespace

RoutingReport routing_report(const std::vector<GatingDecision>& decisions) {
    if (decisions.empty()) throw ContractError("routing_report: no decisions");
    int n_experts = decisions[0].posterior.dim(0);
    std::set<int> languages;
    for (const auto& d : decisions) {
        if (d.true_language < 0) {
            throw ContractError("routing_report: decision without a true language label");
        }
        languages.insert(d.true_language);
        n_experts = std::max(n_experts, d.selected + 1);
    }

    RoutingReport report;
    report.total = static_cast<int>(decisions.size());
    report.utilization.assign(static_cast<std::size_t>(n_experts), 0);

    std::vector<std::vector<std::int64_t>> counts;
    std::set<int> majority_set;
    for (int lang : languages) {
        std::vector<std::int64_t> per_expert(static_cast<std::size_t>(n_experts), 0);
        double gamma_sum = 0.0;
        int count = 0;
        for (const auto& d : decisions) {
            if (d.true_language != lang) continue;
            ++per_expert[static_cast<std::size_t>(d.selected)];
            gamma_sum += d.gamma_value;
            ++count;
        }
        LanguageRouting row;
        row.language = lang;
        row.count = count;
        row.majority_expert = 0;
        for (int e = 1; e < n_experts; ++e) {
            if (per_expert[static_cast<std::size_t>(e)] >
                per_expert[static_cast<std::size_t>(row.majority_expert)]) {
                row.majority_expert = e;
            }
        }
        row.consistency =
            static_cast<double>(per_expert[static_cast<std::size_t>(row.majority_expert)]) / count;
        row.mean_gamma = gamma_sum / count;
        report.per_language.push_back(row);
        counts.push_back(std::move(per_expert));
        majority_set.insert(row.majority_expert);
    }
    for (const auto& d : decisions) {
        ++report.utilization[static_cast<std::size_t>(d.selected)];
    }
    report.distinct_majority_experts = static_cast<int>(majority_set.size());
    report.language_id_accuracy = assignment_accuracy(counts, report.total);
    return report;
}

std::string RoutingReport::to_csv() const {
    std::string csv = "language,count,majority_expert,consistency,mean_gamma\n";
    char buf[64];
    for (const auto& row : per_language) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%d,%.6f,%.6f\n", row.language, row.count,
                      row.majority_expert, row.consistency, row.mean_gamma);
        csv += buf;
    }
    return csv;
}

std::string RoutingReport::to_table() const {
    char buf[128];
    std::string out = "lang  count  majority  consistency  mean_gamma\n";
    for (const auto& row : per_language) {
        std::snprintf(buf, sizeof(buf), "%4d  %5d  %8d  %11.3f  %10.3f\n", row.language, row.count,
                      row.majority_expert, row.consistency, row.mean_gamma);
        out += buf;
    }
    out += "utilization:";
    for (std::size_t e = 0; e < utilization.size(); ++e) {
        std::snprintf(buf, sizeof(buf), " e%zu=%lld", e, static_cast<long long>(utilization[e]));
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "\nlanguage-id accuracy: %.4f (%d distinct majority experts)\n",
                  language_id_accuracy, distinct_majority_experts);
    out += buf;
    return out;
}

}  // namespace mole
