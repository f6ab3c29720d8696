#pragma once

#include <string>
#include <vector>

#include "mole/mole_block.hpp"
#include "mole/tensor.hpp"

namespace mole {

// Per-utterance CTC input. log_probs rows must exponentiate-sum to 1;
// index 0 is the blank token. Rows at and beyond `length` are ignored.
struct CtcInput {
    Tensor log_probs;  // [T, V+1]
    std::vector<int> targets;
    int length = 0;
};

struct CtcResult {
    Tensor loss;             // scalar; +inf (off-tape) when infeasible
    bool infeasible = false;
};

// Negative log probability of all alignments mapping to the target,
// computed by the log-space forward recursion on the tape so autograd
// differentiates it. Infeasible targets yield +inf with a flag, never NaN.
CtcResult ctc_loss(const CtcInput& input);

// Per-frame argmax, collapse repeats, drop blanks.
std::vector<int> greedy_ctc_decode(const Tensor& log_probs, int length);

// Prototypical language representation loss over gate embeddings:
// mean_r -log( exp(cos(z_r, c_label)) / sum_n exp(cos(z_r, c_n)) ) with
// batch-local centroids c_n over the languages present in the batch.
Tensor lrl(const LrlBatch& batch);

struct LossWeights {
    double lambda_lr = 0.1;
    double lambda_bal = 0.01;
};

// ctc + lambda_lr * mean(lrl_terms) + lambda_bal * mean(balance_terms);
// empty term lists contribute zero.
Tensor total_loss(const Tensor& ctc, const std::vector<Tensor>& lrl_terms,
                  const std::vector<Tensor>& balance_terms, const LossWeights& weights);

// Unit-cost Levenshtein distance.
std::int64_t edit_distance(const std::vector<int>& a, const std::vector<int>& b);
std::int64_t edit_distance(const std::string& a, const std::string& b);

// distance(hyp, ref) / len(ref); ContractError on empty ref.
double cer(const std::vector<int>& hyp, const std::vector<int>& ref);
double cer(const std::string& hyp, const std::string& ref);

struct LanguageRouting {
    int language = 0;
    int count = 0;
    int majority_expert = 0;
    double consistency = 0.0;  // fraction routed to the majority expert
    double mean_gamma = 0.0;
};

struct RoutingReport {
    std::vector<LanguageRouting> per_language;
    std::vector<std::int64_t> utilization;  // decisions per expert
    int total = 0;
    // Best expert<->language assignment accuracy (brute-force over
    // permutations): how well the gate argmax identifies the language.
    double language_id_accuracy = 0.0;
    int distinct_majority_experts = 0;

    std::string to_csv() const;
    std::string to_table() const;
};

// decisions carry true_language metadata; forward passes never see it.
RoutingReport routing_report(const std::vector<GatingDecision>& decisions);

}  // namespace mole
