#pragma once

#include <string>
#include <vector>

#include "mole/tensor.hpp"

namespace mole {

// Padded feature sequences with true lengths, language labels and target
// token sequences. Every feature tensor is [max_len, d]; positions at and
// beyond the true length are zero padding.
struct SequenceBatch {
    std::vector<Tensor> features;
    std::vector<int> lengths;
    std::vector<int> languages;  // -1 when unknown
    std::vector<std::vector<int>> targets;
    std::vector<std::string> ids;
    int max_len = 0;
    bool sampled_with_replacement = false;

    std::size_t size() const { return features.size(); }
};

}  // namespace mole
