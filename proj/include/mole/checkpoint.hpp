#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mole/model.hpp"

namespace mole {

// Adam moment buffers, serialized with the checkpoint so training resumes
// bit-exactly.
struct OptimizerState {
    std::int64_t t = 0;
    std::vector<std::vector<double>> m;  // parallel to the named parameter list
    std::vector<std::vector<double>> v;
};

struct Checkpoint {
    ModelConfig config;
    std::uint64_t step = 0;
    std::uint64_t rng_state = 0;
    std::vector<std::string> param_names;
    std::vector<Tensor> param_values;
    bool has_optimizer = false;
    OptimizerState optimizer;
};

// Length-prefixed little-endian binary with a versioned header
// ("MOLECKPT", version 1). save(load(f)) is byte-identical to f.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint snapshot_model(Model& model, std::uint64_t step = 0, std::uint64_t rng_state = 0);
// Copies parameters into a model built from the checkpoint's own config.
Model restore_model(const Checkpoint& ckpt);
// Validates that the stored config matches `expected` (ConfigError otherwise).
Model restore_model(const Checkpoint& ckpt, const ModelConfig& expected);

}  // namespace mole
