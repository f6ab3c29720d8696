#pragma once

#include <cstdint>

namespace mole {

// Thread-local instrumentation of expert compute. Routed counters cover
// gated experts (MoE experts, language-specific experts); shared counters
// cover the always-on expert (common expert / language-agnostic expert).
struct ExpertMeter {
    std::uint64_t routed_invocations = 0;
    std::uint64_t routed_row_evals = 0;
    std::uint64_t routed_flops = 0;
    std::uint64_t shared_invocations = 0;
    std::uint64_t shared_row_evals = 0;
    std::uint64_t shared_flops = 0;

    void reset() { *this = ExpertMeter{}; }

    std::uint64_t total_flops() const { return routed_flops + shared_flops; }

    static ExpertMeter& instance();
};

}  // namespace mole
