#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace para {

struct SuiteResult {
    std::string name;
    int trials = 0;
    int failures = 0;
    double max_error = 0.0; // worst per-trial metric seen
    double tolerance = 0.0; // pass bar the metric is held to
    bool passed() const { return failures == 0; }
};

struct VerifySummary {
    int trials = 0;
    std::uint64_t seed = 0;
    std::vector<SuiteResult> suites;
    bool all_passed() const;
};

// Runs the randomized property suites (rank theorem, merge equivalence,
// idempotence, nullity/kernel, LoRA annihilation), `trials` instances each.
// Deterministic per (trials, seed).
VerifySummary run_verify(int trials, std::uint64_t seed);

// Stable single-line JSON rendering of the summary (keys sorted, suites in
// run order); byte-identical across runs with equal inputs.
std::string to_json(const VerifySummary& summary);

} // namespace para
