#pragma once

#include "stir/backend.hpp"
#include "stir/config.hpp"
#include "stir/controller.hpp"
#include "stir/core.hpp"
#include "stir/induction.hpp"

#include <optional>
#include <string>
#include <vector>

namespace stir {

inline constexpr const char* kLibraryVersion = "stir-library/1";
inline constexpr const char* kCandidatesVersion = "stir-candidates/1";

// Versioned JSON persistence. Candidates share the library schema under their
// own version tag; loading validates version, dimensions, and (for finalized
// libraries) key normalization, re-normalizing drift up to 1e-3 and rejecting
// anything worse.
void save_library(const ToolLibrary& library, const std::string& path);
ToolLibrary load_library(const std::string& path);
void save_candidates(const CandidateSet& candidates, const std::string& path);
CandidateSet load_candidates(const std::string& path);

// Latent-state export for external projection tools: one row per entry key,
// values printed with 17 significant digits.
void export_states(const std::vector<ToolEntry>& entries, const std::string& path);
void export_rollout_states(const std::vector<Rollout>& rollouts, const std::string& path);

enum class RunMode { vanilla, static_steering, stir };
const char* to_string(RunMode m);
RunMode run_mode_from_string(const std::string& s);

struct DecisionRecord {
    int checkpoint = 0;
    Decision decision;
};

struct ExampleReport {
    std::string id;
    bool correct = false;
    bool failed = false; // backend failure; run continued
    long gen_tokens = 0;
    long probe_tokens = 0;
    long total_tokens = 0; // gen + probe
    std::vector<DecisionRecord> decisions;
};

struct Aggregates {
    int examples = 0;
    int failed = 0;
    double accuracy = 0.0;
    double mean_tokens = 0.0;    // total (generation + probe) per example
    double overhead_ratio = 0.0; // sum probe / sum total
    double intervention_rate = 0.0;
    double abstention_rate = 0.0;
};

struct RunReport {
    RunMode mode = RunMode::vanilla;
    std::string config_json; // effective config echoed for reproducibility
    std::vector<ExampleReport> examples; // sorted by example id
    Aggregates aggregates;
};

Aggregates compute_aggregates(const std::vector<ExampleReport>& examples);

// Share of decisions at anchor-matching states that still injected; the
// gating ablation moves this from ~0 to large.
double intervention_rate_on_anchor_states(const RunReport& report);

std::string report_to_json_text(const RunReport& report); // byte-stable given same inputs
RunReport report_from_json_text(const std::string& text);
void save_report(const RunReport& report, const std::string& path);
RunReport load_report(const std::string& path);

// Human-readable metrics table.
std::string evaluate(const RunReport& report);

struct OfflineResult {
    ToolLibrary library;
    size_t candidate_count = 0;
    int prompts_skipped = 0;
    double objective = 0.0; // joint utility of the selected basis
};

// Algorithm-1 end to end: induce -> select -> finalize.
OfflineResult run_offline(const std::vector<Example>& dataset, Backend& backend,
                          const Config& config);

// Segment-by-segment evaluation with the controller (or a static/no-op arm).
// static mode defaults v* to the mean of the library's correction impulses.
RunReport run_online(const std::vector<Example>& dataset, const ToolLibrary& library,
                     Backend& backend, const Config& config, RunMode mode,
                     const std::optional<LatentVector>& static_vector = std::nullopt);

enum class SweepParam { k_scale, layer_depth };
SweepParam sweep_param_from_string(const std::string& s);

struct SweepPoint {
    double value = 0.0;
    RunReport report;
};

// k_scale sweeps reuse one offline library; layer_depth re-runs capture.
std::vector<SweepPoint> sweep(SweepParam param, const std::vector<double>& values,
                              const Config& config, const std::vector<Example>& dataset,
                              Backend& backend, RunMode mode = RunMode::stir);

std::string sweep_table(const std::vector<SweepPoint>& points, const std::string& param_name);

} // namespace stir
