#pragma once

#include "stir/config.hpp"
#include "stir/core.hpp"

#include <functional>
#include <string>
#include <vector>

namespace stir {

// One stochastic sampled generation: text segments split at checkpoints, the
// hidden state captured at each interior checkpoint, and the reward assigned
// after answer checking.
struct Rollout {
    std::string prompt_id;
    std::vector<std::string> segments;
    std::vector<LatentVector> checkpoint_states; // one per boundary between segments
    long token_count = 0;
    bool correct = false;
    double reward = 0.0;

    int checkpoints() const { return static_cast<int>(checkpoint_states.size()); }
};

// The raw over-complete candidate set produced by induction, before sparse
// selection. Keys are not yet normalized.
struct CandidateSet {
    std::vector<ToolEntry> entries;
    int dim = 0;
    int layer = 0;
    std::string build_config_json;

    bool empty() const { return entries.empty(); }
};

// Length-regularized reward: 1{correct} - eta * min(token_count, L_max) / L_max.
double reward(bool correct, long token_count, long l_max, double eta);

// Split text at every delimiter occurrence, dropping empty segments. The
// boundary between consecutive surviving segments is a checkpoint.
struct Segmentation {
    std::vector<std::string> segments;
    int checkpoints = 0;
};
Segmentation segment_and_checkpoint(const std::string& text, const std::string& delimiter = "\n\n");

// Sort by reward descending (ties: fewer tokens first, then sampling order)
// and take the top correct rollouts as the positive pool and the bottom
// incorrect ones as the negative pool. Either side may come back empty.
struct Partition {
    std::vector<const Rollout*> positives;
    std::vector<const Rollout*> negatives;
};
Partition partition_rollouts(const std::vector<Rollout>& rollouts, int k_pos, int k_neg);

// Centroid-difference induction at checkpoint m (1-based). Emits up to two
// entries: a correction keyed by the negative centroid with impulse
// mu+ - mu-, and an anchor keyed by the positive centroid with a null
// impulse. Corrections with degenerate impulses are dropped.
std::vector<ToolEntry> induce_checkpoint_actions(const std::vector<const Rollout*>& positives,
                                                 const std::vector<const Rollout*>& negatives,
                                                 int checkpoint, double min_impulse_norm,
                                                 const std::string& prompt_id = "");

// Historical reward gain: mean reward over the positive pool minus mean over
// the negative pool, floored at zero. With no negatives, the positive mean.
double quality_score(const std::vector<const Rollout*>& positives,
                     const std::vector<const Rollout*>& negatives);

// One dataset example.
struct Example {
    std::string id;
    std::string prompt;
    std::string answer;
};

std::vector<Example> load_dataset(const std::string& path); // JSON Lines {id, prompt, answer}

// Answer checking: normalized string match of the rollout's final answer line
// against the reference.
bool answer_matches(const std::string& text, const std::string& reference);

class Backend; // see backend.hpp

struct InductionResult {
    CandidateSet candidates;
    int prompts_processed = 0;
    int prompts_skipped = 0; // backend failures, recorded and skipped
    std::vector<std::string> skipped_ids;
};

// Stage I end to end: sample K rollouts per prompt, score, partition at every
// checkpoint ordinal with enough coverage, and accumulate candidate entries
// in prompt order. Backend failures skip the prompt, never abort the run.
InductionResult induce_dataset(const std::vector<Example>& dataset, Backend& backend,
                               const Config& config);

} // namespace stir
