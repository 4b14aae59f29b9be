#pragma once

#include "stir/backend.hpp"
#include "stir/config.hpp"
#include "stir/core.hpp"

#include <optional>
#include <string>
#include <vector>

namespace stir {

// A retrieved tool with its retrieval prior and, after previewing, its probe
// gain and fused utility.
struct Candidate {
    const ToolEntry* entry = nullptr;
    double similarity = 0.0;            // cosine to the query
    double prior = 0.0;                 // A-hat = similarity * quality
    std::optional<double> probe_gain;   // G, present after probing
    std::optional<double> fused;        // S, present after fusion
};

enum class DecisionAction { abstain, inject };
enum class DecisionReason { empty_retrieval, anchor_dominant, below_threshold, committed };

const char* to_string(DecisionAction a);
const char* to_string(DecisionReason r);

// One controller outcome at a checkpoint.
struct Decision {
    DecisionAction action = DecisionAction::abstain;
    DecisionReason reason = DecisionReason::empty_retrieval;
    std::optional<int64_t> entry_id;
    double utility = 0.0;  // S(pi*) where defined
    double strength = 0.0; // alpha in [0, alpha_max]; 0 whenever abstaining
    long probe_tokens = 0;
    bool anchor_matched = false; // the gate would have abstained here
};

// Exact top-k retrieval over the finalized library: highest cosine first,
// ties toward the lower id. Both entry kinds compete.
std::vector<Candidate> retrieve_topk(const LatentVector& query, const ToolLibrary& library, int k);

// Consistency gate: abstain when the best anchor prior dominates the best
// correction prior (or no correction was retrieved). With gating disabled it
// only abstains on empty retrieval.
bool anchor_gate(const std::vector<Candidate>& candidates, bool gating_enabled = true);

// Mean per-token log-probability advantage of a steered continuation over the
// shared default continuation.
double probe_gain_from_arms(const ArmResult& steered, const ArmResult& default_arm);

// Baseline time-invariant steering directive: the same impulse at every
// checkpoint regardless of state.
Injection static_steer(const LatentVector& v_star, double alpha);

// The value-modulated intervention policy. Holds no mutable state; one
// instance may serve many sessions.
class Controller {
  public:
    Controller(const ToolLibrary& library, const Config& config, Backend& backend);

    // Full retrieve-preview-commit cycle at one checkpoint. The snapshot is
    // taken from the session only if probing is needed.
    Decision decide(const LatentVector& query, GenerationSession& session) const;

    const ToolLibrary& library() const { return library_; }

  private:
    const ToolLibrary& library_;
    Config config_;
    Backend& backend_;

    std::vector<double> probe_corrections(const std::vector<const Candidate*>& picks,
                                          GenerationSession& session) const;
};

} // namespace stir
