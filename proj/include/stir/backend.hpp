#pragma once

#include "stir/core.hpp"

#include <memory>
#include <string>
#include <vector>

namespace stir {

// Generation parameters for one rollout: where to capture states, how to
// segment, and the sampling setup.
struct CaptureSpec {
    int layer = 0;
    std::string delimiter = "\n\n";
    int max_tokens = 256; // L_max
    double temperature = 0.7;
    uint64_t seed = 0;
};

// One scheduled impulse: applied as h <- h + strength * impulse at the given
// checkpoint ordinal (1-based), at the capture layer.
struct Injection {
    int checkpoint = 0;
    LatentVector impulse;
    double strength = 0.0;
};

// Raw backend output; reward and correctness are assigned by the caller.
struct BackendRollout {
    std::vector<std::string> segments;
    std::vector<LatentVector> checkpoint_states;
    long token_count = 0;
    std::string text;
};

// A frozen generation point that any number of probe continuations may branch
// from without disturbing each other or the main generation.
struct GenerationSnapshot {
    std::string session_id;
    long position = 0;                  // token index
    std::shared_ptr<const void> handle; // backend-owned state
};

// One probe continuation: impulse applied at the snapshot with the given
// strength. If force_tokens is nonempty the arm scores that token sequence
// instead of sampling its own.
struct ProbeArm {
    LatentVector impulse;
    double strength = 0.0;
    std::vector<int> force_tokens;
};

struct ArmResult {
    std::vector<int> tokens;
    std::vector<double> logprobs; // log-prob of each emitted/forced token
};

struct SegmentStep {
    std::string text;              // segment text, delimiter not included
    LatentVector checkpoint_state; // captured at the trailing delimiter; empty when done
    long tokens = 0;               // tokens this step consumed (delimiter included)
    bool done = false;             // true on the final segment (no checkpoint follows)
};

// Incremental generation for online control: one segment at a time, with
// injection between segments and snapshots for probing.
class GenerationSession {
  public:
    virtual ~GenerationSession() = default;

    // Generate the next segment. Intermediate segments carry the state
    // captured at their trailing delimiter; the final one sets done.
    virtual SegmentStep next_segment() = 0;

    // Apply an impulse at the current checkpoint, before the next segment.
    // Repeated calls accumulate.
    virtual void inject(const LatentVector& impulse, double strength) = 0;

    virtual GenerationSnapshot snapshot() const = 0;
    virtual long tokens_generated() const = 0;
    virtual std::string text() const = 0;
};

// The model abstraction: rollout generation with hidden-state capture,
// snapshot/fork semantics for probing, and layer-targeted impulse injection.
class Backend {
  public:
    virtual ~Backend() = default;

    virtual int dim() const = 0;
    virtual int num_layers() const = 0;

    virtual BackendRollout generate_rollout(const std::string& prompt, const CaptureSpec& spec,
                                            const std::vector<Injection>& injections = {}) = 0;

    virtual std::unique_ptr<GenerationSession> begin_session(const std::string& prompt,
                                                             const CaptureSpec& spec) = 0;

    // Continue t_probe tokens per arm from the identical snapshot. Callers
    // include a zero-impulse arm when they need the default continuation; the
    // shared prefix is paid once, so cost scales with arms * t_probe.
    virtual std::vector<ArmResult> fork_probe(const GenerationSnapshot& snapshot,
                                              const std::vector<ProbeArm>& arms, int t_probe) = 0;
};

} // namespace stir
