#pragma once

#include "stir/backend.hpp"
#include "stir/core.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace stir {

// One planted failure mode: at a drawn onset checkpoint the state is knocked
// by `offset`; the matching correction is its negation. Either give the
// offset explicitly, or let build() generate one of `offset_norm` with a
// `radial_frac` share pointing back down the goal ray (the rest orthogonal).
// The radial share is what makes the knock visible to the toy decoder.
struct PlantedMode {
    LatentVector offset;      // full-dimension displacement; empty = generate
    double offset_norm = 0.0; // used when offset is empty
    double radial_frac = 0.8;
    uint64_t direction_salt = 0; // distinct salts give distinct orthogonal parts
    double probability = 0.0;
    double prompt_share = 1.0; // weight when modes are assigned per prompt
    int onset_min = 1; // checkpoint ordinal range, inclusive
    int onset_max = 1;
};

// Geometry and dynamics of the toy residual stream. The state is
// [position ; bias]: position contracts toward goal * bias each step and the
// bias dimension carries the constant input, so the whole transition stays a
// single linear map with spectral radius below one.
struct EnvSpec {
    int dim = 64;        // includes the trailing bias dimension
    int num_layers = 10; // capture labeling only
    int vocab = 32;
    int seg_len = 8;       // sampled tokens per reasoning segment
    int min_segments = 1;  // reasoning segments before the stop check applies
    int max_segments = 10; // reasoning segments before the forced answer
    double contraction = 0.9;  // per-step pull toward the goal
    double bias_decay = 0.9999;
    double goal_norm = 10.0;
    double start_distance = 4.0; // initial distance from the goal
    double goal_radius = 1.0;    // success ball around the goal
    double stop_radius = 1.0;    // early answer once inside this ball
    double noise_sigma = 0.0;    // per-dimension process noise
    double capture_sigma = 0.0;  // per-dimension observation noise on captures
    double decoder_sharpness = 2.0; // scales toy decoder logits
    int path_prototypes = 8;        // decoder rows on the goal ray; rest background
    // false: each rollout draws a mode by probability. true: the prompt hash
    // fixes which mode a prompt can exhibit (weighted by prompt_share), and
    // rollouts fire it with the mode's probability.
    bool assign_modes_by_prompt = false;
    uint64_t geometry_seed = 42;
    std::vector<PlantedMode> modes;
};

EnvSpec env_from_json_text(const std::string& text);
EnvSpec load_env(const std::string& path);
std::string env_to_json_text(const EnvSpec& spec);

// Deterministic instantiation of the EnvSpec: goal direction, decoder
// prototypes along the nominal path, and the linear transition.
class SyntheticEnvironment {
  public:
    static SyntheticEnvironment build(EnvSpec spec);

    const EnvSpec& spec() const { return spec_; }
    int dim() const { return spec_.dim; }
    int pos_dims() const { return spec_.dim - 1; }

    const LatentVector& goal() const { return goal_; } // full dim, bias component 0
    LatentVector initial_state() const;

    // h <- A h + noise, the one-step residual dynamics
    void step_state(LatentVector& h, std::mt19937_64& rng) const;

    double distance_to_goal(const LatentVector& h) const;
    bool in_success_ball(const LatentVector& h) const;
    bool in_stop_ball(const LatentVector& h) const;

    // log-probabilities over the toy vocabulary at the given temperature
    std::vector<double> token_logprobs(const LatentVector& h, double temperature) const;
    int sample_token(const LatentVector& h, double temperature, std::mt19937_64& rng,
                     double* logprob) const;

    // one planted correction per mode: exactly cancels the mode's offset
    LatentVector planted_correction(size_t mode_index) const;

    // unit vector orthogonal to the goal (and the bias dimension), for
    // constructing planted offsets
    LatentVector direction_orthogonal_to_goal(uint64_t salt) const;

  private:
    EnvSpec spec_;
    LatentVector goal_;
    std::vector<LatentVector> prototypes_; // decoder rows
    std::vector<double> proto_bias_;       // -|proto|^2 / 2
};

// Backend over the synthetic environment: full rollout generation with
// checkpoint capture, incremental sessions, and probe forking.
class SyntheticBackend : public Backend {
  public:
    explicit SyntheticBackend(SyntheticEnvironment env) : env_(std::move(env)) {}
    explicit SyntheticBackend(EnvSpec spec) : env_(SyntheticEnvironment::build(std::move(spec))) {}

    const SyntheticEnvironment& env() const { return env_; }

    int dim() const override { return env_.dim(); }
    int num_layers() const override { return env_.spec().num_layers; }

    BackendRollout generate_rollout(const std::string& prompt, const CaptureSpec& spec,
                                    const std::vector<Injection>& injections = {}) override;

    std::unique_ptr<GenerationSession> begin_session(const std::string& prompt,
                                                     const CaptureSpec& spec) override;

    std::vector<ArmResult> fork_probe(const GenerationSnapshot& snapshot,
                                      const std::vector<ProbeArm>& arms, int t_probe) override;

  private:
    SyntheticEnvironment env_;
};

// Snapshot payload for the synthetic backend (also reused by the mock server).
struct SyntheticSnapshotState {
    LatentVector state;
    double temperature = 0.7;
    uint64_t probe_seed = 0;
};

// Probe arms share the snapshot state and an identical RNG stream, so a
// zero-impulse arm reproduces the default continuation token for token.
std::vector<ArmResult> run_probe_arms(const SyntheticEnvironment& env,
                                      const SyntheticSnapshotState& snap,
                                      const std::vector<ProbeArm>& arms, int t_probe);

} // namespace stir
