#pragma once

#include <string>

namespace stir {

// Pipeline hyperparameters. Default values are the framework's standard
// operating point; everything here can be overridden from a JSON config file
// and again from CLI flags.
struct Config {
    // offline induction
    int K = 8;                 // rollouts per example
    int k_pos = 2;             // positive pool size
    int k_neg = 3;             // negative pool size
    double eta = 0.01;         // length penalty coefficient
    double temperature = 0.7;  // sampling temperature
    int max_tokens = 256;      // L_max, generation cap per rollout

    // sparse basis selection
    int B = 256;           // library budget
    double lambda = 0.5;   // diversity weight
    double epsilon = 1e-4; // kernel stability term

    // online control
    int top_k = 8;            // retrieval width
    int L = 4;                // candidate pool probed per checkpoint
    int T_probe = 4;          // lookahead horizon in tokens
    double beta = 2.0;        // prior weight
    double rho = 0.1;         // probe-gain weight
    double tau_null = 0.0;    // abstention threshold on fused utility
    double k_scale = 1.0;     // injection strength scale
    double alpha_max = 1.5;   // injection strength ceiling
    double layer_depth = 0.6; // normalized capture depth

    // ablation toggles
    bool contrastive_mining = true;
    bool diversity_selection = true;
    bool lookahead_probing = true;
    bool anchor_gating = true;
    bool adaptive_injection = true;

    // probe-gain scoring: each continuation scores its own sampled tokens
    // (default), or the steered pass re-scores the default continuation's
    // tokens instead.
    bool probe_scores_own_tokens = true;

    double min_impulse_norm = 1e-6; // corrections below this are dropped
    std::string delimiter = "\n\n"; // structural checkpoint delimiter
    uint64_t seed = 1;
    int jobs = 1; // worker threads for per-example parallelism

    void validate() const; // throws contract_violation on bad values
    int capture_layer(int num_layers) const;
};

// JSON round-trip. load merges the file's fields over defaults, so a partial
// config file is fine.
Config config_from_json_text(const std::string& text);
Config load_config(const std::string& path);
std::string config_to_json_text(const Config& cfg); // stable key order
void save_config(const Config& cfg, const std::string& path);

} // namespace stir
