#include "stir/config.hpp"

#include "stir/core.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <sstream>

namespace stir {

using nlohmann::json;

void Config::validate() const {
    auto require = [](bool ok, const char* what) {
        if (!ok) throw contract_violation(std::string("config: ") + what);
    };
    require(K >= 1, "K must be >= 1");
    require(k_pos >= 1 && k_neg >= 1, "pool sizes must be >= 1");
    require(eta >= 0.0, "eta must be non-negative");
    require(temperature >= 0.0, "temperature must be non-negative");
    require(max_tokens > 0, "max_tokens must be positive");
    require(B >= 1, "B must be >= 1");
    require(lambda >= 0.0, "lambda must be non-negative");
    require(epsilon > 0.0, "epsilon must be positive");
    require(top_k >= 1, "top_k must be >= 1");
    require(L >= 1, "L must be >= 1");
    require(L <= top_k, "L must not exceed top_k");
    require(T_probe >= 1, "T_probe must be >= 1");
    require(beta >= 0.0 && rho >= 0.0, "fusion weights must be non-negative");
    require(k_scale >= 0.0, "k_scale must be non-negative");
    require(alpha_max >= 0.0, "alpha_max must be non-negative");
    require(layer_depth > 0.0 && layer_depth <= 1.0, "layer_depth must be in (0, 1]");
    require(min_impulse_norm >= 0.0, "min_impulse_norm must be non-negative");
    require(!delimiter.empty(), "delimiter must be nonempty");
    require(jobs >= 1, "jobs must be >= 1");
}

int Config::capture_layer(int num_layers) const {
    int layer = static_cast<int>(std::lround(layer_depth * num_layers));
    if (layer < 0) layer = 0;
    if (layer > num_layers) layer = num_layers;
    return layer;
}

namespace {

template <typename T>
void pick(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

nlohmann::ordered_json to_json(const Config& c) {
    // ordered_json keeps insertion order so serialized configs are stable
    nlohmann::ordered_json j;
    j["K"] = c.K;
    j["k_pos"] = c.k_pos;
    j["k_neg"] = c.k_neg;
    j["eta"] = c.eta;
    j["temperature"] = c.temperature;
    j["max_tokens"] = c.max_tokens;
    j["B"] = c.B;
    j["lambda"] = c.lambda;
    j["epsilon"] = c.epsilon;
    j["top_k"] = c.top_k;
    j["L"] = c.L;
    j["T_probe"] = c.T_probe;
    j["beta"] = c.beta;
    j["rho"] = c.rho;
    j["tau_null"] = c.tau_null;
    j["k_scale"] = c.k_scale;
    j["alpha_max"] = c.alpha_max;
    j["layer_depth"] = c.layer_depth;
    j["contrastive_mining"] = c.contrastive_mining;
    j["diversity_selection"] = c.diversity_selection;
    j["lookahead_probing"] = c.lookahead_probing;
    j["anchor_gating"] = c.anchor_gating;
    j["adaptive_injection"] = c.adaptive_injection;
    j["probe_scores_own_tokens"] = c.probe_scores_own_tokens;
    j["min_impulse_norm"] = c.min_impulse_norm;
    j["delimiter"] = c.delimiter;
    j["seed"] = c.seed;
    j["jobs"] = c.jobs;
    return j;
}

} // namespace

Config config_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw parse_error(std::string("config: ") + e.what());
    }
    Config c;
    try {
        pick(j, "K", c.K);
        pick(j, "k_pos", c.k_pos);
        pick(j, "k_neg", c.k_neg);
        pick(j, "eta", c.eta);
        pick(j, "temperature", c.temperature);
        pick(j, "max_tokens", c.max_tokens);
        pick(j, "B", c.B);
        pick(j, "lambda", c.lambda);
        pick(j, "epsilon", c.epsilon);
        pick(j, "top_k", c.top_k);
        pick(j, "L", c.L);
        pick(j, "T_probe", c.T_probe);
        pick(j, "beta", c.beta);
        pick(j, "rho", c.rho);
        pick(j, "tau_null", c.tau_null);
        pick(j, "k_scale", c.k_scale);
        pick(j, "alpha_max", c.alpha_max);
        pick(j, "layer_depth", c.layer_depth);
        pick(j, "contrastive_mining", c.contrastive_mining);
        pick(j, "diversity_selection", c.diversity_selection);
        pick(j, "lookahead_probing", c.lookahead_probing);
        pick(j, "anchor_gating", c.anchor_gating);
        pick(j, "adaptive_injection", c.adaptive_injection);
        pick(j, "probe_scores_own_tokens", c.probe_scores_own_tokens);
        pick(j, "min_impulse_norm", c.min_impulse_norm);
        pick(j, "delimiter", c.delimiter);
        pick(j, "seed", c.seed);
        pick(j, "jobs", c.jobs);
    } catch (const json::exception& e) {
        throw parse_error(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

Config load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw error("config: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return config_from_json_text(ss.str());
}

std::string config_to_json_text(const Config& cfg) { return to_json(cfg).dump(2); }

void save_config(const Config& cfg, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw error("config: cannot write " + path);
    out << config_to_json_text(cfg) << '\n';
}

} // namespace stir
