#include "stir/synthetic.hpp"

#include "stir/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <sstream>

namespace stir {

using nlohmann::json;

// ---------------------------------------------------------------------------
// EnvSpec JSON
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void pick(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

} // namespace

EnvSpec env_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw parse_error(std::string("env: ") + e.what());
    }
    EnvSpec s;
    try {
        pick(j, "dim", s.dim);
        pick(j, "num_layers", s.num_layers);
        pick(j, "vocab", s.vocab);
        pick(j, "seg_len", s.seg_len);
        pick(j, "min_segments", s.min_segments);
        pick(j, "max_segments", s.max_segments);
        pick(j, "contraction", s.contraction);
        pick(j, "bias_decay", s.bias_decay);
        pick(j, "goal_norm", s.goal_norm);
        pick(j, "start_distance", s.start_distance);
        pick(j, "goal_radius", s.goal_radius);
        pick(j, "stop_radius", s.stop_radius);
        pick(j, "noise_sigma", s.noise_sigma);
        pick(j, "capture_sigma", s.capture_sigma);
        pick(j, "decoder_sharpness", s.decoder_sharpness);
        pick(j, "path_prototypes", s.path_prototypes);
        pick(j, "assign_modes_by_prompt", s.assign_modes_by_prompt);
        pick(j, "geometry_seed", s.geometry_seed);
        if (j.contains("modes")) {
            for (const auto& m : j.at("modes")) {
                PlantedMode mode;
                if (m.contains("offset")) mode.offset = m.at("offset").get<LatentVector>();
                pick(m, "offset_norm", mode.offset_norm);
                pick(m, "radial_frac", mode.radial_frac);
                pick(m, "direction_salt", mode.direction_salt);
                pick(m, "probability", mode.probability);
                pick(m, "prompt_share", mode.prompt_share);
                pick(m, "onset_min", mode.onset_min);
                pick(m, "onset_max", mode.onset_max);
                s.modes.push_back(std::move(mode));
            }
        }
    } catch (const json::exception& e) {
        throw parse_error(std::string("env: ") + e.what());
    }
    return s;
}

EnvSpec load_env(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw error("env: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return env_from_json_text(ss.str());
}

std::string env_to_json_text(const EnvSpec& s) {
    nlohmann::ordered_json j;
    j["dim"] = s.dim;
    j["num_layers"] = s.num_layers;
    j["vocab"] = s.vocab;
    j["seg_len"] = s.seg_len;
    j["min_segments"] = s.min_segments;
    j["max_segments"] = s.max_segments;
    j["contraction"] = s.contraction;
    j["bias_decay"] = s.bias_decay;
    j["goal_norm"] = s.goal_norm;
    j["start_distance"] = s.start_distance;
    j["goal_radius"] = s.goal_radius;
    j["stop_radius"] = s.stop_radius;
    j["noise_sigma"] = s.noise_sigma;
    j["capture_sigma"] = s.capture_sigma;
    j["decoder_sharpness"] = s.decoder_sharpness;
    j["path_prototypes"] = s.path_prototypes;
    j["assign_modes_by_prompt"] = s.assign_modes_by_prompt;
    j["geometry_seed"] = s.geometry_seed;
    j["modes"] = json::array();
    for (const auto& m : s.modes) {
        nlohmann::ordered_json mj;
        if (!m.offset.empty()) {
            mj["offset"] = m.offset;
        } else {
            mj["offset_norm"] = m.offset_norm;
            mj["radial_frac"] = m.radial_frac;
            mj["direction_salt"] = m.direction_salt;
        }
        mj["probability"] = m.probability;
        mj["prompt_share"] = m.prompt_share;
        mj["onset_min"] = m.onset_min;
        mj["onset_max"] = m.onset_max;
        j["modes"].push_back(mj);
    }
    return j.dump(2);
}

// ---------------------------------------------------------------------------
// Environment
// ---------------------------------------------------------------------------

namespace {

LatentVector gaussian_vector(size_t dim, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    LatentVector v(dim);
    for (double& x : v) x = gauss(rng);
    return v;
}

} // namespace

SyntheticEnvironment SyntheticEnvironment::build(EnvSpec spec) {
    if (spec.dim < 4) throw contract_violation("env: dim must be at least 4");
    if (spec.vocab < 2) throw contract_violation("env: vocab must be at least 2");
    if (spec.seg_len < 1 || spec.max_segments < 1) {
        throw contract_violation("env: segment shape must be positive");
    }

    SyntheticEnvironment env;
    const int pos = spec.dim - 1;

    auto rng = make_rng(derive_seed(spec.geometry_seed, 0x67656f6d));
    LatentVector dir = gaussian_vector(pos, rng);
    double n = norm(dir);
    for (double& x : dir) x = x / n * spec.goal_norm;
    env.goal_.assign(spec.dim, 0.0);
    for (int i = 0; i < pos; ++i) env.goal_[i] = dir[i];

    // Decoder rows: a few prototypes along the goal ray give position-resolved
    // confidence; the rest read only the bias dimension, a constant-logit
    // background that dominates once the state leaves the ray.
    int on_path = std::clamp(spec.path_prototypes, 2, spec.vocab);
    env.prototypes_.resize(spec.vocab);
    env.proto_bias_.resize(spec.vocab);
    for (int v = 0; v < spec.vocab; ++v) {
        LatentVector p(spec.dim, 0.0);
        if (v < on_path) {
            double u = static_cast<double>(v) / (on_path - 1);
            LatentVector jitter = gaussian_vector(pos, rng);
            for (int i = 0; i < pos; ++i) p[i] = env.goal_[i] * u + 0.02 * jitter[i];
        } else {
            p[spec.dim - 1] = 1.0;
        }
        env.prototypes_[v] = std::move(p);
        env.proto_bias_[v] = -0.5 * dot(env.prototypes_[v], env.prototypes_[v]);
    }

    // resolve generated offsets: a radial share straight back down the goal
    // ray plus an orthogonal remainder
    env.spec_ = std::move(spec);
    for (size_t m = 0; m < env.spec_.modes.size(); ++m) {
        auto& mode = env.spec_.modes[m];
        if (mode.offset.empty()) {
            if (mode.offset_norm <= 0.0) {
                throw contract_violation("env: mode needs an offset or offset_norm");
            }
            double rf = std::clamp(mode.radial_frac, 0.0, 1.0);
            LatentVector o = env.direction_orthogonal_to_goal(
                derive_seed(env.spec_.geometry_seed, 0x6f666673,
                            static_cast<uint64_t>(m), mode.direction_salt));
            LatentVector offset(env.spec_.dim, 0.0);
            double gn = norm(env.goal_);
            double tangential = std::sqrt(std::max(0.0, 1.0 - rf * rf));
            for (int i = 0; i < env.spec_.dim; ++i) {
                offset[i] = mode.offset_norm *
                            (-rf * env.goal_[i] / gn + tangential * o[i]);
            }
            mode.offset = std::move(offset);
        }
        if (mode.offset.size() != static_cast<size_t>(env.spec_.dim)) {
            throw contract_violation("env: mode offset dimension mismatch");
        }
    }
    return env;
}

LatentVector SyntheticEnvironment::initial_state() const {
    // start on the goal ray, start_distance short of the goal, bias = 1
    LatentVector h(spec_.dim, 0.0);
    double gn = spec_.goal_norm;
    double scale = (gn - spec_.start_distance) / gn;
    for (int i = 0; i < pos_dims(); ++i) h[i] = goal_[i] * scale;
    h[spec_.dim - 1] = 1.0;
    return h;
}

void SyntheticEnvironment::step_state(LatentVector& h, std::mt19937_64& rng) const {
    const int pos = pos_dims();
    const double a = spec_.contraction;
    const double bias = h[spec_.dim - 1];
    for (int i = 0; i < pos; ++i) h[i] = a * h[i] + (1.0 - a) * goal_[i] * bias;
    h[spec_.dim - 1] = spec_.bias_decay * bias;
    if (spec_.noise_sigma > 0.0) {
        std::normal_distribution<double> gauss(0.0, spec_.noise_sigma);
        for (int i = 0; i < pos; ++i) h[i] += gauss(rng);
    }
}

double SyntheticEnvironment::distance_to_goal(const LatentVector& h) const {
    double s = 0.0;
    for (int i = 0; i < pos_dims(); ++i) {
        double d = h[i] - goal_[i];
        s += d * d;
    }
    return std::sqrt(s);
}

bool SyntheticEnvironment::in_success_ball(const LatentVector& h) const {
    return distance_to_goal(h) <= spec_.goal_radius;
}

bool SyntheticEnvironment::in_stop_ball(const LatentVector& h) const {
    return distance_to_goal(h) <= spec_.stop_radius;
}

std::vector<double> SyntheticEnvironment::token_logprobs(const LatentVector& h,
                                                         double temperature) const {
    const size_t v = prototypes_.size();
    std::vector<double> logits(v);
    for (size_t i = 0; i < v; ++i) {
        logits[i] = spec_.decoder_sharpness * (dot(prototypes_[i], h) + proto_bias_[i]);
    }
    if (temperature <= 0.0) {
        // argmax decoding: degenerate one-hot distribution
        size_t best = 0;
        for (size_t i = 1; i < v; ++i) {
            if (logits[i] > logits[best]) best = i;
        }
        std::vector<double> lp(v, -std::numeric_limits<double>::infinity());
        lp[best] = 0.0;
        return lp;
    }
    double mx = logits[0];
    for (double x : logits) mx = std::max(mx, x);
    double z = 0.0;
    for (size_t i = 0; i < v; ++i) {
        logits[i] = (logits[i] - mx) / temperature;
        z += std::exp(logits[i]);
    }
    double logz = std::log(z);
    for (size_t i = 0; i < v; ++i) logits[i] -= logz;
    return logits;
}

int SyntheticEnvironment::sample_token(const LatentVector& h, double temperature,
                                       std::mt19937_64& rng, double* logprob) const {
    std::vector<double> lp = token_logprobs(h, temperature);
    if (temperature <= 0.0) {
        for (size_t i = 0; i < lp.size(); ++i) {
            if (lp[i] == 0.0) {
                if (logprob) *logprob = 0.0;
                return static_cast<int>(i);
            }
        }
    }
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    double u = unif(rng);
    double acc = 0.0;
    for (size_t i = 0; i < lp.size(); ++i) {
        acc += std::exp(lp[i]);
        if (u <= acc || i + 1 == lp.size()) {
            if (logprob) *logprob = lp[i];
            return static_cast<int>(i);
        }
    }
    if (logprob) *logprob = lp.back();
    return static_cast<int>(lp.size()) - 1;
}

LatentVector SyntheticEnvironment::planted_correction(size_t mode_index) const {
    if (mode_index >= spec_.modes.size()) {
        throw contract_violation("env: no such planted mode");
    }
    LatentVector v = spec_.modes[mode_index].offset;
    for (double& x : v) x = -x;
    return v;
}

LatentVector SyntheticEnvironment::direction_orthogonal_to_goal(uint64_t salt) const {
    auto rng = make_rng(salt);
    LatentVector v(spec_.dim, 0.0);
    double gn2 = dot(goal_, goal_);
    for (int attempt = 0; attempt < 64; ++attempt) {
        LatentVector g = gaussian_vector(pos_dims(), rng);
        for (int i = 0; i < pos_dims(); ++i) v[i] = g[i];
        v[spec_.dim - 1] = 0.0;
        if (gn2 > 0.0) add_scaled(v, goal_, -dot(v, goal_) / gn2);
        double n = norm(v);
        if (n > 1e-9) {
            for (double& x : v) x /= n;
            return v;
        }
    }
    throw error("env: failed to draw an orthogonal direction");
}

// ---------------------------------------------------------------------------
// Session
// ---------------------------------------------------------------------------

namespace {

std::string token_word(int id) { return "t" + std::to_string(id); }

class SyntheticSession final : public GenerationSession {
  public:
    SyntheticSession(const SyntheticEnvironment& env, std::string prompt, CaptureSpec spec)
        : env_(env), prompt_(std::move(prompt)), spec_(std::move(spec)) {
        if (spec_.layer < 0 || spec_.layer > env_.spec().num_layers) {
            throw contract_violation("session: capture layer outside model depth");
        }
        if (spec_.max_tokens <= 0) throw contract_violation("session: max_tokens must be positive");
        uint64_t root = derive_seed(spec_.seed, hash_str(prompt_));
        process_rng_ = make_rng(derive_seed(root, 0x70726f63));
        token_rng_ = make_rng(derive_seed(root, 0x746f6b65));
        capture_rng_ = make_rng(derive_seed(root, 0x63617074));
        probe_root_ = derive_seed(root, 0x70726f62);

        state_ = env_.initial_state();

        // per-episode failure draw: at most one mode fires
        auto episode_rng = make_rng(derive_seed(root, 0x65706973));
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        const auto& modes = env_.spec().modes;
        int candidate = -1;
        if (env_.spec().assign_modes_by_prompt) {
            // the prompt fixes which mode it can exhibit, rollouts fire it
            double total = 0.0;
            for (const auto& m : modes) total += m.prompt_share;
            if (total > 0.0) {
                auto prompt_rng = make_rng(derive_seed(hash_str(prompt_), 0x6d6f6465));
                double u = std::uniform_real_distribution<double>(0.0, total)(prompt_rng);
                double acc = 0.0;
                for (size_t m = 0; m < modes.size(); ++m) {
                    acc += modes[m].prompt_share;
                    if (u < acc) {
                        candidate = static_cast<int>(m);
                        break;
                    }
                }
            }
            if (candidate >= 0 &&
                unif(episode_rng) >= modes[static_cast<size_t>(candidate)].probability) {
                candidate = -1;
            }
        } else {
            double u = unif(episode_rng);
            double acc = 0.0;
            for (size_t m = 0; m < modes.size(); ++m) {
                acc += modes[m].probability;
                if (u < acc) {
                    candidate = static_cast<int>(m);
                    break;
                }
            }
        }
        if (candidate >= 0) {
            mode_ = candidate;
            const auto& m = modes[static_cast<size_t>(candidate)];
            int lo = m.onset_min;
            int hi = std::max(lo, m.onset_max);
            onset_ = std::uniform_int_distribution<int>(lo, hi)(episode_rng);
        }
    }

    SegmentStep next_segment() override {
        if (done_) throw error("session: exhausted");

        const auto& es = env_.spec();
        bool budget_left = tokens_ + es.seg_len + 1 + 2 <= spec_.max_tokens;
        bool answer_now = segments_done_ >= es.max_segments || !budget_left ||
                          (segments_done_ >= es.min_segments && env_.in_stop_ball(state_));

        SegmentStep step;
        if (answer_now) {
            bool good = env_.in_success_ball(state_);
            step.text = std::string("answer ") + (good ? "GOOD" : "BAD");
            env_.step_state(state_, process_rng_);
            env_.step_state(state_, process_rng_);
            step.tokens = 2;
            tokens_ += 2;
            step.done = true;
            done_ = true;
            append_text(step.text);
            return step;
        }

        std::string words;
        for (int t = 0; t < es.seg_len; ++t) {
            double lp = 0.0;
            int tok = env_.sample_token(state_, spec_.temperature, token_rng_, &lp);
            if (t > 0) words += ' ';
            words += token_word(tok);
            env_.step_state(state_, process_rng_);
        }
        // trailing delimiter token ends the segment; its state is the checkpoint
        env_.step_state(state_, process_rng_);
        tokens_ += es.seg_len + 1;
        ++segments_done_;

        // scheduled failure onset lands right at the checkpoint, pre-capture
        if (mode_ >= 0 && segments_done_ == onset_) {
            add_scaled(state_, es.modes[static_cast<size_t>(mode_)].offset, 1.0);
        }

        step.text = std::move(words);
        step.tokens = es.seg_len + 1;
        step.checkpoint_state = capture();
        step.done = false;
        append_text(step.text);
        return step;
    }

    void inject(const LatentVector& impulse, double strength) override {
        if (impulse.size() != static_cast<size_t>(env_.dim())) {
            throw backend_error(backend_error::kind::dim_mismatch,
                                "inject: impulse dimension " + std::to_string(impulse.size()) +
                                    " vs model " + std::to_string(env_.dim()));
        }
        add_scaled(state_, impulse, strength);
    }

    GenerationSnapshot snapshot() const override {
        auto payload = std::make_shared<SyntheticSnapshotState>();
        payload->state = state_;
        payload->temperature = spec_.temperature;
        payload->probe_seed = derive_seed(probe_root_, static_cast<uint64_t>(tokens_));
        GenerationSnapshot snap;
        snap.session_id = prompt_;
        snap.position = tokens_;
        snap.handle = std::shared_ptr<const void>(payload, payload.get());
        return snap;
    }

    long tokens_generated() const override { return tokens_; }
    std::string text() const override { return text_; }

  private:
    const SyntheticEnvironment& env_;
    std::string prompt_;
    CaptureSpec spec_;
    std::mt19937_64 process_rng_;
    std::mt19937_64 token_rng_;
    std::mt19937_64 capture_rng_;
    uint64_t probe_root_ = 0;
    LatentVector state_;
    int mode_ = -1;
    int onset_ = 0;
    int segments_done_ = 0;
    long tokens_ = 0;
    bool done_ = false;
    std::string text_;

    LatentVector capture() {
        LatentVector h = state_;
        double sigma = env_.spec().capture_sigma;
        if (sigma > 0.0) {
            std::normal_distribution<double> gauss(0.0, sigma);
            for (int i = 0; i < env_.pos_dims(); ++i) h[i] += gauss(capture_rng_);
        }
        return h;
    }

    void append_text(const std::string& segment) {
        if (!text_.empty()) text_ += spec_.delimiter;
        text_ += segment;
    }
};

} // namespace

// ---------------------------------------------------------------------------
// Backend
// ---------------------------------------------------------------------------

BackendRollout SyntheticBackend::generate_rollout(const std::string& prompt,
                                                  const CaptureSpec& spec,
                                                  const std::vector<Injection>& injections) {
    for (const auto& inj : injections) {
        if (inj.impulse.size() != static_cast<size_t>(dim())) {
            throw backend_error(backend_error::kind::dim_mismatch,
                                "rollout: injection dimension mismatch");
        }
    }
    SyntheticSession session(env_, prompt, spec);
    BackendRollout out;
    while (true) {
        SegmentStep step = session.next_segment();
        out.segments.push_back(step.text);
        if (step.done) break;
        out.checkpoint_states.push_back(step.checkpoint_state);
        int checkpoint = static_cast<int>(out.checkpoint_states.size());
        for (const auto& inj : injections) {
            if (inj.checkpoint == checkpoint) session.inject(inj.impulse, inj.strength);
        }
    }
    out.token_count = session.tokens_generated();
    out.text = session.text();
    return out;
}

std::unique_ptr<GenerationSession> SyntheticBackend::begin_session(const std::string& prompt,
                                                                   const CaptureSpec& spec) {
    return std::make_unique<SyntheticSession>(env_, prompt, spec);
}

std::vector<ArmResult> run_probe_arms(const SyntheticEnvironment& env,
                                      const SyntheticSnapshotState& snap,
                                      const std::vector<ProbeArm>& arms, int t_probe) {
    if (t_probe < 1) throw contract_violation("probe: t_probe must be >= 1");
    std::vector<ArmResult> results;
    results.reserve(arms.size());
    for (const auto& arm : arms) {
        if (!arm.impulse.empty() && arm.impulse.size() != snap.state.size()) {
            throw backend_error(backend_error::kind::dim_mismatch,
                                "probe: arm impulse dimension mismatch");
        }
        ArmResult res;
        LatentVector h = snap.state;
        if (!arm.impulse.empty() && arm.strength != 0.0) {
            add_scaled(h, arm.impulse, arm.strength);
        }
        auto rng = make_rng(snap.probe_seed); // identical stream for every arm
        for (int t = 0; t < t_probe; ++t) {
            double lp = 0.0;
            int tok;
            if (!arm.force_tokens.empty()) {
                size_t idx = std::min<size_t>(t, arm.force_tokens.size() - 1);
                tok = arm.force_tokens[idx];
                auto lps = env.token_logprobs(h, snap.temperature);
                if (tok < 0 || tok >= static_cast<int>(lps.size())) {
                    throw backend_error(backend_error::kind::protocol,
                                        "probe: forced token out of vocabulary");
                }
                lp = lps[static_cast<size_t>(tok)];
                if (snap.temperature > 0.0) {
                    // burn the sampling draw so forced and sampled arms share
                    // one noise stream
                    std::uniform_real_distribution<double> unif(0.0, 1.0);
                    unif(rng);
                }
            } else {
                tok = env.sample_token(h, snap.temperature, rng, &lp);
            }
            res.tokens.push_back(tok);
            res.logprobs.push_back(lp);
            env.step_state(h, rng);
        }
        results.push_back(std::move(res));
    }
    return results;
}

std::vector<ArmResult> SyntheticBackend::fork_probe(const GenerationSnapshot& snapshot,
                                                    const std::vector<ProbeArm>& arms,
                                                    int t_probe) {
    auto payload = static_cast<const SyntheticSnapshotState*>(snapshot.handle.get());
    if (payload == nullptr) {
        throw backend_error(backend_error::kind::stale_snapshot, "probe: snapshot expired");
    }
    return run_probe_arms(env_, *payload, arms, t_probe);
}

} // namespace stir
