#include "stir/induction.hpp"

#include "stir/backend.hpp"
#include "stir/parallel.hpp"
#include "stir/rng.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <json.hpp>
#include <mutex>

namespace stir {

double reward(bool correct, long token_count, long l_max, double eta) {
    if (l_max <= 0) throw contract_violation("reward: L_max must be positive");
    if (token_count < 0) throw contract_violation("reward: negative token count");
    long clamped = std::min(token_count, l_max); // overruns pay the full penalty, no more
    double ratio = static_cast<double>(clamped) / static_cast<double>(l_max);
    return (correct ? 1.0 : 0.0) - eta * ratio;
}

Segmentation segment_and_checkpoint(const std::string& text, const std::string& delimiter) {
    if (delimiter.empty()) throw contract_violation("segment: empty delimiter");
    Segmentation out;
    size_t pos = 0;
    while (pos <= text.size()) {
        size_t hit = text.find(delimiter, pos);
        std::string piece =
            (hit == std::string::npos) ? text.substr(pos) : text.substr(pos, hit - pos);
        if (!piece.empty()) out.segments.push_back(std::move(piece));
        if (hit == std::string::npos) break;
        pos = hit + delimiter.size();
    }
    out.checkpoints = out.segments.empty() ? 0 : static_cast<int>(out.segments.size()) - 1;
    return out;
}

Partition partition_rollouts(const std::vector<const Rollout*>& rollouts, int k_pos, int k_neg) {
    if (k_pos < 1 || k_neg < 1) throw contract_violation("partition: pool sizes must be >= 1");
    // stable order: reward desc, then fewer tokens, then sampling order
    std::vector<size_t> order(rollouts.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        const Rollout& ra = *rollouts[a];
        const Rollout& rb = *rollouts[b];
        if (ra.reward != rb.reward) return ra.reward > rb.reward;
        if (ra.token_count != rb.token_count) return ra.token_count < rb.token_count;
        return a < b;
    });

    Partition part;
    for (size_t idx : order) {
        if (rollouts[idx]->correct && static_cast<int>(part.positives.size()) < k_pos) {
            part.positives.push_back(rollouts[idx]);
        }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if (!rollouts[*it]->correct && static_cast<int>(part.negatives.size()) < k_neg) {
            part.negatives.push_back(rollouts[*it]);
        }
    }
    return part;
}

Partition partition_rollouts(const std::vector<Rollout>& rollouts, int k_pos, int k_neg) {
    std::vector<const Rollout*> ptrs;
    ptrs.reserve(rollouts.size());
    for (const auto& r : rollouts) ptrs.push_back(&r);
    return partition_rollouts(ptrs, k_pos, k_neg);
}

double quality_score(const std::vector<const Rollout*>& positives,
                     const std::vector<const Rollout*>& negatives) {
    if (positives.empty()) throw contract_violation("quality_score: positive pool empty");
    auto mean_reward = [](const std::vector<const Rollout*>& pool) {
        double s = 0.0;
        for (const Rollout* r : pool) s += r->reward;
        return s / static_cast<double>(pool.size());
    };
    double q = negatives.empty() ? mean_reward(positives)
                                 : mean_reward(positives) - mean_reward(negatives);
    return std::max(0.0, q);
}

std::vector<ToolEntry> induce_checkpoint_actions(const std::vector<const Rollout*>& positives,
                                                 const std::vector<const Rollout*>& negatives,
                                                 int checkpoint, double min_impulse_norm,
                                                 const std::string& prompt_id) {
    std::vector<ToolEntry> out;
    if (positives.empty()) return out;

    auto states_at = [&](const std::vector<const Rollout*>& pool) {
        std::vector<LatentVector> states;
        states.reserve(pool.size());
        for (const Rollout* r : pool) {
            if (r->checkpoints() < checkpoint) {
                throw contract_violation("induce: rollout lacks checkpoint " +
                                         std::to_string(checkpoint));
            }
            states.push_back(r->checkpoint_states[checkpoint - 1]);
        }
        return states;
    };

    LatentVector mu_pos = centroid(states_at(positives));
    double q = quality_score(positives, negatives);

    if (!negatives.empty()) {
        LatentVector mu_neg = centroid(states_at(negatives));
        LatentVector impulse = subtract(mu_pos, mu_neg);
        if (norm(impulse) >= min_impulse_norm) {
            ToolEntry correction;
            correction.kind = ToolKind::correction;
            correction.key = mu_neg;
            correction.impulse = std::move(impulse);
            correction.quality = q;
            correction.source = {prompt_id, checkpoint};
            out.push_back(std::move(correction));
        }
    }

    ToolEntry anchor;
    anchor.kind = ToolKind::anchor;
    anchor.key = mu_pos;
    anchor.impulse = LatentVector(mu_pos.size(), 0.0);
    anchor.quality = q;
    anchor.source = {prompt_id, checkpoint};
    out.push_back(std::move(anchor));
    return out;
}

std::vector<Example> load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw error("dataset: cannot open " + path);
    std::vector<Example> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            auto j = nlohmann::json::parse(line);
            Example ex;
            ex.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
            ex.prompt = j.at("prompt").get<std::string>();
            ex.answer = j.at("answer").get<std::string>();
            out.push_back(std::move(ex));
        } catch (const nlohmann::json::exception& e) {
            throw parse_error("dataset: line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

namespace {

std::string trimmed(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string lowered(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

} // namespace

bool answer_matches(const std::string& text, const std::string& reference) {
    // last non-empty line, optionally prefixed "answer[:]"
    std::string last;
    size_t start = 0;
    while (start <= text.size()) {
        size_t nl = text.find('\n', start);
        std::string line =
            (nl == std::string::npos) ? text.substr(start) : text.substr(start, nl - start);
        std::string t = trimmed(line);
        if (!t.empty()) last = t;
        if (nl == std::string::npos) break;
        start = nl + 1;
    }
    std::string got = lowered(last);
    std::string want = lowered(trimmed(reference));
    if (got == want) return true;
    const std::string prefix = "answer";
    if (got.rfind(prefix, 0) == 0) {
        std::string rest = trimmed(got.substr(prefix.size()));
        if (!rest.empty() && rest[0] == ':') rest = trimmed(rest.substr(1));
        return rest == want;
    }
    return false;
}

namespace {

LatentVector random_unit_vector(size_t dim, uint64_t seed) {
    auto rng = make_rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    LatentVector v(dim);
    double n = 0.0;
    while (n == 0.0) {
        for (double& x : v) x = gauss(rng);
        n = norm(v);
    }
    for (double& x : v) x /= n;
    return v;
}

// Table-5-style mining ablation: keep keys and qualities, but replace every
// correction impulse with a random direction at the mean contrastive norm.
void randomize_impulses(CandidateSet& set, uint64_t seed) {
    double total = 0.0;
    size_t count = 0;
    for (const auto& e : set.entries) {
        if (e.kind == ToolKind::correction) {
            total += norm(e.impulse);
            ++count;
        }
    }
    if (count == 0) return;
    double mean_norm = total / static_cast<double>(count);
    for (auto& e : set.entries) {
        if (e.kind != ToolKind::correction) continue;
        LatentVector dir =
            random_unit_vector(e.impulse.size(), derive_seed(seed, 0x6d696e65, e.id));
        for (size_t i = 0; i < dir.size(); ++i) dir[i] *= mean_norm;
        e.impulse = std::move(dir);
    }
}

} // namespace

InductionResult induce_dataset(const std::vector<Example>& dataset, Backend& backend,
                               const Config& config) {
    config.validate();
    InductionResult result;
    result.candidates.dim = backend.dim();
    result.candidates.layer = config.capture_layer(backend.num_layers());
    result.candidates.build_config_json = config_to_json_text(config);
    if (dataset.empty()) return result;

    struct PromptOutcome {
        std::vector<ToolEntry> entries;
        bool skipped = false;
    };
    std::vector<PromptOutcome> outcomes(dataset.size());

    parallel_for(dataset.size(), config.jobs, [&](size_t pi) {
        const Example& ex = dataset[pi];
        PromptOutcome& outcome = outcomes[pi];

        std::vector<Rollout> rollouts;
        rollouts.reserve(config.K);
        try {
            for (int k = 0; k < config.K; ++k) {
                CaptureSpec spec;
                spec.layer = config.capture_layer(backend.num_layers());
                spec.delimiter = config.delimiter;
                spec.max_tokens = config.max_tokens;
                spec.temperature = config.temperature;
                spec.seed = derive_seed(config.seed, hash_str(ex.id), 0x726f6c6c, k);
                BackendRollout raw = backend.generate_rollout(ex.prompt, spec);

                Rollout r;
                r.prompt_id = ex.id;
                r.segments = std::move(raw.segments);
                r.checkpoint_states = std::move(raw.checkpoint_states);
                r.token_count = raw.token_count;
                r.correct = answer_matches(raw.text, ex.answer);
                r.reward = reward(r.correct, r.token_count, config.max_tokens, config.eta);
                rollouts.push_back(std::move(r));
            }
        } catch (const backend_error&) {
            outcome.skipped = true;
            return;
        }

        // deepest checkpoint with enough coverage to fill both pools
        int max_ckpt = 0;
        for (const auto& r : rollouts) max_ckpt = std::max(max_ckpt, r.checkpoints());
        int M = 0;
        for (int m = 1; m <= max_ckpt; ++m) {
            int present = 0;
            for (const auto& r : rollouts) {
                if (r.checkpoints() >= m) ++present;
            }
            if (present >= config.k_pos + config.k_neg) M = m;
        }

        for (int m = 1; m <= M; ++m) {
            std::vector<const Rollout*> eligible;
            for (const auto& r : rollouts) {
                if (r.checkpoints() >= m) eligible.push_back(&r);
            }
            Partition part = partition_rollouts(eligible, config.k_pos, config.k_neg);
            auto entries = induce_checkpoint_actions(part.positives, part.negatives, m,
                                                     config.min_impulse_norm, ex.id);
            for (auto& e : entries) outcome.entries.push_back(std::move(e));
        }
    });

    // merge in dataset order, then assign ids; completion order does not matter
    for (size_t pi = 0; pi < dataset.size(); ++pi) {
        if (outcomes[pi].skipped) {
            ++result.prompts_skipped;
            result.skipped_ids.push_back(dataset[pi].id);
            continue;
        }
        ++result.prompts_processed;
        for (auto& e : outcomes[pi].entries) {
            e.id = static_cast<int64_t>(result.candidates.entries.size());
            e.layer = result.candidates.layer;
            result.candidates.entries.push_back(std::move(e));
        }
    }

    if (!config.contrastive_mining) randomize_impulses(result.candidates, config.seed);
    return result;
}

} // namespace stir
