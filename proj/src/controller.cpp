#include "stir/controller.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace stir {

const char* to_string(DecisionAction a) {
    return a == DecisionAction::inject ? "inject" : "abstain";
}

const char* to_string(DecisionReason r) {
    switch (r) {
    case DecisionReason::empty_retrieval: return "empty_retrieval";
    case DecisionReason::anchor_dominant: return "anchor_dominant";
    case DecisionReason::below_threshold: return "below_threshold";
    case DecisionReason::committed: return "committed";
    }
    return "?";
}

std::vector<Candidate> retrieve_topk(const LatentVector& query, const ToolLibrary& library,
                                     int k) {
    if (!library.finalized) throw contract_violation("retrieve: library not finalized");
    if (k < 1) throw contract_violation("retrieve: k must be >= 1");
    if (library.empty()) return {};
    if (static_cast<int>(query.size()) != library.dim) {
        throw contract_violation("retrieve: query dimension mismatch");
    }

    std::vector<Candidate> all;
    all.reserve(library.entries.size());
    for (const auto& e : library.entries) {
        Candidate c;
        c.entry = &e;
        c.similarity = cosine(query, e.key); // 0 for degenerate keys: unretrievable
        c.prior = c.similarity * e.quality;
        all.push_back(c);
    }
    auto better = [](const Candidate& a, const Candidate& b) {
        if (a.similarity != b.similarity) return a.similarity > b.similarity;
        return a.entry->id < b.entry->id;
    };
    size_t keep = std::min<size_t>(static_cast<size_t>(k), all.size());
    std::partial_sort(all.begin(), all.begin() + keep, all.end(), better);
    all.resize(keep);
    return all;
}

bool anchor_gate(const std::vector<Candidate>& candidates, bool gating_enabled) {
    if (candidates.empty()) return true;
    if (!gating_enabled) return false;
    double best_anchor = -std::numeric_limits<double>::infinity();
    double best_correction = -std::numeric_limits<double>::infinity();
    for (const auto& c : candidates) {
        double& slot =
            c.entry->kind == ToolKind::anchor ? best_anchor : best_correction;
        slot = std::max(slot, c.prior);
    }
    if (best_correction == -std::numeric_limits<double>::infinity()) return true;
    return best_anchor >= best_correction;
}

double probe_gain_from_arms(const ArmResult& steered, const ArmResult& default_arm) {
    if (steered.logprobs.empty() || default_arm.logprobs.empty()) {
        throw contract_violation("probe_gain: empty arm");
    }
    auto mean = [](const std::vector<double>& xs) {
        double s = 0.0;
        for (double x : xs) s += x;
        return s / static_cast<double>(xs.size());
    };
    return mean(steered.logprobs) - mean(default_arm.logprobs);
}

Injection static_steer(const LatentVector& v_star, double alpha) {
    Injection inj;
    inj.checkpoint = 0; // every checkpoint
    inj.impulse = v_star;
    inj.strength = alpha;
    return inj;
}

Controller::Controller(const ToolLibrary& library, const Config& config, Backend& backend)
    : library_(library), config_(config), backend_(backend) {
    config_.validate();
    if (!library.finalized) throw contract_violation("controller: library not finalized");
    if (!library.empty() && library.dim != backend.dim()) {
        throw backend_error(backend_error::kind::dim_mismatch,
                            "controller: library dim " + std::to_string(library.dim) +
                                " vs backend " + std::to_string(backend.dim()));
    }
}

std::vector<double> Controller::probe_corrections(const std::vector<const Candidate*>& picks,
                                                  GenerationSession& session) const {
    const double neg_inf = -std::numeric_limits<double>::infinity();
    std::vector<double> gains(picks.size(), neg_inf);

    GenerationSnapshot snap = session.snapshot();
    const double alpha_probe = config_.k_scale * 1.0; // unit-confidence preview

    ArmResult default_arm;
    try {
        ProbeArm zero;
        zero.impulse = LatentVector(static_cast<size_t>(backend_.dim()), 0.0);
        zero.strength = 0.0;
        auto res = backend_.fork_probe(snap, {zero}, config_.T_probe);
        default_arm = std::move(res.at(0));
    } catch (const backend_error&) {
        return gains; // nothing probeable: every candidate disqualified
    }

    std::vector<ProbeArm> arms;
    arms.reserve(picks.size());
    for (const Candidate* c : picks) {
        ProbeArm arm;
        arm.impulse = c->entry->impulse;
        arm.strength = alpha_probe;
        if (!config_.probe_scores_own_tokens) arm.force_tokens = default_arm.tokens;
        arms.push_back(std::move(arm));
    }

    std::vector<ArmResult> results;
    bool batch_ok = true;
    try {
        results = backend_.fork_probe(snap, arms, config_.T_probe);
    } catch (const backend_error&) {
        batch_ok = false;
    }
    if (batch_ok && results.size() == arms.size()) {
        for (size_t i = 0; i < results.size(); ++i) {
            gains[i] = probe_gain_from_arms(results[i], default_arm);
        }
        return gains;
    }

    // batch failed: retry arms one by one, a failing arm is just disqualified
    for (size_t i = 0; i < arms.size(); ++i) {
        try {
            auto res = backend_.fork_probe(snap, {arms[i]}, config_.T_probe);
            gains[i] = probe_gain_from_arms(res.at(0), default_arm);
        } catch (const backend_error&) {
            gains[i] = neg_inf;
        }
    }
    return gains;
}

Decision Controller::decide(const LatentVector& query, GenerationSession& session) const {
    Decision decision;

    std::vector<Candidate> candidates = retrieve_topk(query, library_, config_.top_k);
    if (candidates.empty()) {
        decision.reason = DecisionReason::empty_retrieval;
        return decision;
    }
    decision.anchor_matched = anchor_gate(candidates, true);
    if (anchor_gate(candidates, config_.anchor_gating)) {
        decision.reason = DecisionReason::anchor_dominant;
        return decision;
    }

    // keep the top-L corrections by prior; anchors never get probed
    std::vector<const Candidate*> corrections;
    for (const auto& c : candidates) {
        if (c.entry->kind == ToolKind::correction) corrections.push_back(&c);
    }
    if (corrections.empty()) {
        decision.reason = DecisionReason::anchor_dominant;
        return decision;
    }
    std::sort(corrections.begin(), corrections.end(), [](const Candidate* a, const Candidate* b) {
        if (a->prior != b->prior) return a->prior > b->prior;
        return a->entry->id < b->entry->id;
    });
    if (static_cast<int>(corrections.size()) > config_.L) corrections.resize(config_.L);

    std::vector<double> gains(corrections.size(), 0.0);
    if (config_.lookahead_probing) {
        gains = probe_corrections(corrections, session);
        decision.probe_tokens =
            static_cast<long>(corrections.size() + 1) * config_.T_probe;
    }

    const Candidate* best = nullptr;
    double best_s = -std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < corrections.size(); ++i) {
        double s;
        if (config_.lookahead_probing) {
            if (gains[i] == -std::numeric_limits<double>::infinity()) continue; // disqualified
            s = config_.beta * corrections[i]->prior + config_.rho * gains[i];
        } else {
            s = config_.beta * corrections[i]->prior;
        }
        if (best == nullptr || s > best_s ||
            (s == best_s && corrections[i]->entry->id < best->entry->id)) {
            best = corrections[i];
            best_s = s;
        }
    }
    if (best == nullptr) { // every probe arm failed
        decision.reason = DecisionReason::below_threshold;
        return decision;
    }

    decision.utility = best_s;
    if (best_s < config_.tau_null) {
        decision.reason = DecisionReason::below_threshold;
        return decision;
    }

    double alpha = config_.adaptive_injection
                       ? std::clamp(config_.k_scale * best_s, 0.0, config_.alpha_max)
                       : std::clamp(config_.k_scale * 1.0, 0.0, config_.alpha_max);
    if (alpha <= 0.0) {
        decision.reason = DecisionReason::below_threshold;
        return decision;
    }
    decision.action = DecisionAction::inject;
    decision.reason = DecisionReason::committed;
    decision.entry_id = best->entry->id;
    decision.strength = alpha;
    return decision;
}

} // namespace stir
