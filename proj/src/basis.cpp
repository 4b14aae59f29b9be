#include "stir/basis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace stir {

namespace {

constexpr double kDegenerateResidual = 1e-10; // below this a key adds no new direction

// Cholesky log-determinant of (G + eps I) for a symmetric Gram matrix G.
double logdet_regularized(const std::vector<LatentVector>& keys, double epsilon) {
    const size_t n = keys.size();
    std::vector<double> a(n * n, 0.0);
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j <= i; ++j) {
            double g = dot(keys[i], keys[j]);
            a[i * n + j] = g + (i == j ? epsilon : 0.0);
        }
    }
    double logdet = 0.0;
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j <= i; ++j) {
            double s = a[i * n + j];
            for (size_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
            if (i == j) {
                if (!(s > 0.0) || !std::isfinite(s)) {
                    throw error("joint_utility: kernel singular beyond regularization");
                }
                a[i * n + i] = std::sqrt(s);
                logdet += 2.0 * std::log(a[i * n + i]);
            } else {
                a[i * n + j] = s / a[j * n + j];
            }
        }
    }
    return logdet;
}

} // namespace

double joint_utility(const std::vector<ToolEntry>& subset, double lambda, double epsilon) {
    if (epsilon <= 0.0) throw contract_violation("joint_utility: epsilon must be positive");
    if (subset.empty()) return 0.0;
    double quality_term = 0.0;
    std::vector<LatentVector> keys;
    keys.reserve(subset.size());
    for (const auto& e : subset) {
        if (e.quality < 0.0) throw contract_violation("joint_utility: negative quality");
        quality_term += std::log1p(e.quality);
        keys.push_back(e.key);
    }
    return quality_term + lambda * logdet_regularized(keys, epsilon);
}

double marginal_gain(double quality, double sigma2, double lambda, double epsilon) {
    return std::log1p(quality) + lambda * std::log(sigma2 + epsilon);
}

double gain_floor(double lambda, double epsilon) { return lambda * std::log(epsilon); }

GreedySelector::GreedySelector(const std::vector<ToolEntry>& candidates, double lambda,
                               double epsilon)
    : candidates_(candidates), lambda_(lambda), epsilon_(epsilon),
      floor_(gain_floor(lambda, epsilon)) {
    if (epsilon <= 0.0) throw contract_violation("greedy: epsilon must be positive");
    const size_t n = candidates.size();
    unit_keys_.resize(n);
    residuals_.resize(n);
    picked_.assign(n, false);
    state_.residual_variances.assign(n, 0.0);
    for (size_t i = 0; i < n; ++i) {
        double kn = norm(candidates[i].key);
        if (kn == 0.0 || !all_finite(candidates[i].key)) continue; // degenerate, never selectable
        unit_keys_[i] = candidates[i].key;
        for (double& x : unit_keys_[i]) x /= kn;
        residuals_[i] = unit_keys_[i];
        state_.residual_variances[i] = 1.0;
    }
}

void GreedySelector::project_out(LatentVector& r, const LatentVector& u) const {
    add_scaled(r, u, -dot(r, u));
}

double GreedySelector::refresh_residual(size_t index) {
    residuals_[index] = unit_keys_[index];
    for (const auto& u : basis_) project_out(residuals_[index], u);
    double s2 = dot(residuals_[index], residuals_[index]);
    state_.residual_variances[index] = std::max(s2, 0.0);
    return state_.residual_variances[index];
}

double GreedySelector::gain(size_t index) const {
    if (picked_[index] || unit_keys_[index].empty()) {
        return -std::numeric_limits<double>::infinity();
    }
    return marginal_gain(candidates_[index].quality, state_.residual_variances[index], lambda_,
                         epsilon_);
}

int GreedySelector::step() {
    int best = -1;
    double best_gain = floor_;
    for (size_t i = 0; i < candidates_.size(); ++i) {
        if (picked_[i] || unit_keys_[i].empty()) continue;
        double g = gain(i);
        if (g > best_gain ||
            (best >= 0 && g == best_gain && candidates_[i].id < candidates_[best].id)) {
            best = static_cast<int>(i);
            best_gain = g;
        }
    }
    if (best < 0) return -1;

    const size_t b = static_cast<size_t>(best);
    picked_[b] = true;
    state_.chosen.push_back(candidates_[b].id);
    chosen_indices_.push_back(b);
    quality_sum_ += std::log1p(candidates_[b].quality);

    // extend the Cholesky factor of (K + eps I) with the new key's row
    {
        const size_t t = chol_n_;
        std::vector<double> row(t);
        for (size_t i = 0; i < t; ++i) {
            row[i] = dot(unit_keys_[b], unit_keys_[chosen_indices_[i]]);
        }
        std::vector<double> w(t);
        for (size_t i = 0; i < t; ++i) {
            double s = row[i];
            for (size_t k = 0; k < i; ++k) s -= chol_[i * (i + 1) / 2 + k] * w[k];
            w[i] = s / chol_[i * (i + 1) / 2 + i];
        }
        double diag2 = 1.0 + epsilon_;
        for (size_t i = 0; i < t; ++i) diag2 -= w[i] * w[i];
        if (!(diag2 > 0.0)) diag2 = epsilon_ * 1e-6; // numerically exhausted direction
        double diag = std::sqrt(diag2);
        for (size_t i = 0; i < t; ++i) chol_.push_back(w[i]);
        chol_.push_back(diag);
        logdet_ += 2.0 * std::log(diag);
        chol_n_ = t + 1;
        state_.objective_value = quality_sum_ + lambda_ * logdet_;
    }

    // grow the orthonormal basis unless the key is already inside the span
    double rnorm = std::sqrt(std::max(dot(residuals_[b], residuals_[b]), 0.0));
    if (rnorm >= kDegenerateResidual) {
        // re-orthogonalize once before normalizing to keep the basis clean
        LatentVector u = residuals_[b];
        for (const auto& v : basis_) project_out(u, v);
        double un = norm(u);
        if (un >= kDegenerateResidual) {
            for (double& x : u) x /= un;
            basis_.push_back(std::move(u));
            for (size_t i = 0; i < candidates_.size(); ++i) {
                if (picked_[i] || unit_keys_[i].empty()) continue;
                double prev = state_.residual_variances[i];
                project_out(residuals_[i], basis_.back());
                double s2 = dot(residuals_[i], residuals_[i]);
                if (s2 < kDegenerateResidual * kDegenerateResidual) {
                    s2 = refresh_residual(i);
                }
                // variances never increase as the span grows
                state_.residual_variances[i] = std::min(prev, std::max(s2, 0.0));
            }
        }
    }
    residuals_[b].assign(residuals_[b].size(), 0.0);
    state_.residual_variances[b] = 0.0;
    return best;
}

ToolLibrary greedy_select(const CandidateSet& candidates, int B, double lambda, double epsilon,
                          bool diversity_selection) {
    if (candidates.entries.empty()) throw contract_violation("greedy_select: no candidates");
    if (B < 1) throw contract_violation("greedy_select: B must be >= 1");

    ToolLibrary lib;
    lib.dim = candidates.dim;
    lib.layer = candidates.layer;
    lib.build_config_json = candidates.build_config_json;

    if (!diversity_selection) {
        // quality-only selection, the "top-k" ablation arm
        std::vector<size_t> order;
        for (size_t i = 0; i < candidates.entries.size(); ++i) {
            if (norm(candidates.entries[i].key) > 0.0) order.push_back(i);
        }
        std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
            const auto& ea = candidates.entries[a];
            const auto& eb = candidates.entries[b];
            if (ea.quality != eb.quality) return ea.quality > eb.quality;
            return ea.id < eb.id;
        });
        for (size_t i = 0; i < order.size() && static_cast<int>(lib.entries.size()) < B; ++i) {
            lib.entries.push_back(candidates.entries[order[i]]);
        }
        return lib;
    }

    GreedySelector selector(candidates.entries, lambda, epsilon);
    while (static_cast<int>(lib.entries.size()) < B) {
        int pick = selector.step();
        if (pick < 0) break;
        lib.entries.push_back(candidates.entries[static_cast<size_t>(pick)]);
    }
    return lib;
}

ToolLibrary finalize(ToolLibrary library) {
    for (auto& e : library.entries) {
        double n = norm(e.key);
        if (n == 0.0) {
            throw error("finalize: zero-norm key on entry " + std::to_string(e.id));
        }
        for (double& x : e.key) x /= n;
    }
    library.finalized = true;
    if (library.version.empty()) library.version = "1";
    return library;
}

} // namespace stir
