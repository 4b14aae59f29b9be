#pragma once

#include "stir/config.hpp"
#include "stir/core.hpp"
#include "stir/induction.hpp"

#include <vector>

namespace stir {

// Joint utility of a subset: sum of log(1 + q) plus lambda * log det of the
// key Gram matrix regularized by epsilon. Empty subset scores 0. Keys are
// expected unit-normalized.
double joint_utility(const std::vector<ToolEntry>& subset, double lambda, double epsilon);

// Marginal gain of adding a candidate with the given quality whose key has
// residual variance sigma2 against the chosen span.
double marginal_gain(double quality, double sigma2, double lambda, double epsilon);

// Greedy stop floor: the gain of a worthless duplicate. No candidate at or
// below this is worth a slot.
double gain_floor(double lambda, double epsilon);

// Running selection state: chosen ids in pick order, per-candidate residual
// variances, and the objective value of the chosen set so far.
struct SelectionState {
    std::vector<int64_t> chosen;
    std::vector<double> residual_variances; // indexed like the candidate list
    double objective_value = 0.0;
};

// Incremental greedy maximizer of the joint utility. Residual variances are
// maintained by orthogonal projection against the picked keys; the objective
// is tracked with a rank-1 Cholesky extension of the regularized kernel.
class GreedySelector {
  public:
    GreedySelector(const std::vector<ToolEntry>& candidates, double lambda, double epsilon);

    // Pick the best remaining candidate. Returns its index in the candidate
    // list, or -1 when every remaining gain is at or below the floor.
    int step();

    double gain(size_t index) const;
    double residual_variance(size_t index) const { return state_.residual_variances[index]; }
    bool selected(size_t index) const { return picked_[index]; }
    const SelectionState& state() const { return state_; }

  private:
    const std::vector<ToolEntry>& candidates_;
    double lambda_;
    double epsilon_;
    double floor_;
    std::vector<LatentVector> unit_keys_; // empty vector marks a degenerate key
    std::vector<LatentVector> residuals_;
    std::vector<LatentVector> basis_; // orthonormal span of the chosen keys
    std::vector<size_t> chosen_indices_;
    std::vector<bool> picked_;
    // Cholesky factor of (K_chosen + eps I), row-major lower triangle
    std::vector<double> chol_;
    size_t chol_n_ = 0;
    double logdet_ = 0.0;
    double quality_sum_ = 0.0;
    SelectionState state_;

    void project_out(LatentVector& r, const LatentVector& u) const;
    double refresh_residual(size_t index); // re-orthogonalize from scratch
};

// Stage II: select up to B entries maximizing the joint utility, or plain
// top-B by quality when diversity selection is toggled off. Entries with
// degenerate keys are dropped. Ties always break toward the lower id.
ToolLibrary greedy_select(const CandidateSet& candidates, int B, double lambda, double epsilon,
                          bool diversity_selection = true);

// Stage III: L2-normalize every key (impulses keep their magnitude), embed
// the build config, and mark the library immutable. Idempotent.
ToolLibrary finalize(ToolLibrary library);

} // namespace stir
