#include "stir/core.hpp"

#include <cmath>

namespace stir {

double dot(const LatentVector& a, const LatentVector& b) {
    if (a.size() != b.size()) {
        throw contract_violation("dot: dimension mismatch (" + std::to_string(a.size()) + " vs " +
                                 std::to_string(b.size()) + ")");
    }
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(const LatentVector& v) { return std::sqrt(dot(v, v)); }

double cosine(const LatentVector& a, const LatentVector& b) {
    if (a.size() != b.size()) {
        throw contract_violation("cosine: dimension mismatch (" + std::to_string(a.size()) +
                                 " vs " + std::to_string(b.size()) + ")");
    }
    double na = norm(a);
    double nb = norm(b);
    if (na == 0.0 || nb == 0.0) return 0.0; // degenerate input never retrieves
    double c = dot(a, b) / (na * nb);
    if (c > 1.0) c = 1.0;
    if (c < -1.0) c = -1.0;
    return c;
}

LatentVector centroid(const std::vector<LatentVector>& states) {
    if (states.empty()) throw contract_violation("centroid: empty set");
    const size_t d = states.front().size();
    LatentVector mean(d, 0.0);
    for (const auto& s : states) {
        if (s.size() != d) throw contract_violation("centroid: dimension mismatch");
        for (size_t i = 0; i < d; ++i) mean[i] += s[i];
    }
    const double inv = 1.0 / static_cast<double>(states.size());
    for (double& x : mean) x *= inv;
    return mean;
}

LatentVector normalized(const LatentVector& v) {
    double n = norm(v);
    if (n == 0.0) throw error("normalized: zero-norm vector");
    LatentVector out(v);
    for (double& x : out) x /= n;
    return out;
}

void add_scaled(LatentVector& dst, const LatentVector& v, double scale) {
    if (dst.size() != v.size()) throw contract_violation("add_scaled: dimension mismatch");
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += scale * v[i];
}

LatentVector subtract(const LatentVector& a, const LatentVector& b) {
    if (a.size() != b.size()) throw contract_violation("subtract: dimension mismatch");
    LatentVector out(a);
    for (size_t i = 0; i < b.size(); ++i) out[i] -= b[i];
    return out;
}

bool all_finite(const LatentVector& v) {
    for (double x : v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

const char* to_string(ToolKind k) { return k == ToolKind::correction ? "correction" : "anchor"; }

ToolKind tool_kind_from_string(const std::string& s) {
    if (s == "correction") return ToolKind::correction;
    if (s == "anchor") return ToolKind::anchor;
    throw parse_error("unknown tool kind: " + s);
}

} // namespace stir
