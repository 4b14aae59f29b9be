#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace stir {

// A hidden state, retrieval key, or steering impulse in the residual stream.
// Plain vector of doubles; dimension is the length.
using LatentVector = std::vector<double>;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

// Violation of a caller-side precondition (dimension mismatch, empty input...).
struct contract_violation : std::logic_error {
    using std::logic_error::logic_error;
};

// Recoverable, defined runtime error (numerically singular kernel, bad file...).
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Library / candidate file problems, each distinct so callers can tell them apart.
struct format_error : error {
    using error::error;
};
struct version_error : format_error {
    using format_error::format_error;
};
struct parse_error : format_error {
    using format_error::format_error;
};
struct invariant_error : format_error {
    using format_error::format_error;
};

// Backend failures, distinguished by kind.
struct backend_error : error {
    enum class kind { transport, protocol, dim_mismatch, stale_snapshot, generic };
    kind what_kind;
    backend_error(kind k, const std::string& msg) : error(msg), what_kind(k) {}
};

// ---------------------------------------------------------------------------
// Vector math
// ---------------------------------------------------------------------------

double dot(const LatentVector& a, const LatentVector& b);
double norm(const LatentVector& v);

// Cosine similarity. Zero-norm inputs yield 0 rather than an error: a
// degenerate key must not abort online control, it just never retrieves.
double cosine(const LatentVector& a, const LatentVector& b);

// Elementwise mean of a nonempty set of equal-dimension vectors.
LatentVector centroid(const std::vector<LatentVector>& states);

LatentVector normalized(const LatentVector& v);
void add_scaled(LatentVector& dst, const LatentVector& v, double scale); // dst += scale*v
LatentVector subtract(const LatentVector& a, const LatentVector& b);

bool all_finite(const LatentVector& v);

// ---------------------------------------------------------------------------
// Tool entries and the library
// ---------------------------------------------------------------------------

enum class ToolKind { correction, anchor };

const char* to_string(ToolKind k);
ToolKind tool_kind_from_string(const std::string& s);

// Where an entry came from: which prompt and which checkpoint ordinal.
struct ToolSource {
    std::string prompt_id;
    int checkpoint = 0;
};

// One memory unit pi = (key, impulse, quality). Anchors carry a null impulse;
// their retrieval is evidence that no intervention is needed.
struct ToolEntry {
    int64_t id = 0;
    ToolKind kind = ToolKind::correction;
    LatentVector key;
    LatentVector impulse;
    double quality = 0.0;
    int layer = 0;
    ToolSource source;
};

// The sparse control basis: a budgeted, key-normalized, immutable-after-build
// collection of tool entries.
struct ToolLibrary {
    std::vector<ToolEntry> entries;
    int dim = 0;
    int layer = 0;
    std::string version;
    bool finalized = false;
    std::string build_config_json; // snapshot of the config that produced it

    size_t size() const { return entries.size(); }
    bool empty() const { return entries.empty(); }
};

} // namespace stir
