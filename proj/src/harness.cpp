#include "stir/harness.hpp"

#include "stir/basis.hpp"
#include "stir/parallel.hpp"
#include "stir/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <unordered_map>

namespace stir {

using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Library persistence
// ---------------------------------------------------------------------------

namespace {

ordered_json entry_to_json(const ToolEntry& e) {
    ordered_json j;
    j["id"] = e.id;
    j["kind"] = to_string(e.kind);
    j["key"] = e.key;
    j["impulse"] = e.impulse;
    j["quality"] = e.quality;
    j["source"] = {{"prompt_id", e.source.prompt_id}, {"checkpoint", e.source.checkpoint}};
    return j;
}

ToolEntry entry_from_json(const json& j) {
    ToolEntry e;
    e.id = j.at("id").get<int64_t>();
    e.kind = tool_kind_from_string(j.at("kind").get<std::string>());
    e.key = j.at("key").get<LatentVector>();
    e.impulse = j.at("impulse").get<LatentVector>();
    e.quality = j.at("quality").get<double>();
    if (j.contains("source")) {
        e.source.prompt_id = j.at("source").value("prompt_id", std::string());
        e.source.checkpoint = j.at("source").value("checkpoint", 0);
    }
    return e;
}

ordered_json document_for(const std::string& version, int dim, int layer,
                          const std::string& build_config_json,
                          const std::vector<ToolEntry>& entries, bool finalized) {
    ordered_json doc;
    doc["version"] = version;
    doc["dim"] = dim;
    doc["layer"] = layer;
    doc["finalized"] = finalized;
    if (!build_config_json.empty()) {
        doc["build_config"] = json::parse(build_config_json);
    } else {
        doc["build_config"] = json::object();
    }
    doc["entries"] = ordered_json::array();
    for (const auto& e : entries) doc["entries"].push_back(entry_to_json(e));
    return doc;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw error("cannot write " + path);
    out << text << '\n';
    if (!out) throw error("write failed: " + path);
}

std::string read_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw error("cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct LoadedDocument {
    json doc;
    std::string version;
    int dim = 0;
    int layer = 0;
    bool finalized = false;
    std::string build_config_json;
    std::vector<ToolEntry> entries;
};

LoadedDocument load_document(const std::string& path, const std::string& expected_version) {
    json doc;
    try {
        doc = json::parse(read_text(path));
    } catch (const json::exception& e) {
        throw parse_error(std::string("library: ") + e.what());
    }
    LoadedDocument out;
    if (!doc.contains("version") || !doc.at("version").is_string()) {
        throw version_error("library: missing version tag");
    }
    out.version = doc.at("version").get<std::string>();
    if (out.version != expected_version) {
        throw version_error("library: unsupported version '" + out.version + "', expected '" +
                            expected_version + "'");
    }
    try {
        out.dim = doc.at("dim").get<int>();
        out.layer = doc.at("layer").get<int>();
        out.finalized = doc.value("finalized", false);
        if (doc.contains("build_config")) out.build_config_json = doc.at("build_config").dump(2);
        for (const auto& ej : doc.at("entries")) out.entries.push_back(entry_from_json(ej));
    } catch (const json::exception& e) {
        throw parse_error(std::string("library: ") + e.what());
    }
    if (out.dim <= 0) throw invariant_error("library: non-positive dim");
    for (const auto& e : out.entries) {
        if (e.key.size() != static_cast<size_t>(out.dim) ||
            e.impulse.size() != static_cast<size_t>(out.dim)) {
            throw invariant_error("library: entry " + std::to_string(e.id) +
                                  " dimension mismatch");
        }
        if (!all_finite(e.key) || !all_finite(e.impulse)) {
            throw invariant_error("library: entry " + std::to_string(e.id) +
                                  " has non-finite values");
        }
        if (e.quality < 0.0) {
            throw invariant_error("library: entry " + std::to_string(e.id) +
                                  " has negative quality");
        }
        if (e.kind == ToolKind::anchor) {
            for (double x : e.impulse) {
                if (x != 0.0) {
                    throw invariant_error("library: anchor entry " + std::to_string(e.id) +
                                          " has a non-zero impulse");
                }
            }
        }
    }
    out.doc = std::move(doc);
    return out;
}

} // namespace

void save_library(const ToolLibrary& library, const std::string& path) {
    if (!library.finalized) throw contract_violation("save_library: library not finalized");
    auto doc = document_for(kLibraryVersion, library.dim, library.layer,
                            library.build_config_json, library.entries, true);
    write_text(path, doc.dump(2));
}

ToolLibrary load_library(const std::string& path) {
    LoadedDocument doc = load_document(path, kLibraryVersion);
    ToolLibrary lib;
    lib.dim = doc.dim;
    lib.layer = doc.layer;
    lib.version = doc.version;
    lib.finalized = true;
    lib.build_config_json = doc.build_config_json;
    lib.entries = std::move(doc.entries);
    for (auto& e : lib.entries) {
        double n = norm(e.key);
        double drift = std::abs(n - 1.0);
        if (drift <= 1e-9) continue;
        if (drift > 1e-3) {
            throw invariant_error("library: entry " + std::to_string(e.id) + " key norm drift " +
                                  std::to_string(drift));
        }
        for (double& x : e.key) x /= n; // small drift: quietly re-normalize
    }
    return lib;
}

void save_candidates(const CandidateSet& candidates, const std::string& path) {
    auto doc = document_for(kCandidatesVersion, candidates.dim, candidates.layer,
                            candidates.build_config_json, candidates.entries, false);
    write_text(path, doc.dump(2));
}

CandidateSet load_candidates(const std::string& path) {
    LoadedDocument doc = load_document(path, kCandidatesVersion);
    CandidateSet set;
    set.dim = doc.dim;
    set.layer = doc.layer;
    set.build_config_json = doc.build_config_json;
    set.entries = std::move(doc.entries);
    return set;
}

// ---------------------------------------------------------------------------
// State export
// ---------------------------------------------------------------------------

namespace {

std::string format_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

void write_states_csv(const std::string& path, size_t dim,
                      const std::vector<std::tuple<std::string, std::string, int, const LatentVector*>>& rows) {
    std::ofstream out(path);
    if (!out) throw error("export: cannot write " + path);
    out << "id,kind,checkpoint";
    for (size_t i = 0; i < dim; ++i) out << ",dim_" << i;
    out << '\n';
    for (const auto& [id, kind, ckpt, vec] : rows) {
        out << id << ',' << kind << ',' << ckpt;
        for (double x : *vec) out << ',' << format_double(x);
        out << '\n';
    }
    if (!out) throw error("export: write failed: " + path);
}

} // namespace

void export_states(const std::vector<ToolEntry>& entries, const std::string& path) {
    size_t dim = entries.empty() ? 0 : entries.front().key.size();
    std::vector<std::tuple<std::string, std::string, int, const LatentVector*>> rows;
    rows.reserve(entries.size());
    for (const auto& e : entries) {
        rows.emplace_back(std::to_string(e.id), to_string(e.kind), e.source.checkpoint, &e.key);
    }
    write_states_csv(path, dim, rows);
}

void export_rollout_states(const std::vector<Rollout>& rollouts, const std::string& path) {
    size_t dim = 0;
    for (const auto& r : rollouts) {
        if (!r.checkpoint_states.empty()) {
            dim = r.checkpoint_states.front().size();
            break;
        }
    }
    std::vector<std::tuple<std::string, std::string, int, const LatentVector*>> rows;
    for (const auto& r : rollouts) {
        for (size_t m = 0; m < r.checkpoint_states.size(); ++m) {
            rows.emplace_back(r.prompt_id, r.correct ? "positive" : "negative",
                              static_cast<int>(m + 1), &r.checkpoint_states[m]);
        }
    }
    write_states_csv(path, dim, rows);
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

const char* to_string(RunMode m) {
    switch (m) {
    case RunMode::vanilla: return "vanilla";
    case RunMode::static_steering: return "static";
    case RunMode::stir: return "stir";
    }
    return "?";
}

RunMode run_mode_from_string(const std::string& s) {
    if (s == "vanilla") return RunMode::vanilla;
    if (s == "static") return RunMode::static_steering;
    if (s == "stir") return RunMode::stir;
    throw contract_violation("unknown run mode: " + s);
}

SweepParam sweep_param_from_string(const std::string& s) {
    if (s == "k_scale") return SweepParam::k_scale;
    if (s == "layer_depth") return SweepParam::layer_depth;
    throw contract_violation("unknown sweep parameter: " + s);
}

Aggregates compute_aggregates(const std::vector<ExampleReport>& examples) {
    Aggregates agg;
    agg.examples = static_cast<int>(examples.size());
    long total_tokens = 0;
    long probe_tokens = 0;
    long decisions = 0;
    long injections = 0;
    int correct = 0;
    for (const auto& ex : examples) {
        if (ex.failed) ++agg.failed;
        if (ex.correct) ++correct;
        total_tokens += ex.total_tokens;
        probe_tokens += ex.probe_tokens;
        for (const auto& rec : ex.decisions) {
            ++decisions;
            if (rec.decision.action == DecisionAction::inject) ++injections;
        }
    }
    if (!examples.empty()) {
        agg.accuracy = static_cast<double>(correct) / examples.size();
        agg.mean_tokens = static_cast<double>(total_tokens) / examples.size();
    }
    if (total_tokens > 0) {
        agg.overhead_ratio = static_cast<double>(probe_tokens) / total_tokens;
    }
    if (decisions > 0) {
        agg.intervention_rate = static_cast<double>(injections) / decisions;
        agg.abstention_rate = static_cast<double>(decisions - injections) / decisions;
    }
    return agg;
}

double intervention_rate_on_anchor_states(const RunReport& report) {
    long matched = 0;
    long injected = 0;
    for (const auto& ex : report.examples) {
        for (const auto& rec : ex.decisions) {
            if (!rec.decision.anchor_matched) continue;
            ++matched;
            if (rec.decision.action == DecisionAction::inject) ++injected;
        }
    }
    return matched == 0 ? 0.0 : static_cast<double>(injected) / matched;
}

namespace {

ordered_json decision_to_json(const DecisionRecord& rec) {
    const Decision& d = rec.decision;
    ordered_json j;
    j["checkpoint"] = rec.checkpoint;
    j["action"] = to_string(d.action);
    j["reason"] = to_string(d.reason);
    if (d.entry_id.has_value()) {
        j["entry_id"] = *d.entry_id;
    } else {
        j["entry_id"] = nullptr;
    }
    j["utility"] = d.utility;
    j["strength"] = d.strength;
    j["probe_tokens"] = d.probe_tokens;
    j["anchor_matched"] = d.anchor_matched;
    return j;
}

DecisionRecord decision_from_json(const json& j) {
    DecisionRecord rec;
    rec.checkpoint = j.at("checkpoint").get<int>();
    Decision& d = rec.decision;
    std::string action = j.at("action").get<std::string>();
    d.action = action == "inject" ? DecisionAction::inject : DecisionAction::abstain;
    std::string reason = j.at("reason").get<std::string>();
    if (reason == "empty_retrieval") d.reason = DecisionReason::empty_retrieval;
    else if (reason == "anchor_dominant") d.reason = DecisionReason::anchor_dominant;
    else if (reason == "below_threshold") d.reason = DecisionReason::below_threshold;
    else d.reason = DecisionReason::committed;
    if (j.contains("entry_id") && !j.at("entry_id").is_null()) {
        d.entry_id = j.at("entry_id").get<int64_t>();
    }
    d.utility = j.at("utility").get<double>();
    d.strength = j.at("strength").get<double>();
    d.probe_tokens = j.at("probe_tokens").get<long>();
    d.anchor_matched = j.value("anchor_matched", false);
    return rec;
}

} // namespace

std::string report_to_json_text(const RunReport& report) {
    ordered_json j;
    j["version"] = "stir-report/1";
    j["mode"] = to_string(report.mode);
    j["config"] = report.config_json.empty() ? json::object() : json::parse(report.config_json);
    ordered_json agg;
    agg["examples"] = report.aggregates.examples;
    agg["failed"] = report.aggregates.failed;
    agg["accuracy"] = report.aggregates.accuracy;
    agg["mean_tokens"] = report.aggregates.mean_tokens;
    agg["overhead_ratio"] = report.aggregates.overhead_ratio;
    agg["intervention_rate"] = report.aggregates.intervention_rate;
    agg["abstention_rate"] = report.aggregates.abstention_rate;
    j["aggregates"] = agg;
    j["examples"] = ordered_json::array();
    for (const auto& ex : report.examples) {
        ordered_json ej;
        ej["id"] = ex.id;
        ej["correct"] = ex.correct;
        ej["failed"] = ex.failed;
        ej["gen_tokens"] = ex.gen_tokens;
        ej["probe_tokens"] = ex.probe_tokens;
        ej["total_tokens"] = ex.total_tokens;
        ej["decisions"] = ordered_json::array();
        for (const auto& rec : ex.decisions) ej["decisions"].push_back(decision_to_json(rec));
        j["examples"].push_back(ej);
    }
    return j.dump(2);
}

RunReport report_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw parse_error(std::string("report: ") + e.what());
    }
    RunReport report;
    try {
        if (j.value("version", std::string()) != "stir-report/1") {
            throw version_error("report: unsupported version");
        }
        report.mode = run_mode_from_string(j.at("mode").get<std::string>());
        if (j.contains("config")) report.config_json = j.at("config").dump(2);
        for (const auto& ej : j.at("examples")) {
            ExampleReport ex;
            ex.id = ej.at("id").get<std::string>();
            ex.correct = ej.at("correct").get<bool>();
            ex.failed = ej.value("failed", false);
            ex.gen_tokens = ej.at("gen_tokens").get<long>();
            ex.probe_tokens = ej.at("probe_tokens").get<long>();
            ex.total_tokens = ej.at("total_tokens").get<long>();
            if (ej.contains("decisions")) {
                for (const auto& dj : ej.at("decisions")) {
                    ex.decisions.push_back(decision_from_json(dj));
                }
            }
            report.examples.push_back(std::move(ex));
        }
    } catch (const json::exception& e) {
        throw parse_error(std::string("report: ") + e.what());
    }
    report.aggregates = compute_aggregates(report.examples);
    return report;
}

void save_report(const RunReport& report, const std::string& path) {
    write_text(path, report_to_json_text(report));
}

RunReport load_report(const std::string& path) { return report_from_json_text(read_text(path)); }

std::string evaluate(const RunReport& report) {
    if (report.examples.empty()) throw contract_violation("evaluate: empty report");
    const Aggregates& a = report.aggregates;
    char buf[512];
    std::ostringstream out;
    out << "mode              " << to_string(report.mode) << '\n';
    std::snprintf(buf, sizeof(buf), "examples          %d (%d failed)\n", a.examples, a.failed);
    out << buf;
    std::snprintf(buf, sizeof(buf), "accuracy          %.2f%%\n", 100.0 * a.accuracy);
    out << buf;
    std::snprintf(buf, sizeof(buf), "mean tokens       %.2f\n", a.mean_tokens);
    out << buf;
    std::snprintf(buf, sizeof(buf), "probe overhead    %.2f%%\n", 100.0 * a.overhead_ratio);
    out << buf;
    std::snprintf(buf, sizeof(buf), "intervention rate %.2f%%\n", 100.0 * a.intervention_rate);
    out << buf;
    std::snprintf(buf, sizeof(buf), "abstention rate   %.2f%%\n", 100.0 * a.abstention_rate);
    out << buf;
    return out.str();
}

// ---------------------------------------------------------------------------
// Runners
// ---------------------------------------------------------------------------

OfflineResult run_offline(const std::vector<Example>& dataset, Backend& backend,
                          const Config& config) {
    config.validate();
    InductionResult induced = induce_dataset(dataset, backend, config);
    if (induced.candidates.empty()) {
        throw error("no contrastive signal found");
    }
    ToolLibrary selected = greedy_select(induced.candidates, config.B, config.lambda,
                                         config.epsilon, config.diversity_selection);
    OfflineResult result;
    result.library = finalize(std::move(selected));
    result.candidate_count = induced.candidates.entries.size();
    result.prompts_skipped = induced.prompts_skipped;
    result.objective =
        joint_utility(result.library.entries, config.lambda, config.epsilon);
    return result;
}

RunReport run_online(const std::vector<Example>& dataset, const ToolLibrary& library,
                     Backend& backend, const Config& config, RunMode mode,
                     const std::optional<LatentVector>& static_vector) {
    config.validate();
    if (!library.finalized) throw contract_violation("run_online: library not finalized");
    if (!library.empty() && library.dim != backend.dim()) {
        throw backend_error(backend_error::kind::dim_mismatch,
                            "run_online: library dim does not match backend");
    }

    LatentVector v_static;
    if (mode == RunMode::static_steering) {
        if (static_vector.has_value()) {
            v_static = *static_vector;
        } else {
            // single global direction: mean of the library's correction impulses
            std::vector<LatentVector> impulses;
            for (const auto& e : library.entries) {
                if (e.kind == ToolKind::correction) impulses.push_back(e.impulse);
            }
            if (impulses.empty()) {
                v_static = LatentVector(static_cast<size_t>(backend.dim()), 0.0);
            } else {
                v_static = centroid(impulses);
            }
        }
        if (v_static.size() != static_cast<size_t>(backend.dim())) {
            throw backend_error(backend_error::kind::dim_mismatch,
                                "run_online: static vector dimension mismatch");
        }
    }

    Controller controller(library, config, backend);
    std::unordered_map<int64_t, const ToolEntry*> by_id;
    for (const auto& e : library.entries) by_id[e.id] = &e;

    std::vector<ExampleReport> reports(dataset.size());
    parallel_for(dataset.size(), config.jobs, [&](size_t i) {
        const Example& ex = dataset[i];
        ExampleReport& rep = reports[i];
        rep.id = ex.id;

        CaptureSpec spec;
        spec.layer = config.capture_layer(backend.num_layers());
        spec.delimiter = config.delimiter;
        spec.max_tokens = config.max_tokens;
        spec.temperature = config.temperature;
        spec.seed = derive_seed(config.seed, hash_str(ex.id), 0x6f6e6c69);

        try {
            auto session = backend.begin_session(ex.prompt, spec);
            int checkpoint = 0;
            while (true) {
                SegmentStep step = session->next_segment();
                if (step.done) break;
                ++checkpoint;
                if (mode == RunMode::static_steering) {
                    session->inject(v_static, config.k_scale * 1.0);
                    DecisionRecord rec;
                    rec.checkpoint = checkpoint;
                    rec.decision.action = DecisionAction::inject;
                    rec.decision.reason = DecisionReason::committed;
                    rec.decision.strength = config.k_scale * 1.0;
                    rep.decisions.push_back(rec);
                } else if (mode == RunMode::stir) {
                    Decision d = controller.decide(step.checkpoint_state, *session);
                    rep.probe_tokens += d.probe_tokens;
                    if (d.action == DecisionAction::inject) {
                        const ToolEntry* entry = by_id.at(*d.entry_id);
                        session->inject(entry->impulse, d.strength);
                    }
                    rep.decisions.push_back({checkpoint, std::move(d)});
                }
            }
            rep.gen_tokens = session->tokens_generated();
            rep.correct = answer_matches(session->text(), ex.answer);
        } catch (const backend_error&) {
            rep.failed = true;
            rep.correct = false;
        }
        rep.total_tokens = rep.gen_tokens + rep.probe_tokens;
    });

    std::sort(reports.begin(), reports.end(),
              [](const ExampleReport& a, const ExampleReport& b) { return a.id < b.id; });

    RunReport report;
    report.mode = mode;
    report.config_json = config_to_json_text(config);
    report.examples = std::move(reports);
    report.aggregates = compute_aggregates(report.examples);
    return report;
}

std::vector<SweepPoint> sweep(SweepParam param, const std::vector<double>& values,
                              const Config& config, const std::vector<Example>& dataset,
                              Backend& backend, RunMode mode) {
    if (values.empty()) throw contract_violation("sweep: no values");
    std::vector<SweepPoint> points;
    points.reserve(values.size());

    if (param == SweepParam::k_scale) {
        OfflineResult offline = run_offline(dataset, backend, config);
        for (double v : values) {
            Config c = config;
            c.k_scale = v;
            SweepPoint p;
            p.value = v;
            p.report = run_online(dataset, offline.library, backend, c, mode);
            points.push_back(std::move(p));
        }
        return points;
    }

    for (double v : values) {
        Config c = config;
        c.layer_depth = v; // capture moves: the offline stage must re-run
        c.validate();
        OfflineResult offline = run_offline(dataset, backend, c);
        SweepPoint p;
        p.value = v;
        p.report = run_online(dataset, offline.library, backend, c, mode);
        points.push_back(std::move(p));
    }
    return points;
}

std::string sweep_table(const std::vector<SweepPoint>& points, const std::string& param_name) {
    std::ostringstream out;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-12s %-10s %-12s %-10s\n", param_name.c_str(), "accuracy",
                  "mean_tokens", "overhead");
    out << buf;
    for (const auto& p : points) {
        std::snprintf(buf, sizeof(buf), "%-12g %-10.4f %-12.2f %-10.4f\n", p.value,
                      p.report.aggregates.accuracy, p.report.aggregates.mean_tokens,
                      p.report.aggregates.overhead_ratio);
        out << buf;
    }
    return out.str();
}

} // namespace stir
