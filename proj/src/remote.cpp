#include "stir/remote.hpp"

#include "stir/rng.hpp"

#include <httplib.h>
#include <map>
#include <json.hpp>
#include <optional>
#include <sstream>

namespace stir {

using nlohmann::json;

namespace {

json injection_to_json(const Injection& inj) {
    return json{{"checkpoint", inj.checkpoint}, {"impulse", inj.impulse},
                {"strength", inj.strength}};
}

json rollout_request_body(const std::string& prompt, const CaptureSpec& spec,
                          const std::vector<Injection>& injections) {
    json body;
    body["prompt"] = prompt;
    body["temperature"] = spec.temperature;
    body["max_tokens"] = spec.max_tokens;
    body["seed"] = spec.seed;
    body["capture"] = {{"layer", spec.layer}, {"delimiter", spec.delimiter}};
    body["injections"] = json::array();
    for (const auto& inj : injections) body["injections"].push_back(injection_to_json(inj));
    return body;
}

[[noreturn]] void throw_http_error(int status, const std::string& body) {
    std::string code = "http_" + std::to_string(status);
    std::string message = body;
    try {
        auto j = json::parse(body);
        code = j.value("code", code);
        message = j.value("message", message);
    } catch (const json::exception&) {
        // non-JSON error body: report as-is
    }
    backend_error::kind kind = backend_error::kind::protocol;
    if (code == "dim_mismatch") kind = backend_error::kind::dim_mismatch;
    if (code == "stale_snapshot" || code == "unknown_snapshot") {
        kind = backend_error::kind::stale_snapshot;
    }
    throw backend_error(kind, "remote: " + code + ": " + message);
}

long count_words(const std::string& text) {
    long words = 0;
    bool in_word = false;
    for (char c : text) {
        bool space = (c == ' ' || c == '\t' || c == '\n');
        if (!space && !in_word) ++words;
        in_word = !space;
    }
    return words;
}

struct RemoteSnapshotRef {
    std::string snapshot_id;
};

} // namespace

std::string session_digest(const std::string& prompt, const CaptureSpec& spec,
                           const std::vector<Injection>& injections) {
    // canonical request body: key order is fixed by construction above
    json body = rollout_request_body(prompt, spec, injections);
    uint64_t h = hash_str(body.dump());
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

struct RemoteBackend::ClientPool {
    std::string host;
    int port = 0;
    std::mutex mutex;
    std::map<std::thread::id, std::unique_ptr<httplib::Client>> by_thread;

    httplib::Client& get() {
        std::lock_guard<std::mutex> lock(mutex);
        auto& slot = by_thread[std::this_thread::get_id()];
        if (!slot) {
            slot = std::make_unique<httplib::Client>(host, port);
            slot->set_connection_timeout(5, 0);
            slot->set_read_timeout(60, 0);
            slot->set_keep_alive(true);
        }
        return *slot;
    }
};

RemoteBackend::~RemoteBackend() = default;

RemoteBackend::RemoteBackend(std::string base_url, int dim, int num_layers)
    : base_url_(std::move(base_url)), dim_(dim), num_layers_(num_layers) {
    std::string rest = base_url_;
    auto scheme = rest.find("://");
    if (scheme != std::string::npos) rest = rest.substr(scheme + 3);
    while (!rest.empty() && rest.back() == '/') rest.pop_back();
    auto colon = rest.find(':');
    if (colon == std::string::npos) {
        host_ = rest;
        port_ = 80;
    } else {
        host_ = rest.substr(0, colon);
        port_ = std::stoi(rest.substr(colon + 1));
    }
    if (host_.empty()) throw contract_violation("remote: empty base url");
    pool_ = std::make_unique<ClientPool>();
    pool_->host = host_;
    pool_->port = port_;
    if (dim_ <= 0 || num_layers_ <= 0) fetch_metadata();
}

std::string RemoteBackend::post_json(const std::string& path, const std::string& body) {
    auto& client = pool_->get();
    auto res = client.Post(path, body, "application/json");
    if (!res) {
        // the server may have dropped the idle connection; retry once fresh
        client.stop();
        res = client.Post(path, body, "application/json");
    }
    if (!res) {
        throw backend_error(backend_error::kind::transport,
                            "remote: cannot reach " + host_ + ":" + std::to_string(port_) + path);
    }
    if (res->status < 200 || res->status >= 300) throw_http_error(res->status, res->body);
    return res->body;
}

void RemoteBackend::fetch_metadata() {
    auto& client = pool_->get();
    auto res = client.Get("/v1/meta");
    if (!res) {
        client.stop();
        res = client.Get("/v1/meta");
    }
    if (!res) {
        throw backend_error(backend_error::kind::transport,
                            "remote: cannot reach " + host_ + ":" + std::to_string(port_));
    }
    if (res->status < 200 || res->status >= 300) throw_http_error(res->status, res->body);
    try {
        auto j = json::parse(res->body);
        if (dim_ <= 0) dim_ = j.at("dim").get<int>();
        if (num_layers_ <= 0) num_layers_ = j.at("num_layers").get<int>();
    } catch (const json::exception& e) {
        throw backend_error(backend_error::kind::protocol,
                            std::string("remote: bad metadata: ") + e.what());
    }
}

BackendRollout RemoteBackend::generate_rollout(const std::string& prompt, const CaptureSpec& spec,
                                               const std::vector<Injection>& injections) {
    json body = rollout_request_body(prompt, spec, injections);
    std::string response = post_json("/v1/rollout", body.dump());
    try {
        auto j = json::parse(response);
        BackendRollout out;
        out.segments = j.at("segments").get<std::vector<std::string>>();
        out.checkpoint_states = j.at("checkpoint_states").get<std::vector<LatentVector>>();
        out.token_count = j.at("token_count").get<long>();
        out.text = j.at("text").get<std::string>();
        if (out.segments.empty() ||
            out.checkpoint_states.size() + 1 != out.segments.size()) {
            throw backend_error(backend_error::kind::protocol,
                                "remote: rollout shape mismatch");
        }
        for (const auto& s : out.checkpoint_states) {
            if (s.size() != static_cast<size_t>(dim_)) {
                throw backend_error(backend_error::kind::dim_mismatch,
                                    "remote: checkpoint state dimension mismatch");
            }
        }
        return out;
    } catch (const json::exception& e) {
        throw backend_error(backend_error::kind::protocol,
                            std::string("remote: bad rollout response: ") + e.what());
    }
}

std::string RemoteBackend::request_snapshot(const std::string& session, long position) {
    json body{{"session", session}, {"position", position}};
    std::string response = post_json("/v1/snapshot", body.dump());
    try {
        return json::parse(response).at("snapshot_id").get<std::string>();
    } catch (const json::exception& e) {
        throw backend_error(backend_error::kind::protocol,
                            std::string("remote: bad snapshot response: ") + e.what());
    }
}

std::vector<ArmResult> RemoteBackend::fork_probe(const GenerationSnapshot& snapshot,
                                                 const std::vector<ProbeArm>& arms, int t_probe) {
    auto ref = static_cast<const RemoteSnapshotRef*>(snapshot.handle.get());
    if (ref == nullptr) {
        throw backend_error(backend_error::kind::stale_snapshot, "remote: empty snapshot handle");
    }
    json body;
    body["snapshot_id"] = ref->snapshot_id;
    body["t_probe"] = t_probe;
    body["arms"] = json::array();
    for (const auto& arm : arms) {
        json a{{"impulse", arm.impulse}, {"strength", arm.strength}};
        if (!arm.force_tokens.empty()) a["force_tokens"] = arm.force_tokens;
        body["arms"].push_back(std::move(a));
    }
    std::string response = post_json("/v1/probe", body.dump());
    try {
        auto j = json::parse(response);
        std::vector<ArmResult> out;
        for (const auto& aj : j.at("arms")) {
            ArmResult res;
            res.tokens = aj.at("tokens").get<std::vector<int>>();
            res.logprobs = aj.at("logprobs").get<std::vector<double>>();
            out.push_back(std::move(res));
        }
        return out;
    } catch (const json::exception& e) {
        throw backend_error(backend_error::kind::protocol,
                            std::string("remote: bad probe response: ") + e.what());
    }
}

// Replay-emulated incremental session. Injections only ever land at or after
// the current checkpoint, so the re-requested rollout reproduces the served
// prefix exactly under the fixed seed.
class RemoteSession final : public GenerationSession {
  public:
    RemoteSession(RemoteBackend& backend, std::string prompt, CaptureSpec spec)
        : backend_(backend), prompt_(std::move(prompt)), spec_(std::move(spec)) {}

    SegmentStep next_segment() override {
        ensure_cache();
        if (served_ >= cache_->segments.size()) throw error("session: exhausted");
        SegmentStep step;
        step.text = cache_->segments[served_];
        bool last = (served_ + 1 == cache_->segments.size());
        if (last) {
            step.done = true;
            step.tokens = cache_->token_count - tokens_served_;
        } else {
            step.checkpoint_state = cache_->checkpoint_states[served_];
            step.tokens = count_words(step.text) + 1; // words plus the delimiter token
        }
        tokens_served_ += step.tokens;
        ++served_;
        return step;
    }

    void inject(const LatentVector& impulse, double strength) override {
        if (impulse.size() != static_cast<size_t>(backend_.dim())) {
            throw backend_error(backend_error::kind::dim_mismatch,
                                "remote: injection dimension mismatch");
        }
        Injection inj;
        inj.checkpoint = static_cast<int>(served_); // current checkpoint ordinal
        inj.impulse = impulse;
        inj.strength = strength;
        injections_.push_back(std::move(inj));
        cache_.reset(); // future segments must reflect the new schedule
    }

    GenerationSnapshot snapshot() const override {
        auto* self = const_cast<RemoteSession*>(this);
        self->ensure_cache();
        std::string session = session_digest(prompt_, spec_, injections_);
        auto ref = std::make_shared<RemoteSnapshotRef>();
        ref->snapshot_id = self->backend_.request_snapshot(session, tokens_served_);
        GenerationSnapshot snap;
        snap.session_id = session;
        snap.position = tokens_served_;
        snap.handle = std::shared_ptr<const void>(ref, ref.get());
        return snap;
    }

    long tokens_generated() const override { return tokens_served_; }

    std::string text() const override {
        std::string out;
        if (!cache_) return out;
        for (size_t i = 0; i < served_ && i < cache_->segments.size(); ++i) {
            if (i > 0) out += spec_.delimiter;
            out += cache_->segments[i];
        }
        return out;
    }

  private:
    RemoteBackend& backend_;
    std::string prompt_;
    CaptureSpec spec_;
    std::vector<Injection> injections_;
    std::optional<BackendRollout> cache_;
    size_t served_ = 0;
    long tokens_served_ = 0;

    void ensure_cache() {
        if (!cache_) cache_ = backend_.generate_rollout(prompt_, spec_, injections_);
    }
};

std::unique_ptr<GenerationSession> RemoteBackend::begin_session(const std::string& prompt,
                                                                const CaptureSpec& spec) {
    return std::make_unique<RemoteSession>(*this, prompt, spec);
}

} // namespace stir
