#include "stir/mock_server.hpp"

#include "stir/remote.hpp"

#include <deque>
#include <httplib.h>
#include <json.hpp>
#include <mutex>
#include <thread>
#include <unordered_map>

namespace stir {

using nlohmann::json;

namespace {

struct CachedRollout {
    std::string prompt;
    CaptureSpec spec;
    std::vector<Injection> injections;
};

void reply_error(httplib::Response& res, int status, const std::string& code,
                 const std::string& message) {
    res.status = status;
    res.set_content(json{{"code", code}, {"message", message}}.dump(), "application/json");
}

} // namespace

struct MockServer::Impl {
    SyntheticBackend backend;
    int snapshot_capacity;
    httplib::Server server;
    std::thread thread;
    bool running = false;

    std::mutex mutex;
    std::unordered_map<std::string, CachedRollout> sessions;
    std::unordered_map<std::string, SyntheticSnapshotState> snapshots;
    std::deque<std::string> snapshot_order;
    uint64_t next_snapshot = 0;

    explicit Impl(EnvSpec spec, int capacity)
        : backend(std::move(spec)), snapshot_capacity(capacity) {
        server.set_keep_alive_timeout(1); // idle sockets must not stall shutdown
        wire_routes();
    }

    void wire_routes() {
        server.Get("/v1/meta", [this](const httplib::Request&, httplib::Response& res) {
            json j{{"dim", backend.dim()}, {"num_layers", backend.num_layers()}};
            res.set_content(j.dump(), "application/json");
        });

        server.Post("/v1/rollout", [this](const httplib::Request& req, httplib::Response& res) {
            handle_rollout(req, res);
        });
        server.Post("/v1/snapshot", [this](const httplib::Request& req, httplib::Response& res) {
            handle_snapshot(req, res);
        });
        server.Post("/v1/probe", [this](const httplib::Request& req, httplib::Response& res) {
            handle_probe(req, res);
        });
    }

    void handle_rollout(const httplib::Request& req, httplib::Response& res) {
        std::string prompt;
        CaptureSpec spec;
        std::vector<Injection> injections;
        try {
            auto j = json::parse(req.body);
            prompt = j.at("prompt").get<std::string>();
            spec.temperature = j.at("temperature").get<double>();
            spec.max_tokens = j.at("max_tokens").get<int>();
            spec.seed = j.at("seed").get<uint64_t>();
            spec.layer = j.at("capture").at("layer").get<int>();
            spec.delimiter = j.at("capture").at("delimiter").get<std::string>();
            if (j.contains("injections")) {
                for (const auto& ij : j.at("injections")) {
                    Injection inj;
                    inj.checkpoint = ij.at("checkpoint").get<int>();
                    inj.impulse = ij.at("impulse").get<LatentVector>();
                    inj.strength = ij.at("strength").get<double>();
                    injections.push_back(std::move(inj));
                }
            }
        } catch (const json::exception& e) {
            reply_error(res, 400, "bad_request", e.what());
            return;
        }
        for (const auto& inj : injections) {
            if (inj.impulse.size() != static_cast<size_t>(backend.dim())) {
                reply_error(res, 400, "dim_mismatch",
                            "injection impulse has dimension " +
                                std::to_string(inj.impulse.size()) + ", model is " +
                                std::to_string(backend.dim()));
                return;
            }
        }

        BackendRollout rollout;
        try {
            rollout = backend.generate_rollout(prompt, spec, injections);
        } catch (const std::exception& e) {
            reply_error(res, 500, "backend_failure", e.what());
            return;
        }

        {
            std::lock_guard<std::mutex> lock(mutex);
            sessions[session_digest(prompt, spec, injections)] = {prompt, spec, injections};
        }

        json j;
        j["segments"] = rollout.segments;
        j["checkpoint_states"] = rollout.checkpoint_states;
        j["token_count"] = rollout.token_count;
        j["text"] = rollout.text;
        res.set_content(j.dump(), "application/json");
    }

    void handle_snapshot(const httplib::Request& req, httplib::Response& res) {
        std::string session;
        long position = 0;
        try {
            auto j = json::parse(req.body);
            session = j.at("session").get<std::string>();
            position = j.at("position").get<long>();
        } catch (const json::exception& e) {
            reply_error(res, 400, "bad_request", e.what());
            return;
        }

        CachedRollout cached;
        {
            std::lock_guard<std::mutex> lock(mutex);
            auto it = sessions.find(session);
            if (it == sessions.end()) {
                reply_error(res, 404, "unknown_session",
                            "no rollout recorded for session " + session);
                return;
            }
            cached = it->second;
        }

        // deterministic replay up to the requested checkpoint position;
        // the snapshot is taken before that checkpoint's own injections
        auto sess = backend.begin_session(cached.prompt, cached.spec);
        int checkpoint = 0;
        bool found = false;
        GenerationSnapshot snap;
        while (true) {
            SegmentStep step;
            try {
                step = sess->next_segment();
            } catch (const std::exception& e) {
                reply_error(res, 500, "backend_failure", e.what());
                return;
            }
            if (step.done) break;
            ++checkpoint;
            if (sess->tokens_generated() == position) {
                snap = sess->snapshot();
                found = true;
                break;
            }
            for (const auto& inj : cached.injections) {
                if (inj.checkpoint == checkpoint) sess->inject(inj.impulse, inj.strength);
            }
        }
        if (!found) {
            reply_error(res, 400, "bad_position",
                        "position " + std::to_string(position) + " is not a checkpoint");
            return;
        }

        auto payload = static_cast<const SyntheticSnapshotState*>(snap.handle.get());
        std::string id;
        {
            std::lock_guard<std::mutex> lock(mutex);
            id = "snap-" + std::to_string(next_snapshot++);
            snapshots[id] = *payload;
            snapshot_order.push_back(id);
            while (static_cast<int>(snapshot_order.size()) > snapshot_capacity) {
                snapshots.erase(snapshot_order.front());
                snapshot_order.pop_front();
            }
        }
        res.set_content(json{{"snapshot_id", id}}.dump(), "application/json");
    }

    void handle_probe(const httplib::Request& req, httplib::Response& res) {
        std::string snapshot_id;
        int t_probe = 0;
        std::vector<ProbeArm> arms;
        try {
            auto j = json::parse(req.body);
            snapshot_id = j.at("snapshot_id").get<std::string>();
            t_probe = j.at("t_probe").get<int>();
            for (const auto& aj : j.at("arms")) {
                ProbeArm arm;
                arm.impulse = aj.at("impulse").get<LatentVector>();
                arm.strength = aj.at("strength").get<double>();
                if (aj.contains("force_tokens")) {
                    arm.force_tokens = aj.at("force_tokens").get<std::vector<int>>();
                }
                arms.push_back(std::move(arm));
            }
        } catch (const json::exception& e) {
            reply_error(res, 400, "bad_request", e.what());
            return;
        }
        if (t_probe < 1) {
            reply_error(res, 400, "bad_request", "t_probe must be >= 1");
            return;
        }
        for (const auto& arm : arms) {
            if (!arm.impulse.empty() &&
                arm.impulse.size() != static_cast<size_t>(backend.dim())) {
                reply_error(res, 400, "dim_mismatch", "probe arm impulse dimension mismatch");
                return;
            }
        }

        SyntheticSnapshotState snap;
        {
            std::lock_guard<std::mutex> lock(mutex);
            auto it = snapshots.find(snapshot_id);
            if (it == snapshots.end()) {
                reply_error(res, 410, "stale_snapshot",
                            "snapshot " + snapshot_id + " is gone");
                return;
            }
            snap = it->second;
        }

        std::vector<ArmResult> results;
        try {
            results = run_probe_arms(backend.env(), snap, arms, t_probe);
        } catch (const std::exception& e) {
            reply_error(res, 500, "backend_failure", e.what());
            return;
        }
        json j;
        j["arms"] = json::array();
        for (const auto& r : results) {
            j["arms"].push_back(json{{"tokens", r.tokens}, {"logprobs", r.logprobs}});
        }
        res.set_content(j.dump(), "application/json");
    }
};

MockServer::MockServer(EnvSpec spec, int snapshot_capacity)
    : impl_(std::make_unique<Impl>(std::move(spec), snapshot_capacity)) {}

MockServer::~MockServer() { stop(); }

void MockServer::start(int port) {
    if (impl_->running) throw error("mock server already running");
    if (port == 0) {
        port_ = impl_->server.bind_to_any_port("127.0.0.1");
    } else {
        if (!impl_->server.bind_to_port("127.0.0.1", port)) {
            throw error("mock server: cannot bind port " + std::to_string(port));
        }
        port_ = port;
    }
    impl_->running = true;
    impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
}

void MockServer::stop() {
    if (!impl_ || !impl_->running) return;
    impl_->server.stop();
    if (impl_->thread.joinable()) impl_->thread.join();
    impl_->running = false;
}

std::string MockServer::base_url() const {
    return "http://127.0.0.1:" + std::to_string(port_);
}

void MockServer::run(int port) {
    port_ = port;
    impl_->running = true;
    impl_->server.listen("0.0.0.0", port);
    impl_->running = false;
}

} // namespace stir
