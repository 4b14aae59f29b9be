#pragma once

#include "stir/backend.hpp"

#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace stir {

// Deterministic digest identifying a (prompt, sampling setup, injection
// schedule) generation; the client and server derive it identically so
// snapshot requests can name a previously generated rollout.
std::string session_digest(const std::string& prompt, const CaptureSpec& spec,
                           const std::vector<Injection>& injections);

// HTTP client for a remote model server speaking the rollout/snapshot/probe
// protocol. Incremental sessions are emulated by seeded replay: every
// injection re-requests the rollout with the grown schedule, and seeded
// determinism keeps the already-served prefix bit-identical.
class RemoteBackend : public Backend {
  public:
    // dim/num_layers <= 0 fetches them from the server's metadata endpoint.
    explicit RemoteBackend(std::string base_url, int dim = 0, int num_layers = 0);
    ~RemoteBackend() override;

    int dim() const override { return dim_; }
    int num_layers() const override { return num_layers_; }

    BackendRollout generate_rollout(const std::string& prompt, const CaptureSpec& spec,
                                    const std::vector<Injection>& injections = {}) override;

    std::unique_ptr<GenerationSession> begin_session(const std::string& prompt,
                                                     const CaptureSpec& spec) override;

    std::vector<ArmResult> fork_probe(const GenerationSnapshot& snapshot,
                                      const std::vector<ProbeArm>& arms, int t_probe) override;

    // POST /v1/snapshot for a named session position.
    std::string request_snapshot(const std::string& session, long position);

    const std::string& base_url() const { return base_url_; }

  private:
    std::string base_url_;
    std::string host_;
    int port_ = 80;
    int dim_ = 0;
    int num_layers_ = 0;

    // one persistent keep-alive connection per worker thread; short-lived
    // sockets exhaust the accept queue under concurrent sessions
    struct ClientPool;
    std::unique_ptr<ClientPool> pool_;

    std::string post_json(const std::string& path, const std::string& body);
    void fetch_metadata();
    friend class RemoteSession;
};

} // namespace stir
