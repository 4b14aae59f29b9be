#pragma once

#include "stir/synthetic.hpp"

#include <memory>
#include <string>

namespace stir {

// Synthetic-environment model server speaking the rollout/snapshot/probe
// protocol. Serves as the contract test double for the remote client and as
// a standalone process via the CLI's serve command.
class MockServer {
  public:
    // snapshot_capacity bounds the snapshot table; older snapshots go stale.
    explicit MockServer(EnvSpec spec, int snapshot_capacity = 256);
    ~MockServer();

    MockServer(const MockServer&) = delete;
    MockServer& operator=(const MockServer&) = delete;

    // Bind and serve on a background thread. port 0 picks a free port.
    void start(int port = 0);
    void stop();

    int port() const { return port_; }
    std::string base_url() const;

    // Serve on the calling thread (CLI path). Returns on stop().
    void run(int port);

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    int port_ = 0;
};

} // namespace stir
