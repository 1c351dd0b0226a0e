// Copyright 2026 The IoRT Arm Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Network front ends for a broker: the NDJSON stream endpoint used by
// agents and operators, and the HTTP/WebSocket gateway used by the console.
// Everything runs on one I/O thread plus a tick thread that drives lease
// expiry and idle closes.

#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

#include "iort/broker.hpp"
#include "iort/session.hpp"

namespace iort::net {

class NetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ServerOptions {
    std::string bind_address = "0.0.0.0";
    std::uint16_t stream_port = 7450;  // 0 = ephemeral
    std::uint16_t http_port = 7451;    // 0 = ephemeral
    bool enable_http = true;
    // Frames queued for one client before it is considered stuck and dropped.
    std::size_t max_outbox = 8192;
    std::size_t max_line_bytes = 1 << 20;
    std::int64_t tick_ms = 100;
};

class Server {
public:
    Server(broker::Broker& broker, ServerOptions options);
    ~Server();
    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    /// Binds both listeners and starts the threads. Throws NetError when a
    /// port cannot be bound.
    void start();
    /// Closes every connection and joins the threads. Idempotent.
    void stop();

    std::uint16_t stream_port() const;
    std::uint16_t http_port() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// "host:port", "host" or ":port". Throws std::invalid_argument.
std::pair<std::string, std::uint16_t> parse_endpoint(std::string_view text, std::uint16_t default_port);

/// Blocking client for the stream endpoint. A reader thread decodes inbound
/// lines into an inbox; undecodable lines are logged and skipped.
std::unique_ptr<Connection> connect(const std::string& host, std::uint16_t port);

// Gateway payloads, shared with tests and the CLI.
std::string arms_json(const broker::Broker& broker);
std::string patterns_json(const broker::Broker& broker, const std::string& arm_id);

}  // namespace iort::net
