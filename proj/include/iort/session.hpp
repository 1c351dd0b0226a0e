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

// Transport-independent client session: turns inbound envelopes into broker
// calls and replies through the session's sink. The TCP server, the
// WebSocket gateway and the in-process connection all drive one of these.

#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>

#include "iort/broker.hpp"
#include "iort/protocol.hpp"

namespace iort {

class ClientSession {
public:
    ClientSession(broker::Broker& broker, std::shared_ptr<broker::Sink> sink);
    ~ClientSession();
    ClientSession(const ClientSession&) = delete;
    ClientSession& operator=(const ClientSession&) = delete;

    /// Decodes one wire line and checks its `seq`. Malformed input is
    /// answered with an `error` notification; the session stays usable.
    void handle_line(std::string_view line);
    /// Already-decoded envelope from a trusted in-process caller.
    void handle(const protocol::Envelope& env);

    /// Idempotent. Releases everything the broker holds for this session.
    void close();

    broker::SessionId id() const { return id_; }

private:
    void reply(protocol::Notification n);
    void error(std::string code, std::string detail, std::optional<std::string> command_id = std::nullopt);
    void on_register(const protocol::Register& r);
    void on_command(const protocol::JointCommand& cmd);
    void on_ack(const protocol::Ack& ack);
    void on_response(const protocol::PatternResponse& r);
    void on_control(const protocol::Notification& n);
    void send_receipt(const broker::Receipt& r);

    broker::Broker& broker_;
    std::shared_ptr<broker::Sink> sink_;
    broker::SessionId id_;
    std::optional<protocol::ClientKind> kind_;
    std::string client_id_;
    protocol::SeqTracker seq_;
    bool closed_ = false;
};

/// Bidirectional envelope stream as seen by a client.
class Connection {
public:
    virtual ~Connection() = default;
    /// Assigns the outgoing `seq`. Throws std::runtime_error once closed.
    virtual void send(protocol::Envelope env) = 0;
    /// Waits up to `timeout_ms` (0 = poll) for the next inbound envelope.
    virtual std::optional<protocol::Envelope> receive(std::int64_t timeout_ms) = 0;
    virtual bool is_open() const = 0;
    virtual void close() = 0;
};

/// Thread-safe FIFO of envelopes with a closed flag; the inbox behind
/// in-process and socket connections.
class Inbox {
public:
    bool push(protocol::Envelope env);
    std::optional<protocol::Envelope> pop(std::int64_t timeout_ms);
    void close();
    bool closed() const;
    std::size_t size() const;

private:
    mutable std::mutex mutex_;
    std::condition_variable cv_;
    std::deque<protocol::Envelope> items_;
    bool closed_ = false;
};

/// Client connected to a broker in the same process. Broker pushes land in
/// the inbox synchronously, so a single thread can drive a whole system.
class LocalConnection final : public Connection {
public:
    explicit LocalConnection(broker::Broker& broker);
    ~LocalConnection() override;

    void send(protocol::Envelope env) override;
    std::optional<protocol::Envelope> receive(std::int64_t timeout_ms) override;
    bool is_open() const override;
    void close() override;

    std::size_t pending() const { return inbox_->size(); }

private:
    class InboxSink;
    std::shared_ptr<Inbox> inbox_;
    std::unique_ptr<ClientSession> session_;
    std::uint64_t out_seq_ = 0;
    mutable std::mutex mutex_;
};

}  // namespace iort
