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

#include "iort/session.hpp"

#include <chrono>

#include <spdlog/spdlog.h>

namespace iort {

using broker::Broker;
using protocol::ClientKind;
using protocol::Envelope;
using protocol::Notification;

ClientSession::ClientSession(Broker& broker, std::shared_ptr<broker::Sink> sink)
    : broker_(broker), sink_(std::move(sink)), id_(broker_.open_session(sink_)) {}

ClientSession::~ClientSession() { close(); }

void ClientSession::close() {
    if (closed_) return;
    closed_ = true;
    broker_.close_session(id_);
}

void ClientSession::reply(Notification n) { sink_->push(Envelope{protocol::kVersion, 0, std::move(n)}); }

void ClientSession::error(std::string code, std::string detail, std::optional<std::string> command_id) {
    Notification n;
    n.event = "error";
    n.code = std::move(code);
    n.detail = std::move(detail);
    n.command_id = std::move(command_id);
    reply(std::move(n));
}

void ClientSession::handle_line(std::string_view line) {
    Envelope env;
    try {
        env = protocol::decode(line);
    } catch (const protocol::VersionError& e) {
        return error("version", e.what());
    } catch (const protocol::SchemaError& e) {
        return error("schema", e.what());
    } catch (const protocol::ProtocolError& e) {
        return error("parse", e.what());
    }
    try {
        seq_.check(env.seq);
    } catch (const protocol::SchemaError& e) {
        return error("seq", e.what());
    }
    handle(env);
}

void ClientSession::handle(const Envelope& env) {
    if (closed_) return;
    try {
        std::visit(
            [&](const auto& body) {
                using T = std::decay_t<decltype(body)>;
                if constexpr (std::is_same_v<T, protocol::Register>) {
                    on_register(body);
                } else if constexpr (std::is_same_v<T, protocol::JointCommand>) {
                    on_command(body);
                } else if constexpr (std::is_same_v<T, protocol::Ack>) {
                    on_ack(body);
                } else if constexpr (std::is_same_v<T, protocol::PatternResponse>) {
                    on_response(body);
                } else if constexpr (std::is_same_v<T, protocol::Subscribe>) {
                    broker_.subscribe(id_, body.topics);
                    Notification n;
                    n.event = "subscribed";
                    n.detail = std::to_string(body.topics.size()) + " topics";
                    reply(std::move(n));
                } else if constexpr (std::is_same_v<T, protocol::Notification>) {
                    on_control(body);
                } else {
                    error("unsupported", "clients may not send pattern_prompt");
                }
            },
            env.body);
    } catch (const broker::ConflictError& e) {
        error("conflict", e.what());
    } catch (const broker::NotFoundError& e) {
        error("not_found", e.what());
    } catch (const broker::LeaseError& e) {
        error("lease", e.what());
    } catch (const store::PromptError& e) {
        error("prompt", e.what());
    } catch (const broker::BrokerError& e) {
        error("invalid", e.what());
    } catch (const protocol::ProtocolError& e) {
        error("schema", e.what());
    } catch (const journal::JournalError& e) {
        spdlog::error("journal failure: {}", e.what());
        error("internal", e.what());
    }
}

void ClientSession::on_register(const protocol::Register& r) {
    broker_.register_client(id_, r.kind, r.id);
    kind_ = r.kind;
    client_id_ = r.id;
    Notification n;
    n.event = "registered";
    (r.kind == ClientKind::robot ? n.arm_id : n.operator_id) = r.id;
    reply(std::move(n));
}

void ClientSession::send_receipt(const broker::Receipt& r) {
    Notification n;
    n.event = "receipt";
    n.queue = r.queue;
    n.record_id = r.record_id;
    n.position = r.position;
    n.command_id = r.command_id;
    reply(std::move(n));
}

void ClientSession::on_command(const protocol::JointCommand& cmd) {
    if (kind_ != ClientKind::operator_) {
        return error("forbidden", "commands require a registered operator session", cmd.id);
    }
    try {
        send_receipt(broker_.submit_command(client_id_, cmd));
    } catch (const broker::ValidationError& e) {
        Notification n;
        n.event = "rejected";
        n.command_id = e.command_id();
        n.violations = e.violations();
        n.detail = e.what();
        reply(std::move(n));
    }
}

void ClientSession::on_ack(const protocol::Ack& ack) {
    if (kind_ != ClientKind::robot) return error("forbidden", "acks require a registered robot session");
    try {
        broker_.robot_ack(id_, ack);
    } catch (const broker::LeaseError& e) {
        error("lease", e.what(), ack.command_id);
    }
}

void ClientSession::on_response(const protocol::PatternResponse& r) {
    if (kind_ != ClientKind::operator_) return error("forbidden", "only operators answer prompts");
    for (const auto& receipt : broker_.respond_prompt(client_id_, r)) send_receipt(receipt);
}

void ClientSession::on_control(const Notification& n) {
    if (!kind_) return error("forbidden", "register first");
    if (n.event == "next") {
        const auto queue = n.queue.value_or(kind_ == ClientKind::robot ? broker::command_queue(client_id_) : "");
        broker_.wait_next(id_, queue, n.lease_ms.value_or(broker_.options().lease_ms));
    } else if (n.event == "settle") {
        if (!n.queue || !n.record_id) throw protocol::SchemaError("body.record_id", "settle needs queue and record_id");
        broker_.ack_record(*n.queue, broker_.consumer_id(id_), *n.record_id);
    } else if (n.event == "end_sequence") {
        if (kind_ != ClientKind::operator_) return error("forbidden", "only operators end sequences");
        if (!n.arm_id) throw protocol::SchemaError("body.arm_id", "end_sequence needs arm_id");
        broker_.end_sequence(*n.arm_id, client_id_);
    } else {
        error("unsupported", "unknown control event '" + n.event + "'");
    }
}

// ---------------------------------------------------------------------------

bool Inbox::push(protocol::Envelope env) {
    {
        std::lock_guard lock(mutex_);
        if (closed_) return false;
        items_.push_back(std::move(env));
    }
    cv_.notify_one();
    return true;
}

std::optional<protocol::Envelope> Inbox::pop(std::int64_t timeout_ms) {
    std::unique_lock lock(mutex_);
    if (timeout_ms > 0) {
        cv_.wait_for(lock, std::chrono::milliseconds(timeout_ms), [&] { return !items_.empty() || closed_; });
    }
    if (items_.empty()) return std::nullopt;
    auto env = std::move(items_.front());
    items_.pop_front();
    return env;
}

void Inbox::close() {
    {
        std::lock_guard lock(mutex_);
        closed_ = true;
    }
    cv_.notify_all();
}

bool Inbox::closed() const {
    std::lock_guard lock(mutex_);
    return closed_;
}

std::size_t Inbox::size() const {
    std::lock_guard lock(mutex_);
    return items_.size();
}

class LocalConnection::InboxSink final : public broker::Sink {
public:
    explicit InboxSink(std::shared_ptr<Inbox> inbox) : inbox_(std::move(inbox)) {}
    bool push(protocol::Envelope env) override {
        env.seq = ++seq_;
        return inbox_->push(std::move(env));
    }

private:
    std::shared_ptr<Inbox> inbox_;
    std::atomic<std::uint64_t> seq_{0};
};

LocalConnection::LocalConnection(Broker& broker)
    : inbox_(std::make_shared<Inbox>()),
      session_(std::make_unique<ClientSession>(broker, std::make_shared<InboxSink>(inbox_))) {}

LocalConnection::~LocalConnection() { close(); }

void LocalConnection::send(protocol::Envelope env) {
    std::lock_guard lock(mutex_);
    if (!session_) throw std::runtime_error("connection closed");
    env.seq = ++out_seq_;
    session_->handle(env);
}

std::optional<protocol::Envelope> LocalConnection::receive(std::int64_t timeout_ms) {
    return inbox_->pop(timeout_ms);
}

bool LocalConnection::is_open() const {
    std::lock_guard lock(mutex_);
    return session_ != nullptr;
}

void LocalConnection::close() {
    std::unique_ptr<ClientSession> session;
    {
        std::lock_guard lock(mutex_);
        session = std::move(session_);
    }
    session.reset();
    inbox_->close();
}

}  // namespace iort
