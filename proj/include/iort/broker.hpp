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

// Command broker: per-arm durable queues with lease-based at-least-once
// delivery, best-effort topic push, ack routing, and the learning store.
//
// Every state change is a journal record. Live operations append the record
// and then apply it through the same code path recovery uses, so a replayed
// journal reproduces the live state record for record.

#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "iort/arm_model.hpp"
#include "iort/clock.hpp"
#include "iort/journal.hpp"
#include "iort/pattern_store.hpp"
#include "iort/protocol.hpp"

namespace iort::broker {

using SessionId = std::uint64_t;

/// Outbound half of a client connection. Implementations queue and return
/// immediately; a slow client must never stall the broker. The sink assigns
/// the per-connection `seq`. Returns false when the client is gone.
class Sink {
public:
    virtual ~Sink() = default;
    virtual bool push(protocol::Envelope env) = 0;
};

class BrokerError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConflictError : public BrokerError {
public:
    using BrokerError::BrokerError;
};

class NotFoundError : public BrokerError {
public:
    using BrokerError::BrokerError;
};

class LeaseError : public BrokerError {
public:
    using BrokerError::BrokerError;
};

class RecoveryError : public BrokerError {
public:
    using BrokerError::BrokerError;
};

class ValidationError : public BrokerError {
public:
    ValidationError(std::string command_id, std::vector<protocol::Violation> violations);
    const std::string& command_id() const { return command_id_; }
    const std::vector<protocol::Violation>& violations() const { return violations_; }

private:
    std::string command_id_;
    std::vector<protocol::Violation> violations_;
};

enum class RecordState { ready, leased, done };

struct Lease {
    std::string consumer_id;
    std::int64_t expiry_ms = 0;
};

struct QueueRecord {
    std::uint64_t record_id = 0;
    protocol::Envelope envelope;
    std::int64_t enqueued_at_ms = 0;
    std::uint64_t delivery_count = 0;
    std::optional<Lease> lease;
    RecordState state = RecordState::ready;
};

struct Receipt {
    std::string queue;
    std::uint64_t record_id = 0;
    std::uint64_t position = 0;
    std::string command_id;
};

struct Delivery {
    std::string queue;
    std::uint64_t record_id = 0;
    std::uint64_t delivery_count = 0;
    protocol::Envelope envelope;
};

struct ArmInfo {
    std::string arm_id;
    bool online = false;
    std::optional<arm::CartesianPose> last_pose;
    std::size_t queued_commands = 0;
};

struct BrokerOptions {
    arm::ArmProfile profile;
    std::int64_t lease_ms = 30'000;
    store::StoreOptions store;
    // Reject out-of-range commands at enqueue time.
    bool validate_commands = true;
    // Rewrite the journal as a checkpoint after this many records; 0 = never.
    std::uint64_t compact_every = 0;
    // Seeds the generator for minted command ids.
    std::uint64_t id_seed = 0x1057'2026;
};

std::string command_queue(const std::string& arm_id);
std::string ack_queue(const std::string& arm_id);

/// Topic glob: '*' matches any run of characters, including dots.
bool topic_matches(std::string_view pattern, std::string_view topic);

class Broker {
public:
    Broker(BrokerOptions options, Clock& clock, std::shared_ptr<journal::Journal> journal = nullptr);
    ~Broker();
    Broker(const Broker&) = delete;
    Broker& operator=(const Broker&) = delete;

    /// Replays the journal into an empty broker. Leases do not survive a
    /// restart; every recovered record is ready.
    void recover();

    // -- sessions -----------------------------------------------------------

    SessionId open_session(std::shared_ptr<Sink> sink);

    /// Releases the session's leases, drops its waits and subscriptions, and
    /// ends the operator's open sequences once its last session is gone.
    void close_session(SessionId session);

    /// Robot ids are unique among live robot sessions (ConflictError).
    /// Registering a robot creates its `cmd.` and `ack.` queues.
    void register_client(SessionId session, protocol::ClientKind kind, const std::string& id);

    void subscribe(SessionId session, const std::vector<std::string>& topics);

    /// Consumer id used for leases taken on behalf of this session.
    std::string consumer_id(SessionId session) const;

    // -- queues -------------------------------------------------------------

    void ensure_arm_queues(const std::string& arm_id);
    bool has_queue(const std::string& name) const;

    /// Durable before returning. Commands on `cmd.` queues are canonicalized,
    /// validated, given an id if they have none, and observed by the store
    /// under their operator. An invalid command is never enqueued: a
    /// rejected Ack is routed back and ValidationError thrown.
    Receipt enqueue(const std::string& queue, protocol::Envelope env);

    /// Leases the oldest ready record to `consumer_id`.
    std::optional<Delivery> next(const std::string& queue, const std::string& consumer_id,
                                 std::int64_t lease_ms);

    /// Settles a record leased by `consumer_id`. Wrong consumer or expired
    /// lease throws LeaseError and the record becomes ready again.
    void ack_record(const std::string& queue, const std::string& consumer_id, std::uint64_t record_id);

    /// Long-poll: delivers the next record of `queue` to the session as a
    /// `delivery` notification, now or as soon as one is ready.
    void wait_next(SessionId session, const std::string& queue, std::int64_t lease_ms);

    // -- push ---------------------------------------------------------------

    /// Best-effort fan-out to every live subscription matching `topic`.
    /// Each session receives the event at most once. Returns the count.
    std::size_t publish(const std::string& topic, const protocol::Envelope& event);

    // -- acks and operators -------------------------------------------------

    /// Enqueues on `ack.<arm>`, publishes on `arm.<arm>.ack`, and records the
    /// outcome. Unknown or already-routed command ids are dropped. Returns
    /// whether the ack was routed.
    bool route_ack(const std::string& arm_id, const protocol::Ack& ack);

    /// Robot session path: route the ack, then settle the leased record
    /// carrying that command.
    void robot_ack(SessionId session, const protocol::Ack& ack);

    Receipt submit_command(const std::string& operator_id, protocol::JointCommand cmd);

    /// Answers a reuse prompt. Accepting enqueues the remainder in order with
    /// fresh ids and bumps the pattern's use_count. Throws store::PromptError.
    std::vector<Receipt> respond_prompt(const std::string& operator_id,
                                        const protocol::PatternResponse& response);

    void end_sequence(const std::string& arm_id, const std::string& operator_id);

    /// Expires leases, idle-closes sequences, and compacts when due.
    void tick();

    /// Rewrites the journal as a single checkpoint record.
    void compact();

    // -- introspection ------------------------------------------------------

    std::vector<ArmInfo> arms() const;
    std::vector<std::string> queue_names() const;
    std::vector<QueueRecord> queue_records(const std::string& queue) const;
    std::string store_snapshot() const;
    store::StoreTree store_tree() const;
    std::vector<store::LearnedPattern> patterns(const std::string& arm_id) const;
    bool prompt_outstanding(const std::string& operator_id, const std::string& pattern_id) const;
    std::uint64_t journal_records() const;
    const BrokerOptions& options() const { return options_; }
    Clock& clock() const { return clock_; }

    /// Test hook, invoked after each journal record is applied with the
    /// journal size in bytes at that point. Called with the broker locked.
    std::function<void(std::uint64_t)> on_record_applied;

private:
    struct Queue {
        std::string name;
        std::map<std::uint64_t, QueueRecord> records;           // ordered by record id = FIFO
        std::unordered_map<std::string, std::uint64_t> by_command;  // command id -> record id
        std::set<std::uint64_t> leased;
    };

    struct Waiter {
        SessionId session;
        std::int64_t lease_ms;
    };

    struct Session {
        std::shared_ptr<Sink> sink;
        std::optional<protocol::ClientKind> kind;
        std::string client_id;
        std::vector<std::string> topics;
    };

    struct Effects;

    // All private helpers expect mutex_ held.
    void commit(const std::string& record, bool durable, Effects* fx);
    void apply(const std::string& record, Effects* fx);
    void publish_effects(const Effects& fx);
    Queue& queue_ref(const std::string& name);
    std::size_t publish_locked(const std::string& topic, const protocol::Envelope& event);
    Receipt enqueue_locked(const std::string& queue, protocol::Envelope env, bool may_prompt);
    bool route_ack_locked(const std::string& arm_id, protocol::Ack ack, bool internal);
    std::optional<Delivery> next_locked(const std::string& queue, const std::string& consumer,
                                        std::int64_t lease_ms);
    void ack_record_locked(const std::string& queue, const std::string& consumer, std::uint64_t record_id);
    void reclaim_expired(Queue& q, std::int64_t now_ms);
    void serve_waiters(const std::string& queue);
    std::string consumer_id_locked(SessionId session) const;
    std::string mint_id();
    std::string checkpoint_record() const;

    BrokerOptions options_;
    Clock& clock_;
    std::shared_ptr<journal::Journal> journal_;
    mutable std::mutex mutex_;

    std::map<std::string, Queue> queues_;
    std::uint64_t next_record_id_ = 1;
    std::unordered_set<std::string> used_ids_;     // every command id seen (enqueued or rejected)
    std::unordered_set<std::string> known_ids_;    // command ids enqueued on cmd. queues
    std::unordered_set<std::string> routed_ids_;   // command ids whose ack was routed
    std::map<std::string, arm::CartesianPose> last_pose_;
    store::PatternStore store_;

    std::map<SessionId, Session> sessions_;
    SessionId next_session_ = 1;
    std::map<std::string, SessionId> robots_;  // live robot id -> session
    std::map<std::string, std::deque<Waiter>> waiters_;

    std::mt19937_64 rng_;
    std::uint64_t records_since_compact_ = 0;
    std::uint64_t journal_records_ = 0;
    bool recovered_ = false;
};

}  // namespace iort::broker
