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

// Robot-side agent. Pulls commands for one arm, re-validates them, executes
// a simulated synchronized move on the injected clock, and acks with the
// forward-kinematics pose.

#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>

#include "iort/arm_model.hpp"
#include "iort/clock.hpp"
#include "iort/protocol.hpp"
#include "iort/session.hpp"

namespace iort::agent {

/// Bounded memory of executed command ids and the acks they produced.
class DedupWindow {
public:
    DedupWindow() : DedupWindow(10'000) {}
    explicit DedupWindow(std::size_t capacity) : capacity_(capacity) {}

    const protocol::Ack* find(const std::string& command_id) const;
    /// Oldest entries fall out once capacity is exceeded.
    void remember(const protocol::Ack& ack);
    std::size_t size() const { return order_.size(); }
    std::size_t capacity() const { return capacity_; }
    const std::deque<std::string>& order() const { return order_; }

private:
    std::size_t capacity_;
    std::deque<std::string> order_;
    std::unordered_map<std::string, protocol::Ack> acks_;
};

/// What survives an agent restart: where the arm is and what it already did.
struct AgentState {
    arm::JointConfig current;
    DedupWindow done;
    std::int64_t last_completed_ms = 0;

    std::string to_json() const;
    static AgentState from_json(std::string_view text, std::size_t capacity = 10'000);
    /// Atomic write (temp file + rename).
    void save(const std::string& path) const;
    /// Missing file yields a fresh state.
    static AgentState load(const std::string& path, std::size_t capacity = 10'000);
};

struct ExecuteOptions {
    double speed_scale = 1.0;      // >1 slows every move down
    std::int64_t sample_ms = 20;   // granularity of the simulated servo loop
    // Forces a fault instead of executing (fault injection).
    std::function<std::optional<std::string>(const protocol::JointCommand&)> fault;
};

/// Validates against the profile and moves. Rejected and faulted commands
/// leave `state.current` untouched. completed_at_ms strictly increases.
protocol::Ack execute_one(const protocol::JointCommand& cmd, AgentState& state, const arm::ArmProfile& profile,
                          Clock& clock, const ExecuteOptions& options = {});

class ConflictError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct AgentOptions {
    std::string arm_id;
    arm::ArmProfile profile;
    ExecuteOptions execute;
    std::int64_t lease_ms = 0;  // 0 = broker default
    std::string state_path;     // empty = state is not persisted
};

/// One connection's worth of the pull loop, driven by pump().
class Agent {
public:
    Agent(AgentOptions options, Connection& connection, Clock& clock, AgentState& state);

    /// Sends the registration.
    void start();

    /// Handles at most one inbound envelope, waiting up to `timeout_ms`.
    /// Returns whether one was handled. Throws ConflictError when the arm id
    /// is already connected.
    bool pump(std::int64_t timeout_ms);

    /// pump() until `stop` is set or the connection closes.
    void run(const std::atomic<bool>& stop);

    bool registered() const { return registered_; }
    std::uint64_t executed() const { return executed_; }
    std::uint64_t duplicates() const { return duplicates_; }

private:
    void request_next();
    void on_delivery(const protocol::Notification& n);

    AgentOptions options_;
    Connection& conn_;
    Clock& clock_;
    AgentState& state_;
    bool registered_ = false;
    std::uint64_t executed_ = 0;
    std::uint64_t duplicates_ = 0;
};

/// Reconnecting driver: connects, runs an Agent until the connection drops,
/// and retries with jittered exponential backoff. ConflictError propagates.
void run_with_reconnect(const AgentOptions& options, Clock& clock,
                        const std::function<std::unique_ptr<Connection>()>& connect,
                        const std::atomic<bool>& stop, std::uint64_t seed = std::random_device{}());

}  // namespace iort::agent
