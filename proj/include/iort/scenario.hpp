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

// Scenario scripts: JSON lines holding either protocol envelopes or control
// records (`{"ctl": ...}`). See docs/scenarios.md. A script runs against an
// in-process system on a simulated clock, or against a live broker.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "iort/broker.hpp"
#include "iort/protocol.hpp"
#include "iort/session.hpp"

namespace iort::scenario {

class ScenarioError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Send {
    protocol::Envelope envelope;
};

struct Wait {
    std::int64_t ms = 0;
};

/// Matches the earliest not-yet-matched inbound envelope. `event` is a
/// notification event name or "prompt".
struct Expect {
    std::string event;
    std::optional<std::string> command_id;
    std::optional<protocol::AckStatus> status;
    std::optional<std::uint32_t> matched_prefix_len;
    std::optional<std::size_t> remainder_len;
    std::int64_t timeout_ms = 5000;
};

/// Answers the most recent prompt.
struct Respond {
    bool accept = true;
};

enum class Component { agent, broker };

struct Kill {
    Component component = Component::agent;
    std::string arm_id;
    bool lose_state = false;  // agent only: forget position and dedup memory
};

struct Restart {
    Component component = Component::agent;
    std::string arm_id;
};

/// Seeded fault injection: each executed command on the arm faults with
/// probability `p`.
struct Faults {
    std::string arm_id;
    double p = 0.0;
};

using Action = std::variant<Send, Wait, Expect, Respond, Kill, Restart, Faults>;

struct Step {
    std::size_t line = 0;
    Action action;
};

struct Scenario {
    std::uint64_t seed = 0;
    std::string operator_id = "op";
    std::vector<std::string> arms;  // agents started up front (simulated runs)
    std::vector<Step> steps;
};

/// Throws ScenarioError naming the offending line.
Scenario parse(std::string_view text);
Scenario load(const std::string& path);

struct Result {
    bool ok = true;
    std::string failure;  // first failed expectation, with its line
    std::vector<protocol::Envelope> received;
};

using Observer = std::function<void(const protocol::Envelope&)>;

struct SimOptions {
    broker::BrokerOptions broker;
    std::shared_ptr<journal::Journal> journal;  // null = in-memory
    std::int64_t start_us = 0;
};

/// In-process run: broker, one agent per arm and the operator share one
/// simulated clock and are stepped from a single thread, so the same
/// scenario and seed always produce the same journal.
class SimRun {
public:
    SimRun(Scenario scenario, SimOptions options);
    ~SimRun();

    Result run(const Observer& observer = {});

    const broker::Broker& broker() const;
    std::shared_ptr<journal::Journal> journal() const;
    Clock& clock();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// Live run over an operator connection that is already open. Control
/// records that need process control (kill, restart, faults) are refused.
Result run_live(const Scenario& scenario, Connection& connection, const Observer& observer = {});

}  // namespace iort::scenario
