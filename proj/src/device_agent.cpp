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

#include "iort/device_agent.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "text_util.hpp"

namespace iort::agent {

using nlohmann::json;
using protocol::Ack;
using protocol::AckStatus;
using protocol::Envelope;
using protocol::JointCommand;
using protocol::Notification;

const Ack* DedupWindow::find(const std::string& command_id) const {
    auto it = acks_.find(command_id);
    return it == acks_.end() ? nullptr : &it->second;
}

void DedupWindow::remember(const Ack& ack) {
    if (acks_.contains(ack.command_id)) return;
    acks_.emplace(ack.command_id, ack);
    order_.push_back(ack.command_id);
    while (order_.size() > capacity_) {
        acks_.erase(order_.front());
        order_.pop_front();
    }
}

std::string AgentState::to_json() const {
    json j;
    j["current"] = {{"angles_deg", current.angles_deg}, {"gripper_mm", current.gripper_mm}};
    j["last_completed_ms"] = last_completed_ms;
    json done_list = json::array();
    for (const auto& id : done.order()) done_list.push_back(json::parse(protocol::encode_ack(*done.find(id))));
    j["done"] = std::move(done_list);
    return j.dump() + "\n";
}

AgentState AgentState::from_json(std::string_view text, std::size_t capacity) {
    const json j = json::parse(text);
    AgentState s;
    s.done = DedupWindow(capacity);
    s.current.angles_deg = j.at("current").at("angles_deg").get<std::array<double, arm::kJointCount>>();
    s.current.gripper_mm = j.at("current").at("gripper_mm").get<double>();
    s.last_completed_ms = j.at("last_completed_ms").get<std::int64_t>();
    for (const auto& a : j.at("done")) s.done.remember(protocol::decode_ack(a.dump()));
    return s;
}

void AgentState::save(const std::string& path) const { detail::write_file_atomic(path, to_json()); }

AgentState AgentState::load(const std::string& path, std::size_t capacity) {
    if (!std::filesystem::exists(path)) {
        AgentState s;
        s.done = DedupWindow(capacity);
        return s;
    }
    return from_json(detail::read_file(path), capacity);
}

namespace {

std::int64_t stamp(AgentState& state, Clock& clock) {
    state.last_completed_ms = std::max(clock.now_ms(), state.last_completed_ms + 1);
    return state.last_completed_ms;
}

std::string describe(const std::vector<protocol::Violation>& violations) {
    std::string out;
    for (const auto& v : violations) {
        if (!out.empty()) out += "; ";
        out += v.field + "=" + detail::format_shortest(v.value) + " outside [" + detail::format_fixed6(v.min) + ", " +
               detail::format_fixed6(v.max) + "]";
    }
    return out;
}

}  // namespace

Ack execute_one(const JointCommand& cmd, AgentState& state, const arm::ArmProfile& profile, Clock& clock,
                const ExecuteOptions& options) {
    Ack ack;
    ack.command_id = cmd.id;
    // the broker validated too, but the arm never trusts the network
    auto check = protocol::validate_command(cmd, profile);
    if (!check.ok()) {
        ack.status = AckStatus::rejected;
        ack.detail = describe(check.violations);
        ack.completed_at_ms = stamp(state, clock);
        return ack;
    }
    if (options.fault) {
        if (auto why = options.fault(cmd)) {
            ack.status = AckStatus::fault;
            ack.detail = why->empty() ? "servo fault" : *why;
            ack.completed_at_ms = stamp(state, clock);
            return ack;
        }
    }

    const auto target = cmd.config();
    const auto plan = arm::plan_motion(state.current, target, profile);
    std::int64_t remaining = std::llround(plan.duration_s * options.speed_scale * 1e6);
    const std::int64_t step = std::max<std::int64_t>(1, options.sample_ms) * 1000;
    while (remaining > 0) {
        const auto dt = std::min(step, remaining);
        clock.sleep_us(dt);
        remaining -= dt;
    }
    state.current = arm::config_at(plan, plan.duration_s);
    ack.status = AckStatus::ok;
    ack.final_pose = arm::forward_kinematics(state.current, profile);
    ack.completed_at_ms = stamp(state, clock);
    return ack;
}

Agent::Agent(AgentOptions options, Connection& connection, Clock& clock, AgentState& state)
    : options_(std::move(options)), conn_(connection), clock_(clock), state_(state) {}

void Agent::start() {
    conn_.send(Envelope{protocol::kVersion, 0, protocol::Register{protocol::ClientKind::robot, options_.arm_id}});
}

void Agent::request_next() {
    Notification n;
    n.event = "next";
    n.queue = broker::command_queue(options_.arm_id);
    if (options_.lease_ms > 0) n.lease_ms = options_.lease_ms;
    conn_.send(Envelope{protocol::kVersion, 0, std::move(n)});
}

bool Agent::pump(std::int64_t timeout_ms) {
    auto env = conn_.receive(timeout_ms);
    if (!env) return false;
    const auto* n = std::get_if<Notification>(&env->body);
    if (!n) return true;
    if (n->event == "registered") {
        registered_ = true;
        spdlog::info("arm {} registered", options_.arm_id);
        request_next();
    } else if (n->event == "error") {
        if (!registered_ && n->code == "conflict") throw ConflictError(n->detail.value_or("arm id in use"));
        spdlog::warn("broker error {}: {}", n->code.value_or("?"), n->detail.value_or(""));
    } else if (n->event == "delivery") {
        on_delivery(*n);
    }
    return true;
}

void Agent::on_delivery(const Notification& n) {
    if (!n.command) {
        spdlog::warn("delivery without a command on {}", n.queue.value_or("?"));
        request_next();
        return;
    }
    const auto& cmd = *n.command;
    Ack ack;
    if (const auto* seen = state_.done.find(cmd.id)) {
        // redelivery after a lost ack or a restart: report, do not move again
        ++duplicates_;
        ack = *seen;
    } else {
        ack = execute_one(cmd, state_, options_.profile, clock_, options_.execute);
        state_.done.remember(ack);
        if (!options_.state_path.empty()) state_.save(options_.state_path);
        ++executed_;
    }
    conn_.send(Envelope{protocol::kVersion, 0, ack});
    request_next();
}

void Agent::run(const std::atomic<bool>& stop) {
    while (!stop.load() && conn_.is_open()) pump(100);
}

void run_with_reconnect(const AgentOptions& options, Clock& clock,
                        const std::function<std::unique_ptr<Connection>()>& connect, const std::atomic<bool>& stop,
                        std::uint64_t seed) {
    auto state = options.state_path.empty() ? AgentState{} : AgentState::load(options.state_path);
    std::mt19937_64 rng(seed);
    std::int64_t backoff_ms = 100;
    constexpr std::int64_t kMaxBackoffMs = 5000;
    while (!stop.load()) {
        try {
            auto conn = connect();
            Agent agent(options, *conn, clock, state);
            agent.start();
            agent.run(stop);
            if (agent.registered()) backoff_ms = 100;
        } catch (const ConflictError&) {
            throw;
        } catch (const std::exception& e) {
            spdlog::warn("connection to broker failed: {}", e.what());
        }
        if (stop.load()) break;
        std::uniform_int_distribution<std::int64_t> jitter(backoff_ms / 2, backoff_ms);
        const auto wait_ms = jitter(rng);
        spdlog::info("reconnecting in {} ms", wait_ms);
        for (std::int64_t waited = 0; waited < wait_ms && !stop.load(); waited += 50) clock.sleep_us(50'000);
        backoff_ms = std::min(backoff_ms * 2, kMaxBackoffMs);
    }
}

}  // namespace iort::agent
