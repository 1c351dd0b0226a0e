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

// Shared helpers for broker-level tests.

#pragma once

#include <atomic>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "iort/broker.hpp"
#include "iort/protocol.hpp"

namespace fixture {

/// Records everything pushed to it; can be told to refuse pushes.
class CaptureSink final : public iort::broker::Sink {
public:
    bool push(iort::protocol::Envelope env) override {
        std::lock_guard lock(mutex_);
        if (failing) return false;
        env.seq = ++seq_;
        items_.push_back(std::move(env));
        return true;
    }

    std::vector<iort::protocol::Envelope> take() {
        std::lock_guard lock(mutex_);
        auto out = std::move(items_);
        items_.clear();
        return out;
    }

    std::vector<iort::protocol::Notification> events(const std::string& event) {
        std::lock_guard lock(mutex_);
        std::vector<iort::protocol::Notification> out;
        for (const auto& e : items_) {
            if (const auto* n = std::get_if<iort::protocol::Notification>(&e.body); n && n->event == event) {
                out.push_back(*n);
            }
        }
        return out;
    }

    std::vector<iort::protocol::PatternPrompt> prompts() {
        std::lock_guard lock(mutex_);
        std::vector<iort::protocol::PatternPrompt> out;
        for (const auto& e : items_) {
            if (const auto* p = std::get_if<iort::protocol::PatternPrompt>(&e.body)) out.push_back(*p);
        }
        return out;
    }

    std::atomic<bool> failing{false};

private:
    std::mutex mutex_;
    std::vector<iort::protocol::Envelope> items_;
    std::uint64_t seq_ = 0;
};

inline iort::protocol::JointCommand command(const std::string& arm, const std::string& id, double base,
                                            double shoulder = 0.0) {
    iort::protocol::JointCommand c;
    c.id = id;
    c.arm_id = arm;
    c.operator_id = "op";
    c.base_deg = base;
    c.shoulder_deg = shoulder;
    c.gripper_mm = 10.0;
    return c;
}

inline iort::protocol::Envelope wrap(iort::protocol::Body body) {
    return iort::protocol::Envelope{iort::protocol::kVersion, 0, std::move(body)};
}

/// Durable state only: queue contents without leases, plus the store.
inline std::string digest(const iort::broker::Broker& b) {
    std::string out;
    for (const auto& name : b.queue_names()) {
        out += "queue " + name + "\n";
        for (const auto& r : b.queue_records(name)) {
            out += std::to_string(r.record_id) + " dc=" + std::to_string(r.delivery_count) + " " +
                   iort::protocol::encode(r.envelope);
        }
    }
    out += b.store_snapshot();
    return out;
}

}  // namespace fixture
