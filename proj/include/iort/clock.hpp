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

#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <thread>

namespace iort {

/// Every timing decision in the broker and agent goes through a Clock so
/// tests can run on simulated time.
class Clock {
public:
    virtual ~Clock() = default;
    virtual std::int64_t now_us() const = 0;
    virtual void sleep_us(std::int64_t us) = 0;

    std::int64_t now_ms() const { return now_us() / 1000; }
};

class SystemClock final : public Clock {
public:
    std::int64_t now_us() const override {
        using namespace std::chrono;
        return duration_cast<microseconds>(system_clock::now().time_since_epoch()).count();
    }
    void sleep_us(std::int64_t us) override {
        if (us > 0) std::this_thread::sleep_for(std::chrono::microseconds(us));
    }
};

/// Manually driven time. sleep_us advances the clock instead of blocking.
class SimClock final : public Clock {
public:
    explicit SimClock(std::int64_t start_us = 0) : now_(start_us) {}

    std::int64_t now_us() const override { return now_.load(); }
    void sleep_us(std::int64_t us) override {
        if (us > 0) now_.fetch_add(us);
    }

    void advance_ms(std::int64_t ms) { now_.fetch_add(ms * 1000); }
    void set_us(std::int64_t us) { now_.store(us); }

private:
    std::atomic<std::int64_t> now_;
};

}  // namespace iort
