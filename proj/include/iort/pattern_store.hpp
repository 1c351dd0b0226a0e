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

// Command-sequence learning tree. The root has exactly two children:
// "ongoing" holds every command sequence ever observed, "learning" holds the
// sequences that were fully successful and repeated at least K times.
//
// The store is a deterministic in-memory state machine. It performs no I/O
// except snapshot/restore; the broker journals its inputs and replays them.

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "iort/protocol.hpp"

namespace iort::store {

enum class Outcome { pending, ok, rejected, fault };
enum class CloseReason { idle_gap, explicit_end, session_end };

std::string_view to_string(Outcome o);
std::string_view to_string(CloseReason r);
Outcome outcome_from_ack(protocol::AckStatus s);

/// Angles in whole degrees, gripper aperture in half millimetres.
struct QuantizedCommand {
    std::array<std::int64_t, arm::kJointCount> deg{};
    std::int64_t gripper_half_mm = 0;
    auto operator<=>(const QuantizedCommand&) const = default;
};

QuantizedCommand quantize(const protocol::JointCommand& cmd);

/// Command body carrying the quantized values; id and timestamp unassigned.
protocol::JointCommand to_command(const QuantizedCommand& q, std::string arm_id,
                                  std::string operator_id);

struct SequenceEntry {
    protocol::JointCommand command;
    Outcome outcome = Outcome::pending;
};

struct CommandSequence {
    std::string sequence_id;
    std::string arm_id;
    std::string operator_id;
    std::vector<SequenceEntry> commands;
    std::int64_t started_at_ms = 0;
    std::int64_t last_command_at_ms = 0;
    std::optional<std::int64_t> closed_at_ms;
    std::optional<CloseReason> close_reason;

    bool closed() const { return closed_at_ms.has_value(); }
    /// Every outcome is ok (pending counts as not yet successful).
    bool fully_successful() const;
    /// Some outcome is rejected or fault; permanent.
    bool failed() const;
    std::vector<QuantizedCommand> key() const;
};

struct LearnedPattern {
    std::string pattern_id;
    std::string arm_id;
    std::vector<QuantizedCommand> canonical_commands;
    std::uint64_t use_count = 0;
    std::int64_t promoted_at_ms = 0;
    std::vector<std::string> source_sequence_ids;
};

struct StoreTree {
    std::vector<CommandSequence> ongoing;
    std::vector<LearnedPattern> learning;
};

/// Canonical JSON objects, as they appear inside a snapshot.
std::string to_json(const CommandSequence& s);
std::string to_json(const LearnedPattern& p);

struct StoreOptions {
    std::size_t promote_k = 3;
    std::int64_t idle_gap_ms = 10'000;
    // Shortest open-sequence prefix that may trigger a prompt.
    std::size_t min_prefix = 2;
};

class PromptError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class RestoreError : public std::runtime_error {
public:
    RestoreError(std::string record, const std::string& why)
        : std::runtime_error("corrupt snapshot at " + record + ": " + why), record_(std::move(record)) {}
    const std::string& record() const { return record_; }

private:
    std::string record_;
};

class PatternStore {
public:
    explicit PatternStore(StoreOptions options = {});

    struct Closed {
        CommandSequence sequence;
        std::vector<LearnedPattern> promoted;
    };

    struct Observed {
        std::string sequence_id;
        std::optional<Closed> closed_before;  // previous sequence ended by the idle gap
        std::optional<protocol::PatternPrompt> prompt;
    };

    /// Appends to the operator's open sequence for this arm, opening one
    /// (and idle-closing the old one) as needed, then looks for a learned
    /// pattern the open sequence is a strict prefix of.
    Observed observe_command(const std::string& arm_id, const std::string& operator_id,
                             const protocol::JointCommand& cmd, std::int64_t now_ms,
                             bool may_prompt = true);

    /// First non-pending outcome wins. Unknown ids are ignored. Returns any
    /// promotions this completes.
    std::vector<LearnedPattern> record_outcome(const std::string& command_id, Outcome outcome,
                                               std::int64_t now_ms);

    std::optional<Closed> close_sequence(const std::string& arm_id, const std::string& operator_id,
                                         CloseReason reason, std::int64_t now_ms);

    /// Closes every open sequence idle for longer than the gap.
    std::vector<Closed> close_idle(std::int64_t now_ms);

    /// (arm, operator) of open sequences idle for longer than the gap, in
    /// sequence order. Does not modify the store.
    std::vector<std::pair<std::string, std::string>> idle_sequences(std::int64_t now_ms) const;

    std::vector<LearnedPattern> try_promote(const std::string& arm_id, std::int64_t now_ms);

    struct Accepted {
        std::string arm_id;
        std::string pattern_id;
        std::vector<protocol::JointCommand> remainder;
    };

    /// Resolves an outstanding prompt issued to `operator_id`. Rejecting
    /// returns nullopt. Throws PromptError for unknown or expired prompts.
    std::optional<Accepted> respond(const std::string& operator_id, const std::string& pattern_id,
                                    bool accepted);

    /// use_count += 1 for an accepted reuse.
    void note_use(const std::string& pattern_id);

    /// Forgets all outstanding prompts (their sessions are gone).
    void drop_prompts();

    bool has_prompt(const std::string& operator_id, const std::string& pattern_id) const;
    std::optional<std::string> open_sequence_id(const std::string& arm_id,
                                                const std::string& operator_id) const;
    std::vector<std::pair<std::string, std::string>> open_keys() const;  // (arm, operator)

    const StoreTree& tree() const { return tree_; }
    const StoreOptions& options() const { return options_; }
    std::vector<LearnedPattern> patterns(const std::string& arm_id) const;
    const LearnedPattern* find_pattern(const std::string& pattern_id) const;
    const CommandSequence* find_sequence_of(const std::string& command_id) const;

    /// Canonical single-line JSON document `{"root":{"ongoing":[...],"learning":[...]}}`.
    std::string snapshot() const;
    void snapshot(const std::string& path) const;

    static PatternStore from_snapshot(std::string_view text, StoreOptions options = {});
    void restore(const std::string& path);

private:
    struct OutstandingPrompt {
        std::string arm_id;
        std::string sequence_id;
        std::vector<protocol::JointCommand> remainder;
    };

    std::optional<protocol::PatternPrompt> find_prompt(CommandSequence& seq);
    void mark_eligible(const CommandSequence& seq);
    void rebuild_indexes();
    Closed close_at(std::size_t index, CloseReason reason, std::int64_t now_ms);

    StoreOptions options_;
    StoreTree tree_;

    using OpenKey = std::pair<std::string, std::string>;  // (arm, operator)
    std::map<OpenKey, std::size_t> open_;
    std::unordered_map<std::string, std::pair<std::size_t, std::size_t>> command_index_;
    std::unordered_map<std::string, std::size_t> pattern_index_;
    // arm -> class key -> closed fully-successful sequence ids
    std::map<std::string, std::map<std::vector<QuantizedCommand>, std::vector<std::string>>> eligible_;
    // sequence_id -> patterns already prompted for it
    std::unordered_map<std::string, std::set<std::string>> prompted_;
    // operator -> pattern_id -> prompt
    std::map<std::string, std::map<std::string, OutstandingPrompt>> outstanding_;
};

}  // namespace iort::store
