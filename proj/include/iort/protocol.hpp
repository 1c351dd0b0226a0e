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

// Versioned newline-delimited JSON wire format. docs/protocol.md is the
// normative description of field names and key order.

#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "iort/arm_model.hpp"

namespace iort::protocol {

inline constexpr int kVersion = 1;

struct JointCommand {
    std::string id;  // empty = unassigned (prompt remainders, HTTP submissions)
    std::string arm_id;
    std::string operator_id;
    double base_deg = 0.0;
    double shoulder_deg = 0.0;
    double elbow_deg = 0.0;
    double wrist_pitch_deg = 0.0;
    double wrist_roll_deg = 0.0;
    double gripper_mm = 0.0;
    std::int64_t issued_at_ms = 0;

    arm::JointConfig config() const;
    void set_config(const arm::JointConfig& q);
    bool operator==(const JointCommand&) const = default;
};

enum class AckStatus { ok, rejected, fault };

struct Ack {
    std::string command_id;
    AckStatus status = AckStatus::ok;
    std::optional<arm::CartesianPose> final_pose;  // present iff ok
    std::string detail;                            // non-empty iff not ok
    std::int64_t completed_at_ms = 0;
    bool operator==(const Ack&) const = default;
};

struct Violation {
    std::string field;
    double value = 0.0;
    double min = 0.0;
    double max = 0.0;
    bool operator==(const Violation&) const = default;
};

/// Broker events and client control requests share one body shape; `event`
/// discriminates and only the fields that event uses are set.
struct Notification {
    std::string event;
    std::optional<std::string> topic;
    std::optional<std::string> arm_id;
    std::optional<std::string> operator_id;
    std::optional<std::string> queue;
    std::optional<std::string> command_id;
    std::optional<std::string> pattern_id;
    std::optional<std::uint64_t> record_id;
    std::optional<std::uint64_t> position;
    std::optional<std::uint64_t> delivery_count;
    std::optional<std::int64_t> lease_ms;
    std::optional<std::string> code;
    std::optional<std::string> detail;
    std::vector<Violation> violations;
    std::optional<JointCommand> command;
    std::optional<Ack> ack;
    bool operator==(const Notification&) const = default;
};

struct PatternPrompt {
    std::string pattern_id;
    std::string arm_id;
    std::uint32_t matched_prefix_len = 0;
    std::vector<JointCommand> remainder;
    bool operator==(const PatternPrompt&) const = default;
};

struct PatternResponse {
    std::string pattern_id;
    bool accepted = false;
    bool operator==(const PatternResponse&) const = default;
};

struct Subscribe {
    std::vector<std::string> topics;
    bool operator==(const Subscribe&) const = default;
};

enum class ClientKind { operator_, robot };

struct Register {
    ClientKind kind = ClientKind::operator_;
    std::string id;
    bool operator==(const Register&) const = default;
};

/// Alternative index order equals MessageType order.
using Body = std::variant<JointCommand, Ack, Notification, PatternPrompt, PatternResponse,
                          Subscribe, Register>;

enum class MessageType { command, ack, notification, pattern_prompt, pattern_response, subscribe, register_ };

std::string_view to_string(MessageType t);
std::string_view to_string(AckStatus s);
std::string_view to_string(ClientKind k);

struct Envelope {
    int v = kVersion;
    std::uint64_t seq = 0;
    Body body;

    MessageType type() const { return static_cast<MessageType>(body.index()); }
    bool operator==(const Envelope&) const = default;
};

class ProtocolError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public ProtocolError {
public:
    using ProtocolError::ProtocolError;
};

class VersionError : public ProtocolError {
public:
    explicit VersionError(std::int64_t got)
        : ProtocolError("unsupported protocol version " + std::to_string(got)), version_(got) {}
    std::int64_t version() const { return version_; }

private:
    std::int64_t version_;
};

class SchemaError : public ProtocolError {
public:
    explicit SchemaError(std::string field, const std::string& why = "missing or ill-typed")
        : ProtocolError("schema error at '" + field + "': " + why), field_(std::move(field)) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

class EncodeError : public ProtocolError {
public:
    using ProtocolError::ProtocolError;
};

/// One JSON object line terminated by '\n', keys in documented order.
std::string encode(const Envelope& env);

/// Parses and validates one line (trailing newline optional).
Envelope decode(std::string_view line);

/// Canonical JSON object text for a single body (no newline). Shared by the
/// HTTP gateway, the store snapshot, and the journal.
std::string encode_command(const JointCommand& cmd);
std::string encode_ack(const Ack& ack);
std::string encode_pose(const arm::CartesianPose& pose);
std::string encode_violations(const std::vector<Violation>& v);

/// Parses a command object (not an envelope). With `lenient`, `id`,
/// `arm_id`, `issued_at_ms` and `operator_id` may be omitted; used for HTTP bodies.
JointCommand decode_command(std::string_view json, bool lenient = false);
arm::CartesianPose decode_pose(std::string_view json);
Ack decode_ack(std::string_view json);

struct ValidationResult {
    std::vector<Violation> violations;
    bool ok() const { return violations.empty(); }
};

/// Checks every joint and the gripper against the profile box; every
/// violated field is reported. Boundaries are inclusive.
ValidationResult validate_command(const JointCommand& cmd, const arm::ArmProfile& profile);

/// Rejects a sequence number that does not strictly increase.
class SeqTracker {
public:
    /// Throws SchemaError("seq") when `seq` is not greater than the last one.
    void check(std::uint64_t seq);
    std::uint64_t next_outgoing() { return ++out_; }

private:
    std::optional<std::uint64_t> last_in_;
    std::uint64_t out_ = 0;
};

}  // namespace iort::protocol
