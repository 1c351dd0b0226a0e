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

#include "iort/protocol.hpp"

#include <array>
#include <limits>

#include <nlohmann/json.hpp>

#include "text_util.hpp"

namespace iort::protocol {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, 7> kTypeNames{
    "command", "ack", "notification", "pattern_prompt", "pattern_response", "subscribe", "register"};

// ---------------------------------------------------------------------------
// Encoding

using detail::ObjectWriter;

void write_command(std::string& out, const JointCommand& c) {
    ObjectWriter w(out);
    w.str("id", c.id)
        .str("arm_id", c.arm_id)
        .str("operator_id", c.operator_id)
        .num("base_deg", c.base_deg)
        .num("shoulder_deg", c.shoulder_deg)
        .num("elbow_deg", c.elbow_deg)
        .num("wrist_pitch_deg", c.wrist_pitch_deg)
        .num("wrist_roll_deg", c.wrist_roll_deg)
        .num("gripper_mm", c.gripper_mm)
        .i64("issued_at_ms", c.issued_at_ms);
    w.close();
}

void write_pose(std::string& out, const arm::CartesianPose& p) {
    ObjectWriter w(out);
    w.num("x_cm", p.x_cm)
        .num("y_cm", p.y_cm)
        .num("z_cm", p.z_cm)
        .num("roll_deg", p.roll_deg)
        .num("gripper_mm", p.gripper_mm);
    w.close();
}

void check_ack(const Ack& a, bool encoding) {
    auto fail = [&](const char* field, const char* why) {
        if (encoding) throw EncodeError(std::string("ack.") + field + ": " + why);
        throw SchemaError(field, why);
    };
    if (a.status == AckStatus::ok && !a.final_pose) fail("final_pose", "required when status is ok");
    if (a.status != AckStatus::ok && a.final_pose) fail("final_pose", "only allowed when status is ok");
    if (a.status != AckStatus::ok && a.detail.empty()) fail("detail", "required when status is not ok");
}

void write_ack(std::string& out, const Ack& a) {
    check_ack(a, true);
    ObjectWriter w(out);
    w.str("command_id", a.command_id).str("status", to_string(a.status));
    if (a.final_pose) {
        std::string pose;
        write_pose(pose, *a.final_pose);
        w.raw("final_pose", pose);
    }
    w.str("detail", a.detail).i64("completed_at_ms", a.completed_at_ms);
    w.close();
}

void write_violations(std::string& out, const std::vector<Violation>& vs) {
    out.push_back('[');
    for (std::size_t i = 0; i < vs.size(); ++i) {
        if (i) out.push_back(',');
        ObjectWriter w(out);
        w.str("field", vs[i].field).num("value", vs[i].value).num("min", vs[i].min).num("max", vs[i].max);
        w.close();
    }
    out.push_back(']');
}

void write_notification(std::string& out, const Notification& n) {
    ObjectWriter w(out);
    w.str("event", n.event);
    if (n.topic) w.str("topic", *n.topic);
    if (n.arm_id) w.str("arm_id", *n.arm_id);
    if (n.operator_id) w.str("operator_id", *n.operator_id);
    if (n.queue) w.str("queue", *n.queue);
    if (n.command_id) w.str("command_id", *n.command_id);
    if (n.pattern_id) w.str("pattern_id", *n.pattern_id);
    if (n.record_id) w.u64("record_id", *n.record_id);
    if (n.position) w.u64("position", *n.position);
    if (n.delivery_count) w.u64("delivery_count", *n.delivery_count);
    if (n.lease_ms) w.i64("lease_ms", *n.lease_ms);
    if (n.code) w.str("code", *n.code);
    if (n.detail) w.str("detail", *n.detail);
    if (!n.violations.empty()) {
        std::string v;
        write_violations(v, n.violations);
        w.raw("violations", v);
    }
    if (n.command) {
        std::string c;
        write_command(c, *n.command);
        w.raw("command", c);
    }
    if (n.ack) {
        std::string a;
        write_ack(a, *n.ack);
        w.raw("ack", a);
    }
    w.close();
}

void write_prompt(std::string& out, const PatternPrompt& p) {
    if (p.remainder.empty()) throw EncodeError("pattern_prompt.remainder must be non-empty");
    if (p.matched_prefix_len < 1) throw EncodeError("pattern_prompt.matched_prefix_len must be >= 1");
    ObjectWriter w(out);
    w.str("pattern_id", p.pattern_id).str("arm_id", p.arm_id).u64("matched_prefix_len", p.matched_prefix_len);
    std::string rem = "[";
    for (std::size_t i = 0; i < p.remainder.size(); ++i) {
        if (i) rem.push_back(',');
        write_command(rem, p.remainder[i]);
    }
    rem.push_back(']');
    w.raw("remainder", rem);
    w.close();
}

void write_body(std::string& out, const Body& body) {
    std::visit(
        [&](const auto& b) {
            using T = std::decay_t<decltype(b)>;
            if constexpr (std::is_same_v<T, JointCommand>) {
                write_command(out, b);
            } else if constexpr (std::is_same_v<T, Ack>) {
                write_ack(out, b);
            } else if constexpr (std::is_same_v<T, Notification>) {
                write_notification(out, b);
            } else if constexpr (std::is_same_v<T, PatternPrompt>) {
                write_prompt(out, b);
            } else if constexpr (std::is_same_v<T, PatternResponse>) {
                ObjectWriter w(out);
                w.str("pattern_id", b.pattern_id).boolean("accepted", b.accepted);
                w.close();
            } else if constexpr (std::is_same_v<T, Subscribe>) {
                std::string topics = "[";
                for (std::size_t i = 0; i < b.topics.size(); ++i) {
                    if (i) topics.push_back(',');
                    detail::append_json_string(topics, b.topics[i]);
                }
                topics.push_back(']');
                ObjectWriter w(out);
                w.raw("topics", topics);
                w.close();
            } else if constexpr (std::is_same_v<T, Register>) {
                ObjectWriter w(out);
                w.str("kind", to_string(b.kind)).str("id", b.id);
                w.close();
            }
        },
        body);
}

// ---------------------------------------------------------------------------
// Decoding

const json& field(const json& obj, const char* name) {
    auto it = obj.find(name);
    if (it == obj.end()) throw SchemaError(name, "missing");
    return *it;
}

std::string get_string(const json& obj, const char* name) {
    const auto& v = field(obj, name);
    if (!v.is_string()) throw SchemaError(name, "expected string");
    return v.get<std::string>();
}

double get_number(const json& obj, const char* name) {
    const auto& v = field(obj, name);
    if (!v.is_number()) throw SchemaError(name, "expected number");
    return v.get<double>();
}

std::int64_t get_i64(const json& obj, const char* name) {
    const auto& v = field(obj, name);
    if (v.is_number_unsigned()) {
        auto u = v.get<std::uint64_t>();
        if (u > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max())) {
            throw SchemaError(name, "integer out of range");
        }
        return static_cast<std::int64_t>(u);
    }
    if (!v.is_number_integer()) throw SchemaError(name, "expected integer");
    return v.get<std::int64_t>();
}

std::uint64_t get_u64(const json& obj, const char* name) {
    const auto& v = field(obj, name);
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer()) throw SchemaError(name, "expected non-negative integer");
    throw SchemaError(name, "expected integer");
}

bool get_bool(const json& obj, const char* name) {
    const auto& v = field(obj, name);
    if (!v.is_boolean()) throw SchemaError(name, "expected boolean");
    return v.get<bool>();
}

const json& get_object(const json& obj, const char* name) {
    const auto& v = field(obj, name);
    if (!v.is_object()) throw SchemaError(name, "expected object");
    return v;
}

const json& get_array(const json& obj, const char* name) {
    const auto& v = field(obj, name);
    if (!v.is_array()) throw SchemaError(name, "expected array");
    return v;
}

template <typename T, typename Get>
std::optional<T> opt(const json& obj, const char* name, Get get) {
    if (!obj.contains(name)) return std::nullopt;
    return get(obj, name);
}

JointCommand read_command(const json& o, bool lenient) {
    JointCommand c;
    if (!lenient || o.contains("id")) c.id = get_string(o, "id");
    if (!lenient || o.contains("arm_id")) c.arm_id = get_string(o, "arm_id");
    if (!lenient || o.contains("operator_id")) c.operator_id = get_string(o, "operator_id");
    c.base_deg = get_number(o, "base_deg");
    c.shoulder_deg = get_number(o, "shoulder_deg");
    c.elbow_deg = get_number(o, "elbow_deg");
    c.wrist_pitch_deg = get_number(o, "wrist_pitch_deg");
    c.wrist_roll_deg = get_number(o, "wrist_roll_deg");
    c.gripper_mm = get_number(o, "gripper_mm");
    if (!lenient || o.contains("issued_at_ms")) c.issued_at_ms = get_i64(o, "issued_at_ms");
    return c;
}

arm::CartesianPose read_pose(const json& o) {
    return arm::CartesianPose{get_number(o, "x_cm"), get_number(o, "y_cm"), get_number(o, "z_cm"),
                              get_number(o, "roll_deg"), get_number(o, "gripper_mm")};
}

Ack read_ack(const json& o) {
    Ack a;
    a.command_id = get_string(o, "command_id");
    auto status = get_string(o, "status");
    if (status == "ok") {
        a.status = AckStatus::ok;
    } else if (status == "rejected") {
        a.status = AckStatus::rejected;
    } else if (status == "fault") {
        a.status = AckStatus::fault;
    } else {
        throw SchemaError("status", "unknown status '" + status + "'");
    }
    if (o.contains("final_pose")) a.final_pose = read_pose(get_object(o, "final_pose"));
    a.detail = get_string(o, "detail");
    a.completed_at_ms = get_i64(o, "completed_at_ms");
    check_ack(a, false);
    return a;
}

Notification read_notification(const json& o) {
    Notification n;
    n.event = get_string(o, "event");
    n.topic = opt<std::string>(o, "topic", get_string);
    n.arm_id = opt<std::string>(o, "arm_id", get_string);
    n.operator_id = opt<std::string>(o, "operator_id", get_string);
    n.queue = opt<std::string>(o, "queue", get_string);
    n.command_id = opt<std::string>(o, "command_id", get_string);
    n.pattern_id = opt<std::string>(o, "pattern_id", get_string);
    n.record_id = opt<std::uint64_t>(o, "record_id", get_u64);
    n.position = opt<std::uint64_t>(o, "position", get_u64);
    n.delivery_count = opt<std::uint64_t>(o, "delivery_count", get_u64);
    n.lease_ms = opt<std::int64_t>(o, "lease_ms", get_i64);
    n.code = opt<std::string>(o, "code", get_string);
    n.detail = opt<std::string>(o, "detail", get_string);
    if (o.contains("violations")) {
        for (const auto& v : get_array(o, "violations")) {
            if (!v.is_object()) throw SchemaError("violations", "expected objects");
            n.violations.push_back(Violation{get_string(v, "field"), get_number(v, "value"),
                                             get_number(v, "min"), get_number(v, "max")});
        }
    }
    if (o.contains("command")) n.command = read_command(get_object(o, "command"), false);
    if (o.contains("ack")) n.ack = read_ack(get_object(o, "ack"));
    return n;
}

PatternPrompt read_prompt(const json& o) {
    PatternPrompt p;
    p.pattern_id = get_string(o, "pattern_id");
    p.arm_id = get_string(o, "arm_id");
    auto len = get_u64(o, "matched_prefix_len");
    if (len < 1 || len > std::numeric_limits<std::uint32_t>::max()) {
        throw SchemaError("matched_prefix_len", "must be >= 1");
    }
    p.matched_prefix_len = static_cast<std::uint32_t>(len);
    for (const auto& c : get_array(o, "remainder")) {
        if (!c.is_object()) throw SchemaError("remainder", "expected command objects");
        p.remainder.push_back(read_command(c, false));
    }
    if (p.remainder.empty()) throw SchemaError("remainder", "must be non-empty");
    return p;
}

Body read_body(MessageType type, const json& o) {
    switch (type) {
        case MessageType::command:
            return read_command(o, false);
        case MessageType::ack:
            return read_ack(o);
        case MessageType::notification:
            return read_notification(o);
        case MessageType::pattern_prompt:
            return read_prompt(o);
        case MessageType::pattern_response:
            return PatternResponse{get_string(o, "pattern_id"), get_bool(o, "accepted")};
        case MessageType::subscribe: {
            Subscribe s;
            for (const auto& t : get_array(o, "topics")) {
                if (!t.is_string()) throw SchemaError("topics", "expected strings");
                s.topics.push_back(t.get<std::string>());
            }
            return s;
        }
        case MessageType::register_: {
            Register r;
            auto kind = get_string(o, "kind");
            if (kind == "operator") {
                r.kind = ClientKind::operator_;
            } else if (kind == "robot") {
                r.kind = ClientKind::robot;
            } else {
                throw SchemaError("kind", "unknown client kind '" + kind + "'");
            }
            r.id = get_string(o, "id");
            if (r.id.empty()) throw SchemaError("id", "must be non-empty");
            return r;
        }
    }
    throw SchemaError("type");
}

json parse_object(std::string_view text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParseError("expected a JSON object");
    return j;
}

}  // namespace

arm::JointConfig JointCommand::config() const {
    arm::JointConfig q;
    q.angles_deg = {base_deg, shoulder_deg, elbow_deg, wrist_pitch_deg, wrist_roll_deg};
    q.gripper_mm = gripper_mm;
    return q;
}

void JointCommand::set_config(const arm::JointConfig& q) {
    base_deg = q.angles_deg[0];
    shoulder_deg = q.angles_deg[1];
    elbow_deg = q.angles_deg[2];
    wrist_pitch_deg = q.angles_deg[3];
    wrist_roll_deg = q.angles_deg[4];
    gripper_mm = q.gripper_mm;
}

std::string_view to_string(MessageType t) { return kTypeNames[static_cast<std::size_t>(t)]; }

std::string_view to_string(AckStatus s) {
    switch (s) {
        case AckStatus::ok: return "ok";
        case AckStatus::rejected: return "rejected";
        case AckStatus::fault: return "fault";
    }
    return "fault";
}

std::string_view to_string(ClientKind k) { return k == ClientKind::robot ? "robot" : "operator"; }

std::string encode(const Envelope& env) {
    std::string body;
    try {
        write_body(body, env.body);
    } catch (const detail::NonFiniteNumber& e) {
        throw EncodeError(e.what());
    }
    std::string out;
    out.reserve(body.size() + 48);
    ObjectWriter w(out);
    w.i64("v", env.v).str("type", to_string(env.type())).u64("seq", env.seq).raw("body", body);
    w.close();
    out.push_back('\n');
    return out;
}

Envelope decode(std::string_view line) {
    if (!line.empty() && line.back() == '\n') line.remove_suffix(1);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    const json j = parse_object(line);

    const auto& v = field(j, "v");
    if (!v.is_number_integer()) throw SchemaError("v", "expected integer");
    if (v.get<std::int64_t>() != kVersion) throw VersionError(v.get<std::int64_t>());

    auto type_name = get_string(j, "type");
    std::optional<MessageType> type;
    for (std::size_t i = 0; i < kTypeNames.size(); ++i) {
        if (kTypeNames[i] == type_name) type = static_cast<MessageType>(i);
    }
    if (!type) throw SchemaError("type", "unknown message type '" + type_name + "'");

    Envelope env;
    env.v = kVersion;
    env.seq = get_u64(j, "seq");
    env.body = read_body(*type, get_object(j, "body"));
    return env;
}

std::string encode_command(const JointCommand& cmd) {
    std::string out;
    try {
        write_command(out, cmd);
    } catch (const detail::NonFiniteNumber& e) {
        throw EncodeError(e.what());
    }
    return out;
}

std::string encode_ack(const Ack& ack) {
    std::string out;
    try {
        write_ack(out, ack);
    } catch (const detail::NonFiniteNumber& e) {
        throw EncodeError(e.what());
    }
    return out;
}

std::string encode_pose(const arm::CartesianPose& pose) {
    std::string out;
    try {
        write_pose(out, pose);
    } catch (const detail::NonFiniteNumber& e) {
        throw EncodeError(e.what());
    }
    return out;
}

std::string encode_violations(const std::vector<Violation>& v) {
    std::string out;
    try {
        write_violations(out, v);
    } catch (const detail::NonFiniteNumber& e) {
        throw EncodeError(e.what());
    }
    return out;
}

JointCommand decode_command(std::string_view text, bool lenient) {
    return read_command(parse_object(text), lenient);
}

arm::CartesianPose decode_pose(std::string_view text) { return read_pose(parse_object(text)); }

Ack decode_ack(std::string_view text) { return read_ack(parse_object(text)); }

ValidationResult validate_command(const JointCommand& cmd, const arm::ArmProfile& profile) {
    ValidationResult result;
    const auto q = cmd.config();
    for (std::size_t j = 0; j < arm::kJointCount; ++j) {
        const auto joint = static_cast<arm::Joint>(j);
        const auto& r = profile.range(joint);
        const double v = q.angles_deg[j];
        if (!(v >= r.min_deg && v <= r.max_deg)) {
            result.violations.push_back(
                Violation{std::string(arm::joint_field(joint)), v, r.min_deg, r.max_deg});
        }
    }
    if (!(cmd.gripper_mm >= profile.gripper_min_mm && cmd.gripper_mm <= profile.gripper_max_mm)) {
        result.violations.push_back(
            Violation{"gripper_mm", cmd.gripper_mm, profile.gripper_min_mm, profile.gripper_max_mm});
    }
    return result;
}

void SeqTracker::check(std::uint64_t seq) {
    if (last_in_ && seq <= *last_in_) {
        throw SchemaError("seq", "must strictly increase (last " + std::to_string(*last_in_) +
                                     ", got " + std::to_string(seq) + ")");
    }
    last_in_ = seq;
}

}  // namespace iort::protocol
