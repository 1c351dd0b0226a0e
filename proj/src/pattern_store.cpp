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

#include "iort/pattern_store.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "text_util.hpp"

namespace iort::store {

using detail::ObjectWriter;
using nlohmann::json;
using protocol::JointCommand;

std::string_view to_string(Outcome o) {
    switch (o) {
        case Outcome::pending: return "pending";
        case Outcome::ok: return "ok";
        case Outcome::rejected: return "rejected";
        case Outcome::fault: return "fault";
    }
    return "pending";
}

std::string_view to_string(CloseReason r) {
    switch (r) {
        case CloseReason::idle_gap: return "idle_gap";
        case CloseReason::explicit_end: return "explicit_end";
        case CloseReason::session_end: return "session_end";
    }
    return "idle_gap";
}

Outcome outcome_from_ack(protocol::AckStatus s) {
    switch (s) {
        case protocol::AckStatus::ok: return Outcome::ok;
        case protocol::AckStatus::rejected: return Outcome::rejected;
        case protocol::AckStatus::fault: return Outcome::fault;
    }
    return Outcome::fault;
}

QuantizedCommand quantize(const JointCommand& cmd) {
    QuantizedCommand q;
    const auto cfg = cmd.config();
    for (std::size_t j = 0; j < arm::kJointCount; ++j) q.deg[j] = std::llround(cfg.angles_deg[j]);
    q.gripper_half_mm = std::llround(cmd.gripper_mm * 2.0);
    return q;
}

JointCommand to_command(const QuantizedCommand& q, std::string arm_id, std::string operator_id) {
    JointCommand c;
    c.arm_id = std::move(arm_id);
    c.operator_id = std::move(operator_id);
    arm::JointConfig cfg;
    for (std::size_t j = 0; j < arm::kJointCount; ++j) cfg.angles_deg[j] = static_cast<double>(q.deg[j]);
    cfg.gripper_mm = static_cast<double>(q.gripper_half_mm) / 2.0;
    c.set_config(cfg);
    return c;
}

bool CommandSequence::fully_successful() const {
    return std::all_of(commands.begin(), commands.end(),
                       [](const SequenceEntry& e) { return e.outcome == Outcome::ok; });
}

bool CommandSequence::failed() const {
    return std::any_of(commands.begin(), commands.end(), [](const SequenceEntry& e) {
        return e.outcome == Outcome::rejected || e.outcome == Outcome::fault;
    });
}

std::vector<QuantizedCommand> CommandSequence::key() const {
    std::vector<QuantizedCommand> k;
    k.reserve(commands.size());
    for (const auto& e : commands) k.push_back(quantize(e.command));
    return k;
}

PatternStore::PatternStore(StoreOptions options) : options_(options) {}

PatternStore::Observed PatternStore::observe_command(const std::string& arm_id,
                                                     const std::string& operator_id,
                                                     const JointCommand& cmd, std::int64_t now_ms,
                                                     bool may_prompt) {
    Observed result;
    const OpenKey key{arm_id, operator_id};
    auto it = open_.find(key);
    if (it != open_.end()) {
        const auto& seq = tree_.ongoing[it->second];
        if (now_ms - seq.last_command_at_ms > options_.idle_gap_ms) {
            result.closed_before = close_at(it->second, CloseReason::idle_gap, now_ms);
            it = open_.end();
        }
    }
    if (it == open_.end()) {
        CommandSequence seq;
        seq.sequence_id = "s" + std::to_string(tree_.ongoing.size() + 1);
        seq.arm_id = arm_id;
        seq.operator_id = operator_id;
        seq.started_at_ms = now_ms;
        tree_.ongoing.push_back(std::move(seq));
        it = open_.emplace(key, tree_.ongoing.size() - 1).first;
    }

    auto& seq = tree_.ongoing[it->second];
    seq.commands.push_back(SequenceEntry{cmd, Outcome::pending});
    seq.last_command_at_ms = now_ms;
    if (!cmd.id.empty()) command_index_[cmd.id] = {it->second, seq.commands.size() - 1};
    result.sequence_id = seq.sequence_id;

    if (may_prompt) result.prompt = find_prompt(seq);
    return result;
}

std::optional<protocol::PatternPrompt> PatternStore::find_prompt(CommandSequence& seq) {
    const std::size_t n = seq.commands.size();
    if (n < std::max<std::size_t>(options_.min_prefix, 1) || tree_.learning.empty()) return std::nullopt;

    auto& already = prompted_[seq.sequence_id];
    const auto prefix = seq.key();
    const LearnedPattern* best = nullptr;
    for (const auto& pattern : tree_.learning) {
        if (pattern.arm_id != seq.arm_id) continue;
        if (pattern.canonical_commands.size() <= n) continue;
        if (already.contains(pattern.pattern_id)) continue;
        if (!std::equal(prefix.begin(), prefix.end(), pattern.canonical_commands.begin())) continue;
        // learning is in promotion order, so the first of equal length is the earliest
        if (!best || pattern.canonical_commands.size() > best->canonical_commands.size()) best = &pattern;
    }
    if (!best) return std::nullopt;

    already.insert(best->pattern_id);
    protocol::PatternPrompt prompt;
    prompt.pattern_id = best->pattern_id;
    prompt.arm_id = seq.arm_id;
    prompt.matched_prefix_len = static_cast<std::uint32_t>(n);
    for (std::size_t i = n; i < best->canonical_commands.size(); ++i) {
        prompt.remainder.push_back(to_command(best->canonical_commands[i], seq.arm_id, seq.operator_id));
    }
    outstanding_[seq.operator_id][best->pattern_id] =
        OutstandingPrompt{seq.arm_id, seq.sequence_id, prompt.remainder};
    return prompt;
}

std::vector<LearnedPattern> PatternStore::record_outcome(const std::string& command_id, Outcome outcome,
                                                         std::int64_t now_ms) {
    auto it = command_index_.find(command_id);
    if (it == command_index_.end() || outcome == Outcome::pending) return {};
    auto& seq = tree_.ongoing[it->second.first];
    auto& entry = seq.commands[it->second.second];
    if (entry.outcome != Outcome::pending) return {};
    entry.outcome = outcome;
    if (seq.closed() && seq.fully_successful()) {
        mark_eligible(seq);
        return try_promote(seq.arm_id, now_ms);
    }
    return {};
}

PatternStore::Closed PatternStore::close_at(std::size_t index, CloseReason reason, std::int64_t now_ms) {
    auto& seq = tree_.ongoing[index];
    seq.closed_at_ms = std::max(now_ms, seq.last_command_at_ms);
    seq.close_reason = reason;
    open_.erase(OpenKey{seq.arm_id, seq.operator_id});

    // prompts issued against this sequence are no longer answerable
    auto op = outstanding_.find(seq.operator_id);
    if (op != outstanding_.end()) {
        std::erase_if(op->second, [&](const auto& kv) { return kv.second.sequence_id == seq.sequence_id; });
        if (op->second.empty()) outstanding_.erase(op);
    }
    prompted_.erase(seq.sequence_id);

    Closed closed{seq, {}};
    if (seq.fully_successful()) {
        mark_eligible(seq);
        closed.promoted = try_promote(seq.arm_id, now_ms);
    }
    return closed;
}

std::optional<PatternStore::Closed> PatternStore::close_sequence(const std::string& arm_id,
                                                                 const std::string& operator_id,
                                                                 CloseReason reason, std::int64_t now_ms) {
    auto it = open_.find(OpenKey{arm_id, operator_id});
    if (it == open_.end()) return std::nullopt;
    return close_at(it->second, reason, now_ms);
}

std::vector<std::pair<std::string, std::string>> PatternStore::idle_sequences(std::int64_t now_ms) const {
    std::vector<std::size_t> idle;
    for (const auto& [key, index] : open_) {
        if (now_ms - tree_.ongoing[index].last_command_at_ms > options_.idle_gap_ms) idle.push_back(index);
    }
    std::sort(idle.begin(), idle.end());
    std::vector<std::pair<std::string, std::string>> keys;
    for (auto index : idle) keys.emplace_back(tree_.ongoing[index].arm_id, tree_.ongoing[index].operator_id);
    return keys;
}

std::vector<PatternStore::Closed> PatternStore::close_idle(std::int64_t now_ms) {
    std::vector<Closed> closed;
    for (const auto& [arm_id, operator_id] : idle_sequences(now_ms)) {
        closed.push_back(*close_sequence(arm_id, operator_id, CloseReason::idle_gap, now_ms));
    }
    return closed;
}

void PatternStore::mark_eligible(const CommandSequence& seq) {
    auto& ids = eligible_[seq.arm_id][seq.key()];
    if (std::find(ids.begin(), ids.end(), seq.sequence_id) == ids.end()) ids.push_back(seq.sequence_id);
}

std::vector<LearnedPattern> PatternStore::try_promote(const std::string& arm_id, std::int64_t now_ms) {
    std::vector<LearnedPattern> promoted;
    auto arm_it = eligible_.find(arm_id);
    if (arm_it == eligible_.end()) return promoted;

    std::set<std::vector<QuantizedCommand>> existing;
    for (const auto& p : tree_.learning) {
        if (p.arm_id == arm_id) existing.insert(p.canonical_commands);
    }
    for (const auto& [key, ids] : arm_it->second) {
        if (ids.size() < options_.promote_k || existing.contains(key)) continue;
        LearnedPattern p;
        p.pattern_id = "p" + std::to_string(tree_.learning.size() + 1);
        p.arm_id = arm_id;
        p.canonical_commands = key;
        p.use_count = ids.size();
        p.promoted_at_ms = now_ms;
        p.source_sequence_ids = ids;
        pattern_index_[p.pattern_id] = tree_.learning.size();
        tree_.learning.push_back(p);
        promoted.push_back(std::move(p));
    }
    return promoted;
}

std::optional<PatternStore::Accepted> PatternStore::respond(const std::string& operator_id,
                                                            const std::string& pattern_id, bool accepted) {
    auto op = outstanding_.find(operator_id);
    if (op == outstanding_.end() || !op->second.contains(pattern_id)) {
        throw PromptError("no outstanding prompt for pattern '" + pattern_id + "' and operator '" +
                          operator_id + "'");
    }
    auto prompt = std::move(op->second.at(pattern_id));
    op->second.erase(pattern_id);
    if (op->second.empty()) outstanding_.erase(op);
    if (!accepted) return std::nullopt;
    return Accepted{prompt.arm_id, pattern_id, std::move(prompt.remainder)};
}

void PatternStore::note_use(const std::string& pattern_id) {
    auto it = pattern_index_.find(pattern_id);
    if (it != pattern_index_.end()) ++tree_.learning[it->second].use_count;
}

void PatternStore::drop_prompts() { outstanding_.clear(); }

bool PatternStore::has_prompt(const std::string& operator_id, const std::string& pattern_id) const {
    auto op = outstanding_.find(operator_id);
    return op != outstanding_.end() && op->second.contains(pattern_id);
}

std::optional<std::string> PatternStore::open_sequence_id(const std::string& arm_id,
                                                          const std::string& operator_id) const {
    auto it = open_.find(OpenKey{arm_id, operator_id});
    if (it == open_.end()) return std::nullopt;
    return tree_.ongoing[it->second].sequence_id;
}

std::vector<std::pair<std::string, std::string>> PatternStore::open_keys() const {
    std::vector<std::pair<std::string, std::string>> keys;
    for (const auto& [key, index] : open_) keys.push_back(key);
    return keys;
}

std::vector<LearnedPattern> PatternStore::patterns(const std::string& arm_id) const {
    std::vector<LearnedPattern> out;
    for (const auto& p : tree_.learning) {
        if (p.arm_id == arm_id) out.push_back(p);
    }
    return out;
}

const LearnedPattern* PatternStore::find_pattern(const std::string& pattern_id) const {
    auto it = pattern_index_.find(pattern_id);
    return it == pattern_index_.end() ? nullptr : &tree_.learning[it->second];
}

const CommandSequence* PatternStore::find_sequence_of(const std::string& command_id) const {
    auto it = command_index_.find(command_id);
    return it == command_index_.end() ? nullptr : &tree_.ongoing[it->second.first];
}

// ---------------------------------------------------------------------------
// Snapshot format

namespace {

std::string quantized_json(const QuantizedCommand& q) {
    std::string out;
    ObjectWriter w(out);
    for (std::size_t j = 0; j < arm::kJointCount; ++j) {
        w.i64(arm::joint_field(static_cast<arm::Joint>(j)), q.deg[j]);
    }
    w.num("gripper_mm", static_cast<double>(q.gripper_half_mm) / 2.0);
    w.close();
    return out;
}

template <typename T, typename F>
std::string json_array(const std::vector<T>& items, F&& item) {
    std::string out = "[";
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out.push_back(',');
        out += item(items[i]);
    }
    out.push_back(']');
    return out;
}

std::string sequence_json(const CommandSequence& s) {
    std::string out;
    ObjectWriter w(out);
    w.str("sequence_id", s.sequence_id)
        .str("arm_id", s.arm_id)
        .str("operator_id", s.operator_id)
        .i64("started_at_ms", s.started_at_ms)
        .i64("last_command_at_ms", s.last_command_at_ms);
    if (s.closed_at_ms) {
        w.i64("closed_at_ms", *s.closed_at_ms);
    } else {
        w.null("closed_at_ms");
    }
    if (s.close_reason) {
        w.str("close_reason", to_string(*s.close_reason));
    } else {
        w.null("close_reason");
    }
    w.raw("commands", json_array(s.commands, [](const SequenceEntry& e) {
        std::string entry;
        ObjectWriter ew(entry);
        ew.raw("command", protocol::encode_command(e.command)).str("outcome", to_string(e.outcome));
        ew.close();
        return entry;
    }));
    w.close();
    return out;
}

std::string pattern_json(const LearnedPattern& p) {
    std::string out;
    ObjectWriter w(out);
    w.str("pattern_id", p.pattern_id)
        .str("arm_id", p.arm_id)
        .u64("use_count", p.use_count)
        .i64("promoted_at_ms", p.promoted_at_ms)
        .raw("source_sequence_ids", json_array(p.source_sequence_ids, [](const std::string& id) {
                 std::string s;
                 detail::append_json_string(s, id);
                 return s;
             }))
        .raw("canonical_commands", json_array(p.canonical_commands, quantized_json));
    w.close();
    return out;
}

// Navigation helpers that report the failing record path.
const json& need(const json& obj, const std::string& path, const char* key) {
    if (!obj.is_object() || !obj.contains(key)) throw RestoreError(path + "." + key, "missing");
    return obj.at(key);
}

std::string need_string(const json& obj, const std::string& path, const char* key) {
    const auto& v = need(obj, path, key);
    if (!v.is_string()) throw RestoreError(path + "." + key, "expected string");
    return v.get<std::string>();
}

std::int64_t need_int(const json& obj, const std::string& path, const char* key) {
    const auto& v = need(obj, path, key);
    if (!v.is_number_integer()) throw RestoreError(path + "." + key, "expected integer");
    return v.get<std::int64_t>();
}

const json& need_array(const json& obj, const std::string& path, const char* key) {
    const auto& v = need(obj, path, key);
    if (!v.is_array()) throw RestoreError(path + "." + key, "expected array");
    return v;
}

Outcome parse_outcome(const std::string& s, const std::string& path) {
    for (auto o : {Outcome::pending, Outcome::ok, Outcome::rejected, Outcome::fault}) {
        if (to_string(o) == s) return o;
    }
    throw RestoreError(path, "unknown outcome '" + s + "'");
}

CloseReason parse_reason(const std::string& s, const std::string& path) {
    for (auto r : {CloseReason::idle_gap, CloseReason::explicit_end, CloseReason::session_end}) {
        if (to_string(r) == s) return r;
    }
    throw RestoreError(path, "unknown close reason '" + s + "'");
}

}  // namespace

std::string to_json(const CommandSequence& s) { return sequence_json(s); }
std::string to_json(const LearnedPattern& p) { return pattern_json(p); }

std::string PatternStore::snapshot() const {
    std::string root;
    ObjectWriter rw(root);
    rw.raw("ongoing", json_array(tree_.ongoing, sequence_json))
        .raw("learning", json_array(tree_.learning, pattern_json));
    rw.close();
    std::string out;
    ObjectWriter w(out);
    w.raw("root", root);
    w.close();
    out.push_back('\n');
    return out;
}

void PatternStore::snapshot(const std::string& path) const {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write snapshot '" + tmp + "'");
        out << snapshot();
        if (!out) throw std::runtime_error("cannot write snapshot '" + tmp + "'");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw std::runtime_error("cannot replace snapshot '" + path + "'");
    }
}

PatternStore PatternStore::from_snapshot(std::string_view text, StoreOptions options) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw RestoreError("document", e.what());
    }
    if (!doc.is_object() || doc.size() != 1 || !doc.contains("root")) {
        throw RestoreError("document", "expected a single 'root' node");
    }
    const auto& root = doc.at("root");
    if (!root.is_object() || root.size() != 2 || !root.contains("ongoing") || !root.contains("learning")) {
        throw RestoreError("root", "must have exactly the children 'ongoing' and 'learning'");
    }

    PatternStore store(options);
    std::size_t i = 0;
    for (const auto& s : need_array(root, "root", "ongoing")) {
        const std::string path = "ongoing[" + std::to_string(i++) + "]";
        if (!s.is_object()) throw RestoreError(path, "expected object");
        CommandSequence seq;
        seq.sequence_id = need_string(s, path, "sequence_id");
        seq.arm_id = need_string(s, path, "arm_id");
        seq.operator_id = need_string(s, path, "operator_id");
        seq.started_at_ms = need_int(s, path, "started_at_ms");
        seq.last_command_at_ms = need_int(s, path, "last_command_at_ms");
        const auto& closed = need(s, path, "closed_at_ms");
        if (!closed.is_null()) seq.closed_at_ms = need_int(s, path, "closed_at_ms");
        const auto& reason = need(s, path, "close_reason");
        if (!reason.is_null()) {
            seq.close_reason = parse_reason(need_string(s, path, "close_reason"), path + ".close_reason");
        }
        if (seq.closed_at_ms.has_value() != seq.close_reason.has_value()) {
            throw RestoreError(path, "closed_at_ms and close_reason must both be set or both null");
        }
        std::size_t k = 0;
        for (const auto& e : need_array(s, path, "commands")) {
            const std::string epath = path + ".commands[" + std::to_string(k++) + "]";
            SequenceEntry entry;
            try {
                entry.command = protocol::decode_command(need(e, epath, "command").dump());
            } catch (const protocol::ProtocolError& err) {
                throw RestoreError(epath + ".command", err.what());
            }
            entry.outcome = parse_outcome(need_string(e, epath, "outcome"), epath + ".outcome");
            seq.commands.push_back(std::move(entry));
        }
        if (seq.commands.empty()) throw RestoreError(path, "sequence has no commands");
        store.tree_.ongoing.push_back(std::move(seq));
    }

    i = 0;
    for (const auto& p : need_array(root, "root", "learning")) {
        const std::string path = "learning[" + std::to_string(i++) + "]";
        if (!p.is_object()) throw RestoreError(path, "expected object");
        LearnedPattern pattern;
        pattern.pattern_id = need_string(p, path, "pattern_id");
        pattern.arm_id = need_string(p, path, "arm_id");
        auto use = need_int(p, path, "use_count");
        if (use < 0) throw RestoreError(path + ".use_count", "must be non-negative");
        pattern.use_count = static_cast<std::uint64_t>(use);
        pattern.promoted_at_ms = need_int(p, path, "promoted_at_ms");
        for (const auto& id : need_array(p, path, "source_sequence_ids")) {
            if (!id.is_string()) throw RestoreError(path + ".source_sequence_ids", "expected strings");
            pattern.source_sequence_ids.push_back(id.get<std::string>());
        }
        std::size_t k = 0;
        for (const auto& c : need_array(p, path, "canonical_commands")) {
            const std::string cpath = path + ".canonical_commands[" + std::to_string(k++) + "]";
            QuantizedCommand q;
            for (std::size_t j = 0; j < arm::kJointCount; ++j) {
                const std::string key(arm::joint_field(static_cast<arm::Joint>(j)));
                q.deg[j] = need_int(c, cpath, key.c_str());
            }
            const auto& g = need(c, cpath, "gripper_mm");
            if (!g.is_number()) throw RestoreError(cpath + ".gripper_mm", "expected number");
            q.gripper_half_mm = std::llround(g.get<double>() * 2.0);
            pattern.canonical_commands.push_back(q);
        }
        if (pattern.canonical_commands.empty()) throw RestoreError(path, "pattern has no commands");
        store.tree_.learning.push_back(std::move(pattern));
    }
    store.rebuild_indexes();
    return store;
}

void PatternStore::restore(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw RestoreError("document", "cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    *this = from_snapshot(ss.str(), options_);
}

void PatternStore::rebuild_indexes() {
    open_.clear();
    command_index_.clear();
    pattern_index_.clear();
    eligible_.clear();
    prompted_.clear();
    outstanding_.clear();
    for (std::size_t i = 0; i < tree_.ongoing.size(); ++i) {
        const auto& seq = tree_.ongoing[i];
        if (!seq.closed()) open_[OpenKey{seq.arm_id, seq.operator_id}] = i;
        for (std::size_t k = 0; k < seq.commands.size(); ++k) {
            if (!seq.commands[k].command.id.empty()) command_index_[seq.commands[k].command.id] = {i, k};
        }
        if (seq.closed() && seq.fully_successful()) mark_eligible(seq);
    }
    for (std::size_t i = 0; i < tree_.learning.size(); ++i) pattern_index_[tree_.learning[i].pattern_id] = i;
}

}  // namespace iort::store
