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

#include "iort/broker.hpp"

#include <algorithm>
#include <cstdio>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "text_util.hpp"

namespace iort::broker {

using nlohmann::json;
using protocol::Ack;
using protocol::Envelope;
using protocol::JointCommand;
using protocol::Notification;

namespace {

constexpr std::string_view kCmdPrefix = "cmd.";
constexpr std::string_view kAckPrefix = "ack.";

std::string arm_of(const std::string& queue) { return queue.substr(4); }

json envelope_json(const Envelope& env) { return json::parse(protocol::encode(env)); }

Envelope canonical(const Envelope& env) { return protocol::decode(protocol::encode(env)); }

std::string describe(const std::vector<protocol::Violation>& violations) {
    std::string out = "rejected:";
    for (const auto& v : violations) {
        out += " " + v.field + "=" + detail::format_shortest(v.value) + " outside [" +
               detail::format_fixed6(v.min) + ", " + detail::format_fixed6(v.max) + "];";
    }
    out.pop_back();
    return out;
}

store::CloseReason parse_reason(const std::string& s) {
    for (auto r : {store::CloseReason::idle_gap, store::CloseReason::explicit_end,
                   store::CloseReason::session_end}) {
        if (store::to_string(r) == s) return r;
    }
    throw RecoveryError("unknown close reason '" + s + "'");
}

Envelope notification(Notification n) { return Envelope{protocol::kVersion, 0, std::move(n)}; }

}  // namespace

ValidationError::ValidationError(std::string command_id, std::vector<protocol::Violation> violations)
    : BrokerError(describe(violations)), command_id_(std::move(command_id)), violations_(std::move(violations)) {}

std::string command_queue(const std::string& arm_id) { return std::string(kCmdPrefix) + arm_id; }
std::string ack_queue(const std::string& arm_id) { return std::string(kAckPrefix) + arm_id; }

bool topic_matches(std::string_view pattern, std::string_view topic) {
    // iterative glob with single-star backtracking
    std::size_t p = 0, t = 0, star = std::string_view::npos, mark = 0;
    while (t < topic.size()) {
        if (p < pattern.size() && pattern[p] == '*') {
            star = p++;
            mark = t;
        } else if (p < pattern.size() && pattern[p] == topic[t]) {
            ++p;
            ++t;
        } else if (star != std::string_view::npos) {
            p = star + 1;
            t = ++mark;
        } else {
            return false;
        }
    }
    while (p < pattern.size() && pattern[p] == '*') ++p;
    return p == pattern.size();
}

struct Broker::Effects {
    std::vector<std::pair<std::string, protocol::PatternPrompt>> prompts;  // operator, prompt
    std::vector<store::CommandSequence> closed;
    std::vector<store::LearnedPattern> promoted;
    std::vector<std::pair<std::string, Ack>> acks;  // arm, ack
    std::vector<std::string> ready_queues;

    void add(store::PatternStore::Closed c) {
        for (auto& p : c.promoted) promoted.push_back(std::move(p));
        closed.push_back(std::move(c.sequence));
    }
};

Broker::Broker(BrokerOptions options, Clock& clock, std::shared_ptr<journal::Journal> journal)
    : options_(std::move(options)),
      clock_(clock),
      journal_(std::move(journal)),
      store_(options_.store),
      rng_(options_.id_seed) {
    options_.profile.check();
}

Broker::~Broker() = default;

// ---------------------------------------------------------------------------
// Journal application

void Broker::commit(const std::string& record, bool durable, Effects* fx) {
    if (journal_) journal_->append(record, durable);
    apply(record, fx);
    ++journal_records_;
    ++records_since_compact_;
    if (on_record_applied) on_record_applied(journal_ ? journal_->size_bytes() : 0);
}

Broker::Queue& Broker::queue_ref(const std::string& name) {
    auto it = queues_.find(name);
    if (it == queues_.end()) throw NotFoundError("unknown queue '" + name + "'");
    return it->second;
}

void Broker::apply(const std::string& text, Effects* fx) {
    Effects scratch;
    Effects& out = fx ? *fx : scratch;
    const json r = json::parse(text);
    const auto op = r.at("op").get<std::string>();

    if (op == "queue") {
        const auto name = r.at("name").get<std::string>();
        queues_.try_emplace(name, Queue{name, {}, {}, {}});
    } else if (op == "enqueue") {
        const auto name = r.at("queue").get<std::string>();
        auto& q = queue_ref(name);
        QueueRecord rec;
        rec.record_id = r.at("record_id").get<std::uint64_t>();
        rec.enqueued_at_ms = r.at("at").get<std::int64_t>();
        rec.envelope = protocol::decode(r.at("env").dump());
        next_record_id_ = std::max(next_record_id_, rec.record_id + 1);

        if (const auto* cmd = std::get_if<JointCommand>(&rec.envelope.body)) {
            used_ids_.insert(cmd->id);
            known_ids_.insert(cmd->id);
            q.by_command[cmd->id] = rec.record_id;
            if (r.contains("operator")) {
                auto obs = store_.observe_command(arm_of(name), r.at("operator").get<std::string>(), *cmd,
                                                  rec.enqueued_at_ms, r.value("prompt", true));
                if (obs.closed_before) out.add(std::move(*obs.closed_before));
                if (obs.prompt) out.prompts.emplace_back(cmd->operator_id, std::move(*obs.prompt));
            }
        } else if (const auto* ack = std::get_if<Ack>(&rec.envelope.body)) {
            routed_ids_.insert(ack->command_id);
            if (ack->final_pose) last_pose_[arm_of(name)] = *ack->final_pose;
            for (auto& p : store_.record_outcome(ack->command_id, store::outcome_from_ack(ack->status),
                                                 rec.enqueued_at_ms)) {
                out.promoted.push_back(std::move(p));
            }
            out.acks.emplace_back(arm_of(name), *ack);
        }
        q.records.emplace(rec.record_id, std::move(rec));
        out.ready_queues.push_back(name);
    } else if (op == "reject") {
        auto cmd = protocol::decode_command(r.at("cmd").dump());
        const auto at = r.at("at").get<std::int64_t>();
        used_ids_.insert(cmd.id);
        auto obs = store_.observe_command(r.at("arm").get<std::string>(), r.at("operator").get<std::string>(),
                                          cmd, at, false);
        if (obs.closed_before) out.add(std::move(*obs.closed_before));
        store_.record_outcome(cmd.id, store::Outcome::rejected, at);
    } else if (op == "lease") {
        auto& q = queue_ref(r.at("queue").get<std::string>());
        auto it = q.records.find(r.at("record_id").get<std::uint64_t>());
        if (it != q.records.end()) {
            it->second.lease = Lease{r.at("consumer").get<std::string>(), r.at("expiry").get<std::int64_t>()};
            it->second.state = RecordState::leased;
            ++it->second.delivery_count;
            q.leased.insert(it->first);
        }
    } else if (op == "release") {
        const auto name = r.at("queue").get<std::string>();
        auto& q = queue_ref(name);
        auto it = q.records.find(r.at("record_id").get<std::uint64_t>());
        if (it != q.records.end()) {
            it->second.lease.reset();
            it->second.state = RecordState::ready;
            q.leased.erase(it->first);
            out.ready_queues.push_back(name);
        }
    } else if (op == "ack") {
        auto& q = queue_ref(r.at("queue").get<std::string>());
        auto it = q.records.find(r.at("record_id").get<std::uint64_t>());
        if (it != q.records.end()) {
            if (const auto* cmd = std::get_if<JointCommand>(&it->second.envelope.body)) {
                q.by_command.erase(cmd->id);
            }
            q.leased.erase(it->first);
            q.records.erase(it);
        }
    } else if (op == "close") {
        auto closed = store_.close_sequence(r.at("arm").get<std::string>(), r.at("operator").get<std::string>(),
                                            parse_reason(r.at("reason").get<std::string>()),
                                            r.at("at").get<std::int64_t>());
        if (closed) out.add(std::move(*closed));
    } else if (op == "use") {
        store_.note_use(r.at("pattern_id").get<std::string>());
    } else if (op == "checkpoint") {
        queues_.clear();
        used_ids_.clear();
        known_ids_.clear();
        routed_ids_.clear();
        last_pose_.clear();
        next_record_id_ = r.at("next_record_id").get<std::uint64_t>();
        for (const auto& qj : r.at("queues")) {
            const auto name = qj.at("name").get<std::string>();
            Queue q{name, {}, {}, {}};
            for (const auto& rj : qj.at("records")) {
                QueueRecord rec;
                rec.record_id = rj.at("record_id").get<std::uint64_t>();
                rec.enqueued_at_ms = rj.at("at").get<std::int64_t>();
                rec.delivery_count = rj.at("delivery_count").get<std::uint64_t>();
                rec.envelope = protocol::decode(rj.at("env").dump());
                if (const auto* cmd = std::get_if<JointCommand>(&rec.envelope.body)) {
                    q.by_command[cmd->id] = rec.record_id;
                }
                q.records.emplace(rec.record_id, std::move(rec));
            }
            queues_.emplace(name, std::move(q));
        }
        for (const auto& id : r.at("used_ids")) used_ids_.insert(id.get<std::string>());
        for (const auto& id : r.at("known_ids")) known_ids_.insert(id.get<std::string>());
        for (const auto& id : r.at("routed_ids")) routed_ids_.insert(id.get<std::string>());
        for (const auto& [arm_id, pose] : r.at("last_pose").items()) {
            last_pose_[arm_id] = protocol::decode_pose(pose.dump());
        }
        store_ = store::PatternStore::from_snapshot(r.at("store").dump(), options_.store);
    } else {
        throw RecoveryError("unknown journal op '" + op + "'");
    }
}

std::string Broker::checkpoint_record() const {
    json r;
    r["op"] = "checkpoint";
    r["next_record_id"] = next_record_id_;
    json queues = json::array();
    for (const auto& [name, q] : queues_) {
        json records = json::array();
        for (const auto& [id, rec] : q.records) {
            records.push_back({{"record_id", id},
                               {"at", rec.enqueued_at_ms},
                               {"delivery_count", rec.delivery_count},
                               {"env", envelope_json(rec.envelope)}});
        }
        queues.push_back({{"name", name}, {"records", std::move(records)}});
    }
    r["queues"] = std::move(queues);
    auto sorted = [](const std::unordered_set<std::string>& s) {
        std::vector<std::string> v(s.begin(), s.end());
        std::sort(v.begin(), v.end());
        return v;
    };
    r["used_ids"] = sorted(used_ids_);
    r["known_ids"] = sorted(known_ids_);
    r["routed_ids"] = sorted(routed_ids_);
    json poses = json::object();
    for (const auto& [arm_id, pose] : last_pose_) poses[arm_id] = json::parse(protocol::encode_pose(pose));
    r["last_pose"] = std::move(poses);
    r["store"] = json::parse(store_.snapshot());
    return r.dump();
}

void Broker::recover() {
    std::lock_guard lock(mutex_);
    if (recovered_) throw RecoveryError("broker already recovered");
    recovered_ = true;
    if (!journal_) return;
    const auto records = journal_->load();
    for (std::size_t i = 0; i < records.size(); ++i) {
        try {
            apply(records[i], nullptr);
        } catch (const std::exception& e) {
            throw RecoveryError("journal record " + std::to_string(i + 1) + ": " + e.what());
        }
    }
    journal_records_ = records.size();
    // consumers did not survive the restart
    for (auto& [name, q] : queues_) {
        for (auto id : q.leased) {
            q.records.at(id).lease.reset();
            q.records.at(id).state = RecordState::ready;
        }
        q.leased.clear();
    }
    store_.drop_prompts();
    rng_.seed(options_.id_seed ^ (0x9e3779b97f4a7c15ULL * (used_ids_.size() + 1)) ^ next_record_id_);
    spdlog::info("recovered {} journal records, {} queues", records.size(), queues_.size());
}

// ---------------------------------------------------------------------------
// Sessions

SessionId Broker::open_session(std::shared_ptr<Sink> sink) {
    std::lock_guard lock(mutex_);
    const auto id = next_session_++;
    sessions_.emplace(id, Session{std::move(sink), std::nullopt, {}, {}});
    return id;
}

void Broker::close_session(SessionId session) {
    std::lock_guard lock(mutex_);
    auto it = sessions_.find(session);
    if (it == sessions_.end()) return;
    const Session gone = it->second;
    const auto consumer = consumer_id_locked(session);
    sessions_.erase(it);

    for (auto& [name, waiters] : waiters_) {
        std::erase_if(waiters, [&](const Waiter& w) { return w.session == session; });
    }
    if (gone.kind == protocol::ClientKind::robot) {
        auto r = robots_.find(gone.client_id);
        if (r != robots_.end() && r->second == session) robots_.erase(r);
    }

    Effects fx;
    for (auto& [name, q] : queues_) {
        std::vector<std::uint64_t> mine;
        for (auto id : q.leased) {
            const auto& rec = q.records.at(id);
            if (rec.lease && rec.lease->consumer_id == consumer) mine.push_back(id);
        }
        for (auto id : mine) {
            json r{{"op", "release"}, {"queue", name}, {"record_id", id}};
            commit(r.dump(), false, &fx);
        }
    }

    if (gone.kind == protocol::ClientKind::operator_) {
        const bool still_live = std::any_of(sessions_.begin(), sessions_.end(), [&](const auto& kv) {
            return kv.second.kind == protocol::ClientKind::operator_ && kv.second.client_id == gone.client_id;
        });
        if (!still_live) {
            const auto now = clock_.now_ms();
            for (const auto& [arm_id, op] : store_.open_keys()) {
                if (op != gone.client_id) continue;
                json r{{"op", "close"}, {"arm", arm_id}, {"operator", op},
                       {"reason", store::to_string(store::CloseReason::session_end)}, {"at", now}};
                commit(r.dump(), true, &fx);
            }
        }
    }
    publish_effects(fx);
}

void Broker::register_client(SessionId session, protocol::ClientKind kind, const std::string& id) {
    if (id.empty()) throw BrokerError("client id must be non-empty");
    std::lock_guard lock(mutex_);
    auto it = sessions_.find(session);
    if (it == sessions_.end()) throw NotFoundError("unknown session");
    if (it->second.kind) throw ConflictError("session already registered as '" + it->second.client_id + "'");
    if (kind == protocol::ClientKind::robot) {
        if (robots_.contains(id)) throw ConflictError("robot '" + id + "' is already connected");
        robots_[id] = session;
    }
    it->second.kind = kind;
    it->second.client_id = id;
    if (kind == protocol::ClientKind::robot) {
        for (const auto& name : {command_queue(id), ack_queue(id)}) {
            if (!queues_.contains(name)) commit(json{{"op", "queue"}, {"name", name}}.dump(), true, nullptr);
        }
    }
}

void Broker::subscribe(SessionId session, const std::vector<std::string>& topics) {
    std::lock_guard lock(mutex_);
    auto it = sessions_.find(session);
    if (it == sessions_.end()) throw NotFoundError("unknown session");
    for (const auto& t : topics) {
        if (std::find(it->second.topics.begin(), it->second.topics.end(), t) == it->second.topics.end()) {
            it->second.topics.push_back(t);
        }
    }
}

std::string Broker::consumer_id(SessionId session) const {
    std::lock_guard lock(mutex_);
    return consumer_id_locked(session);
}

std::string Broker::consumer_id_locked(SessionId session) const {
    auto it = sessions_.find(session);
    const std::string who = (it == sessions_.end() || it->second.client_id.empty()) ? "anon" : it->second.client_id;
    return who + "#" + std::to_string(session);
}

// ---------------------------------------------------------------------------
// Queues

void Broker::ensure_arm_queues(const std::string& arm_id) {
    std::lock_guard lock(mutex_);
    for (const auto& name : {command_queue(arm_id), ack_queue(arm_id)}) {
        if (!queues_.contains(name)) commit(json{{"op", "queue"}, {"name", name}}.dump(), true, nullptr);
    }
}

bool Broker::has_queue(const std::string& name) const {
    std::lock_guard lock(mutex_);
    return queues_.contains(name);
}

Receipt Broker::enqueue(const std::string& queue, Envelope env) {
    std::lock_guard lock(mutex_);
    return enqueue_locked(queue, std::move(env), true);
}

Receipt Broker::enqueue_locked(const std::string& queue, Envelope env, bool may_prompt) {
    auto& q = queue_ref(queue);
    const auto now = clock_.now_ms();
    env.seq = 0;
    Receipt receipt;
    receipt.queue = queue;
    json rec{{"op", "enqueue"}, {"queue", queue}};

    if (queue.starts_with(kCmdPrefix)) {
        auto* cmd = std::get_if<JointCommand>(&env.body);
        if (!cmd) throw BrokerError("queue '" + queue + "' only accepts commands");
        const auto arm_id = arm_of(queue);
        if (cmd->arm_id.empty()) cmd->arm_id = arm_id;
        if (cmd->arm_id != arm_id) {
            throw BrokerError("command for arm '" + cmd->arm_id + "' sent to queue '" + queue + "'");
        }
        if (cmd->operator_id.empty()) cmd->operator_id = "anonymous";
        if (cmd->id.empty()) cmd->id = mint_id();
        if (used_ids_.contains(cmd->id)) throw ConflictError("command id '" + cmd->id + "' already used");
        if (cmd->issued_at_ms == 0) cmd->issued_at_ms = now;
        // the raw values are checked before canonical rounding can pull them
        // back inside the box
        protocol::ValidationResult result;
        if (options_.validate_commands) result = protocol::validate_command(*cmd, options_.profile);
        env = canonical(env);
        cmd = std::get_if<JointCommand>(&env.body);
        receipt.command_id = cmd->id;
        if (options_.validate_commands && result.ok()) result = protocol::validate_command(*cmd, options_.profile);

        if (options_.validate_commands) {
            if (!result.ok()) {
                Effects fx;
                json rej{{"op", "reject"}, {"arm", arm_id}, {"operator", cmd->operator_id},
                         {"cmd", json::parse(protocol::encode_command(*cmd))}, {"at", now}};
                commit(rej.dump(), true, &fx);
                Ack ack{cmd->id, protocol::AckStatus::rejected, std::nullopt, describe(result.violations), now};
                publish_effects(fx);
                route_ack_locked(arm_id, ack, true);
                throw ValidationError(cmd->id, std::move(result.violations));
            }
        }
        rec["operator"] = cmd->operator_id;
        if (!may_prompt) rec["prompt"] = false;
    } else {
        env = canonical(env);
    }

    receipt.record_id = next_record_id_;
    rec["record_id"] = receipt.record_id;
    rec["at"] = now;
    rec["env"] = envelope_json(env);
    Effects fx;
    commit(rec.dump(), true, &fx);
    receipt.position = q.records.size();
    publish_effects(fx);
    return receipt;
}

std::optional<Delivery> Broker::next(const std::string& queue, const std::string& consumer_id,
                                     std::int64_t lease_ms) {
    std::lock_guard lock(mutex_);
    return next_locked(queue, consumer_id, lease_ms);
}

std::optional<Delivery> Broker::next_locked(const std::string& queue, const std::string& consumer,
                                            std::int64_t lease_ms) {
    if (lease_ms <= 0) throw BrokerError("lease must be positive");
    auto& q = queue_ref(queue);
    const auto now = clock_.now_ms();
    reclaim_expired(q, now);
    for (auto& [id, rec] : q.records) {
        if (rec.state != RecordState::ready) continue;
        json r{{"op", "lease"}, {"queue", queue}, {"record_id", id}, {"consumer", consumer},
               {"expiry", now + lease_ms}};
        commit(r.dump(), false, nullptr);
        return Delivery{queue, id, rec.delivery_count, rec.envelope};
    }
    return std::nullopt;
}

void Broker::reclaim_expired(Queue& q, std::int64_t now_ms) {
    std::vector<std::uint64_t> expired;
    for (auto id : q.leased) {
        const auto& rec = q.records.at(id);
        if (rec.lease && rec.lease->expiry_ms <= now_ms) expired.push_back(id);
    }
    for (auto id : expired) {
        auto& rec = q.records.at(id);
        rec.lease.reset();
        rec.state = RecordState::ready;
        q.leased.erase(id);
    }
}

void Broker::ack_record(const std::string& queue, const std::string& consumer_id, std::uint64_t record_id) {
    std::lock_guard lock(mutex_);
    ack_record_locked(queue, consumer_id, record_id);
}

void Broker::ack_record_locked(const std::string& queue, const std::string& consumer, std::uint64_t record_id) {
    auto& q = queue_ref(queue);
    auto it = q.records.find(record_id);
    if (it == q.records.end()) {
        throw LeaseError("record " + std::to_string(record_id) + " is not active in '" + queue + "'");
    }
    auto& rec = it->second;
    if (rec.state != RecordState::leased || !rec.lease) {
        throw LeaseError("record " + std::to_string(record_id) + " is not leased");
    }
    if (rec.lease->consumer_id != consumer) {
        throw LeaseError("record " + std::to_string(record_id) + " is leased by another consumer");
    }
    if (rec.lease->expiry_ms <= clock_.now_ms()) {
        reclaim_expired(q, clock_.now_ms());
        serve_waiters(queue);
        throw LeaseError("lease on record " + std::to_string(record_id) + " expired");
    }
    commit(json{{"op", "ack"}, {"queue", queue}, {"record_id", record_id}}.dump(), true, nullptr);
}

void Broker::wait_next(SessionId session, const std::string& queue, std::int64_t lease_ms) {
    std::lock_guard lock(mutex_);
    if (lease_ms <= 0) throw BrokerError("lease must be positive");
    queue_ref(queue);
    if (!sessions_.contains(session)) throw NotFoundError("unknown session");
    waiters_[queue].push_back(Waiter{session, lease_ms});
    serve_waiters(queue);
}

void Broker::serve_waiters(const std::string& queue) {
    auto wit = waiters_.find(queue);
    if (wit == waiters_.end()) return;
    auto& waiters = wit->second;
    while (!waiters.empty()) {
        const auto w = waiters.front();
        auto sit = sessions_.find(w.session);
        if (sit == sessions_.end()) {
            waiters.pop_front();
            continue;
        }
        const auto consumer = consumer_id_locked(w.session);
        auto d = next_locked(queue, consumer, w.lease_ms);
        if (!d) return;
        waiters.pop_front();
        Notification n;
        n.event = "delivery";
        n.queue = queue;
        n.record_id = d->record_id;
        n.delivery_count = d->delivery_count;
        if (const auto* cmd = std::get_if<JointCommand>(&d->envelope.body)) n.command = *cmd;
        if (const auto* ack = std::get_if<Ack>(&d->envelope.body)) n.ack = *ack;
        if (!sit->second.sink->push(notification(std::move(n)))) {
            commit(json{{"op", "release"}, {"queue", queue}, {"record_id", d->record_id}}.dump(), false, nullptr);
        }
    }
}

// ---------------------------------------------------------------------------
// Push

std::size_t Broker::publish(const std::string& topic, const Envelope& event) {
    std::lock_guard lock(mutex_);
    return publish_locked(topic, event);
}

std::size_t Broker::publish_locked(const std::string& topic, const Envelope& event) {
    std::size_t delivered = 0;
    for (auto& [id, session] : sessions_) {
        const bool wants = std::any_of(session.topics.begin(), session.topics.end(),
                                       [&](const std::string& p) { return topic_matches(p, topic); });
        if (!wants) continue;
        if (session.sink->push(event)) ++delivered;
    }
    return delivered;
}

void Broker::publish_effects(const Effects& fx) {
    for (const auto& [op, prompt] : fx.prompts) {
        publish_locked("operator." + op + ".prompt", Envelope{protocol::kVersion, 0, prompt});
    }
    for (const auto& seq : fx.closed) {
        Notification n;
        n.event = "sequence_closed";
        n.topic = "operator." + seq.operator_id + ".sequence";
        n.arm_id = seq.arm_id;
        n.operator_id = seq.operator_id;
        n.detail = std::string(store::to_string(*seq.close_reason));
        publish_locked(*n.topic, notification(n));
    }
    for (const auto& p : fx.promoted) {
        Notification n;
        n.event = "pattern_promoted";
        n.topic = "arm." + p.arm_id + ".pattern";
        n.arm_id = p.arm_id;
        n.pattern_id = p.pattern_id;
        publish_locked(*n.topic, notification(n));
    }
    for (const auto& [arm_id, ack] : fx.acks) {
        Notification n;
        n.event = "ack";
        n.topic = "arm." + arm_id + ".ack";
        n.arm_id = arm_id;
        n.command_id = ack.command_id;
        n.ack = ack;
        publish_locked(*n.topic, notification(n));
    }
    for (const auto& queue : fx.ready_queues) serve_waiters(queue);
}

// ---------------------------------------------------------------------------
// Acks and operators

bool Broker::route_ack(const std::string& arm_id, const Ack& ack) {
    std::lock_guard lock(mutex_);
    return route_ack_locked(arm_id, ack, false);
}

bool Broker::route_ack_locked(const std::string& arm_id, Ack ack, bool internal) {
    if (!internal && !known_ids_.contains(ack.command_id)) {
        spdlog::warn("dropping ack for unknown command '{}'", ack.command_id);
        return false;
    }
    if (routed_ids_.contains(ack.command_id)) {
        spdlog::debug("dropping duplicate ack for command '{}'", ack.command_id);
        return false;
    }
    const auto queue = ack_queue(arm_id);
    if (!queues_.contains(queue)) commit(json{{"op", "queue"}, {"name", queue}}.dump(), true, nullptr);
    enqueue_locked(queue, Envelope{protocol::kVersion, 0, std::move(ack)}, true);
    return true;
}

void Broker::robot_ack(SessionId session, const Ack& ack) {
    std::lock_guard lock(mutex_);
    auto it = sessions_.find(session);
    if (it == sessions_.end() || it->second.kind != protocol::ClientKind::robot) {
        throw BrokerError("acks must come from a registered robot session");
    }
    const auto arm_id = it->second.client_id;
    route_ack_locked(arm_id, ack, false);

    const auto queue = command_queue(arm_id);
    auto& q = queue_ref(queue);
    auto rec = q.by_command.find(ack.command_id);
    if (rec == q.by_command.end()) throw LeaseError("no active record for command '" + ack.command_id + "'");
    ack_record_locked(queue, consumer_id_locked(session), rec->second);
}

Receipt Broker::submit_command(const std::string& operator_id, JointCommand cmd) {
    std::lock_guard lock(mutex_);
    cmd.operator_id = operator_id;
    const auto queue = command_queue(cmd.arm_id);
    if (!queues_.contains(queue)) throw NotFoundError("unknown arm '" + cmd.arm_id + "'");
    return enqueue_locked(queue, Envelope{protocol::kVersion, 0, std::move(cmd)}, true);
}

std::vector<Receipt> Broker::respond_prompt(const std::string& operator_id,
                                            const protocol::PatternResponse& response) {
    std::lock_guard lock(mutex_);
    auto accepted = store_.respond(operator_id, response.pattern_id, response.accepted);
    std::vector<Receipt> receipts;
    if (!accepted) return receipts;

    commit(json{{"op", "use"}, {"pattern_id", accepted->pattern_id}}.dump(), true, nullptr);
    const auto queue = command_queue(accepted->arm_id);
    const auto& p = options_.profile;
    for (auto cmd : accepted->remainder) {
        // quantized values can land just outside the box (50.8 mm -> 51.0)
        auto q = cmd.config();
        for (std::size_t j = 0; j < arm::kJointCount; ++j) {
            q.angles_deg[j] = std::clamp(q.angles_deg[j], p.joint_ranges[j].min_deg, p.joint_ranges[j].max_deg);
        }
        q.gripper_mm = std::clamp(q.gripper_mm, p.gripper_min_mm, p.gripper_max_mm);
        cmd.set_config(q);
        cmd.id = mint_id();
        cmd.operator_id = operator_id;
        cmd.issued_at_ms = clock_.now_ms();
        receipts.push_back(enqueue_locked(queue, Envelope{protocol::kVersion, 0, std::move(cmd)}, false));
    }
    return receipts;
}

void Broker::end_sequence(const std::string& arm_id, const std::string& operator_id) {
    std::lock_guard lock(mutex_);
    if (!store_.open_sequence_id(arm_id, operator_id)) return;
    Effects fx;
    json r{{"op", "close"}, {"arm", arm_id}, {"operator", operator_id},
           {"reason", store::to_string(store::CloseReason::explicit_end)}, {"at", clock_.now_ms()}};
    commit(r.dump(), true, &fx);
    publish_effects(fx);
}

void Broker::tick() {
    std::lock_guard lock(mutex_);
    const auto now = clock_.now_ms();
    for (auto& [name, q] : queues_) {
        const auto before = q.leased.size();
        reclaim_expired(q, now);
        if (q.leased.size() != before) serve_waiters(name);
    }
    Effects fx;
    for (const auto& [arm_id, op] : store_.idle_sequences(now)) {
        json r{{"op", "close"}, {"arm", arm_id}, {"operator", op},
               {"reason", store::to_string(store::CloseReason::idle_gap)}, {"at", now}};
        commit(r.dump(), true, &fx);
    }
    publish_effects(fx);
    if (options_.compact_every > 0 && records_since_compact_ >= options_.compact_every && journal_) {
        journal_->rewrite(std::vector<std::string>{checkpoint_record()});
        records_since_compact_ = 0;
    }
}

void Broker::compact() {
    std::lock_guard lock(mutex_);
    if (!journal_) return;
    journal_->rewrite(std::vector<std::string>{checkpoint_record()});
    records_since_compact_ = 0;
}

std::string Broker::mint_id() {
    while (true) {
        const auto hi = rng_();
        const auto lo = rng_();
        unsigned char b[16];
        for (int i = 0; i < 8; ++i) {
            b[i] = static_cast<unsigned char>(hi >> (56 - 8 * i));
            b[8 + i] = static_cast<unsigned char>(lo >> (56 - 8 * i));
        }
        b[6] = static_cast<unsigned char>((b[6] & 0x0f) | 0x40);  // version 4
        b[8] = static_cast<unsigned char>((b[8] & 0x3f) | 0x80);  // RFC 4122 variant
        char out[37];
        std::snprintf(out, sizeof(out),
                      "%02x%02x%02x%02x-%02x%02x-%02x%02x-%02x%02x-%02x%02x%02x%02x%02x%02x", b[0], b[1],
                      b[2], b[3], b[4], b[5], b[6], b[7], b[8], b[9], b[10], b[11], b[12], b[13], b[14], b[15]);
        std::string id(out);
        if (!used_ids_.contains(id)) return id;
    }
}

// ---------------------------------------------------------------------------
// Introspection

std::vector<ArmInfo> Broker::arms() const {
    std::lock_guard lock(mutex_);
    std::vector<ArmInfo> out;
    for (const auto& [name, q] : queues_) {
        if (!name.starts_with(kCmdPrefix)) continue;
        ArmInfo info;
        info.arm_id = arm_of(name);
        info.online = robots_.contains(info.arm_id);
        if (auto it = last_pose_.find(info.arm_id); it != last_pose_.end()) info.last_pose = it->second;
        info.queued_commands = q.records.size();
        out.push_back(std::move(info));
    }
    return out;
}

std::vector<std::string> Broker::queue_names() const {
    std::lock_guard lock(mutex_);
    std::vector<std::string> out;
    for (const auto& [name, q] : queues_) out.push_back(name);
    return out;
}

std::vector<QueueRecord> Broker::queue_records(const std::string& queue) const {
    std::lock_guard lock(mutex_);
    auto it = queues_.find(queue);
    if (it == queues_.end()) throw NotFoundError("unknown queue '" + queue + "'");
    std::vector<QueueRecord> out;
    for (const auto& [id, rec] : it->second.records) out.push_back(rec);
    return out;
}

std::string Broker::store_snapshot() const {
    std::lock_guard lock(mutex_);
    return store_.snapshot();
}

store::StoreTree Broker::store_tree() const {
    std::lock_guard lock(mutex_);
    return store_.tree();
}

std::vector<store::LearnedPattern> Broker::patterns(const std::string& arm_id) const {
    std::lock_guard lock(mutex_);
    return store_.patterns(arm_id);
}

bool Broker::prompt_outstanding(const std::string& operator_id, const std::string& pattern_id) const {
    std::lock_guard lock(mutex_);
    return store_.has_prompt(operator_id, pattern_id);
}

std::uint64_t Broker::journal_records() const {
    std::lock_guard lock(mutex_);
    return journal_records_;
}

}  // namespace iort::broker
