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

#include "iort/scenario.hpp"

#include <chrono>
#include <map>
#include <random>
#include <set>
#include <thread>

#include <nlohmann/json.hpp>

#include "iort/device_agent.hpp"
#include "text_util.hpp"

namespace iort::scenario {

using nlohmann::json;
using protocol::Envelope;
using protocol::Notification;

namespace {

Envelope envelope(protocol::Body body) { return Envelope{protocol::kVersion, 0, std::move(body)}; }

Component parse_component(const json& j) {
    const auto c = j.value("component", std::string("agent"));
    if (c == "agent") return Component::agent;
    if (c == "broker") return Component::broker;
    throw ScenarioError("unknown component '" + c + "'");
}

std::string need_arm(const json& j, Component c) {
    auto arm = j.value("arm_id", std::string());
    if (c == Component::agent && arm.empty()) throw ScenarioError("agent control needs arm_id");
    return arm;
}

Action parse_control(const json& j) {
    const auto ctl = j.at("ctl").get<std::string>();
    if (ctl == "send") {
        return Send{envelope(protocol::decode_command(j.at("command").dump(), true))};
    }
    if (ctl == "end_sequence") {
        Notification n;
        n.event = "end_sequence";
        n.arm_id = j.at("arm_id").get<std::string>();
        return Send{envelope(std::move(n))};
    }
    if (ctl == "wait") {
        const auto ms = j.at("ms").get<std::int64_t>();
        if (ms < 0) throw ScenarioError("wait needs ms >= 0");
        return Wait{ms};
    }
    if (ctl == "expect") {
        Expect e;
        e.event = j.at("event").get<std::string>();
        if (j.contains("command_id")) e.command_id = j["command_id"].get<std::string>();
        if (j.contains("status")) {
            const auto s = j["status"].get<std::string>();
            if (s == "ok") e.status = protocol::AckStatus::ok;
            else if (s == "rejected") e.status = protocol::AckStatus::rejected;
            else if (s == "fault") e.status = protocol::AckStatus::fault;
            else throw ScenarioError("unknown ack status '" + s + "'");
        }
        if (j.contains("matched_prefix_len")) e.matched_prefix_len = j["matched_prefix_len"].get<std::uint32_t>();
        if (j.contains("remainder_len")) e.remainder_len = j["remainder_len"].get<std::size_t>();
        e.timeout_ms = j.value("timeout_ms", e.timeout_ms);
        return e;
    }
    if (ctl == "respond") return Respond{j.value("accept", true)};
    if (ctl == "kill") {
        const auto c = parse_component(j);
        return Kill{c, need_arm(j, c), j.value("lose_state", false)};
    }
    if (ctl == "restart") {
        const auto c = parse_component(j);
        return Restart{c, need_arm(j, c)};
    }
    if (ctl == "faults") {
        const auto p = j.at("p").get<double>();
        if (!(p >= 0.0 && p <= 1.0)) throw ScenarioError("faults needs 0 <= p <= 1");
        return Faults{j.at("arm_id").get<std::string>(), p};
    }
    throw ScenarioError("unknown control record '" + ctl + "'");
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string describe(const Expect& e) {
    std::string out = "expected " + e.event;
    if (e.command_id) out += " for " + *e.command_id;
    if (e.status) out += " with status " + std::string(protocol::to_string(*e.status));
    if (e.matched_prefix_len) out += " after prefix " + std::to_string(*e.matched_prefix_len);
    if (e.remainder_len) out += " with " + std::to_string(*e.remainder_len) + " remaining";
    return out;
}

bool matches(const Expect& e, const Envelope& env) {
    if (e.event == "prompt") {
        const auto* p = std::get_if<protocol::PatternPrompt>(&env.body);
        if (!p) return false;
        if (e.matched_prefix_len && p->matched_prefix_len != *e.matched_prefix_len) return false;
        if (e.remainder_len && p->remainder.size() != *e.remainder_len) return false;
        return true;
    }
    const auto* n = std::get_if<Notification>(&env.body);
    if (!n || n->event != e.event) return false;
    if (e.command_id && n->command_id != e.command_id) return false;
    if (e.status && (!n->ack || n->ack->status != *e.status)) return false;
    return true;
}

// Inbound bookkeeping shared by simulated and live runs.
class Tracker {
public:
    explicit Tracker(const Observer& observer) : observer_(observer) {}

    void record(Envelope env) {
        if (const auto* p = std::get_if<protocol::PatternPrompt>(&env.body)) last_prompt_ = p->pattern_id;
        if (observer_) observer_(env);
        result_.received.push_back(std::move(env));
        matched_.push_back(false);
    }

    bool take(const Expect& e) {
        for (std::size_t i = 0; i < matched_.size(); ++i) {
            if (!matched_[i] && matches(e, result_.received[i])) {
                matched_[i] = true;
                return true;
            }
        }
        return false;
    }

    void fail(std::size_t line, const std::string& why) {
        result_.ok = false;
        result_.failure = "line " + std::to_string(line) + ": " + why;
    }

    const std::optional<std::string>& last_prompt() const { return last_prompt_; }
    Result& result() { return result_; }

private:
    const Observer& observer_;
    Result result_;
    std::vector<bool> matched_;
    std::optional<std::string> last_prompt_;
};

void prepare(Envelope& env, const Scenario& sc) {
    if (auto* c = std::get_if<protocol::JointCommand>(&env.body); c && c->operator_id.empty()) {
        c->operator_id = sc.operator_id;
    }
}

std::vector<std::string> operator_topics(const Scenario& sc) {
    return {"operator." + sc.operator_id + ".*", "arm.*"};
}

}  // namespace

Scenario parse(std::string_view text) {
    Scenario sc;
    std::set<std::string> arms;
    std::size_t line_no = 0;
    for (const auto raw : detail::split(text, '\n')) {
        ++line_no;
        const auto line = detail::trim(raw);
        if (line.empty() || line.front() == '#') continue;
        try {
            const auto j = json::parse(line);
            if (!j.is_object()) throw ScenarioError("expected a JSON object");
            if (!j.contains("ctl")) {
                sc.steps.push_back({line_no, Send{protocol::decode(line)}});
            } else if (j["ctl"] == "scenario") {
                if (!sc.steps.empty()) throw ScenarioError("the scenario header must come first");
                sc.seed = j.value("seed", sc.seed);
                sc.operator_id = j.value("operator_id", sc.operator_id);
                for (const auto& a : j.value("arms", json::array())) sc.arms.push_back(a.get<std::string>());
            } else {
                sc.steps.push_back({line_no, parse_control(j)});
            }
        } catch (const std::exception& e) {
            throw ScenarioError("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (sc.arms.empty()) {
        for (const auto& step : sc.steps) {
            if (const auto* s = std::get_if<Send>(&step.action)) {
                if (const auto* c = std::get_if<protocol::JointCommand>(&s->envelope.body)) arms.insert(c->arm_id);
            }
        }
        arms.erase("");
        sc.arms.assign(arms.begin(), arms.end());
    }
    return sc;
}

Scenario load(const std::string& path) {
    try {
        return parse(detail::read_file(path));
    } catch (const ScenarioError&) {
        throw;
    } catch (const std::exception& e) {
        throw ScenarioError(path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------

struct SimRun::Impl {
    struct Slot {
        std::string arm_id;
        agent::AgentState state;
        std::unique_ptr<LocalConnection> conn;
        std::unique_ptr<agent::Agent> agent;
        bool alive = true;
        double fault_p = 0.0;
        std::mt19937_64 rng;
    };

    Impl(Scenario s, SimOptions o)
        : sc(std::move(s)), options(std::move(o)), clock(options.start_us) {
        journal = options.journal ? options.journal : std::make_shared<journal::MemoryJournal>();
        options.broker.id_seed = sc.seed;
        for (const auto& arm : sc.arms) {
            auto& slot = agents[arm];
            slot.arm_id = arm;
            slot.rng.seed(sc.seed ^ fnv1a(arm));
        }
    }

    void boot(Tracker& t) {
        broker = std::make_unique<broker::Broker>(options.broker, clock, journal);
        broker->recover();
        op = std::make_unique<LocalConnection>(*broker);
        op->send(envelope(protocol::Register{protocol::ClientKind::operator_, sc.operator_id}));
        op->send(envelope(protocol::Subscribe{operator_topics(sc)}));
        for (auto& [_, slot] : agents) {
            if (slot.alive) connect(slot);
        }
        drain(t);
    }

    void connect(Slot& slot) {
        slot.conn = std::make_unique<LocalConnection>(*broker);
        agent::AgentOptions ao;
        ao.arm_id = slot.arm_id;
        ao.profile = options.broker.profile;
        ao.execute.fault = [&slot](const protocol::JointCommand&) -> std::optional<std::string> {
            if (slot.fault_p <= 0.0) return std::nullopt;
            std::uniform_real_distribution<double> u(0.0, 1.0);
            if (u(slot.rng) < slot.fault_p) return std::string("injected fault");
            return std::nullopt;
        };
        slot.agent = std::make_unique<agent::Agent>(ao, *slot.conn, clock, slot.state);
        slot.agent->start();
    }

    void disconnect(Slot& slot) {
        slot.agent.reset();
        slot.conn.reset();
    }

    void shutdown_broker() {
        op.reset();
        for (auto& [_, slot] : agents) disconnect(slot);
        broker.reset();
    }

    // Steps everything until no connection has anything left to process.
    void drain(Tracker& t) {
        for (;;) {
            bool progress = false;
            if (op) {
                while (auto env = op->receive(0)) {
                    t.record(std::move(*env));
                    progress = true;
                }
            }
            for (auto& [_, slot] : agents) {
                if (!slot.agent) continue;
                try {
                    while (slot.agent->pump(0)) progress = true;
                } catch (const agent::ConflictError& e) {
                    throw ScenarioError("agent " + slot.arm_id + ": " + e.what());
                }
            }
            if (!progress) return;
        }
    }

    Slot& slot(const std::string& arm) {
        auto it = agents.find(arm);
        if (it == agents.end()) throw ScenarioError("no agent for arm '" + arm + "'");
        return it->second;
    }

    // Returns a failure message, empty on success.
    std::string step(const Action& action, Tracker& t) {
        return std::visit(
            [&](const auto& a) -> std::string {
                using T = std::decay_t<decltype(a)>;
                if constexpr (std::is_same_v<T, Send>) {
                    if (!broker) return "broker is down";
                    auto env = a.envelope;
                    prepare(env, sc);
                    op->send(std::move(env));
                } else if constexpr (std::is_same_v<T, Wait>) {
                    clock.sleep_us(a.ms * 1000);
                    if (broker) broker->tick();
                } else if constexpr (std::is_same_v<T, Expect>) {
                    drain(t);
                    if (!t.take(a)) return describe(a);
                } else if constexpr (std::is_same_v<T, Respond>) {
                    drain(t);
                    if (!broker) return "broker is down";
                    if (!t.last_prompt()) return "no prompt to answer";
                    op->send(envelope(protocol::PatternResponse{*t.last_prompt(), a.accept}));
                } else if constexpr (std::is_same_v<T, Kill>) {
                    if (a.component == Component::broker) {
                        shutdown_broker();
                    } else {
                        auto& s = slot(a.arm_id);
                        disconnect(s);
                        s.alive = false;
                        if (a.lose_state) s.state = agent::AgentState{};
                    }
                } else if constexpr (std::is_same_v<T, Restart>) {
                    if (a.component == Component::broker) {
                        if (broker) shutdown_broker();
                        boot(t);
                    } else {
                        auto& s = slot(a.arm_id);
                        if (s.agent) disconnect(s);
                        s.alive = true;
                        if (broker) connect(s);
                    }
                } else if constexpr (std::is_same_v<T, Faults>) {
                    slot(a.arm_id).fault_p = a.p;
                }
                if (broker) drain(t);
                return {};
            },
            action);
    }

    Scenario sc;
    SimOptions options;
    SimClock clock;
    std::shared_ptr<journal::Journal> journal;
    std::unique_ptr<broker::Broker> broker;
    std::unique_ptr<LocalConnection> op;
    std::map<std::string, Slot> agents;  // ordered, so stepping order is fixed
};

SimRun::SimRun(Scenario scenario, SimOptions options)
    : impl_(std::make_unique<Impl>(std::move(scenario), std::move(options))) {}

SimRun::~SimRun() {
    if (impl_) impl_->shutdown_broker();
}

Result SimRun::run(const Observer& observer) {
    Tracker t(observer);
    auto& m = *impl_;
    m.boot(t);
    for (const auto& s : m.sc.steps) {
        if (auto why = m.step(s.action, t); !why.empty()) {
            t.fail(s.line, why);
            break;
        }
    }
    if (m.broker) m.drain(t);
    return std::move(t.result());
}

const broker::Broker& SimRun::broker() const {
    if (!impl_->broker) throw ScenarioError("broker is down");
    return *impl_->broker;
}

std::shared_ptr<journal::Journal> SimRun::journal() const { return impl_->journal; }

Clock& SimRun::clock() { return impl_->clock; }

// ---------------------------------------------------------------------------

Result run_live(const Scenario& sc, Connection& conn, const Observer& observer) {
    for (const auto& s : sc.steps) {
        if (std::holds_alternative<Kill>(s.action) || std::holds_alternative<Restart>(s.action) ||
            std::holds_alternative<Faults>(s.action)) {
            throw ScenarioError("line " + std::to_string(s.line) + ": kill, restart and faults need a simulated run");
        }
    }
    Tracker t(observer);
    using steady = std::chrono::steady_clock;
    auto pull_until = [&](steady::time_point deadline, const std::function<bool()>& done) {
        while (!done()) {
            const auto left =
                std::chrono::duration_cast<std::chrono::milliseconds>(deadline - steady::now()).count();
            if (left <= 0 || !conn.is_open()) return false;
            if (auto env = conn.receive(std::min<std::int64_t>(left, 100))) t.record(std::move(*env));
        }
        return true;
    };
    auto expect_event = [&](const std::string& event) {
        Expect e;
        e.event = event;
        return pull_until(steady::now() + std::chrono::seconds(5), [&] { return t.take(e); });
    };

    conn.send(envelope(protocol::Register{protocol::ClientKind::operator_, sc.operator_id}));
    if (!expect_event("registered")) throw ScenarioError("broker did not confirm registration");
    conn.send(envelope(protocol::Subscribe{operator_topics(sc)}));
    if (!expect_event("subscribed")) throw ScenarioError("broker did not confirm the subscription");

    for (const auto& s : sc.steps) {
        std::string why;
        if (const auto* send = std::get_if<Send>(&s.action)) {
            auto env = send->envelope;
            prepare(env, sc);
            conn.send(std::move(env));
        } else if (const auto* w = std::get_if<Wait>(&s.action)) {
            pull_until(steady::now() + std::chrono::milliseconds(w->ms), [] { return false; });
        } else if (const auto* e = std::get_if<Expect>(&s.action)) {
            if (!pull_until(steady::now() + std::chrono::milliseconds(e->timeout_ms), [&] { return t.take(*e); })) {
                why = describe(*e);
            }
        } else if (const auto* r = std::get_if<Respond>(&s.action)) {
            pull_until(steady::now() + std::chrono::milliseconds(500), [&] { return t.last_prompt().has_value(); });
            if (!t.last_prompt()) {
                why = "no prompt to answer";
            } else {
                conn.send(envelope(protocol::PatternResponse{*t.last_prompt(), r->accept}));
            }
        }
        if (!why.empty()) {
            t.fail(s.line, why);
            break;
        }
        while (auto env = conn.receive(0)) t.record(std::move(*env));
    }
    return std::move(t.result());
}

}  // namespace iort::scenario
