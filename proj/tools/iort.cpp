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

// `iort`: runs, scripts and inspects the whole system. Exit codes: 0 ok,
// 1 runtime failure, 2 usage error. Every flag also reads IORT_<FLAG>.

#include <CLI11.hpp>
#include <pthread.h>
#include <signal.h>

#include <atomic>
#include <charconv>
#include <cmath>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <thread>

#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "iort/broker.hpp"
#include "iort/device_agent.hpp"
#include "iort/net.hpp"
#include "iort/scenario.hpp"

using namespace iort;
using nlohmann::json;

namespace {

// Set by the selected subcommand; runs once parsing and logging setup are done.
std::function<void()> g_action;
// Raised by SIGINT/SIGTERM in subcommands that shut down cooperatively.
std::atomic<bool> g_stop{false};

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class RuntimeFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string env_name(const std::string& flag) {
    std::string out = "IORT_";
    for (char c : flag) out += c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return out;
}

template <typename T>
CLI::Option* flag(CLI::App* app, const std::string& name, T& value, const std::string& help) {
    return app->add_option("--" + name, value, help)->envname(env_name(name))->capture_default_str();
}

CLI::Option* toggle(CLI::App* app, const std::string& name, bool& value, const std::string& help) {
    return app->add_flag("--" + name, value, help)->envname(env_name(name));
}

void print(const protocol::Envelope& env) {
    std::cout << protocol::encode(env) << std::flush;
}

// Blocks SIGINT/SIGTERM process-wide so a helper thread can sigwait for them.
sigset_t block_signals() {
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);
    return set;
}

void watch_signals(const sigset_t& set) {
    std::thread([set] {
        int sig = 0;
        sigwait(&set, &sig);
        spdlog::info("signal {} received, shutting down", sig);
        g_stop = true;
    }).detach();
}

struct ProfileFlag {
    std::string path;
    arm::ArmProfile load() const { return path.empty() ? arm::ArmProfile{} : arm::load_profile(path); }
};

struct StoreFlags {
    std::size_t promote_k = 3;
    double idle_gap_s = 10.0;

    void add(CLI::App* app) {
        flag(app, "promote-k", promote_k, "repetitions before a sequence is learned")->check(CLI::PositiveNumber);
        flag(app, "idle-gap-s", idle_gap_s, "silence that closes an open sequence")->check(CLI::PositiveNumber);
    }
    store::StoreOptions options() const {
        store::StoreOptions o;
        o.promote_k = promote_k;
        o.idle_gap_ms = static_cast<std::int64_t>(idle_gap_s * 1000.0);
        return o;
    }
};

// -- broker -----------------------------------------------------------------

struct ServeCmd {
    std::string bind = "0.0.0.0";
    std::uint16_t port = 7450;
    std::uint16_t http_port = 7451;
    std::string journal = "iort.journal";
    std::int64_t lease_ms = 30'000;
    std::uint64_t compact_every = 10'000;
    bool no_fsync = false;
    std::string ready_file;
    StoreFlags store;
    ProfileFlag profile;

    void add(CLI::App* parent) {
        auto* app = parent->add_subcommand("serve", "run the broker with its stream endpoint and HTTP gateway");
        flag(app, "bind", bind, "listen address");
        flag(app, "port", port, "stream endpoint port (0 = any)");
        flag(app, "http-port", http_port, "gateway port (0 = any)");
        flag(app, "journal", journal, "journal file; replayed on start");
        flag(app, "lease-ms", lease_ms, "default delivery lease")->check(CLI::PositiveNumber);
        flag(app, "compact-every", compact_every, "records between journal compactions (0 = never)");
        toggle(app, "no-fsync", no_fsync, "skip fsync on journal appends");
        flag(app, "ready-file", ready_file, "write the bound ports here once listening");
        flag(app, "profile", profile.path, "arm profile file (default: built-in)");
        store.add(app);
        app->callback([this] { g_action = [this] { run(); }; });
    }

    void run() {
        const auto signals = block_signals();
        broker::BrokerOptions o;
        o.profile = profile.load();
        o.lease_ms = lease_ms;
        o.store = store.options();
        o.compact_every = compact_every;
        SystemClock clock;
        auto j = std::make_shared<journal::FileJournal>(journal, !no_fsync);
        broker::Broker b(o, clock, j);
        b.recover();
        spdlog::info("recovered {} journal records from {}", b.journal_records(), journal);

        net::ServerOptions so;
        so.bind_address = bind;
        so.stream_port = port;
        so.http_port = http_port;
        net::Server server(b, so);
        server.start();
        spdlog::info("stream endpoint on {}:{}, gateway on {}:{}", bind, server.stream_port(), bind,
                     server.http_port());
        if (!ready_file.empty()) {
            std::ofstream(ready_file) << json{{"stream_port", server.stream_port()}, {"http_port", server.http_port()}}
                                      << "\n";
        }
        int sig = 0;
        sigwait(&signals, &sig);
        spdlog::info("signal {} received, shutting down", sig);
        server.stop();
    }
};

// -- agent ------------------------------------------------------------------

struct AgentCmd {
    std::string arm_id;
    std::string broker = "127.0.0.1:7450";
    double speed_scale = 1.0;
    std::string state;
    std::int64_t lease_ms = 0;
    ProfileFlag profile;

    void add(CLI::App* parent) {
        auto* app = parent->add_subcommand("run", "run a simulated device agent for one arm");
        flag(app, "arm-id", arm_id, "arm served by this agent")->required();
        flag(app, "broker", broker, "broker stream endpoint host:port");
        flag(app, "speed-scale", speed_scale, "slow every move down by this factor")->check(CLI::PositiveNumber);
        flag(app, "state", state, "persist position and executed ids here");
        flag(app, "lease-ms", lease_ms, "lease to request per delivery (0 = broker default)");
        flag(app, "profile", profile.path, "arm profile file (default: built-in)");
        app->callback([this] { g_action = [this] { run(); }; });
    }

    void run() {
        const auto [host, port] = net::parse_endpoint(broker, 7450);
        const auto signals = block_signals();
        watch_signals(signals);
        agent::AgentOptions o;
        o.arm_id = arm_id;
        o.profile = profile.load();
        o.execute.speed_scale = speed_scale;
        o.lease_ms = lease_ms;
        o.state_path = state;
        SystemClock clock;
        try {
            agent::run_with_reconnect(o, clock, [&, host = host, port = port] { return net::connect(host, port); },
                                      g_stop);
        } catch (const agent::ConflictError& e) {
            throw RuntimeFailure("arm '" + arm_id + "' is already served: " + e.what());
        }
    }
};

// -- operator ---------------------------------------------------------------

std::vector<double> parse_angles(const std::string& text) {
    std::vector<double> out;
    std::string_view s(text);
    while (true) {
        const auto comma = s.find(',');
        auto part = s.substr(0, comma);
        while (!part.empty() && part.front() == ' ') part.remove_prefix(1);
        while (!part.empty() && part.back() == ' ') part.remove_suffix(1);
        double v = 0;
        const auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
        if (part.empty() || ec != std::errc() || ptr != part.data() + part.size() || !std::isfinite(v)) {
            throw UsageError("--angles: '" + std::string(part) + "' is not a number");
        }
        out.push_back(v);
        if (comma == std::string_view::npos) break;
        s.remove_prefix(comma + 1);
    }
    if (out.size() != arm::kJointCount) {
        throw UsageError("--angles needs 5 values (base,shoulder,elbow,wrist_pitch,wrist_roll), got " +
                         std::to_string(out.size()));
    }
    return out;
}

struct OperatorFlags {
    std::string broker = "127.0.0.1:7450";
    std::string operator_id = "cli";

    void add(CLI::App* app) {
        flag(app, "broker", broker, "broker stream endpoint host:port");
        flag(app, "operator-id", operator_id, "operator identity");
    }

    std::unique_ptr<Connection> open() const {
        const auto [host, port] = net::parse_endpoint(broker, 7450);
        return net::connect(host, port);
    }
};

using Steady = std::chrono::steady_clock;

// Receives until `pred` accepts an envelope or the deadline passes.
std::optional<protocol::Envelope> await(Connection& c, Steady::time_point deadline,
                                        const std::function<bool(const protocol::Envelope&)>& pred) {
    for (;;) {
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Steady::now()).count();
        if (left <= 0) return std::nullopt;
        auto env = c.receive(std::min<std::int64_t>(left, 100));
        if (!env) {
            if (!c.is_open()) throw RuntimeFailure("connection to broker lost");
            continue;
        }
        if (pred(*env)) return env;
    }
}

const protocol::Notification* event_of(const protocol::Envelope& env) {
    return std::get_if<protocol::Notification>(&env.body);
}

void handshake(Connection& c, const std::string& operator_id, std::vector<std::string> topics) {
    const auto deadline = Steady::now() + std::chrono::seconds(5);
    c.send({protocol::kVersion, 0, protocol::Register{protocol::ClientKind::operator_, operator_id}});
    auto reg = await(c, deadline, [](const auto& e) {
        const auto* n = event_of(e);
        return n && (n->event == "registered" || n->event == "error");
    });
    if (!reg || event_of(*reg)->event != "registered") throw RuntimeFailure("registration failed");
    if (topics.empty()) return;
    c.send({protocol::kVersion, 0, protocol::Subscribe{std::move(topics)}});
    if (!await(c, deadline, [](const auto& e) { return event_of(e) && event_of(e)->event == "subscribed"; })) {
        throw RuntimeFailure("subscription not confirmed");
    }
}

struct SendCmd {
    OperatorFlags op;
    std::string arm;
    std::string angles;
    double gripper = 0.0;
    std::string id;
    std::int64_t timeout_ms = 10'000;
    bool no_wait = false;

    void add(CLI::App* parent) {
        auto* app = parent->add_subcommand("send", "send one command and print its ack");
        op.add(app);
        flag(app, "arm", arm, "target arm")->required();
        flag(app, "angles", angles, "base,shoulder,elbow,wrist_pitch,wrist_roll in degrees")->required();
        flag(app, "gripper", gripper, "gripper aperture in mm");
        flag(app, "id", id, "command id (default: minted by the broker)");
        flag(app, "timeout-ms", timeout_ms, "how long to wait for the ack");
        toggle(app, "no-wait", no_wait, "print the receipt and exit without waiting for the ack");
        app->callback([this] { g_action = [this] { run(); }; });
    }

    void run() {
        const auto a = parse_angles(angles);
        if (!std::isfinite(gripper)) throw UsageError("--gripper must be finite");
        protocol::JointCommand cmd;
        cmd.id = id;
        cmd.arm_id = arm;
        cmd.operator_id = op.operator_id;
        arm::JointConfig q;
        std::copy(a.begin(), a.end(), q.angles_deg.begin());
        q.gripper_mm = gripper;
        cmd.set_config(q);

        auto conn = op.open();
        handshake(*conn, op.operator_id, {"arm." + arm + ".ack"});
        const auto deadline = Steady::now() + std::chrono::milliseconds(timeout_ms);
        conn->send({protocol::kVersion, 0, cmd});
        auto reply = await(*conn, deadline, [](const auto& e) {
            const auto* n = event_of(e);
            return n && (n->event == "receipt" || n->event == "rejected" || n->event == "error");
        });
        if (!reply) throw RuntimeFailure("no receipt within " + std::to_string(timeout_ms) + " ms");
        const auto& r = *event_of(*reply);
        if (r.event != "receipt" || no_wait) {
            print(*reply);
            if (r.event != "receipt") throw RuntimeFailure("command not accepted: " + r.detail.value_or(r.event));
            return;
        }
        const auto command_id = *r.command_id;
        auto ack = await(*conn, deadline, [&](const auto& e) {
            const auto* n = event_of(e);
            return n && n->event == "ack" && n->command_id == command_id;
        });
        if (!ack) throw RuntimeFailure("no ack for " + command_id + " within " + std::to_string(timeout_ms) + " ms");
        print(*ack);
        if (event_of(*ack)->ack->status != protocol::AckStatus::ok) throw RuntimeFailure("command did not succeed");
    }
};

struct ScriptCmd {
    OperatorFlags op;
    std::string file;
    bool sim_clock = false;
    std::optional<std::uint64_t> seed;
    std::string journal;
    std::string store_out;
    std::int64_t lease_ms = 30'000;
    StoreFlags store;
    ProfileFlag profile;
    CLI::Option* operator_flag = nullptr;

    void add(CLI::App* parent) {
        auto* app = parent->add_subcommand("script", "replay a scenario file, printing every envelope received");
        app->add_option("file", file, "scenario file (JSON lines)")->required()->check(CLI::ExistingFile);
        flag(app, "broker", op.broker, "broker stream endpoint host:port (live runs)");
        operator_flag = flag(app, "operator-id", op.operator_id, "override the scenario's operator id");
        toggle(app, "sim-clock", sim_clock, "run an in-process system on a simulated clock");
        app->add_option("--seed", seed, "override the scenario seed")->envname("IORT_SEED");
        flag(app, "journal", journal, "simulated runs: journal file (default: in memory)");
        flag(app, "store-out", store_out, "simulated runs: write the final store snapshot here");
        flag(app, "lease-ms", lease_ms, "simulated runs: delivery lease")->check(CLI::PositiveNumber);
        flag(app, "profile", profile.path, "simulated runs: arm profile file");
        store.add(app);
        app->callback([this] { g_action = [this] { run(); }; });
    }

    void run() {
        auto sc = scenario::load(file);
        if (seed) sc.seed = *seed;
        if (operator_flag->count() > 0) sc.operator_id = op.operator_id;
        scenario::Result result;
        if (sim_clock) {
            scenario::SimOptions so;
            so.broker.profile = profile.load();
            so.broker.lease_ms = lease_ms;
            so.broker.store = store.options();
            if (!journal.empty()) so.journal = std::make_shared<journal::FileJournal>(journal, false);
            scenario::SimRun sim(std::move(sc), so);
            result = sim.run(print);
            if (!store_out.empty()) std::ofstream(store_out) << sim.broker().store_snapshot() << "\n";
        } else {
            auto conn = op.open();
            result = scenario::run_live(sc, *conn, print);
        }
        if (!result.ok) throw RuntimeFailure(result.failure);
    }
};

struct WatchCmd {
    OperatorFlags op;
    std::string topics;
    std::size_t count = 0;
    std::int64_t duration_ms = 0;

    void add(CLI::App* parent) {
        auto* app = parent->add_subcommand("watch", "print push events as JSON lines");
        op.add(app);
        flag(app, "topics", topics, "comma-separated topic globs (default: operator.<id>.*,arm.*)");
        flag(app, "count", count, "exit after this many events (0 = no limit)");
        flag(app, "duration-ms", duration_ms, "exit after this long (0 = until interrupted)");
        app->callback([this] { g_action = [this] { run(); }; });
    }

    void run() {
        std::vector<std::string> list;
        for (const auto& t : CLI::detail::split(topics, ',')) {
            if (!t.empty()) list.push_back(t);
        }
        if (list.empty()) list = {"operator." + op.operator_id + ".*", "arm.*"};
        const auto signals = block_signals();
        watch_signals(signals);
        auto conn = op.open();
        handshake(*conn, op.operator_id, list);
        const auto end = Steady::now() + std::chrono::milliseconds(duration_ms);
        std::size_t seen = 0;
        while (!g_stop) {
            if (duration_ms > 0 && Steady::now() >= end) return;
            auto env = conn->receive(100);
            if (!env) {
                if (!conn->is_open()) throw RuntimeFailure("connection to broker lost");
                continue;
            }
            print(*env);
            if (count > 0 && ++seen >= count) return;
        }
    }
};

// -- store ------------------------------------------------------------------

struct StoreCmd {
    std::string journal = "iort.journal";
    StoreFlags store;
    bool stats = false;

    void add(CLI::App* parent, const std::string& name, const std::string& help, bool is_stats) {
        auto* app = parent->add_subcommand(name, help);
        flag(app, "journal", journal, "broker journal to read")->check(CLI::ExistingFile);
        store.add(app);
        stats = is_stats;
        app->callback([this] { g_action = [this] { run(); }; });
    }

    void run() {
        // Replay into memory so the file is never written.
        broker::BrokerOptions o;
        o.store = store.options();
        SimClock clock;
        std::string bytes;
        for (const auto& r : journal::FileJournal::read(journal)) bytes += r + "\n";
        broker::Broker b(o, clock, std::make_shared<journal::MemoryJournal>(bytes));
        b.recover();
        if (!stats) {
            std::cout << b.store_snapshot() << "\n";
            return;
        }
        const auto tree = b.store_tree();
        json patterns = json::array();
        for (const auto& p : tree.learning) {
            patterns.push_back({{"pattern_id", p.pattern_id},
                                {"arm_id", p.arm_id},
                                {"length", p.canonical_commands.size()},
                                {"use_count", p.use_count}});
        }
        std::cout << json{{"ongoing", tree.ongoing.size()}, {"learning", tree.learning.size()}, {"patterns", patterns}}
                  << "\n";
    }
};

// -- profile ----------------------------------------------------------------

struct ProfileCmd {
    ProfileFlag profile;
    std::size_t count = 50;
    std::uint64_t seed = 2026;

    void add(CLI::App* parent) {
        auto* dump = parent->add_subcommand("dump", "print the arm profile in its file format");
        flag(dump, "profile", profile.path, "profile file (default: built-in)");
        dump->callback([this] { g_action = [this] { std::cout << arm::dump_profile(profile.load()); }; });

        auto* vectors = parent->add_subcommand("vectors", "print forward-kinematics test vectors as JSON");
        flag(vectors, "profile", profile.path, "profile file (default: built-in)");
        flag(vectors, "count", count, "number of random valid configurations");
        flag(vectors, "seed", seed, "random seed");
        vectors->callback([this] { g_action = [this] { print_vectors(); }; });
    }

    void print_vectors() const {
        const auto p = profile.load();
        std::mt19937_64 rng(seed);
        json out = json::array();
        for (std::size_t i = 0; i < count; ++i) {
            arm::JointConfig q;
            for (std::size_t j = 0; j < arm::kJointCount; ++j) {
                const auto& r = p.joint_ranges[j];
                q.angles_deg[j] = std::uniform_real_distribution<double>(r.min_deg, r.max_deg)(rng);
            }
            q.gripper_mm = std::uniform_real_distribution<double>(p.gripper_min_mm, p.gripper_max_mm)(rng);
            const auto pose = arm::forward_kinematics(q, p);
            out.push_back({{"angles_deg", q.angles_deg},
                           {"gripper_mm", q.gripper_mm},
                           {"pose",
                            {{"x_cm", pose.x_cm},
                             {"y_cm", pose.y_cm},
                             {"z_cm", pose.z_cm},
                             {"roll_deg", pose.roll_deg},
                             {"gripper_mm", pose.gripper_mm}}}});
        }
        std::cout << json{{"seed", seed}, {"link_lengths_cm", p.link_lengths_cm}, {"vectors", out}}.dump(1) << "\n";
    }
};

}  // namespace

int main(int argc, char** argv) {
    auto logger = spdlog::stderr_color_mt("iort");
    spdlog::set_default_logger(logger);

    CLI::App app{"IoRT robotic arm stack: broker, device agent and operator tools"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "iort 1.0.0");
    std::string level = "info";
    app.add_option("--log-level", level, "trace, debug, info, warn, error or off")
        ->envname("IORT_LOG_LEVEL")
        ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}))
        ->capture_default_str();

    auto* broker = app.add_subcommand("broker", "command broker")->require_subcommand(1);
    ServeCmd serve;
    serve.add(broker);

    auto* agent = app.add_subcommand("agent", "device agent")->require_subcommand(1);
    AgentCmd agent_run;
    agent_run.add(agent);

    auto* op = app.add_subcommand("operator", "operator tools")->require_subcommand(1);
    SendCmd send;
    send.add(op);
    ScriptCmd script;
    script.add(op);
    WatchCmd watch;
    watch.add(op);

    auto* store = app.add_subcommand("store", "inspect the learning store in a journal")->require_subcommand(1);
    StoreCmd dump, stats;
    dump.add(store, "dump", "print the canonical store snapshot", false);
    stats.add(store, "stats", "print node counts and learned patterns", true);

    auto* profile = app.add_subcommand("profile", "arm profile tools")->require_subcommand(1);
    ProfileCmd profile_cmd;
    profile_cmd.add(profile);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }
    spdlog::set_level(spdlog::level::from_str(level));
    try {
        g_action();
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
