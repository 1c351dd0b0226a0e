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

#include <doctest.h>
#include <httplib.h>
#include <sys/socket.h>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <deque>
#include <functional>
#include <thread>

#include "fixtures.hpp"
#include "iort/device_agent.hpp"
#include "iort/net.hpp"

using namespace iort;
using fixture::command;
using fixture::wrap;
using nlohmann::json;
using protocol::Envelope;
using protocol::Notification;

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;

namespace {

struct Rig {
    Rig() : broker(broker::BrokerOptions{}, clock, std::make_shared<journal::MemoryJournal>()) {
        broker.recover();
        net::ServerOptions o;
        o.bind_address = "127.0.0.1";
        o.stream_port = 0;
        o.http_port = 0;
        o.tick_ms = 20;
        server = std::make_unique<net::Server>(broker, o);
        server->start();
    }
    ~Rig() { server->stop(); }

    std::unique_ptr<Connection> connect() { return net::connect("127.0.0.1", server->stream_port()); }

    SystemClock clock;
    broker::Broker broker;
    std::unique_ptr<net::Server> server;
};

const Notification* as_event(const Envelope& env, const std::string& event) {
    const auto* n = std::get_if<Notification>(&env.body);
    return n && n->event == event ? n : nullptr;
}

// Receives until an envelope satisfies `pred`; fails the test after 5 s.
Envelope await(Connection& c, const std::function<bool(const Envelope&)>& pred) {
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(5);
    while (std::chrono::steady_clock::now() < deadline) {
        if (auto env = c.receive(50); env && pred(*env)) return *env;
    }
    FAIL("timed out waiting for an envelope");
    return {};
}

Notification await_event(Connection& c, const std::string& event) {
    return std::get<Notification>(await(c, [&](const Envelope& e) { return as_event(e, event) != nullptr; }).body);
}

std::unique_ptr<Connection> operator_conn(Rig& rig, const std::string& id, std::vector<std::string> topics = {}) {
    auto c = rig.connect();
    c->send(wrap(protocol::Register{protocol::ClientKind::operator_, id}));
    await_event(*c, "registered");
    if (!topics.empty()) {
        c->send(wrap(protocol::Subscribe{std::move(topics)}));
        await_event(*c, "subscribed");
    }
    return c;
}

bool wait_until(const std::function<bool()>& cond) {
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(5);
    while (std::chrono::steady_clock::now() < deadline) {
        if (cond()) return true;
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    return false;
}

// Simulated-time agent serving one arm over TCP until stopped.
class AgentThread {
public:
    AgentThread(Rig& rig, std::string arm_id) : conn_(rig.connect()) {
        agent::AgentOptions o;
        o.arm_id = std::move(arm_id);
        agent_ = std::make_unique<agent::Agent>(o, *conn_, clock_, state_);
        agent_->start();
        thread_ = std::thread([this] { agent_->run(stop_); });
    }
    ~AgentThread() {
        stop_ = true;
        thread_.join();
        conn_->close();
    }
    const agent::Agent& agent() const { return *agent_; }

private:
    SimClock clock_;
    agent::AgentState state_;
    std::unique_ptr<Connection> conn_;
    std::unique_ptr<agent::Agent> agent_;
    std::atomic<bool> stop_{false};
    std::thread thread_;
};

// Synchronous WebSocket client that keeps frames it skipped over.
class WsClient {
public:
    WsClient(std::uint16_t port, const std::string& target) : ws_(ioc_) {
        tcp::resolver resolver(ioc_);
        asio::connect(ws_.next_layer(), resolver.resolve("127.0.0.1", std::to_string(port)));
        timeval tv{5, 0};
        ::setsockopt(ws_.next_layer().native_handle(), SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
        ws_.handshake("127.0.0.1", target);
    }

    void send(Envelope env) {
        env.seq = ++seq_;
        ws_.write(asio::buffer(protocol::encode(env)));
    }

    // Next frame matching `pred`; earlier non-matching frames stay queued.
    std::string read(const std::function<bool(const Envelope&)>& pred) {
        for (auto it = stash_.begin(); it != stash_.end(); ++it) {
            if (pred(protocol::decode(*it))) {
                auto frame = *it;
                stash_.erase(it);
                return frame;
            }
        }
        for (;;) {
            beast::flat_buffer b;
            ws_.read(b);
            CHECK(ws_.got_text());
            auto frame = beast::buffers_to_string(b.data());
            if (pred(protocol::decode(frame))) return frame;
            stash_.push_back(std::move(frame));
        }
    }

    std::string read_event(const std::string& event) {
        return read([&](const Envelope& e) { return as_event(e, event) != nullptr; });
    }

    void close() { ws_.close(websocket::close_code::normal); }

private:
    asio::io_context ioc_;
    websocket::stream<tcp::socket> ws_;
    std::deque<std::string> stash_;
    std::uint64_t seq_ = 0;
};

}  // namespace

TEST_CASE("command round trip over the stream endpoint") {
    Rig rig;
    AgentThread agent(rig, "a1");
    REQUIRE(wait_until([&] { return !rig.broker.arms().empty() && rig.broker.arms()[0].online; }));

    auto op = operator_conn(rig, "op", {"arm.a1.ack"});
    auto cmd = command("a1", "c1", 0);
    cmd.gripper_mm = 0;
    op->send(wrap(cmd));
    const auto receipt = await_event(*op, "receipt");
    CHECK(receipt.command_id == "c1");
    CHECK(receipt.queue == "cmd.a1");

    const auto ack = await_event(*op, "ack");
    REQUIRE(ack.ack);
    CHECK(ack.ack->status == protocol::AckStatus::ok);
    CHECK(*ack.ack->final_pose == arm::CartesianPose{0, 0, 21, 0, 0});
    CHECK(wait_until([&] { return rig.broker.queue_records("cmd.a1").empty(); }));
}

TEST_CASE("outbound seq strictly increases per connection") {
    Rig rig;
    auto op = operator_conn(rig, "op", {"arm.*"});
    rig.broker.ensure_arm_queues("a1");
    for (int i = 0; i < 200; ++i) op->send(wrap(command("a1", "s" + std::to_string(i), i % 50)));
    std::uint64_t last = 0;
    int receipts = 0;
    while (receipts < 200) {
        auto env = op->receive(2000);
        REQUIRE(env);
        CHECK(env->seq > last);
        last = env->seq;
        if (as_event(*env, "receipt")) ++receipts;
    }
}

TEST_CASE("malformed lines are answered and the session survives") {
    Rig rig;
    auto op = operator_conn(rig, "op");
    // Raw socket so the client-side encoder cannot get in the way.
    asio::io_context ioc;
    tcp::socket s(ioc);
    asio::connect(s, tcp::resolver(ioc).resolve("127.0.0.1", std::to_string(rig.server->stream_port())));
    asio::write(s, asio::buffer(std::string("{not json\n{\"v\":9,\"seq\":1,\"type\":\"subscribe\",\"body\":{}}\n")));
    asio::streambuf buf;
    std::vector<std::string> codes;
    for (int i = 0; i < 2; ++i) {
        const auto n = asio::read_until(s, buf, '\n');
        std::string line(asio::buffers_begin(buf.data()), asio::buffers_begin(buf.data()) + n);
        buf.consume(n);
        codes.push_back(*std::get<Notification>(protocol::decode(line).body).code);
    }
    CHECK(codes == std::vector<std::string>{"parse", "version"});
    asio::write(s, asio::buffer(protocol::encode(
                       Envelope{1, 1, protocol::Register{protocol::ClientKind::operator_, "raw"}})));
    const auto n = asio::read_until(s, buf, '\n');
    std::string line(asio::buffers_begin(buf.data()), asio::buffers_begin(buf.data()) + n);
    CHECK(as_event(protocol::decode(line), "registered"));
}

TEST_CASE("oversized lines drop the connection") {
    Rig rig;
    asio::io_context ioc;
    tcp::socket s(ioc);
    asio::connect(s, tcp::resolver(ioc).resolve("127.0.0.1", std::to_string(rig.server->stream_port())));
    const std::string big((1 << 20) + 16, 'x');
    beast::error_code ec;
    asio::write(s, asio::buffer(big), ec);
    char c;
    s.read_some(asio::buffer(&c, 1), ec);
    CHECK(ec);
}

TEST_CASE("a disconnecting robot hands its lease back") {
    Rig rig;
    auto robot = rig.connect();
    robot->send(wrap(protocol::Register{protocol::ClientKind::robot, "a1"}));
    await_event(*robot, "registered");
    rig.broker.submit_command("op", command("a1", "held", 5));
    Notification next;
    next.event = "next";
    robot->send(wrap(next));
    const auto d = await_event(*robot, "delivery");
    CHECK(d.command->id == "held");
    CHECK(rig.broker.queue_records("cmd.a1")[0].state == broker::RecordState::leased);
    robot->close();
    CHECK(wait_until([&] { return rig.broker.queue_records("cmd.a1")[0].state == broker::RecordState::ready; }));

    AgentThread agent(rig, "a1");
    CHECK(wait_until([&] { return rig.broker.queue_records("cmd.a1").empty(); }));
    CHECK(agent.agent().executed() == 1);
}

TEST_CASE("a second robot with the same arm id gets a conflict error") {
    Rig rig;
    auto r1 = rig.connect();
    r1->send(wrap(protocol::Register{protocol::ClientKind::robot, "a1"}));
    await_event(*r1, "registered");
    auto r2 = rig.connect();
    r2->send(wrap(protocol::Register{protocol::ClientKind::robot, "a1"}));
    CHECK(await_event(*r2, "error").code == "conflict");
}

TEST_CASE("a subscriber that never reads does not stall the broker") {
    SimClock clock(0);
    broker::Broker b(broker::BrokerOptions{}, clock, std::make_shared<journal::MemoryJournal>());
    b.recover();
    net::ServerOptions o;
    o.bind_address = "127.0.0.1";
    o.stream_port = 0;
    o.enable_http = false;
    o.max_outbox = 32;
    net::Server server(b, o);
    server.start();

    asio::io_context ioc;
    tcp::socket s(ioc);
    asio::connect(s, tcp::resolver(ioc).resolve("127.0.0.1", std::to_string(server.stream_port())));
    const int small = 4096;
    ::setsockopt(s.native_handle(), SOL_SOCKET, SO_RCVBUF, &small, sizeof small);
    asio::write(s, asio::buffer(protocol::encode(
                       Envelope{1, 1, protocol::Register{protocol::ClientKind::operator_, "slow"}})));
    asio::write(s, asio::buffer(protocol::encode(Envelope{1, 2, protocol::Subscribe{{"arm.*"}}})));
    b.ensure_arm_queues("a1");

    const auto start = std::chrono::steady_clock::now();
    for (int i = 0; i < 10000; ++i) {
        protocol::Ack ack{"x" + std::to_string(i), protocol::AckStatus::fault, std::nullopt, "pad", i};
        b.submit_command("op", command("a1", ack.command_id, 0));
        b.route_ack("a1", ack);
    }
    CHECK(std::chrono::steady_clock::now() - start < std::chrono::seconds(10));

    // The slow client was cut off instead of buffering without bound.
    beast::error_code ec;
    std::vector<char> sink(1 << 16);
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(5);
    while (!ec && std::chrono::steady_clock::now() < deadline) s.read_some(asio::buffer(sink), ec);
    CHECK(ec == asio::error::eof);
    server.stop();
}

TEST_CASE("binding a busy port fails") {
    Rig rig;
    net::ServerOptions o;
    o.bind_address = "127.0.0.1";
    o.stream_port = rig.server->stream_port();
    o.enable_http = false;
    net::Server second(rig.broker, o);
    CHECK_THROWS_AS(second.start(), net::NetError);
}

TEST_CASE("endpoint parsing") {
    CHECK(net::parse_endpoint("example:81", 7450) == std::pair<std::string, std::uint16_t>{"example", 81});
    CHECK(net::parse_endpoint("example", 7450).second == 7450);
    CHECK(net::parse_endpoint(":9", 7450).first == "127.0.0.1");
    CHECK_THROWS_AS(net::parse_endpoint("h:0", 1), std::invalid_argument);
    CHECK_THROWS_AS(net::parse_endpoint("h:x", 1), std::invalid_argument);
    CHECK_THROWS_AS(net::parse_endpoint("h:70000", 1), std::invalid_argument);
}

TEST_CASE("gateway REST routes") {
    Rig rig;
    AgentThread agent(rig, "a1");
    REQUIRE(wait_until([&] { return !rig.broker.arms().empty(); }));
    httplib::Client http("127.0.0.1", rig.server->http_port());

    SUBCASE("arm list carries profile limits") {
        auto res = http.Get("/arms");
        REQUIRE(res);
        CHECK(res->status == 200);
        const auto j = json::parse(res->body);
        CHECK(j["arms"][0]["arm_id"] == "a1");
        CHECK(j["arms"][0]["online"] == true);
        CHECK(j["arms"][0]["last_pose"].is_null());
        CHECK(j["profile"]["joints"][1]["field"] == "shoulder_deg");
        CHECK(j["profile"]["joints"][1]["max_deg"] == 60);
        CHECK(j["profile"]["joints"][4]["min_deg"] == -90);
        CHECK(j["profile"]["gripper_mm"]["max"] == 50.8);
    }
    SUBCASE("valid command is accepted and executed") {
        auto res = http.Post("/arms/a1/commands", R"({"base_deg":10,"shoulder_deg":0,"elbow_deg":0,)"
                                                  R"("wrist_pitch_deg":0,"wrist_roll_deg":0,"gripper_mm":5})",
                             "application/json");
        REQUIRE(res);
        CHECK(res->status == 202);
        const auto j = json::parse(res->body);
        CHECK(j["queue"] == "cmd.a1");
        CHECK(j["command_id"].get<std::string>().size() == 36);
        CHECK(wait_until([&] { return rig.broker.arms()[0].last_pose.has_value(); }));
        const auto arms = json::parse(http.Get("/arms")->body);
        CHECK(arms["arms"][0]["last_pose"]["z_cm"] == 21);
        CHECK(arms["arms"][0]["last_pose"]["gripper_mm"] == 5);
    }
    SUBCASE("out-of-range command gets 422 with every violation") {
        auto res = http.Post("/arms/a1/commands", R"({"base_deg":0,"shoulder_deg":61,"elbow_deg":0,)"
                                                  R"("wrist_pitch_deg":0,"wrist_roll_deg":0,"gripper_mm":50.9})",
                             "application/json");
        REQUIRE(res);
        CHECK(res->status == 422);
        const auto j = json::parse(res->body);
        REQUIRE(j["violations"].size() == 2);
        CHECK(j["violations"][0]["field"] == "shoulder_deg");
        CHECK(j["violations"][1]["field"] == "gripper_mm");
        CHECK(j["violations"][1]["max"] == 50.8);
        CHECK(rig.broker.queue_records("cmd.a1").empty());
    }
    SUBCASE("error statuses") {
        const std::string body = R"({"base_deg":0,"shoulder_deg":0,"elbow_deg":0,)"
                                 R"("wrist_pitch_deg":0,"wrist_roll_deg":0,"gripper_mm":0})";
        CHECK(http.Post("/arms/zz/commands", body, "application/json")->status == 404);
        CHECK(http.Post("/arms/a1/commands", "{", "application/json")->status == 400);
        CHECK(http.Post("/arms/a1/commands", R"({"base_deg":0})", "application/json")->status == 400);
        CHECK(http.Post("/arms/a1/commands", R"({"arm_id":"other",)" + body.substr(1), "application/json")->status ==
              400);
        CHECK(http.Post("/arms/a1/commands", R"({"id":"dup",)" + body.substr(1), "application/json")->status == 202);
        CHECK(http.Post("/arms/a1/commands", R"({"id":"dup",)" + body.substr(1), "application/json")->status == 409);
        CHECK(http.Get("/arms/zz/patterns")->status == 404);
        CHECK(http.Get("/nope")->status == 404);
        CHECK(http.Delete("/arms")->status == 405);
    }
    SUBCASE("patterns route") {
        auto res = http.Get("/arms/a1/patterns");
        REQUIRE(res);
        CHECK(res->status == 200);
        CHECK(res->body == R"({"arm_id":"a1","patterns":[]})");
    }
}

TEST_CASE("gateway learns from HTTP submissions and prompts over WebSocket") {
    Rig rig;
    AgentThread agent(rig, "a1");
    REQUIRE(wait_until([&] { return !rig.broker.arms().empty(); }));
    httplib::Client http("127.0.0.1", rig.server->http_port());
    httplib::Headers who{{"X-Operator-Id", "ui"}};

    WsClient ws(rig.server->http_port(), "/ws?client=ui&topics=arm.a1.ack,operator.ui.prompt,operator.ui.sequence");
    CHECK(ws.read_event("registered").find("\"operator_id\":\"ui\"") != std::string::npos);
    ws.read_event("subscribed");

    // Base angles are recoverable from the acked pose when the shoulder leans.
    auto base_of = [](const std::string& frame) {
        const auto& pose = *std::get<Notification>(protocol::decode(frame).body).ack->final_pose;
        return std::round(std::atan2(pose.y_cm, pose.x_cm) * 180.0 / std::acos(-1.0));
    };
    auto post = [&](double base) {
        const auto body = json{{"base_deg", base},      {"shoulder_deg", 30},   {"elbow_deg", 0},
                               {"wrist_pitch_deg", 0}, {"wrist_roll_deg", 0}, {"gripper_mm", 0}}
                              .dump();
        auto res = http.Post("/arms/a1/commands", who, body, "application/json");
        REQUIRE(res);
        REQUIRE(res->status == 202);
        const auto frame = ws.read_event("ack");
        CHECK(frame.back() == '}');
        CHECK(base_of(frame) == base);
    };
    for (int rep = 0; rep < 3; ++rep) {
        for (double base : {10, 20, 30, 40}) post(base);
        Notification end;
        end.event = "end_sequence";
        end.arm_id = "a1";
        ws.send(wrap(end));
        ws.read_event("sequence_closed");
    }
    const auto patterns = json::parse(http.Get("/arms/a1/patterns")->body);
    REQUIRE(patterns["patterns"].size() == 1);
    CHECK(patterns["patterns"][0]["use_count"] == 3);

    post(10);
    post(20);
    const auto prompt_env = protocol::decode(
        ws.read([](const Envelope& e) { return e.type() == protocol::MessageType::pattern_prompt; }));
    const auto& prompt = std::get<protocol::PatternPrompt>(prompt_env.body);
    CHECK(prompt.matched_prefix_len == 2);
    REQUIRE(prompt.remainder.size() == 2);
    CHECK(prompt.remainder[0].base_deg == 30);

    ws.send(wrap(protocol::PatternResponse{prompt.pattern_id, true}));
    CHECK(base_of(ws.read_event("ack")) == 30);
    CHECK(base_of(ws.read_event("ack")) == 40);
    CHECK(json::parse(http.Get("/arms/a1/patterns")->body)["patterns"][0]["use_count"] == 4);
    ws.close();
}

TEST_CASE("websocket upgrade needs a client id") {
    Rig rig;
    CHECK_THROWS(WsClient(rig.server->http_port(), "/ws?topics=x"));
    CHECK_THROWS(WsClient(rig.server->http_port(), "/elsewhere?client=x"));
}

TEST_CASE("two websocket clients for one operator both get the prompt") {
    Rig rig;
    rig.broker.ensure_arm_queues("a1");
    WsClient t1(rig.server->http_port(), "/ws?client=op&topics=operator.op.prompt");
    WsClient t2(rig.server->http_port(), "/ws?client=op&topics=operator.op.prompt");
    for (auto* ws : {&t1, &t2}) ws->read_event("subscribed");
    int n = 0;
    for (int rep = 0; rep < 3; ++rep) {
        for (double base : {1, 2, 3}) {
            auto c = command("a1", "t" + std::to_string(n++), base);
            rig.broker.submit_command("op", c);
            rig.broker.route_ack("a1", protocol::Ack{c.id, protocol::AckStatus::ok, arm::CartesianPose{}, "", n});
        }
        rig.broker.end_sequence("a1", "op");
    }
    for (double base : {1, 2}) rig.broker.submit_command("op", command("a1", "t" + std::to_string(n++), base));
    for (auto* ws : {&t1, &t2}) {
        const auto env = protocol::decode(
            ws->read([](const Envelope& e) { return e.type() == protocol::MessageType::pattern_prompt; }));
        CHECK(std::get<protocol::PatternPrompt>(env.body).remainder.size() == 1);
    }
}
