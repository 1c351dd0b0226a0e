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

#include "iort/net.hpp"

#include <sys/socket.h>

#include <atomic>
#include <charconv>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <future>
#include <map>
#include <mutex>
#include <optional>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

namespace iort::net {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;
using nlohmann::json;

namespace {

// Frames waiting for one client. Seq assignment and queueing share a lock so
// the wire order always matches seq order.
class Outbox {
public:
    enum class Result { queued, closed, overflow };

    Outbox(std::size_t limit, bool strip_newline) : limit_(limit), strip_newline_(strip_newline) {}

    Result push(protocol::Envelope env) {
        std::lock_guard lock(mutex_);
        if (closed_) return Result::closed;
        if (frames_.size() >= limit_) {
            closed_ = true;
            return Result::overflow;
        }
        env.seq = ++seq_;
        std::string frame;
        try {
            frame = protocol::encode(env);
        } catch (const protocol::EncodeError& e) {
            --seq_;
            spdlog::error("dropping unencodable envelope: {}", e.what());
            return Result::queued;
        }
        if (strip_newline_) frame.pop_back();
        frames_.push_back(std::move(frame));
        return Result::queued;
    }

    std::optional<std::string> pop() {
        std::lock_guard lock(mutex_);
        if (frames_.empty()) return std::nullopt;
        auto f = std::move(frames_.front());
        frames_.pop_front();
        return f;
    }

    void close() {
        std::lock_guard lock(mutex_);
        closed_ = true;
    }

private:
    std::mutex mutex_;
    std::deque<std::string> frames_;
    std::uint64_t seq_ = 0;
    bool closed_ = false;
    std::size_t limit_;
    bool strip_newline_;
};

class Registry;

// A client with a broker session. Reads and writes happen on the I/O thread;
// deliver() may be called from any thread.
class Peer : public std::enable_shared_from_this<Peer> {
public:
    Peer(asio::io_context& ioc, Registry& registry, std::size_t outbox_limit, bool strip_newline)
        : ioc_(ioc), registry_(registry), outbox_(outbox_limit, strip_newline) {}
    virtual ~Peer() = default;

    bool deliver(protocol::Envelope env) {
        switch (outbox_.push(std::move(env))) {
            case Outbox::Result::closed:
                return false;
            case Outbox::Result::overflow:
                spdlog::warn("client outbox full, disconnecting");
                asio::post(ioc_, [self = shared_from_this()] { self->shutdown(); });
                return false;
            case Outbox::Result::queued:
                break;
        }
        asio::post(ioc_, [self = shared_from_this()] { self->kick(); });
        return true;
    }

    // I/O thread only. Closes the broker session synchronously so nothing
    // is left leased once this returns.
    void shutdown();

protected:
    virtual void write_frame(const std::string& frame) = 0;
    virtual void close_transport() = 0;

    void kick() {
        if (writing_ || closed_) return;
        auto frame = outbox_.pop();
        if (!frame) return;
        writing_ = true;
        current_ = std::move(*frame);
        write_frame(current_);
    }

    void on_written(beast::error_code ec) {
        writing_ = false;
        if (ec) return shutdown();
        kick();
    }

    void handle(std::string_view line) {
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.find_first_not_of(" \t") == std::string_view::npos) return;
        if (session_) session_->handle_line(line);
    }

    asio::io_context& ioc_;
    Registry& registry_;
    Outbox outbox_;
    std::unique_ptr<ClientSession> session_;
    std::string current_;
    bool writing_ = false;
    bool closed_ = false;
};

class PeerSink final : public broker::Sink {
public:
    explicit PeerSink(std::weak_ptr<Peer> peer) : peer_(std::move(peer)) {}
    bool push(protocol::Envelope env) override {
        auto p = peer_.lock();
        return p && p->deliver(std::move(env));
    }

private:
    std::weak_ptr<Peer> peer_;
};

// Live peers, so stop() can close them. I/O thread only.
class Registry {
public:
    void add(const std::shared_ptr<Peer>& p) { peers_[p.get()] = p; }
    void remove(Peer* p) { peers_.erase(p); }
    void shutdown_all() {
        auto peers = peers_;
        for (auto& [_, weak] : peers) {
            if (auto p = weak.lock()) p->shutdown();
        }
        peers_.clear();
    }

private:
    std::map<Peer*, std::weak_ptr<Peer>> peers_;
};

void Peer::shutdown() {
    if (closed_) return;
    closed_ = true;
    outbox_.close();
    if (session_) session_->close();
    close_transport();
    registry_.remove(this);
}

class StreamPeer final : public Peer {
public:
    StreamPeer(asio::io_context& ioc, Registry& registry, tcp::socket socket, const ServerOptions& o)
        : Peer(ioc, registry, o.max_outbox, false), socket_(std::move(socket)), buffer_(o.max_line_bytes) {}

    void start(broker::Broker& broker) {
        session_ = std::make_unique<ClientSession>(broker, std::make_shared<PeerSink>(weak_from_this()));
        read();
    }

private:
    void read() {
        asio::async_read_until(socket_, buffer_, '\n',
                               [self = std::static_pointer_cast<StreamPeer>(shared_from_this())](
                                   beast::error_code ec, std::size_t n) { self->on_read(ec, n); });
    }

    void on_read(beast::error_code ec, std::size_t n) {
        if (closed_) return;
        if (ec) {
            if (ec == asio::error::not_found) spdlog::warn("line exceeds limit, disconnecting");
            return shutdown();
        }
        const auto data = buffer_.data();
        std::string line(asio::buffers_begin(data), asio::buffers_begin(data) + static_cast<std::ptrdiff_t>(n - 1));
        buffer_.consume(n);
        handle(line);
        if (!closed_) read();
    }

    void write_frame(const std::string& frame) override {
        asio::async_write(socket_, asio::buffer(frame),
                          [self = shared_from_this(), this](beast::error_code ec, std::size_t) { on_written(ec); });
    }

    void close_transport() override {
        beast::error_code ignored;
        socket_.shutdown(tcp::socket::shutdown_both, ignored);
        socket_.close(ignored);
    }

    tcp::socket socket_;
    asio::streambuf buffer_;
};

class WsPeer final : public Peer {
public:
    WsPeer(asio::io_context& ioc, Registry& registry, tcp::socket socket, const ServerOptions& o)
        : Peer(ioc, registry, o.max_outbox, true), ws_(std::move(socket)) {
        ws_.read_message_max(o.max_line_bytes);
    }

    void start(broker::Broker& broker, http::request<http::string_body> req, std::string client,
               std::vector<std::string> topics) {
        ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
        ws_.async_accept(req, [self = std::static_pointer_cast<WsPeer>(shared_from_this()), &broker,
                               client = std::move(client), topics = std::move(topics)](beast::error_code ec) {
            if (ec) return self->shutdown();
            self->session_ = std::make_unique<ClientSession>(broker, std::make_shared<PeerSink>(self));
            self->session_->handle({protocol::kVersion, 0, protocol::Register{protocol::ClientKind::operator_, client}});
            if (!topics.empty()) self->session_->handle({protocol::kVersion, 0, protocol::Subscribe{topics}});
            self->read();
        });
    }

private:
    void read() {
        ws_.async_read(buffer_, [self = std::static_pointer_cast<WsPeer>(shared_from_this())](
                                    beast::error_code ec, std::size_t) { self->on_read(ec); });
    }

    void on_read(beast::error_code ec) {
        if (closed_) return;
        if (ec) return shutdown();
        const auto text = beast::buffers_to_string(buffer_.data());
        buffer_.consume(buffer_.size());
        handle(text);
        if (!closed_) read();
    }

    void write_frame(const std::string& frame) override {
        ws_.text(true);
        ws_.async_write(asio::buffer(frame),
                        [self = shared_from_this(), this](beast::error_code ec, std::size_t) { on_written(ec); });
    }

    void close_transport() override {
        beast::error_code ignored;
        auto& sock = beast::get_lowest_layer(ws_);
        sock.shutdown(tcp::socket::shutdown_both, ignored);
        sock.close(ignored);
    }

    websocket::stream<tcp::socket> ws_;
    beast::flat_buffer buffer_;
};

std::string percent_decode(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '%' && i + 2 < s.size()) {
            unsigned v = 0;
            const auto* first = s.data() + i + 1;
            if (std::from_chars(first, first + 2, v, 16).ptr == first + 2) {
                out.push_back(static_cast<char>(v));
                i += 2;
                continue;
            }
        }
        out.push_back(s[i] == '+' ? ' ' : s[i]);
    }
    return out;
}

std::map<std::string, std::string> parse_query(std::string_view q) {
    std::map<std::string, std::string> out;
    while (!q.empty()) {
        const auto amp = q.find('&');
        const auto part = q.substr(0, amp);
        const auto eq = part.find('=');
        if (!part.empty()) {
            out[percent_decode(part.substr(0, eq))] =
                eq == std::string_view::npos ? "" : percent_decode(part.substr(eq + 1));
        }
        if (amp == std::string_view::npos) break;
        q.remove_prefix(amp + 1);
    }
    return out;
}

std::vector<std::string> split_csv(std::string_view s) {
    std::vector<std::string> out;
    while (!s.empty()) {
        const auto comma = s.find(',');
        if (auto part = s.substr(0, comma); !part.empty()) out.emplace_back(part);
        if (comma == std::string_view::npos) break;
        s.remove_prefix(comma + 1);
    }
    return out;
}

using Request = http::request<http::string_body>;
using Response = http::response<http::string_body>;

Response make_response(const Request& req, http::status status, std::string body) {
    Response res{status, req.version()};
    res.set(http::field::server, "iort");
    res.set(http::field::content_type, "application/json");
    res.set(http::field::access_control_allow_origin, "*");
    res.keep_alive(req.keep_alive());
    res.body() = std::move(body);
    res.prepare_payload();
    return res;
}

Response error_response(const Request& req, http::status status, const std::string& code, const std::string& detail) {
    return make_response(req, status, json{{"error", code}, {"detail", detail}}.dump());
}

// Splits "/arms/<id>/<rest>"; empty optional when the path has another shape.
std::optional<std::pair<std::string, std::string>> arm_route(std::string_view path) {
    constexpr std::string_view prefix = "/arms/";
    if (path.substr(0, prefix.size()) != prefix) return std::nullopt;
    path.remove_prefix(prefix.size());
    const auto slash = path.find('/');
    if (slash == std::string_view::npos || slash == 0) return std::nullopt;
    return std::make_pair(percent_decode(path.substr(0, slash)), std::string(path.substr(slash + 1)));
}

Response submit(broker::Broker& broker, const Request& req, const std::string& arm_id) {
    protocol::JointCommand cmd;
    try {
        cmd = protocol::decode_command(req.body(), true);
    } catch (const protocol::ProtocolError& e) {
        return error_response(req, http::status::bad_request, "schema", e.what());
    }
    if (!cmd.arm_id.empty() && cmd.arm_id != arm_id) {
        return error_response(req, http::status::bad_request, "schema", "body arm_id does not match the path");
    }
    cmd.arm_id = arm_id;
    if (const auto h = req.find("X-Operator-Id"); h != req.end() && !h->value().empty()) {
        cmd.operator_id = std::string(h->value());
    }
    if (cmd.operator_id.empty()) cmd.operator_id = "console";
    try {
        const auto r = broker.submit_command(cmd.operator_id, cmd);
        return make_response(req, http::status::accepted,
                             json{{"queue", r.queue},
                                  {"record_id", r.record_id},
                                  {"position", r.position},
                                  {"command_id", r.command_id}}
                                 .dump());
    } catch (const broker::ValidationError& e) {
        return make_response(req, http::status::unprocessable_entity,
                             "{\"command_id\":" + json(e.command_id()).dump() +
                                 ",\"violations\":" + protocol::encode_violations(e.violations()) + "}");
    } catch (const broker::NotFoundError& e) {
        return error_response(req, http::status::not_found, "not_found", e.what());
    } catch (const broker::ConflictError& e) {
        return error_response(req, http::status::conflict, "conflict", e.what());
    } catch (const broker::BrokerError& e) {
        return error_response(req, http::status::bad_request, "invalid", e.what());
    }
}

Response route(broker::Broker& broker, const Request& req) {
    const std::string_view target(req.target().data(), req.target().size());
    const auto path = target.substr(0, target.find('?'));
    if (req.method() == http::verb::options) {
        auto res = make_response(req, http::status::no_content, "");
        res.set(http::field::access_control_allow_methods, "GET, POST, OPTIONS");
        res.set(http::field::access_control_allow_headers, "Content-Type, X-Operator-Id");
        return res;
    }
    try {
        if (path == "/arms") {
            if (req.method() != http::verb::get) {
                return error_response(req, http::status::method_not_allowed, "method", "use GET");
            }
            return make_response(req, http::status::ok, arms_json(broker));
        }
        if (const auto r = arm_route(path)) {
            const auto& [arm_id, rest] = *r;
            if (rest == "patterns" && req.method() == http::verb::get) {
                if (!broker.has_queue(broker::command_queue(arm_id))) {
                    return error_response(req, http::status::not_found, "not_found", "unknown arm '" + arm_id + "'");
                }
                return make_response(req, http::status::ok, patterns_json(broker, arm_id));
            }
            if (rest == "commands" && req.method() == http::verb::post) return submit(broker, req, arm_id);
            if (rest == "patterns" || rest == "commands") {
                return error_response(req, http::status::method_not_allowed, "method", "wrong method");
            }
        }
        return error_response(req, http::status::not_found, "not_found", "no route for " + std::string(path));
    } catch (const journal::JournalError& e) {
        spdlog::error("journal failure: {}", e.what());
        return error_response(req, http::status::internal_server_error, "internal", e.what());
    }
}

class HttpPeer final : public std::enable_shared_from_this<HttpPeer> {
public:
    HttpPeer(asio::io_context& ioc, Registry& registry, broker::Broker& broker, tcp::socket socket,
             const ServerOptions& o)
        : ioc_(ioc), registry_(registry), broker_(broker), stream_(std::move(socket)), options_(o) {}

    void read() {
        parser_.emplace();
        parser_->body_limit(options_.max_line_bytes);
        stream_.expires_after(std::chrono::seconds(30));
        http::async_read(stream_, buffer_, *parser_,
                         [self = shared_from_this()](beast::error_code ec, std::size_t) { self->on_read(ec); });
    }

private:
    void on_read(beast::error_code ec) {
        if (ec == http::error::body_limit) {
            return write(error_response(parser_->get(), http::status::payload_too_large, "too_large", "body too large"));
        }
        if (ec) return close();
        auto req = parser_->release();
        if (websocket::is_upgrade(req)) return upgrade(std::move(req));
        write(route(broker_, req));
    }

    void upgrade(Request req) {
        const std::string_view target(req.target().data(), req.target().size());
        const auto q = target.find('?');
        if (target.substr(0, q) != "/ws") {
            return write(error_response(req, http::status::not_found, "not_found", "websocket lives at /ws"));
        }
        auto params = parse_query(q == std::string_view::npos ? "" : target.substr(q + 1));
        if (params["client"].empty()) {
            return write(error_response(req, http::status::bad_request, "schema", "missing client parameter"));
        }
        stream_.expires_never();
        auto peer = std::make_shared<WsPeer>(ioc_, registry_, stream_.release_socket(), options_);
        registry_.add(peer);
        peer->start(broker_, std::move(req), params["client"], split_csv(params["topics"]));
    }

    void write(Response res) {
        response_ = std::make_shared<Response>(std::move(res));
        http::async_write(stream_, *response_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
            if (ec || !self->response_->keep_alive()) return self->close();
            self->read();
        });
    }

    void close() {
        beast::error_code ignored;
        stream_.socket().shutdown(tcp::socket::shutdown_send, ignored);
        stream_.close();
    }

    asio::io_context& ioc_;
    Registry& registry_;
    broker::Broker& broker_;
    beast::tcp_stream stream_;
    const ServerOptions& options_;
    beast::flat_buffer buffer_;
    std::optional<http::request_parser<http::string_body>> parser_;
    std::shared_ptr<Response> response_;
};

json profile_json(const arm::ArmProfile& p) {
    json joints = json::array();
    for (std::size_t j = 0; j < arm::kJointCount; ++j) {
        const auto joint = static_cast<arm::Joint>(j);
        joints.push_back({{"field", arm::joint_field(joint)},
                          {"min_deg", p.range(joint).min_deg},
                          {"max_deg", p.range(joint).max_deg},
                          {"s_per_60deg", p.servo_s_per_60deg[j]}});
    }
    return {{"link_lengths_cm", p.link_lengths_cm},
            {"joints", joints},
            {"gripper_mm", {{"min", p.gripper_min_mm}, {"max", p.gripper_max_mm}}},
            {"shoulder_stall_torque_kgfcm", p.shoulder_stall_torque_kgfcm}};
}

}  // namespace

std::string arms_json(const broker::Broker& broker) {
    std::string arms = "[";
    for (const auto& a : broker.arms()) {
        if (arms.size() > 1) arms += ',';
        arms += "{\"arm_id\":" + json(a.arm_id).dump() + ",\"online\":" + (a.online ? "true" : "false") +
                ",\"queued_commands\":" + std::to_string(a.queued_commands) +
                ",\"last_pose\":" + (a.last_pose ? protocol::encode_pose(*a.last_pose) : "null") + "}";
    }
    arms += "]";
    return "{\"profile\":" + profile_json(broker.options().profile).dump() + ",\"arms\":" + arms + "}";
}

std::string patterns_json(const broker::Broker& broker, const std::string& arm_id) {
    std::string out = "{\"arm_id\":" + json(arm_id).dump() + ",\"patterns\":[";
    bool first = true;
    for (const auto& p : broker.patterns(arm_id)) {
        if (!first) out += ',';
        first = false;
        out += store::to_json(p);
    }
    return out + "]}";
}

// ---------------------------------------------------------------------------

struct Server::Impl {
    Impl(broker::Broker& b, ServerOptions o) : broker(b), options(std::move(o)), stream_acceptor(ioc), http_acceptor(ioc) {}

    void listen(tcp::acceptor& acceptor, std::uint16_t port) {
        beast::error_code ec;
        const tcp::endpoint ep(asio::ip::make_address(options.bind_address, ec), port);
        if (ec) throw NetError("bad bind address '" + options.bind_address + "'");
        acceptor.open(ep.protocol(), ec);
        if (!ec) acceptor.set_option(asio::socket_base::reuse_address(true), ec);
        if (!ec) acceptor.bind(ep, ec);
        if (!ec) acceptor.listen(asio::socket_base::max_listen_connections, ec);
        if (ec) throw NetError("cannot listen on " + options.bind_address + ":" + std::to_string(port) + ": " + ec.message());
    }

    void accept_stream() {
        stream_acceptor.async_accept([this](beast::error_code ec, tcp::socket socket) {
            if (ec) {
                if (ec != asio::error::operation_aborted) spdlog::warn("accept failed: {}", ec.message());
                if (!stream_acceptor.is_open()) return;
            } else {
                socket.set_option(tcp::no_delay(true), ec);
                auto peer = std::make_shared<StreamPeer>(ioc, registry, std::move(socket), options);
                registry.add(peer);
                peer->start(broker);
            }
            accept_stream();
        });
    }

    void accept_http() {
        http_acceptor.async_accept([this](beast::error_code ec, tcp::socket socket) {
            if (ec) {
                if (!http_acceptor.is_open()) return;
            } else {
                std::make_shared<HttpPeer>(ioc, registry, broker, std::move(socket), options)->read();
            }
            accept_http();
        });
    }

    void tick_loop() {
        std::unique_lock lock(tick_mutex);
        while (!stopping) {
            tick_cv.wait_for(lock, std::chrono::milliseconds(options.tick_ms), [&] { return stopping; });
            if (stopping) break;
            lock.unlock();
            try {
                broker.tick();
            } catch (const std::exception& e) {
                spdlog::error("tick failed: {}", e.what());
            }
            lock.lock();
        }
    }

    broker::Broker& broker;
    ServerOptions options;
    asio::io_context ioc;
    Registry registry;
    tcp::acceptor stream_acceptor;
    tcp::acceptor http_acceptor;
    std::thread io_thread;
    std::thread tick_thread;
    std::mutex tick_mutex;
    std::condition_variable tick_cv;
    bool stopping = false;
    bool started = false;
};

Server::Server(broker::Broker& broker, ServerOptions options)
    : impl_(std::make_unique<Impl>(broker, std::move(options))) {}

Server::~Server() { stop(); }

void Server::start() {
    auto& m = *impl_;
    if (m.started) return;
    m.listen(m.stream_acceptor, m.options.stream_port);
    if (m.options.enable_http) m.listen(m.http_acceptor, m.options.http_port);
    m.accept_stream();
    if (m.options.enable_http) m.accept_http();
    m.started = true;
    m.io_thread = std::thread([&m] {
        for (;;) {
            try {
                m.ioc.run();
                return;
            } catch (const std::exception& e) {
                spdlog::error("I/O handler failed: {}", e.what());
            }
        }
    });
    m.tick_thread = std::thread([&m] { m.tick_loop(); });
}

void Server::stop() {
    auto& m = *impl_;
    if (!m.started) return;
    m.started = false;
    {
        std::lock_guard lock(m.tick_mutex);
        m.stopping = true;
    }
    m.tick_cv.notify_all();
    m.tick_thread.join();
    std::promise<void> done;
    asio::post(m.ioc, [&m, &done] {
        beast::error_code ignored;
        m.stream_acceptor.close(ignored);
        m.http_acceptor.close(ignored);
        m.registry.shutdown_all();
        done.set_value();
    });
    done.get_future().wait();
    m.ioc.stop();
    m.io_thread.join();
}

std::uint16_t Server::stream_port() const { return impl_->stream_acceptor.local_endpoint().port(); }

std::uint16_t Server::http_port() const {
    return impl_->options.enable_http ? impl_->http_acceptor.local_endpoint().port() : 0;
}

// ---------------------------------------------------------------------------

std::pair<std::string, std::uint16_t> parse_endpoint(std::string_view text, std::uint16_t default_port) {
    const auto colon = text.rfind(':');
    std::string host(text.substr(0, colon));
    std::uint16_t port = default_port;
    if (colon != std::string_view::npos) {
        const auto p = text.substr(colon + 1);
        unsigned v = 0;
        const auto [ptr, ec] = std::from_chars(p.data(), p.data() + p.size(), v);
        if (ec != std::errc() || ptr != p.data() + p.size() || v == 0 || v > 65535) {
            throw std::invalid_argument("bad port in '" + std::string(text) + "'");
        }
        port = static_cast<std::uint16_t>(v);
    }
    if (host.empty()) host = "127.0.0.1";
    return {host, port};
}

namespace {

class TcpConnection final : public Connection {
public:
    TcpConnection(const std::string& host, std::uint16_t port) : socket_(ioc_) {
        beast::error_code ec;
        tcp::resolver resolver(ioc_);
        const auto endpoints = resolver.resolve(host, std::to_string(port), ec);
        if (!ec) asio::connect(socket_, endpoints, ec);
        if (ec) throw NetError("cannot connect to " + host + ":" + std::to_string(port) + ": " + ec.message());
        socket_.set_option(tcp::no_delay(true), ec);
        reader_ = std::thread([this] { read_loop(); });
    }

    ~TcpConnection() override { close(); }

    void send(protocol::Envelope env) override {
        std::lock_guard lock(write_mutex_);
        if (closed_) throw std::runtime_error("connection closed");
        env.seq = ++seq_;
        const auto line = protocol::encode(env);
        beast::error_code ec;
        asio::write(socket_, asio::buffer(line), ec);
        if (ec) throw std::runtime_error("send failed: " + ec.message());
    }

    std::optional<protocol::Envelope> receive(std::int64_t timeout_ms) override { return inbox_.pop(timeout_ms); }

    bool is_open() const override { return !inbox_.closed(); }

    void close() override {
        {
            std::lock_guard lock(write_mutex_);
            if (closed_) return;
            closed_ = true;
            // The raw call is safe against the reader blocked in recv.
            ::shutdown(socket_.native_handle(), SHUT_RDWR);
        }
        if (reader_.joinable()) reader_.join();
        beast::error_code ignored;
        socket_.close(ignored);
        inbox_.close();
    }

private:
    void read_loop() {
        asio::streambuf buffer;
        for (;;) {
            beast::error_code ec;
            const auto n = asio::read_until(socket_, buffer, '\n', ec);
            if (ec) break;
            const auto data = buffer.data();
            std::string line(asio::buffers_begin(data), asio::buffers_begin(data) + static_cast<std::ptrdiff_t>(n));
            buffer.consume(n);
            try {
                inbox_.push(protocol::decode(line));
            } catch (const protocol::ProtocolError& e) {
                spdlog::warn("ignoring undecodable line from broker: {}", e.what());
            }
        }
        inbox_.close();
    }

    asio::io_context ioc_;
    tcp::socket socket_;
    Inbox inbox_;
    std::thread reader_;
    std::mutex write_mutex_;
    std::uint64_t seq_ = 0;
    bool closed_ = false;
};

}  // namespace

std::unique_ptr<Connection> connect(const std::string& host, std::uint16_t port) {
    return std::make_unique<TcpConnection>(host, port);
}

}  // namespace iort::net
