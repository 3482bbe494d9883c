#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <sys/time.h>
#include <unistd.h>

#include <chrono>
#include <future>
#include <thread>

#include <doctest.h>

#include "labkit/kernel.hpp"
#include "labkit/odmr.hpp"
#include "labkit/remote.hpp"
#include "testkit.hpp"

using namespace labkit;
using namespace labkit::remote;
using namespace labkit::testkit;
using namespace std::chrono_literals;

namespace {

template <typename F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::Internal;
}

// Plain blocking TCP socket for poking at the server byte by byte.
struct RawSocket {
  int fd = -1;
  explicit RawSocket(int port) {
    fd = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in a{};
    a.sin_family = AF_INET;
    a.sin_port = htons(static_cast<std::uint16_t>(port));
    a.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    REQUIRE(::connect(fd, reinterpret_cast<sockaddr*>(&a), sizeof a) == 0);
    timeval tv{5, 0};
    ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
  }
  ~RawSocket() { ::close(fd); }
  void send(const std::string& bytes) const {
    REQUIRE(::send(fd, bytes.data(), bytes.size(), MSG_NOSIGNAL) == static_cast<ssize_t>(bytes.size()));
  }
  // Empty string on orderly close.
  std::string recv_some() const {
    char buf[65536];
    const ssize_t n = ::recv(fd, buf, sizeof buf, 0);
    return n > 0 ? std::string(buf, static_cast<std::size_t>(n)) : std::string();
  }
  std::string next_frame() const {
    FrameDecoder d;
    for (;;) {
      if (auto p = d.next()) return *p;
      const std::string chunk = recv_some();
      if (chunk.empty()) return {};
      d.feed(chunk);
    }
  }
};

Json lab_modules(const TempDir& dir, bool noise = true) {
  Json lab = sim_lab(dir.path, noise, 11);
  lab["modules"].push_back(module_json("slow", "hardware", "probe", Json::object(), {{"hold_us", 1'500'000}}));
  return lab;
}

struct Served {
  TempDir dir;
  std::unique_ptr<Kernel> kernel;
  std::unique_ptr<Server> server;
  explicit Served(std::set<std::string> exposed = {}, bool noise = true) {
    kernel = std::make_unique<Kernel>(parse_config(lab_modules(dir, noise).dump()), test_options());
    for (const char* m : {"scanner", "microwave", "spectrometer", "odmr", "slow"}) kernel->activate(m);
    ServerOptions o;
    o.exposed = std::move(exposed);
    server = std::make_unique<Server>(*kernel, o);
  }
  Endpoint endpoint() const { return {"127.0.0.1", server->port()}; }
};

}  // namespace

TEST_SUITE("remote") {
  TEST_CASE("length-prefixed frames") {
    CHECK(encode_frame("{}") == std::string("\x00\x00\x00\x02{}", 6));
    const std::string big(300, 'a');
    CHECK(encode_frame(big).substr(0, 4) == std::string("\x00\x00\x01\x2c", 4));
    FrameDecoder d;
    const std::string two = encode_frame("{\"a\":1}") + encode_frame("[]");
    for (char c : two) d.feed(std::string(1, c));  // byte at a time
    CHECK(d.next() == std::optional<std::string>("{\"a\":1}"));
    CHECK(d.next() == std::optional<std::string>("[]"));
    CHECK_FALSE(d.next());
    FrameDecoder huge;
    huge.feed(std::string("\x01\x00\x00\x01", 4));
    CHECK(kind_of([&] { huge.next(); }) == ErrorKind::Protocol);
  }

  TEST_CASE("WebSocket accept key and frame bytes") {
    CHECK(websocket_accept("dGhlIHNhbXBsZSBub25jZQ==") == "s3pPLMBiTxaQ9kYGzzhZRbK+xOo=");
    CHECK(ws_encode(WsOpcode::text, "Hello") == std::string("\x81\x05Hello"));
    const std::string masked = ws_encode(WsOpcode::text, "Hello", 0x37fa213d);
    CHECK(masked == std::string("\x81\x85\x37\xfa\x21\x3d\x7f\x9f\x4d\x51\x58"));
    WsDecoder d;
    d.feed(masked);
    auto f = d.next();
    REQUIRE(f);
    CHECK(f->masked);
    CHECK(f->fin);
    CHECK(f->payload == "Hello");
    for (std::size_t n : {125u, 126u, 65535u, 65536u}) {
      const std::string payload(n, 'x');
      WsDecoder e;
      e.feed(ws_encode(WsOpcode::binary, payload, 0x01020304));
      auto g = e.next();
      REQUIRE(g);
      CHECK(g->opcode == WsOpcode::binary);
      CHECK(g->payload == payload);
    }
    CHECK(ws_encode(WsOpcode::text, std::string(126, 'x')).substr(0, 4) == std::string("\x81\x7e\x00\x7e", 4));
  }

  TEST_CASE("wire names and endpoints") {
    for (int k = 0; k <= static_cast<int>(ErrorKind::Internal); ++k) {
      const auto kind = static_cast<ErrorKind>(k);
      CHECK(kind_from_wire(wire_kind(kind)) == kind);
    }
    CHECK(wire_kind(ErrorKind::UnknownOperation) == "UNKNOWN_OP");
    CHECK(kind_from_wire("NO_SUCH_THING") == ErrorKind::Internal);
    const Endpoint e = parse_endpoint("127.0.0.1:4567");
    CHECK(e.host == "127.0.0.1");
    CHECK(e.port == 4567);
    CHECK(is_loopback("127.0.0.1"));
    CHECK(is_loopback("localhost"));
    CHECK(is_loopback("::1"));
    CHECK_FALSE(is_loopback("0.0.0.0"));
  }

  TEST_CASE("non-loopback binding needs allow_remote") {
    TempDir dir;
    Kernel k(parse_config(sim_lab(dir.path).dump()), test_options());
    ServerOptions o;
    o.listen.host = "0.0.0.0";
    CHECK(kind_of([&] { Server s(k, o); }) == ErrorKind::Forbidden);
  }

  TEST_CASE("calls pass through; unexposed modules are forbidden") {
    Served s({"scanner", "slow", "odmr"});
    Client c(s.endpoint());
    s.kernel->dispatch("scanner", "set_position", {{"position", Position3{1, 2, 0.5}}});
    CHECK(c.call("scanner", "get_position") == s.kernel->dispatch("scanner", "get_position"));
    CHECK(c.call("slow", "ping") == "pong");
    CHECK(kind_of([&] { c.call("microwave", "get_state"); }) == ErrorKind::Forbidden);
    CHECK(kind_of([&] { c.call("kernel", "module_state", {{"module", "microwave"}}); }) == ErrorKind::Forbidden);
    CHECK(kind_of([&] { c.call("scanner", "no_such_op"); }) == ErrorKind::UnknownOperation);
    CHECK(kind_of([&] { c.call("scanner", "set_position", {{"position", Position3{50, 0, 0}}}); }) ==
          ErrorKind::OutOfRange);
    CHECK(c.call("kernel", "module_state", {{"module", "scanner"}}).at("state") == "active_idle");
    const Json listed = c.call("kernel", "list_modules");
    CHECK(listed.size() == 3);
    CHECK(c.connected());
  }

  TEST_CASE("malformed JSON answers with id 0 and closes the connection") {
    Served s;
    RawSocket raw(s.server->port());
    raw.send(encode_frame("{\"id\": 1, \"target\": \"scanner\", \"op\": \"get_position\"}"));
    const Json ok = Json::parse(raw.next_frame());
    CHECK(ok.at("id") == 1);
    CHECK(ok.contains("result"));
    raw.send(encode_frame("{not json"));
    const Json err = Json::parse(raw.next_frame());
    CHECK(err.at("id") == 0);
    CHECK(err.at("error").at("kind") == "PROTOCOL");
    CHECK(raw.recv_some().empty());
  }

  TEST_CASE("a bad request id is answered but keeps the connection") {
    Served s;
    RawSocket raw(s.server->port());
    raw.send(encode_frame("{\"id\": -4, \"target\": \"scanner\", \"op\": \"get_position\"}"));
    const Json err = Json::parse(raw.next_frame());
    CHECK(err.at("id") == 0);
    CHECK(err.at("error").at("kind") == "PROTOCOL");
    raw.send(encode_frame("{\"id\": 9007199254740992, \"target\": \"slow\", \"op\": \"ping\"}"));
    const Json ok = Json::parse(raw.next_frame());
    CHECK(ok.at("id") == 9007199254740992ull);
    CHECK(ok.at("result") == "pong");
  }

  TEST_CASE("proxy scanner is indistinguishable from the local one") {
    Served s({}, true);
    TempDir here;
    Json proxy = {{"name", "scanner"}, {"layer", "hardware"}, {"kind", "sim_scanner"},
                  {"remote_address", "127.0.0.1:" + std::to_string(s.server->port())}};
    Kernel local(config_of(Json::array({proxy})), test_options());
    local.activate("scanner");

    // A second in-process server kernel with the same seed gives the oracle.
    TempDir other;
    Kernel twin(parse_config(lab_modules(other).dump()), test_options());
    twin.activate("scanner");
    auto via_proxy = guard_interface<ConfocalScannerInterface>(local, "scanner");
    auto direct = guard_interface<ConfocalScannerInterface>(twin, "scanner");
    for (int i = 0; i < 3; ++i) {
      const Eigen::VectorXd a = via_proxy->scan_line({-1, 0, 0}, {1, 0, 0}, 64, 1e-3);
      const Eigen::VectorXd b = direct->scan_line({-1, 0, 0}, {1, 0, 0}, 64, 1e-3);
      CHECK(vector_to_json(a).dump() == vector_to_json(b).dump());
    }
    check_scanner_contract(*via_proxy);
    CHECK(local.dispatch("scanner", "get_position") == s.kernel->dispatch("scanner", "get_position"));
  }

  TEST_CASE("proxy activation fails when the remote module is down") {
    Served s;
    s.kernel->deactivate("microwave");
    Json proxy = {{"name", "microwave"}, {"layer", "hardware"}, {"kind", "sim_microwave"},
                  {"remote_address", "127.0.0.1:" + std::to_string(s.server->port())}};
    Kernel local(config_of(Json::array({proxy})), test_options());
    CHECK(kind_of([&] { local.activate("microwave"); }) == ErrorKind::ActivationFailed);
  }

  TEST_CASE("connection failures: refused, timed out, lost") {
    int closed_port = 0;
    {
      Served s;
      closed_port = s.server->port();
    }
    CHECK(kind_of([&] { Client c({"127.0.0.1", closed_port}); }) == ErrorKind::Connect);

    Served s;
    Client c(s.endpoint());
    CHECK(kind_of([&] { c.call("slow", "stamp", {{"k", 1}}, 100ms); }) == ErrorKind::Timeout);
    CHECK(c.connected());
    auto pending = c.call_async("slow", "stamp", {{"k", 2}});
    std::this_thread::sleep_for(50ms);
    s.server->stop();
    CHECK(kind_of([&] { pending.get(); }) == ErrorKind::ConnectionLost);
    CHECK_FALSE(c.connected());
    CHECK(kind_of([&] { c.call("slow", "ping"); }) != ErrorKind::Internal);
  }

  TEST_CASE("subscribed events stream in order; unsubscribed clients see none") {
    Served s;
    Client c(s.endpoint());
    Client quiet(s.endpoint());
    c.subscribe({"odmr.*"});
    SweepSettings sw;
    sw.n_points = 21;
    sw.n_sweeps = 3;
    sw.dwell_s = 1e-3;
    c.call("odmr", "start_sweep", Json(sw));
    int sweeps = 0, done = 0;
    std::map<std::string, std::uint64_t> last_seq;  // strictly increasing per topic
    while (done == 0) {
      auto ev = c.next_event(5s);
      REQUIRE(ev);
      CHECK(ev->seq > last_seq[ev->topic]);
      last_seq[ev->topic] = ev->seq;
      if (ev->topic == "odmr.sweep") ++sweeps;
      if (ev->topic == "odmr.done") ++done;
    }
    CHECK(sweeps == 3);
    CHECK(done == 1);
    CHECK_FALSE(c.next_event(200ms));
    CHECK_FALSE(quiet.next_event(200ms));
    c.unsubscribe();
    c.call("odmr", "start_sweep", Json(sw));
    REQUIRE(s.kernel->wait_idle("odmr", 10s));
    CHECK_FALSE(c.next_event(200ms));
  }

  TEST_CASE("100 pipelined requests all come back") {
    Served s;
    Client c(s.endpoint());
    std::vector<std::future<Json>> futures;
    for (int i = 0; i < 100; ++i)
      futures.push_back(c.call_async("scanner", "set_position",
                                     {{"position", Position3{0.01 * i, 0, 0}}}));
    futures.push_back(c.call_async("scanner", "get_position"));
    for (int i = 0; i < 100; ++i) CHECK_NOTHROW(futures[i].get());
    CHECK(futures.back().get().at("x").get<double>() == doctest::Approx(0.99));
  }

  TEST_CASE("WebSocket upgrade at /ws speaks the same JSON") {
    Served s;
    {
      RawSocket raw(s.server->port());
      raw.send("GET /ws HTTP/1.1\r\nHost: localhost\r\nUpgrade: websocket\r\nConnection: Upgrade\r\n"
               "Sec-WebSocket-Key: dGhlIHNhbXBsZSBub25jZQ==\r\nSec-WebSocket-Version: 13\r\n"
               "Sec-WebSocket-Protocol: labkit.v1\r\n\r\n");
      std::string head;
      while (head.find("\r\n\r\n") == std::string::npos) {
        const std::string chunk = raw.recv_some();
        REQUIRE_FALSE(chunk.empty());
        head += chunk;
      }
      CHECK(head.rfind("HTTP/1.1 101", 0) == 0);
      CHECK(head.find("Sec-WebSocket-Accept: s3pPLMBiTxaQ9kYGzzhZRbK+xOo=") != std::string::npos);
      CHECK(head.find("Sec-WebSocket-Protocol: labkit.v1") != std::string::npos);

      raw.send(ws_encode(WsOpcode::text, R"({"id":5,"target":"slow","op":"ping"})", 0xa1b2c3d4));
      WsDecoder d;
      d.feed(head.substr(head.find("\r\n\r\n") + 4));
      std::optional<WsFrame> f;
      while (!(f = d.next())) d.feed(raw.recv_some());
      CHECK_FALSE(f->masked);
      CHECK(f->opcode == WsOpcode::text);
      CHECK(Json::parse(f->payload) == Json{{"id", 5}, {"result", "pong"}});

      // Unmasked client frames are a protocol error.
      raw.send(ws_encode(WsOpcode::text, R"({"id":6,"target":"slow","op":"ping"})"));
      while (!(f = d.next())) d.feed(raw.recv_some());
      CHECK(Json::parse(f->payload).at("error").at("kind") == "PROTOCOL");
    }
    {
      RawSocket raw(s.server->port());
      raw.send("GET /other HTTP/1.1\r\nHost: localhost\r\n\r\n");
      CHECK(raw.recv_some().rfind("HTTP/1.1 404", 0) == 0);
    }
    {
      RawSocket raw(s.server->port());
      raw.send("GET /ws HTTP/1.1\r\nUpgrade: websocket\r\nConnection: Upgrade\r\n"
               "Sec-WebSocket-Key: AAAAAAAAAAAAAAAAAAAAAA==\r\nSec-WebSocket-Version: 13\r\n"
               "Sec-WebSocket-Protocol: other.v2\r\n\r\n");
      CHECK(raw.recv_some().rfind("HTTP/1.1 400", 0) == 0);
    }
  }
}
