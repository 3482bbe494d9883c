#include "labkit/remote.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <sys/time.h>
#include <unistd.h>

#include <openssl/evp.h>
#include <openssl/sha.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cerrno>
#include <cstring>

#include "labkit/kernel.hpp"

namespace labkit::remote {

namespace {

constexpr std::pair<ErrorKind, const char*> kWireNames[] = {
    {ErrorKind::NotActive, "NOT_ACTIVE"},
    {ErrorKind::UnknownOperation, "UNKNOWN_OP"},
    {ErrorKind::OutOfRange, "OUT_OF_RANGE"},
    {ErrorKind::Busy, "BUSY"},
    {ErrorKind::DeviceFault, "DEVICE_FAULT"},
    {ErrorKind::Internal, "INTERNAL"},
    {ErrorKind::Forbidden, "FORBIDDEN"},
    {ErrorKind::UnknownModule, "UNKNOWN_MODULE"},
    {ErrorKind::NotImplementedByHardware, "NOT_IMPLEMENTED"},
    {ErrorKind::DegenerateData, "DEGENERATE_DATA"},
    {ErrorKind::NoConvergence, "NO_CONVERGENCE"},
    {ErrorKind::DegenerateGeometry, "DEGENERATE_GEOMETRY"},
    {ErrorKind::Precondition, "PRECONDITION"},
    {ErrorKind::ActivationFailed, "ACTIVATION_FAILED"},
    {ErrorKind::Syntax, "SYNTAX"},
    {ErrorKind::Schema, "SCHEMA"},
    {ErrorKind::Io, "IO"},
    {ErrorKind::Bind, "BIND"},
    {ErrorKind::Connect, "CONNECT"},
    {ErrorKind::Timeout, "TIMEOUT"},
    {ErrorKind::ConnectionLost, "CONNECTION_LOST"},
    {ErrorKind::Protocol, "PROTOCOL"},
};

std::string dump(const Json& j) { return j.dump(-1, ' ', false, Json::error_handler_t::replace); }

Json error_message(std::uint64_t id, ErrorKind kind, const std::string& message) {
  return {{"id", id}, {"error", {{"kind", wire_kind(kind)}, {"message", message}}}};
}

Json error_message(std::uint64_t id, std::exception_ptr e) {
  try {
    std::rethrow_exception(e);
  } catch (const Error& err) {
    return error_message(id, err.kind(), err.what());
  } catch (const std::exception& err) {
    return error_message(id, ErrorKind::Internal, err.what());
  } catch (...) {
    return error_message(id, ErrorKind::Internal, "unknown error");
  }
}

bool send_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return false;
    data.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

// Bytes read, 0 on orderly close, -1 on error.
ssize_t recv_some(int fd, char* buf, std::size_t size) {
  for (;;) {
    const ssize_t n = ::recv(fd, buf, size, 0);
    if (n < 0 && errno == EINTR) continue;
    return n;
  }
}

std::uint32_t read_be32(const char* p) {
  const auto* u = reinterpret_cast<const unsigned char*>(p);
  return (std::uint32_t{u[0]} << 24) | (std::uint32_t{u[1]} << 16) | (std::uint32_t{u[2]} << 8) | u[3];
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::string trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return std::string(s);
}

bool has_token(const std::string& header, const std::string& token) {
  std::size_t start = 0;
  while (start <= header.size()) {
    const std::size_t comma = std::min(header.find(',', start), header.size());
    if (lower(trim(std::string_view(header).substr(start, comma - start))) == token) return true;
    start = comma + 1;
  }
  return false;
}

std::optional<std::uint64_t> request_id(const Json& j) {
  const auto it = j.find("id");
  if (it == j.end()) return std::nullopt;
  if (it->is_number_unsigned()) {
    const auto v = it->get<std::uint64_t>();
    if (v <= kMaxId) return v;
  } else if (it->is_number_integer()) {
    const auto v = it->get<std::int64_t>();
    if (v >= 0) return static_cast<std::uint64_t>(v);
  }
  return std::nullopt;
}

}  // namespace

std::string wire_kind(ErrorKind kind) {
  for (const auto& [k, name] : kWireNames)
    if (k == kind) return name;
  return "INTERNAL";
}

ErrorKind kind_from_wire(std::string_view name) {
  for (const auto& [k, n] : kWireNames)
    if (name == n) return k;
  return ErrorKind::Internal;
}

std::string encode_frame(std::string_view payload) {
  if (payload.size() > kMaxFrame) fail(ErrorKind::Protocol, "frame exceeds 16 MiB");
  const auto n = static_cast<std::uint32_t>(payload.size());
  std::string out{static_cast<char>(n >> 24), static_cast<char>(n >> 16), static_cast<char>(n >> 8),
                  static_cast<char>(n)};
  out.append(payload);
  return out;
}

void FrameDecoder::feed(std::string_view bytes) { buffer_.append(bytes); }

std::optional<std::string> FrameDecoder::next() {
  if (buffer_.size() < 4) return std::nullopt;
  const std::uint32_t n = read_be32(buffer_.data());
  if (n > kMaxFrame) fail(ErrorKind::Protocol, "frame of " + std::to_string(n) + " bytes exceeds 16 MiB");
  if (buffer_.size() < 4 + std::size_t{n}) return std::nullopt;
  std::string payload = buffer_.substr(4, n);
  buffer_.erase(0, 4 + std::size_t{n});
  return payload;
}

std::string websocket_accept(std::string_view key) {
  const std::string input = std::string(key) + "258EAFA5-E914-47DA-95CA-C5AB0DC85B11";
  unsigned char digest[SHA_DIGEST_LENGTH];
  SHA1(reinterpret_cast<const unsigned char*>(input.data()), input.size(), digest);
  unsigned char out[4 * ((SHA_DIGEST_LENGTH + 2) / 3) + 1];
  const int n = EVP_EncodeBlock(out, digest, SHA_DIGEST_LENGTH);
  return std::string(reinterpret_cast<char*>(out), static_cast<std::size_t>(n));
}

std::string ws_encode(WsOpcode op, std::string_view payload, std::optional<std::uint32_t> mask) {
  std::string out;
  out.push_back(static_cast<char>(0x80 | static_cast<std::uint8_t>(op)));
  const std::uint8_t mask_bit = mask ? 0x80 : 0;
  const std::uint64_t n = payload.size();
  if (n < 126) {
    out.push_back(static_cast<char>(mask_bit | n));
  } else if (n <= 0xFFFF) {
    out.push_back(static_cast<char>(mask_bit | 126));
    out.push_back(static_cast<char>(n >> 8));
    out.push_back(static_cast<char>(n));
  } else {
    out.push_back(static_cast<char>(mask_bit | 127));
    for (int shift = 56; shift >= 0; shift -= 8) out.push_back(static_cast<char>(n >> shift));
  }
  if (!mask) {
    out.append(payload);
    return out;
  }
  const std::array<char, 4> key{static_cast<char>(*mask >> 24), static_cast<char>(*mask >> 16),
                                static_cast<char>(*mask >> 8), static_cast<char>(*mask)};
  out.append(key.data(), 4);
  for (std::size_t i = 0; i < payload.size(); ++i) out.push_back(static_cast<char>(payload[i] ^ key[i % 4]));
  return out;
}

void WsDecoder::feed(std::string_view bytes) { buffer_.append(bytes); }

std::optional<WsFrame> WsDecoder::next() {
  const auto* b = reinterpret_cast<const unsigned char*>(buffer_.data());
  if (buffer_.size() < 2) return std::nullopt;
  WsFrame f;
  f.fin = b[0] & 0x80;
  if (b[0] & 0x70) fail(ErrorKind::Protocol, "reserved WebSocket bits set");
  f.opcode = static_cast<WsOpcode>(b[0] & 0x0F);
  f.masked = b[1] & 0x80;
  std::uint64_t n = b[1] & 0x7F;
  std::size_t pos = 2;
  if (n == 126) {
    if (buffer_.size() < 4) return std::nullopt;
    n = (std::uint64_t{b[2]} << 8) | b[3];
    pos = 4;
  } else if (n == 127) {
    if (buffer_.size() < 10) return std::nullopt;
    n = 0;
    for (int i = 0; i < 8; ++i) n = (n << 8) | b[2 + i];
    pos = 10;
  }
  if (n > kMaxFrame) fail(ErrorKind::Protocol, "WebSocket frame exceeds 16 MiB");
  std::array<char, 4> key{};
  if (f.masked) {
    if (buffer_.size() < pos + 4) return std::nullopt;
    std::copy_n(buffer_.data() + pos, 4, key.begin());
    pos += 4;
  }
  if (buffer_.size() < pos + n) return std::nullopt;
  f.payload = buffer_.substr(pos, n);
  if (f.masked)
    for (std::size_t i = 0; i < f.payload.size(); ++i) f.payload[i] = static_cast<char>(f.payload[i] ^ key[i % 4]);
  buffer_.erase(0, pos + n);
  return f;
}

Endpoint parse_endpoint(std::string_view text) {
  const auto colon = text.rfind(':');
  if (colon == std::string_view::npos) fail(ErrorKind::Schema, "address '" + std::string(text) + "' is not host:port");
  Endpoint e;
  e.host = std::string(text.substr(0, colon));
  if (e.host.size() >= 2 && e.host.front() == '[' && e.host.back() == ']') e.host = e.host.substr(1, e.host.size() - 2);
  const std::string port(text.substr(colon + 1));
  std::size_t used = 0;
  int p = -1;
  try {
    p = std::stoi(port, &used);
  } catch (const std::exception&) {
  }
  if (e.host.empty() || used != port.size() || p < 0 || p > 65535)
    fail(ErrorKind::Schema, "address '" + std::string(text) + "' is not host:port");
  e.port = p;
  return e;
}

bool is_loopback(const std::string& host) {
  if (host == "localhost" || host == "::1") return true;
  in_addr a{};
  return inet_pton(AF_INET, host.c_str(), &a) == 1 && (ntohl(a.s_addr) >> 24) == 127;
}

// ---------------------------------------------------------------- server

struct Server::Connection {
  Connection(Kernel& k, const ServerOptions& o, int f) : kernel(k), options(o), fd(f) {}
  ~Connection() {
    if (reader.joinable()) reader.join();
    ::close(fd);
  }

  Kernel& kernel;
  const ServerOptions& options;
  const int fd;
  bool websocket = false;
  std::mutex send_mutex;
  bool closed = false;
  std::shared_ptr<Subscription> sub;
  std::mutex topics_mutex;
  std::vector<std::string> topics;
  std::thread reader;
  std::thread pump;
  std::atomic<bool> done{false};
  std::weak_ptr<Connection> self;

  void send_raw(std::string_view bytes) {
    std::lock_guard lock(send_mutex);
    if (closed) return;
    if (!send_all(fd, bytes)) {
      closed = true;
      ::shutdown(fd, SHUT_RDWR);
    }
  }

  void send(const Json& msg) {
    const std::string text = dump(msg);
    send_raw(websocket ? ws_encode(WsOpcode::text, text) : encode_frame(text));
  }

  void shut() {
    {
      std::lock_guard lock(send_mutex);
      if (!closed) {
        closed = true;
        ::shutdown(fd, SHUT_RDWR);
      }
    }
    if (sub) {
      sub->close();
      kernel.events().unsubscribe(sub);
    }
  }

  bool exposed(const std::string& name) const { return options.exposed.empty() || options.exposed.count(name); }

  void run();
  bool handshake(std::string& pending);
  bool handle(const std::string& text);
  Json kernel_op(const std::string& op, const Json& params);
  void pump_events();
};

bool Server::Connection::handshake(std::string& pending) {
  std::size_t end;
  char buf[4096];
  while ((end = pending.find("\r\n\r\n")) == std::string::npos) {
    if (pending.size() > 16384) return false;
    const ssize_t n = recv_some(fd, buf, sizeof buf);
    if (n <= 0) return false;
    pending.append(buf, static_cast<std::size_t>(n));
  }
  const std::string head = pending.substr(0, end);
  pending.erase(0, end + 4);

  std::map<std::string, std::string> headers;
  std::size_t line_end = head.find("\r\n");
  const std::string request_line = head.substr(0, line_end);
  while (line_end != std::string::npos) {
    const std::size_t start = line_end + 2;
    line_end = head.find("\r\n", start);
    const std::string line = head.substr(start, line_end == std::string::npos ? std::string::npos : line_end - start);
    const auto colon = line.find(':');
    if (colon != std::string::npos) headers[lower(trim(line.substr(0, colon)))] = trim(line.substr(colon + 1));
  }

  auto reply = [&](const std::string& status, const std::string& body) {
    send_raw("HTTP/1.1 " + status + "\r\nContent-Type: text/plain\r\nContent-Length: " +
             std::to_string(body.size()) + "\r\nConnection: close\r\n\r\n" + body);
    return false;
  };
  const auto sp1 = request_line.find(' ');
  const auto sp2 = request_line.find(' ', sp1 + 1);
  if (sp1 == std::string::npos || sp2 == std::string::npos) return reply("400 Bad Request", "bad request line\n");
  std::string path = request_line.substr(sp1 + 1, sp2 - sp1 - 1);
  path = path.substr(0, path.find('?'));
  if (path != kWebSocketPath) return reply("404 Not Found", "not found\n");
  if (lower(headers["upgrade"]) != "websocket" || !has_token(headers["connection"], "upgrade") ||
      headers["sec-websocket-version"] != "13" || headers["sec-websocket-key"].empty())
    return reply("400 Bad Request", "expected a WebSocket upgrade\n");
  const bool offered = headers.count("sec-websocket-protocol") > 0;
  if (offered && !has_token(headers["sec-websocket-protocol"], kSubprotocol))
    return reply("400 Bad Request", std::string("unsupported subprotocol; expected ") + kSubprotocol + "\n");

  std::string response =
      "HTTP/1.1 101 Switching Protocols\r\nUpgrade: websocket\r\nConnection: Upgrade\r\n"
      "Sec-WebSocket-Accept: " +
      websocket_accept(headers["sec-websocket-key"]) + "\r\n";
  if (offered) response += std::string("Sec-WebSocket-Protocol: ") + kSubprotocol + "\r\n";
  response += "\r\n";
  send_raw(response);
  websocket = true;
  return true;
}

void Server::Connection::run() {
  std::string pending;
  char buf[65536];
  while (pending.size() < 4) {
    const ssize_t n = recv_some(fd, buf, sizeof buf);
    if (n <= 0) return shut();
    pending.append(buf, static_cast<std::size_t>(n));
  }
  if (pending.compare(0, 4, "GET ") == 0 && !handshake(pending)) return shut();

  sub = kernel.events().subscribe({});
  pump = std::thread([this] { pump_events(); });

  FrameDecoder frames;
  WsDecoder ws;
  std::string fragments;
  bool open = true;
  auto protocol_error = [&](const std::string& why) {
    send(error_message(0, ErrorKind::Protocol, why));
    if (websocket) send_raw(ws_encode(WsOpcode::close, std::string("\x03\xea", 2)));
    open = false;
  };
  auto consume = [&]() {
    try {
      if (!websocket) {
        frames.feed(pending);
        pending.clear();
        while (open)
          if (auto payload = frames.next()) open = handle(*payload);
          else break;
        return;
      }
      ws.feed(pending);
      pending.clear();
      while (open) {
        auto f = ws.next();
        if (!f) break;
        if (!f->masked) return protocol_error("client WebSocket frames must be masked");
        switch (f->opcode) {
          case WsOpcode::text:
          case WsOpcode::continuation:
            fragments += f->payload;
            if (fragments.size() > kMaxFrame) return protocol_error("message exceeds 16 MiB");
            if (f->fin) {
              open = handle(fragments);
              fragments.clear();
            }
            break;
          case WsOpcode::ping:
            send_raw(ws_encode(WsOpcode::pong, f->payload));
            break;
          case WsOpcode::pong:
            break;
          case WsOpcode::close:
            send_raw(ws_encode(WsOpcode::close, f->payload.substr(0, 2)));
            open = false;
            break;
          default:
            return protocol_error("only text messages are supported");
        }
      }
    } catch (const Error& e) {
      protocol_error(e.what());
    }
  };
  consume();
  while (open) {
    const ssize_t n = recv_some(fd, buf, sizeof buf);
    if (n <= 0) break;
    pending.assign(buf, static_cast<std::size_t>(n));
    consume();
  }
  shut();
  if (pump.joinable()) pump.join();
}

void Server::Connection::pump_events() {
  while (true) {
    auto ev = sub->next(std::chrono::milliseconds(200));
    if (ev) {
      send({{"topic", ev->topic}, {"seq", ev->seq}, {"payload", ev->payload}});
    } else if (sub->closed()) {
      return;
    }
  }
}

bool Server::Connection::handle(const std::string& text) {
  Json msg;
  try {
    msg = Json::parse(text);
  } catch (const Json::parse_error& e) {
    send(error_message(0, ErrorKind::Protocol, std::string("malformed JSON: ") + e.what()));
    return false;
  }
  if (!msg.is_object()) {
    send(error_message(0, ErrorKind::Protocol, "message must be a JSON object"));
    return false;
  }
  const auto id = request_id(msg);
  if (!id) {
    send(error_message(0, ErrorKind::Protocol, "request id must be an integer in [0, 2^53]"));
    return true;
  }
  const auto target = msg.find("target");
  const auto op = msg.find("op");
  if (target == msg.end() || !target->is_string() || op == msg.end() || !op->is_string()) {
    send(error_message(*id, ErrorKind::Protocol, "request needs string fields 'target' and 'op'"));
    return true;
  }
  Json params = msg.value("params", Json::object());
  if (params.is_null()) params = Json::object();

  const std::string name = target->get<std::string>();
  if (name == "kernel") {
    try {
      send({{"id", *id}, {"result", kernel_op(op->get<std::string>(), params)}});
    } catch (...) {
      send(error_message(*id, std::current_exception()));
    }
    return true;
  }
  if (!exposed(name)) {
    send(error_message(*id, ErrorKind::Forbidden, "module '" + name + "' is not exposed"));
    return true;
  }
  std::weak_ptr<Connection> weak = self;
  kernel.dispatch_async(name, op->get<std::string>(), std::move(params),
                        [weak, rid = *id](Json result, std::exception_ptr error) {
                          const auto conn = weak.lock();
                          if (!conn) return;
                          conn->send(error ? error_message(rid, error) : Json{{"id", rid}, {"result", std::move(result)}});
                        });
  return true;
}

Json Server::Connection::kernel_op(const std::string& op, const Json& params) {
  auto module_param = [&] {
    const std::string m = params.at("module").get<std::string>();
    if (!exposed(m)) fail(ErrorKind::Forbidden, "module '" + m + "' is not exposed");
    return m;
  };
  try {
    if (op == "subscribe" || op == "unsubscribe") {
      std::vector<std::string> given;
      for (const auto& t : params.value("topics", Json::array())) given.push_back(t.get<std::string>());
      std::lock_guard lock(topics_mutex);
      if (op == "subscribe") {
        for (auto& t : given)
          if (std::find(topics.begin(), topics.end(), t) == topics.end()) topics.push_back(t);
      } else if (given.empty()) {
        topics.clear();
      } else {
        std::erase_if(topics, [&](const std::string& t) {
          return std::find(given.begin(), given.end(), t) != given.end();
        });
      }
      sub->clear_patterns();
      sub->add_patterns(topics);
      return {{"topics", topics}};
    }
    if (op == "list_modules") {
      Json out = Json::array();
      for (const auto& m : kernel.modules()) {
        if (!exposed(m.name)) continue;
        out.push_back({{"name", m.name},
                       {"layer", to_string(m.layer)},
                       {"kind", m.kind},
                       {"state", to_string(m.state)},
                       {"remote", m.remote_address.has_value()}});
      }
      return out;
    }
    if (op == "module_state") {
      const std::string m = module_param();
      return {{"module", m}, {"state", to_string(kernel.state(m))}};
    }
    if (op == "operations") return kernel.operations(module_param());
    if (op == "activate") {
      const std::string m = module_param();
      return {{"module", m}, {"state", to_string(kernel.activate(m))}};
    }
    if (op == "deactivate") {
      const std::string m = module_param();
      return {{"module", m}, {"state", to_string(kernel.deactivate(m, params.value("force", false)))}};
    }
  } catch (const Json::exception& e) {
    fail(ErrorKind::Precondition, "bad parameters for '" + op + "': " + e.what());
  }
  fail(ErrorKind::UnknownOperation, "unknown kernel operation '" + op + "'");
}

Server::Server(Kernel& kernel, ServerOptions options) : kernel_(kernel), options_(std::move(options)) {
  const Endpoint& ep = options_.listen;
  if (!is_loopback(ep.host) && !options_.allow_remote)
    fail(ErrorKind::Forbidden, "refusing to listen on non-loopback address " + ep.host + " without --allow-remote");
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const std::string port = std::to_string(ep.port);
  if (getaddrinfo(ep.host.c_str(), port.c_str(), &hints, &res) != 0 || !res)
    fail(ErrorKind::Bind, "cannot resolve listen address " + ep.host);
  std::string why = "no usable address";
  for (addrinfo* a = res; a; a = a->ai_next) {
    const int fd = ::socket(a->ai_family, a->ai_socktype | SOCK_CLOEXEC, a->ai_protocol);
    if (fd < 0) continue;
    const int yes = 1;
    setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
    if (::bind(fd, a->ai_addr, a->ai_addrlen) == 0 && ::listen(fd, 64) == 0) {
      listen_fd_ = fd;
      sockaddr_storage bound{};
      socklen_t len = sizeof bound;
      getsockname(fd, reinterpret_cast<sockaddr*>(&bound), &len);
      port_ = ntohs(bound.ss_family == AF_INET6 ? reinterpret_cast<sockaddr_in6*>(&bound)->sin6_port
                                                : reinterpret_cast<sockaddr_in*>(&bound)->sin_port);
      break;
    }
    why = std::strerror(errno);
    ::close(fd);
  }
  freeaddrinfo(res);
  if (listen_fd_ < 0) fail(ErrorKind::Bind, "cannot listen on " + ep.host + ":" + port + ": " + why);
  kernel_.log(LogLevel::info, "remote", "listening on " + ep.host + ":" + std::to_string(port_));
  acceptor_ = std::thread([this] { accept_loop(); });
}

Server::~Server() { stop(); }

void Server::accept_loop() {
  while (!stopping_) {
    const int fd = ::accept4(listen_fd_, nullptr, nullptr, SOCK_CLOEXEC);
    if (fd < 0) {
      if (errno == EINTR || errno == ECONNABORTED) continue;
      if (stopping_) return;
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
      continue;
    }
    const int yes = 1;
    setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &yes, sizeof yes);
    timeval tv{5, 0};
    setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
    auto conn = std::make_shared<Connection>(kernel_, options_, fd);
    conn->self = conn;
    std::lock_guard lock(mutex_);
    prune();
    if (stopping_) {
      conn->shut();
      continue;
    }
    Connection* raw = conn.get();
    conn->reader = std::thread([raw] {
      raw->run();
      raw->done = true;
    });
    connections_.push_back(std::move(conn));
  }
}

void Server::prune() {
  std::erase_if(connections_, [](const std::shared_ptr<Connection>& c) {
    if (!c->done) return false;
    c->reader.join();
    return true;
  });
}

void Server::stop() {
  if (stopping_.exchange(true)) return;
  ::shutdown(listen_fd_, SHUT_RDWR);
  if (acceptor_.joinable()) acceptor_.join();
  ::close(listen_fd_);
  std::vector<std::shared_ptr<Connection>> conns;
  {
    std::lock_guard lock(mutex_);
    conns.swap(connections_);
  }
  for (auto& c : conns) {
    c->shut();
    if (c->reader.joinable()) c->reader.join();
  }
}

// ---------------------------------------------------------------- client

Client::Client(Endpoint endpoint, ClientOptions options) : endpoint_(std::move(endpoint)), options_(options) {
  std::lock_guard lock(life_mutex_);
  connect();
}

Client::~Client() { close(); }

void Client::connect() {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const std::string where = endpoint_.host + ":" + std::to_string(endpoint_.port);
  if (getaddrinfo(endpoint_.host.c_str(), std::to_string(endpoint_.port).c_str(), &hints, &res) != 0 || !res)
    fail(ErrorKind::Connect, "cannot resolve " + where);
  int fd = -1;
  std::string why = "no usable address";
  for (addrinfo* a = res; a; a = a->ai_next) {
    fd = ::socket(a->ai_family, a->ai_socktype | SOCK_CLOEXEC, a->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) break;
    why = std::strerror(errno);
    ::close(fd);
    fd = -1;
  }
  freeaddrinfo(res);
  if (fd < 0) fail(ErrorKind::Connect, "cannot connect to " + where + ": " + why);
  const int yes = 1;
  setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &yes, sizeof yes);
  fd_ = fd;
  connected_ = true;
  reader_ = std::thread([this, fd] { reader(fd); });
}

void Client::ensure_connected() {
  std::lock_guard lock(life_mutex_);
  if (connected_) return;
  if (reader_.joinable()) reader_.join();
  if (fd_ >= 0) ::close(fd_);
  fd_ = -1;
  connect();
}

void Client::close() {
  std::lock_guard lock(life_mutex_);
  if (fd_ < 0) return;
  ::shutdown(fd_, SHUT_RDWR);
  if (reader_.joinable()) reader_.join();
  ::close(fd_);
  fd_ = -1;
}

void Client::fail_pending(ErrorKind kind, const std::string& message) {
  std::lock_guard lock(pending_mutex_);
  for (auto& [id, p] : pending_) p.set_exception(std::make_exception_ptr(Error(kind, message)));
  pending_.clear();
}

void Client::reader(int fd) {
  FrameDecoder frames;
  char buf[65536];
  std::string lost = "connection closed by server";
  try {
    for (;;) {
      const ssize_t n = recv_some(fd, buf, sizeof buf);
      if (n <= 0) break;
      frames.feed(std::string_view(buf, static_cast<std::size_t>(n)));
      while (auto payload = frames.next()) {
        const Json msg = Json::parse(*payload);
        if (msg.contains("topic")) {
          std::lock_guard lock(events_mutex_);
          events_.push_back({msg.at("topic").get<std::string>(), msg.value("seq", std::uint64_t{0}),
                             msg.value("payload", Json())});
          while (events_.size() > options_.event_capacity) events_.pop_front();
          events_cv_.notify_all();
          continue;
        }
        const std::uint64_t id = msg.value("id", std::uint64_t{0});
        std::lock_guard lock(pending_mutex_);
        const auto it = pending_.find(id);
        if (it == pending_.end()) continue;
        if (const auto err = msg.find("error"); err != msg.end())
          it->second.set_exception(std::make_exception_ptr(
              Error(kind_from_wire(err->value("kind", std::string("INTERNAL"))), err->value("message", std::string()))));
        else
          it->second.set_value(msg.value("result", Json()));
        pending_.erase(it);
      }
    }
  } catch (const std::exception& e) {
    lost = std::string("protocol error: ") + e.what();
  }
  connected_ = false;
  ::shutdown(fd, SHUT_RDWR);
  fail_pending(ErrorKind::ConnectionLost, lost);
  events_cv_.notify_all();
}

std::pair<std::uint64_t, std::future<Json>> Client::send_request(const std::string& target, const std::string& op,
                                                                 const Json& params) {
  if (!connected_) fail(ErrorKind::ConnectionLost, "not connected to " + endpoint_.host);
  std::uint64_t id;
  std::future<Json> fut;
  {
    std::lock_guard lock(pending_mutex_);
    id = next_id_++;
    fut = pending_[id].get_future();
  }
  const std::string frame = encode_frame(dump({{"id", id}, {"target", target}, {"op", op}, {"params", params}}));
  bool ok;
  {
    std::lock_guard lock(send_mutex_);
    ok = send_all(fd_, frame);
  }
  if (!ok) {
    std::lock_guard lock(pending_mutex_);
    if (auto it = pending_.find(id); it != pending_.end()) {
      it->second.set_exception(std::make_exception_ptr(Error(ErrorKind::ConnectionLost, "send failed")));
      pending_.erase(it);
    }
  }
  return {id, std::move(fut)};
}

std::future<Json> Client::call_async(const std::string& target, const std::string& op, const Json& params) {
  return send_request(target, op, params).second;
}

Json Client::call(const std::string& target, const std::string& op, const Json& params) {
  return call(target, op, params, options_.timeout);
}

Json Client::call(const std::string& target, const std::string& op, const Json& params,
                  std::chrono::milliseconds timeout) {
  auto [id, fut] = send_request(target, op, params);
  if (fut.wait_for(timeout) != std::future_status::ready) {
    {
      std::lock_guard lock(pending_mutex_);
      pending_.erase(id);
    }
    fail(ErrorKind::Timeout, target + "." + op + ": no response within " + std::to_string(timeout.count()) + " ms");
  }
  return fut.get();
}

void Client::subscribe(const std::vector<std::string>& patterns) { call("kernel", "subscribe", {{"topics", patterns}}); }

void Client::unsubscribe(const std::vector<std::string>& patterns) {
  call("kernel", "unsubscribe", {{"topics", patterns}});
}

std::optional<Event> Client::next_event(std::chrono::milliseconds timeout) {
  std::unique_lock lock(events_mutex_);
  events_cv_.wait_for(lock, timeout, [&] { return !events_.empty() || !connected_; });
  if (events_.empty()) return std::nullopt;
  Event e = std::move(events_.front());
  events_.pop_front();
  return e;
}

// ---------------------------------------------------------------- proxies

namespace {

class Proxy : public Module {
 public:
  explicit Proxy(ModuleContext& ctx)
      : Module(ctx), remote_name_(ctx.option<std::string>("remote_name", ctx.name())) {}

  void on_activate() override {
    const std::string address = *ctx().spec().remote_address;
    const auto timeout = std::chrono::milliseconds(
        static_cast<long long>(ctx().option<double>("timeout_s", 30.0) * 1000.0));
    client_ = ctx().shared<Client>("remote.client." + address, [&] {
      return std::make_shared<Client>(parse_endpoint(address), ClientOptions{timeout});
    });
    client_->ensure_connected();
    const std::string state = client_->call("kernel", "module_state", {{"module", remote_name_}}).at("state");
    if (state != "active_idle" && state != "active_busy")
      fail(ErrorKind::NotActive, "remote module '" + remote_name_ + "' at " + address + " is " + state);
  }

  Json invoke(const std::string& op, const Json& params) override {
    return call(op, params.is_null() ? Json::object() : params);
  }

 protected:
  Json call(const std::string& op, const Json& params) {
    if (!client_) fail(ErrorKind::NotActive, "proxy is not connected");
    return client_->call(remote_name_, op, params);
  }

 private:
  std::string remote_name_;
  std::shared_ptr<Client> client_;
};

class ScannerProxy final : public Proxy, public ConfocalScannerInterface {
 public:
  using Proxy::Proxy;
  ScanVolume get_volume() override { return call("get_volume", Json::object()).get<ScanVolume>(); }
  Position3 get_position() override { return call("get_position", Json::object()).get<Position3>(); }
  void set_position(const Position3& p) override { call("set_position", Json(p)); }
  Eigen::VectorXd scan_line(const Position3& a, const Position3& b, int pixels, double dwell_s) override {
    return vector_from_json(
        call("scan_line", {{"start", a}, {"end", b}, {"pixels", pixels}, {"dwell_s", dwell_s}}));
  }
};

class MicrowaveProxy final : public Proxy, public MicrowaveInterface {
 public:
  using Proxy::Proxy;
  void set_cw(double f, double p) override { call("set_cw", {{"frequency", f}, {"power", p}}); }
  void set_output(bool on) override { call("set_output", {{"on", on}}); }
  MicrowaveState get_state() override { return call("get_state", Json::object()).get<MicrowaveState>(); }
};

class SpectrometerProxy final : public Proxy, public SpectrometerInterface {
 public:
  using Proxy::Proxy;
  Spectrum acquire_spectrum(double exposure_s) override {
    return call("acquire_spectrum", {{"exposure_s", exposure_s}}).get<Spectrum>();
  }
};

}  // namespace

std::unique_ptr<Module> make_proxy(ModuleContext& ctx) {
  const ModuleSpec& spec = ctx.spec();
  std::string iface = spec.implements.value_or("");
  if (iface.empty()) {
    if (spec.kind == "sim_scanner" || spec.kind == "spectral_scanner" || spec.kind == "tilt_scanner")
      iface = ConfocalScannerInterface::kName;
    else if (spec.kind == "sim_microwave")
      iface = MicrowaveInterface::kName;
    else if (spec.kind == "sim_spectrometer")
      iface = SpectrometerInterface::kName;
  }
  if (iface == ConfocalScannerInterface::kName) return std::make_unique<ScannerProxy>(ctx);
  if (iface == MicrowaveInterface::kName) return std::make_unique<MicrowaveProxy>(ctx);
  if (iface == SpectrometerInterface::kName) return std::make_unique<SpectrometerProxy>(ctx);
  return std::make_unique<Proxy>(ctx);
}

}  // namespace labkit::remote
