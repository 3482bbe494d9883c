#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "labkit/events.hpp"
#include "labkit/module.hpp"

namespace labkit {
class Kernel;
}

namespace labkit::remote {

inline constexpr std::size_t kMaxFrame = 16u << 20;  // 16 MiB
inline constexpr std::uint64_t kMaxId = std::uint64_t{1} << 53;
inline constexpr const char* kSubprotocol = "labkit.v1";
inline constexpr const char* kWebSocketPath = "/ws";

// Wire names of error kinds: NOT_ACTIVE, UNKNOWN_OP, OUT_OF_RANGE, BUSY, ...
std::string wire_kind(ErrorKind kind);
ErrorKind kind_from_wire(std::string_view name);  // unknown names -> Internal

// Length-prefixed frames: 4-byte big-endian payload size, then UTF-8 JSON.
std::string encode_frame(std::string_view payload);

class FrameDecoder {
 public:
  void feed(std::string_view bytes);
  // Next complete payload, if any. Protocol error for an oversized frame.
  std::optional<std::string> next();

 private:
  std::string buffer_;
};

// RFC 6455 pieces.
std::string websocket_accept(std::string_view key);
enum class WsOpcode : std::uint8_t { continuation = 0, text = 1, binary = 2, close = 8, ping = 9, pong = 10 };
// Client frames must carry a mask; server frames must not.
std::string ws_encode(WsOpcode op, std::string_view payload, std::optional<std::uint32_t> mask = std::nullopt);

struct WsFrame {
  bool fin = true;
  WsOpcode opcode = WsOpcode::text;
  bool masked = false;
  std::string payload;  // unmasked
};

class WsDecoder {
 public:
  void feed(std::string_view bytes);
  std::optional<WsFrame> next();  // Protocol error for oversized frames

 private:
  std::string buffer_;
};

// host:port; port 0 picks a free port.
struct Endpoint {
  std::string host = "127.0.0.1";
  int port = 0;
};
Endpoint parse_endpoint(std::string_view text);
bool is_loopback(const std::string& host);

struct ServerOptions {
  Endpoint listen;
  bool allow_remote = false;
  // Modules reachable from outside; empty = all declared modules.
  std::set<std::string> exposed;
};

// Serves the framed protocol and, on the same port, WebSocket at /ws. Kernel
// operations use target "kernel": subscribe, unsubscribe, list_modules,
// module_state, operations, activate, deactivate.
class Server {
 public:
  // Binds immediately: Bind error on failure, Forbidden for a non-loopback
  // address without allow_remote.
  Server(Kernel& kernel, ServerOptions options);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  int port() const { return port_; }
  const std::string& host() const { return options_.listen.host; }
  void stop();

  struct Connection;

 private:
  void accept_loop();
  void prune();

  Kernel& kernel_;
  ServerOptions options_;
  int listen_fd_ = -1;
  int port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  std::mutex mutex_;
  std::vector<std::shared_ptr<Connection>> connections_;
};

struct ClientOptions {
  std::chrono::milliseconds timeout{30'000};
  std::size_t event_capacity = Subscription::kDefaultCapacity;
};

// One connection; requests may be pipelined from any thread.
class Client {
 public:
  Client(Endpoint endpoint, ClientOptions options = {});
  ~Client();
  Client(const Client&) = delete;
  Client& operator=(const Client&) = delete;

  // Remote errors are rethrown with their kind; Timeout after the call
  // timeout, ConnectionLost if the connection drops first.
  Json call(const std::string& target, const std::string& op, const Json& params = Json::object());
  Json call(const std::string& target, const std::string& op, const Json& params,
            std::chrono::milliseconds timeout);
  std::future<Json> call_async(const std::string& target, const std::string& op,
                               const Json& params = Json::object());

  void subscribe(const std::vector<std::string>& patterns);
  void unsubscribe(const std::vector<std::string>& patterns = {});
  std::optional<Event> next_event(std::chrono::milliseconds timeout);

  bool connected() const { return connected_; }
  // Reconnects after a dropped connection (Connect error on failure).
  void ensure_connected();
  void close();
  const Endpoint& endpoint() const { return endpoint_; }

 private:
  void connect();
  void reader(int fd);
  std::pair<std::uint64_t, std::future<Json>> send_request(const std::string& target, const std::string& op,
                                                           const Json& params);
  void fail_pending(ErrorKind kind, const std::string& message);

  Endpoint endpoint_;
  ClientOptions options_;
  std::mutex life_mutex_;
  std::mutex send_mutex_;
  int fd_ = -1;
  std::atomic<bool> connected_{false};
  std::thread reader_;
  std::mutex pending_mutex_;
  std::map<std::uint64_t, std::promise<Json>> pending_;
  std::uint64_t next_id_ = 1;
  std::mutex events_mutex_;
  std::condition_variable events_cv_;
  std::deque<Event> events_;
};

// Stand-in for a module living in another process: every operation and
// interface call becomes a request. The interface is taken from the spec's
// `implements` (or inferred from sim_* kinds); option remote_name overrides
// the module name used on the server.
std::unique_ptr<Module> make_proxy(ModuleContext& ctx);

}  // namespace labkit::remote
