#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "guidedseg/errors.hpp"
#include "guidedseg/service.hpp"

namespace guidedseg::http {

/// Standard base64 with padding. Decoding ignores no characters: whitespace
/// or a bad length throws Error(kFormat).
std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

/// HTTP status for an error code: 400 for malformed requests, 404 for
/// unknown ids, 503 when the service is full, 500 otherwise.
int http_status(ErrorCode code);

struct ServerOptions {
  /// Served at / when set (the browser client's build output).
  std::optional<std::filesystem::path> static_dir;
  std::size_t max_body_bytes = 64u << 20;
};

/// JSON API over a SessionService:
///
///   POST   /v1/sessions                     create
///   POST   /v1/sessions/{id}/frames         append a frame
///   POST   /v1/sessions/{id}/annotations    add (and remove) points
///   DELETE /v1/sessions/{id}/annotations    clear, optional ?frame=k
///   GET    /v1/sessions/{id}/mask           ?frame=k&format=rle|png
///   GET    /v1/sessions/{id}                summary
///   DELETE /v1/sessions/{id}                end a session
///
/// Errors answer {"error": message}; a rejected point adds "point_index".
class Server {
 public:
  Server(service::SessionService& service, ServerOptions options = {});
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds without serving. Port 0 picks a free port. Returns the bound
  /// port; throws Error(kConfiguration) when binding fails.
  int bind(const std::string& host, int port);
  /// Serves until stop(); call after bind().
  void run();
  void stop();
  void wait_until_ready() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Splits "host:port" (port required; "[::1]:8080" for IPv6).
std::pair<std::string, int> parse_address(const std::string& addr);

}  // namespace guidedseg::http
