#include "guidedseg/http_server.hpp"

#include <openssl/evp.h>

#include <charconv>
#include <nlohmann/json.hpp>

#include "guidedseg/png.hpp"
#include "guidedseg/rle.hpp"

#include "httplib.h"

namespace guidedseg::http {

using nlohmann::json;
using service::SessionService;

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  // EVP_DecodeBlock tolerates surrounding whitespace and does not report
  // padding, so validate the alphabet here and strip padding bytes after.
  if (text.size() % 4 != 0) throw Error(ErrorCode::kFormat, "base64 length is not a multiple of 4");
  std::size_t pad = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    const bool alpha = (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') ||
                       c == '+' || c == '/';
    if (c == '=' && i + 2 >= text.size()) {
      ++pad;
    } else if (!alpha || pad > 0) {
      throw Error(ErrorCode::kFormat, "invalid base64 character at offset " + std::to_string(i));
    }
  }
  std::vector<std::uint8_t> out(text.size() / 4 * 3);
  if (text.empty()) return out;
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                static_cast<int>(text.size()));
  if (n < 0) throw Error(ErrorCode::kFormat, "invalid base64");
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::kBadRequest:
    case ErrorCode::kFormat:
    case ErrorCode::kInvalidShape:
    case ErrorCode::kInvalidLabel:
    case ErrorCode::kConfiguration:
    case ErrorCode::kUnsupportedConfiguration:
      return 400;
    case ErrorCode::kNotFound: return 404;
    case ErrorCode::kResourceExhausted: return 503;
    default: return 500;
  }
}

std::pair<std::string, int> parse_address(const std::string& addr) {
  const auto colon = addr.rfind(':');
  if (colon == std::string::npos || colon + 1 == addr.size())
    throw Error(ErrorCode::kConfiguration, "address '" + addr + "' needs host:port");
  std::string host = addr.substr(0, colon);
  if (host.size() >= 2 && host.front() == '[' && host.back() == ']') host = host.substr(1, host.size() - 2);
  int port = -1;
  const char* first = addr.data() + colon + 1;
  const char* last = addr.data() + addr.size();
  auto [ptr, ec] = std::from_chars(first, last, port);
  if (ec != std::errc() || ptr != last || port < 0 || port > 65535)
    throw Error(ErrorCode::kConfiguration, "bad port in address '" + addr + "'");
  if (host.empty()) host = "0.0.0.0";
  return {host, port};
}

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message,
                std::optional<std::size_t> point_index = std::nullopt) {
  json body{{"error", message}};
  if (point_index) body["point_index"] = *point_index;
  send_json(res, status, body);
}

json parse_body(const httplib::Request& req) {
  json body = json::parse(req.body, nullptr, /*allow_exceptions=*/false);
  if (body.is_discarded() || !body.is_object())
    throw Error(ErrorCode::kBadRequest, "request body must be a JSON object");
  return body;
}

template <class T>
T field(const json& body, const char* name) {
  auto it = body.find(name);
  if (it == body.end()) throw Error(ErrorCode::kBadRequest, std::string("missing field '") + name + "'");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw Error(ErrorCode::kBadRequest, std::string("field '") + name + "' has the wrong type");
  }
}

int int_field(const json& body, const char* name) {
  auto it = body.find(name);
  if (it == body.end()) throw Error(ErrorCode::kBadRequest, std::string("missing field '") + name + "'");
  if (!it->is_number_integer()) throw Error(ErrorCode::kBadRequest, std::string("field '") + name + "' must be an integer");
  const auto v = it->get<std::int64_t>();
  if (v < INT32_MIN || v > INT32_MAX) throw Error(ErrorCode::kBadRequest, std::string("field '") + name + "' is out of range");
  return static_cast<int>(v);
}

// Accepts bare base64 or a data URL as produced by browser canvases.
autodiff::Tensor decode_image(const std::string& text) {
  std::string_view payload = text;
  if (payload.starts_with("data:")) {
    const auto comma = payload.find(',');
    if (comma == std::string_view::npos || payload.substr(0, comma).find(";base64") == std::string_view::npos)
      throw Error(ErrorCode::kBadRequest, "data URL must be base64 encoded");
    payload.remove_prefix(comma + 1);
  }
  const auto bytes = base64_decode(payload);
  return io::image_to_tensor(io::decode_png(bytes, 3));
}

std::optional<int> int_param(const httplib::Request& req, const char* name) {
  if (!req.has_param(name)) return std::nullopt;
  const std::string v = req.get_param_value(name);
  int out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw Error(ErrorCode::kBadRequest, std::string("query parameter '") + name + "' must be an integer");
  return out;
}

std::string locality_name(model::Locality l) {
  return l == model::Locality::kIdentity ? "identity" : "global";
}

Polarity parse_label(const json& point, std::size_t index) {
  auto it = point.find("label");
  if (it != point.end() && it->is_string()) {
    const auto& s = it->get_ref<const std::string&>();
    if (s == "+") return Polarity::kPositive;
    if (s == "-") return Polarity::kNegative;
  }
  throw service::InvalidPoint(index, "point " + std::to_string(index) + ": label must be \"+\" or \"-\"");
}

}  // namespace

struct Server::Impl {
  SessionService& service;
  ServerOptions options;
  httplib::Server server;

  Impl(SessionService& s, ServerOptions o) : service(s), options(std::move(o)) {}

  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  Handler guarded(Handler h) {
    return [h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
      try {
        h(req, res);
      } catch (const service::InvalidPoint& e) {
        send_error(res, 400, e.what(), e.index());
      } catch (const Error& e) {
        send_error(res, http_status(e.code()), e.what());
      } catch (const std::bad_alloc&) {
        send_error(res, 503, "out of memory");
      } catch (const std::exception& e) {
        send_error(res, 500, e.what());
      }
    };
  }

  void routes() {
    server.Post("/v1/sessions", guarded([this](const auto& req, auto& res) { create(req, res); }));
    server.Post(R"(/v1/sessions/([^/]+)/frames)",
                guarded([this](const auto& req, auto& res) { append(req, res); }));
    server.Post(R"(/v1/sessions/([^/]+)/annotations)",
                guarded([this](const auto& req, auto& res) { annotate(req, res); }));
    server.Delete(R"(/v1/sessions/([^/]+)/annotations)",
                  guarded([this](const auto& req, auto& res) { clear(req, res); }));
    server.Get(R"(/v1/sessions/([^/]+)/mask)", guarded([this](const auto& req, auto& res) { mask(req, res); }));
    server.Get(R"(/v1/sessions/([^/]+))", guarded([this](const auto& req, auto& res) { summary(req, res); }));
    server.Delete(R"(/v1/sessions/([^/]+))", guarded([this](const auto& req, auto& res) { erase(req, res); }));
  }

  void create(const httplib::Request& req, httplib::Response& res) {
    const json body = parse_body(req);
    std::vector<autodiff::Tensor> frames;
    const bool single = body.contains("image_png_base64"), multi = body.contains("frames");
    if (single == multi) throw Error(ErrorCode::kBadRequest, "give exactly one of image_png_base64 or frames");
    if (single) {
      frames.push_back(decode_image(field<std::string>(body, "image_png_base64")));
    } else {
      for (const auto& f : field<std::vector<std::string>>(body, "frames")) frames.push_back(decode_image(f));
    }
    const auto model = field<std::string>(body, "model");
    const auto locality = body.contains("locality") ? service::parse_locality_choice(field<std::string>(body, "locality"))
                                                    : service::LocalityChoice::kAuto;
    const auto created = service.create_session(std::move(frames), model, locality);
    send_json(res, 201,
              {{"session_id", created.id},
               {"frames", created.frames},
               {"feature_stride", created.feature_stride},
               {"locality", locality_name(created.locality)}});
  }

  void append(const httplib::Request& req, httplib::Response& res) {
    const json body = parse_body(req);
    const int frame = service.append_frame(req.matches[1], decode_image(field<std::string>(body, "image_png_base64")));
    send_json(res, 201, {{"frame", frame}});
  }

  void annotate(const httplib::Request& req, httplib::Response& res) {
    const json body = parse_body(req);
    const int frame = int_field(body, "frame");
    const auto points = body.find("points");
    if (points == body.end() || !points->is_array()) throw Error(ErrorCode::kBadRequest, "points must be an array");
    std::vector<service::Click> clicks;
    for (std::size_t i = 0; i < points->size(); ++i) {
      const auto& p = (*points)[i];
      if (!p.is_object() || !p.contains("x") || !p.contains("y") || !p["x"].is_number_integer() ||
          !p["y"].is_number_integer())
        throw service::InvalidPoint(i, "point " + std::to_string(i) + " needs integer x and y");
      const auto x = p["x"].get<std::int64_t>(), y = p["y"].get<std::int64_t>();
      if (x < INT32_MIN || x > INT32_MAX || y < INT32_MIN || y > INT32_MAX)
        throw service::InvalidPoint(i, "point " + std::to_string(i) + " is out of bounds");
      clicks.push_back({static_cast<int>(x), static_cast<int>(y), parse_label(p, i)});
    }
    std::vector<service::Pixel> removals;
    if (auto rm = body.find("remove"); rm != body.end()) {
      if (!rm->is_array()) throw Error(ErrorCode::kBadRequest, "remove must be an array");
      for (std::size_t j = 0; j < rm->size(); ++j) {
        const auto& p = (*rm)[j];
        const std::size_t index = clicks.size() + j;
        if (!p.is_object() || !p.contains("x") || !p.contains("y") || !p["x"].is_number_integer() ||
            !p["y"].is_number_integer())
          throw service::InvalidPoint(index, "removal " + std::to_string(j) + " needs integer x and y");
        const auto x = p["x"].get<std::int64_t>(), y = p["y"].get<std::int64_t>();
        if (x < INT32_MIN || x > INT32_MAX || y < INT32_MIN || y > INT32_MAX)
          throw service::InvalidPoint(index, "removal " + std::to_string(j) + " is out of bounds");
        removals.push_back({static_cast<int>(x), static_cast<int>(y)});
      }
    }
    const auto r = service.add_annotations(req.matches[1], frame, clicks, removals);
    send_json(res, 200,
              {{"mask_rle", encode_rle(r.mask)},
               {"width", r.mask.width},
               {"height", r.mask.height},
               {"guidance_ms", r.guidance_ms},
               {"infer_ms", r.infer_ms},
               {"degenerate", r.degenerate}});
  }

  void clear(const httplib::Request& req, httplib::Response& res) {
    const auto frame = int_param(req, "frame");
    service.clear_annotations(req.matches[1], frame);
    const auto s = service.summary(req.matches[1]);
    send_json(res, 200, {{"cleared", frame ? json(*frame) : json("all")}, {"degenerate", s.degenerate}});
  }

  void mask(const httplib::Request& req, httplib::Response& res) {
    const auto frame = int_param(req, "frame");
    if (!frame) throw Error(ErrorCode::kBadRequest, "query parameter 'frame' is required");
    const std::string format = req.has_param("format") ? req.get_param_value("format") : "rle";
    if (format != "rle" && format != "png") throw Error(ErrorCode::kBadRequest, "format must be rle or png");
    const auto r = service.get_mask(req.matches[1], *frame);
    if (format == "png") {
      io::Image8 img{r.mask.width, r.mask.height, 1, {}};
      img.pixels.reserve(r.mask.data.size());
      for (auto v : r.mask.data) img.pixels.push_back(v ? 255 : 0);
      const auto bytes = io::encode_png(img);
      res.status = 200;
      res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
      return;
    }
    send_json(res, 200,
              {{"mask_rle", encode_rle(r.mask)},
               {"width", r.mask.width},
               {"height", r.mask.height},
               {"degenerate", r.degenerate}});
  }

  void summary(const httplib::Request& req, httplib::Response& res) {
    const auto s = service.summary(req.matches[1]);
    json annotations = json::array();
    for (std::size_t i = 0; i < s.positive_counts.size(); ++i)
      annotations.push_back({{"frame", i}, {"positive", s.positive_counts[i]}, {"negative", s.negative_counts[i]}});
    send_json(res, 200,
              {{"session_id", s.id},
               {"frames", s.frames},
               {"width", s.width},
               {"height", s.height},
               {"locality", locality_name(s.locality)},
               {"annotations", annotations},
               {"degenerate", s.degenerate},
               {"guidance_ms", s.guidance_ms},
               {"infer_ms", s.infer_ms},
               {"created_unix_ms", s.created_unix_ms},
               {"updated_unix_ms", s.updated_unix_ms}});
  }

  void erase(const httplib::Request& req, httplib::Response& res) {
    if (!service.erase_session(req.matches[1]))
      throw Error(ErrorCode::kNotFound, "no session '" + std::string(req.matches[1]) + "'");
    send_json(res, 200, {{"deleted", std::string(req.matches[1])}});
  }
};

Server::Server(SessionService& service, ServerOptions options)
    : impl_(std::make_unique<Impl>(service, std::move(options))) {
  impl_->server.set_payload_max_length(impl_->options.max_body_bytes);
  impl_->routes();
  if (impl_->options.static_dir) {
    if (!impl_->server.set_mount_point("/", impl_->options.static_dir->string()))
      throw Error(ErrorCode::kConfiguration, "static directory '" + impl_->options.static_dir->string() + "' not found");
  }
}

Server::~Server() {
  if (impl_) impl_->server.stop();
}

int Server::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    if (bound < 0) throw Error(ErrorCode::kConfiguration, "cannot bind " + host);
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port))
    throw Error(ErrorCode::kConfiguration, "cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void Server::run() { impl_->server.listen_after_bind(); }
void Server::stop() { impl_->server.stop(); }
void Server::wait_until_ready() const { impl_->server.wait_until_ready(); }

}  // namespace guidedseg::http
