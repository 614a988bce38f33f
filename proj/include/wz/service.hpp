// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>
#include <jpeglib.h>
#include <nlohmann/json.hpp>

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "wz/bytes.hpp"
#include "wz/camera_json.hpp"
#include "wz/error.hpp"
#include "wz/image.hpp"
#include "wz/rasterizer.hpp"
#include "wz/sceneio.hpp"
#include "wz/synth.hpp"

namespace wz {

inline constexpr std::size_t kFrameHeaderBytes = 16;

/// Baseline JPEG at the given quality (1..100).
inline std::vector<std::uint8_t> encode_jpeg(const RgbImage& img, int quality) {
  std::vector<std::uint8_t> rgb(img.size() * 3);
  for (std::size_t i = 0; i < img.size(); ++i) {
    for (int c = 0; c < 3; ++c) rgb[3 * i + c] = to_byte(img[i][c]);
  }
  jpeg_compress_struct cinfo{};
  jpeg_error_mgr jerr{};
  cinfo.err = jpeg_std_error(&jerr);
  jerr.error_exit = [](j_common_ptr info) {
    char msg[JMSG_LENGTH_MAX];
    (*info->err->format_message)(info, msg);
    throw Error(ErrorCode::Io, std::string("JPEG encode failed: ") + msg);
  };
  unsigned char* buffer = nullptr;
  unsigned long size = 0;
  jpeg_create_compress(&cinfo);
  try {
    jpeg_mem_dest(&cinfo, &buffer, &size);
    cinfo.image_width = static_cast<JDIMENSION>(img.width());
    cinfo.image_height = static_cast<JDIMENSION>(img.height());
    cinfo.input_components = 3;
    cinfo.in_color_space = JCS_RGB;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, std::clamp(quality, 1, 100), TRUE);
    jpeg_start_compress(&cinfo, TRUE);
    while (cinfo.next_scanline < cinfo.image_height) {
      JSAMPROW row = rgb.data() + static_cast<std::size_t>(cinfo.next_scanline) * 3 * img.width();
      jpeg_write_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_compress(&cinfo);
  } catch (...) {
    jpeg_destroy_compress(&cinfo);
    std::free(buffer);
    throw;
  }
  std::vector<std::uint8_t> out(buffer, buffer + size);
  jpeg_destroy_compress(&cinfo);
  std::free(buffer);
  return out;
}

/// Binary frame: frame id, scene version, width, height (u32 LE) + image.
inline std::vector<std::uint8_t> encode_frame_message(std::uint32_t frame_id, std::uint32_t version, int width,
                                                      int height, std::span<const std::uint8_t> image) {
  ByteWriter w;
  w.u32(frame_id);
  w.u32(version);
  w.u32(static_cast<std::uint32_t>(width));
  w.u32(static_cast<std::uint32_t>(height));
  w.raw(image);
  return w.take();
}

struct FrameHeader {
  std::uint32_t frame_id = 0;
  std::uint32_t version = 0;
  std::uint32_t width = 0;
  std::uint32_t height = 0;
};

inline FrameHeader decode_frame_header(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  FrameHeader h;
  if (!r.u32(h.frame_id) || !r.u32(h.version) || !r.u32(h.width) || !r.u32(h.height)) {
    throw Error(ErrorCode::Truncated, "frame message shorter than its header");
  }
  return h;
}

inline nlohmann::json error_message(ErrorCode code, const std::string& msg) {
  return {{"type", "error"}, {"code", to_string(code)}, {"msg", msg}};
}

inline DetailRequest detail_request_from_json(const nlohmann::json& j) {
  try {
    DetailRequest r;
    r.parent_layer = j.at("layer").get<std::uint32_t>();
    const auto& c = j.at("center");
    if (!c.is_array() || c.size() != 2) throw Error(ErrorCode::InvalidArgument, "center must be [u, v]");
    r.zoom_center = Vec2(c.at(0).get<double>(), c.at(1).get<double>());
    r.zoom_factor = j.value("factor", kDefaultZoomFactor);
    r.prompt = j.value("prompt", std::string{});
    r.seed = j.value("seed", std::uint64_t{0});
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("malformed zoom message: ") + e.what());
  }
}

struct ServiceConfig {
  std::string address = "127.0.0.1";
  unsigned short port = 0;  // 0 = pick a free port
  RenderConfig render;
  SynthConfig synth;
  int jpeg_quality = 0;  // 0 = lossless PNG frames
  int render_threads = 0;
  int max_frame_pixels = 4096 * 4096;
  std::optional<std::filesystem::path> autosave;  // rewrite the scene file after each commit
};

/// Websocket render server. Each session renders its latest camera from the
/// newest snapshot (one render in flight per session, older pending cameras
/// dropped); zoom requests run one at a time on a dedicated synthesis worker
/// and every live session is told when the new layer is committed.
class RenderServer {
  using tcp = boost::asio::ip::tcp;
  using WebSocket = boost::beast::websocket::stream<boost::beast::tcp_stream>;

 public:
  RenderServer(std::shared_ptr<MultiScaleScene> scene, std::shared_ptr<DetailProvider> provider,
               ServiceConfig config = {})
      : scene_(std::move(scene)),
        provider_(std::move(provider)),
        config_(std::move(config)),
        acceptor_(ioc_),
        render_pool_(static_cast<std::size_t>(config_.render_threads > 0
                                                  ? config_.render_threads
                                                  : std::max(2u, std::thread::hardware_concurrency()))),
        synth_pool_(1) {
    if (!scene_ || !provider_) throw Error(ErrorCode::InvalidArgument, "server needs a scene and a provider");
  }

  RenderServer(const RenderServer&) = delete;
  RenderServer& operator=(const RenderServer&) = delete;

  ~RenderServer() { stop(); }

  /// Binds and starts serving on a background thread.
  void start() {
    namespace net = boost::asio;
    boost::system::error_code ec;
    const auto address = net::ip::make_address(config_.address, ec);
    if (ec) throw Error(ErrorCode::InvalidArgument, "bad listen address " + config_.address);
    const tcp::endpoint endpoint(address, config_.port);
    acceptor_.open(endpoint.protocol(), ec);
    if (!ec) acceptor_.bind(endpoint, ec);
    if (!ec) acceptor_.listen(net::socket_base::max_listen_connections, ec);
    if (ec) throw Error(ErrorCode::Io, "cannot listen on port " + std::to_string(config_.port) + ": " + ec.message());
    port_ = acceptor_.local_endpoint().port();
    accept();
    io_thread_ = std::thread([this] { ioc_.run(); });
  }

  unsigned short port() const noexcept { return port_; }

  /// Closes every session and joins all workers; a running synthesis is
  /// allowed to finish first.
  void stop() {
    if (stopped_.exchange(true)) return;
    boost::asio::post(ioc_, [this] {
      boost::system::error_code ec;
      acceptor_.close(ec);
      for (auto& weak : sessions_) {
        if (auto s = weak.lock()) s->close();
      }
    });
    synth_pool_.join();
    render_pool_.join();
    work_.reset();
    ioc_.stop();
    if (io_thread_.joinable()) io_thread_.join();
    done_.store(true);
    done_.notify_all();
  }

  /// Blocks until stop() has completed.
  void wait() const { done_.wait(false); }

  bool synthesis_pending() const noexcept { return synth_busy_.load(); }

 private:
  class Session : public std::enable_shared_from_this<Session> {
   public:
    Session(RenderServer& server, tcp::socket socket) : server_(server), ws_(std::move(socket)) {}

    void run() {
      ws_.set_option(boost::beast::websocket::stream_base::timeout::suggested(boost::beast::role_type::server));
      ws_.async_accept([self = shared_from_this()](boost::beast::error_code ec) {
        if (!ec) self->read();
      });
    }

    void close() {
      if (closed_) return;
      closed_ = true;
      ws_.async_close(boost::beast::websocket::close_code::going_away,
                      [self = shared_from_this()](boost::beast::error_code) {});
    }

    bool open() const noexcept { return !closed_; }

    void send_text(std::string text) { enqueue(false, std::move(text)); }

   private:
    void read() {
      ws_.async_read(buffer_, [self = shared_from_this()](boost::beast::error_code ec, std::size_t) {
        if (ec) {
          self->closed_ = true;
          return;
        }
        if (self->ws_.got_text()) {
          self->handle(boost::beast::buffers_to_string(self->buffer_.data()));
        } else {
          self->send_text(error_message(ErrorCode::InvalidArgument, "expected a JSON text message").dump());
        }
        self->buffer_.consume(self->buffer_.size());
        self->read();
      });
    }

    void handle(const std::string& text) {
      try {
        const auto msg = nlohmann::json::parse(text);
        const std::string type = msg.at("type").get<std::string>();
        if (type == "camera") {
          Camera cam = camera_from_json(msg);
          if (static_cast<long long>(cam.width) * cam.height > server_.config_.max_frame_pixels) {
            throw Error(ErrorCode::InvalidArgument, "requested frame is too large");
          }
          pending_ = cam;
          if (!rendering_) render_next();
        } else if (type == "zoom") {
          server_.start_synthesis(shared_from_this(), detail_request_from_json(msg));
        } else if (type == "layers") {
          send_text(scene_manifest(server_.scene_->snapshot()).dump());
        } else {
          throw Error(ErrorCode::InvalidArgument, "unknown message type '" + type + "'");
        }
      } catch (const Error& e) {
        send_text(error_message(e.code(), e.what()).dump());
      } catch (const std::exception& e) {
        send_text(error_message(ErrorCode::InvalidArgument, e.what()).dump());
      }
    }

    void render_next() {
      if (!pending_ || closed_) return;
      const Camera cam = *pending_;
      pending_.reset();
      rendering_ = true;
      const std::uint32_t id = ++frame_id_;
      boost::asio::post(server_.render_pool_, [self = shared_from_this(), cam, id] {
        std::string payload;
        try {
          const SceneSnapshot snap = self->server_.scene_->snapshot();
          const Frame frame = render_color(snap, cam, self->server_.config_.render);
          const int q = self->server_.config_.jpeg_quality;
          const auto image = q > 0 ? encode_jpeg(frame.color, q) : encode_png(frame.color);
          const auto msg = encode_frame_message(id, static_cast<std::uint32_t>(snap.version()), cam.width,
                                                cam.height, image);
          payload.assign(msg.begin(), msg.end());
        } catch (const std::exception& e) {
          payload = error_message(ErrorCode::InvalidArgument, e.what()).dump();
          boost::asio::post(self->server_.ioc_, [self, payload = std::move(payload)]() mutable {
            self->rendering_ = false;
            self->send_text(std::move(payload));
            self->render_next();
          });
          return;
        }
        boost::asio::post(self->server_.ioc_, [self, payload = std::move(payload)]() mutable {
          self->rendering_ = false;
          self->enqueue(true, std::move(payload));
          self->render_next();
        });
      });
    }

    void enqueue(bool binary, std::string data) {
      if (closed_) return;
      queue_.emplace_back(binary, std::move(data));
      if (queue_.size() == 1) write();
    }

    void write() {
      ws_.binary(queue_.front().first);
      ws_.async_write(boost::asio::buffer(queue_.front().second),
                      [self = shared_from_this()](boost::beast::error_code ec, std::size_t) {
                        if (ec) {
                          self->closed_ = true;
                          self->queue_.clear();
                          return;
                        }
                        self->queue_.pop_front();
                        if (!self->queue_.empty()) self->write();
                      });
    }

    RenderServer& server_;
    WebSocket ws_;
    boost::beast::flat_buffer buffer_;
    std::deque<std::pair<bool, std::string>> queue_;
    std::optional<Camera> pending_;
    bool rendering_ = false;
    bool closed_ = false;
    std::uint32_t frame_id_ = 0;
  };

  void accept() {
    acceptor_.async_accept(boost::asio::make_strand(ioc_).get_inner_executor(),
                           [this](boost::system::error_code ec, tcp::socket socket) {
                             if (ec) return;  // acceptor closed
                             auto session = std::make_shared<Session>(*this, std::move(socket));
                             prune_sessions();
                             sessions_.push_back(session);
                             session->run();
                             accept();
                           });
  }

  void prune_sessions() {
    std::erase_if(sessions_, [](const std::weak_ptr<Session>& w) {
      auto s = w.lock();
      return !s || !s->open();
    });
  }

  void broadcast(const std::string& text) {
    prune_sessions();
    for (auto& weak : sessions_) {
      if (auto s = weak.lock()) s->send_text(text);
    }
  }

  /// Runs on the io thread.
  void start_synthesis(const std::shared_ptr<Session>& requester, DetailRequest req) {
    if (synth_busy_.exchange(true)) {
      throw Error(ErrorCode::Busy, "a synthesis job is already pending");
    }
    std::weak_ptr<Session> weak = requester;
    boost::asio::post(synth_pool_, [this, weak, req = std::move(req)] {
      std::string reply;
      bool committed = false;
      try {
        const SynthResult result = synthesize_scale(*scene_, req, *provider_, config_.synth);
        const SceneSnapshot snap = scene_->snapshot();
        if (config_.autosave) save_scene(snap, *config_.autosave);
        reply = nlohmann::json{{"type", "committed"}, {"layer", result.layer}, {"version", snap.version()}}.dump();
        committed = true;
      } catch (const Error& e) {
        reply = error_message(e.code(), e.what()).dump();
      } catch (const std::exception& e) {
        reply = error_message(ErrorCode::Provider, e.what()).dump();
      }
      synth_busy_.store(false);
      boost::asio::post(ioc_, [this, weak, committed, reply = std::move(reply)] {
        if (committed) {
          broadcast(reply);
        } else if (auto s = weak.lock()) {
          s->send_text(reply);
        }
      });
    });
  }

  std::shared_ptr<MultiScaleScene> scene_;
  std::shared_ptr<DetailProvider> provider_;
  ServiceConfig config_;
  boost::asio::io_context ioc_;
  std::optional<boost::asio::executor_work_guard<boost::asio::io_context::executor_type>> work_{ioc_.get_executor()};
  tcp::acceptor acceptor_;
  boost::asio::thread_pool render_pool_;
  boost::asio::thread_pool synth_pool_;
  std::thread io_thread_;
  std::vector<std::weak_ptr<Session>> sessions_;
  std::atomic<bool> synth_busy_{false};
  std::atomic<bool> stopped_{false};
  std::atomic<bool> done_{false};
  unsigned short port_ = 0;
};

/// Serves `scene` until stop is requested through `server` (or forever).
inline void serve(std::shared_ptr<MultiScaleScene> scene, unsigned short port, std::shared_ptr<DetailProvider> provider,
                  ServiceConfig config = {}) {
  config.port = port;
  RenderServer server(std::move(scene), std::move(provider), std::move(config));
  server.start();
  boost::asio::io_context signals_ctx;
  boost::asio::signal_set signals(signals_ctx, SIGINT, SIGTERM);
  signals.async_wait([&](const boost::system::error_code&, int) { server.stop(); });
  signals_ctx.run();
}

}  // namespace wz
