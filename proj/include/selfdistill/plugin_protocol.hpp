// Copyright 2026 The selfdistill Authors. All Rights Reserved.
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
//
// Detector plugin protocol, version 1.
//
// The host launches the plugin as a child process and exchanges one JSON
// object per line over the child's stdin/stdout; the plugin logs on stderr.
// Requests are strictly serialized: the host sends a request and waits for
// the response with the same id before sending the next one. Bulk data
// (manifests, annotations, detections) moves through files named in the
// payload, so every frame stays under kMaxFrameBytes.
//
//   request:  {"id": 7, "command": "infer", "payload": {...}}
//   response: {"id": 7, "status": "ok", "payload": {...}}
//             {"id": 7, "status": "error", "error_message": "..."}
//
// docs/protocol.md describes every command payload.
#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "selfdistill/errors.hpp"
#include "selfdistill/io_formats.hpp"
#include "selfdistill/subprocess.hpp"

namespace selfdistill {

inline constexpr int kProtocolVersion = 1;
/// Frames, excluding the terminating newline, must be shorter than this.
inline constexpr std::size_t kMaxFrameBytes = 64 * 1024;
inline constexpr const char* kPluginLogEnv = "SELFDISTILL_PLUGIN_LOG";

enum class Command { kHello, kInfer, kTrain, kSaveCheckpoint, kLoadCheckpoint, kShutdown };

inline std::string_view to_string(Command c) {
  switch (c) {
    case Command::kHello: return "hello";
    case Command::kInfer: return "infer";
    case Command::kTrain: return "train";
    case Command::kSaveCheckpoint: return "save_checkpoint";
    case Command::kLoadCheckpoint: return "load_checkpoint";
    case Command::kShutdown: return "shutdown";
  }
  return "?";
}

inline std::optional<Command> command_from_string(std::string_view s) {
  for (Command c : {Command::kHello, Command::kInfer, Command::kTrain, Command::kSaveCheckpoint,
                    Command::kLoadCheckpoint, Command::kShutdown}) {
    if (to_string(c) == s) return c;
  }
  return std::nullopt;
}

struct PluginRequest {
  std::int64_t id = 0;
  Command command = Command::kHello;
  Json payload = Json::object();
};

enum class ResponseStatus { kOk, kError };

struct PluginResponse {
  /// Empty when the plugin could not recover an id from a malformed request.
  std::optional<std::int64_t> id;
  ResponseStatus status = ResponseStatus::kOk;
  Json payload = Json::object();
  std::string error_message;
};

struct TrainPayload {
  std::filesystem::path annotations_path;
  std::filesystem::path manifest_path;
  std::int64_t num_batches = 1;
  /// Passed to the plugin untouched (learning rate, batch size, seed, ...).
  Json hyperparameters = Json::object();
};

// ---------------------------------------------------------------------------
// Frame codec

namespace detail {

inline std::string excerpt(std::string_view line, std::size_t n = 120) {
  if (line.size() <= n) return std::string(line);
  return std::string(line.substr(0, n)) + "...";
}

inline std::string finish_frame(const Json& j) {
  // dump() escapes control characters, so the text never holds a raw newline.
  std::string s = j.dump();
  if (s.size() >= kMaxFrameBytes) {
    throw ProtocolError("frame of " + std::to_string(s.size()) + " bytes exceeds the " +
                        std::to_string(kMaxFrameBytes) + "-byte limit");
  }
  return s + "\n";
}

inline Json parse_frame(std::string_view line) {
  if (line.size() >= kMaxFrameBytes) {
    throw ProtocolError("oversize frame (" + std::to_string(line.size()) + " bytes)");
  }
  Json j;
  try {
    j = Json::parse(line);
  } catch (const Json::parse_error&) {
    throw ProtocolError("non-JSON frame: '" + excerpt(line) + "'");
  }
  if (!j.is_object()) throw ProtocolError("frame is not a JSON object: '" + excerpt(line) + "'");
  return j;
}

}  // namespace detail

inline std::string encode_request(const PluginRequest& r) {
  const Json payload = r.payload.is_null() ? Json::object() : r.payload;
  return detail::finish_frame({{"id", r.id}, {"command", to_string(r.command)}, {"payload", payload}});
}

inline std::string encode_response(const PluginResponse& r) {
  Json j = {{"id", r.id ? Json(*r.id) : Json(nullptr)}};
  if (r.status == ResponseStatus::kOk) {
    j["status"] = "ok";
    j["payload"] = r.payload.is_null() ? Json::object() : r.payload;
  } else {
    j["status"] = "error";
    j["error_message"] = r.error_message;
    if (r.payload.is_object() && !r.payload.empty()) j["payload"] = r.payload;
  }
  return detail::finish_frame(j);
}

inline PluginRequest decode_request(std::string_view line) {
  const Json j = detail::parse_frame(line);
  PluginRequest r;
  auto id = j.find("id");
  if (id == j.end() || !id->is_number_integer()) throw ProtocolError("request without integer 'id'");
  r.id = id->get<std::int64_t>();
  auto cmd = j.find("command");
  if (cmd == j.end() || !cmd->is_string()) throw ProtocolError("request without string 'command'");
  auto c = command_from_string(cmd->get<std::string>());
  if (!c) throw ProtocolError("unknown command '" + cmd->get<std::string>() + "'");
  r.command = *c;
  auto payload = j.find("payload");
  if (payload != j.end()) {
    if (!payload->is_object()) throw ProtocolError("request 'payload' must be an object");
    r.payload = *payload;
  }
  return r;
}

inline PluginResponse decode_response(std::string_view line) {
  const Json j = detail::parse_frame(line);
  PluginResponse r;
  auto id = j.find("id");
  if (id == j.end()) throw ProtocolError("response without 'id': '" + detail::excerpt(line) + "'");
  if (id->is_number_integer()) {
    r.id = id->get<std::int64_t>();
  } else if (!id->is_null()) {
    throw ProtocolError("response 'id' must be an integer or null");
  }
  auto status = j.find("status");
  if (status == j.end() || !status->is_string()) throw ProtocolError("response without string 'status'");
  if (*status == "ok") {
    r.status = ResponseStatus::kOk;
  } else if (*status == "error") {
    r.status = ResponseStatus::kError;
    auto msg = j.find("error_message");
    if (msg == j.end() || !msg->is_string()) throw ProtocolError("error response without 'error_message'");
    r.error_message = msg->get<std::string>();
  } else {
    throw ProtocolError("response status must be 'ok' or 'error'");
  }
  auto payload = j.find("payload");
  if (payload != j.end()) {
    if (!payload->is_object()) throw ProtocolError("response 'payload' must be an object");
    r.payload = *payload;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Host side

struct SessionOptions {
  std::chrono::milliseconds handshake_timeout{10'000};
  std::chrono::milliseconds request_timeout{600'000};
  std::chrono::milliseconds train_timeout{24 * 3600 * 1000};
  std::map<std::string, std::string> environment;
};

struct InferResult {
  DetectionSet detections;
  std::size_t dropped_below_floor = 0;
};

/// One plugin child process. All calls are synchronous; any protocol error,
/// timeout or crash leaves the session broken and the child killed.
class PluginSession {
 public:
  PluginSession(std::vector<std::string> argv, SessionOptions options = {})
      : options_(std::move(options)), child_(std::make_unique<ChildProcess>(argv, options_.environment)) {
    const Json hello = call(Command::kHello, {{"protocol_version", kProtocolVersion}}, options_.handshake_timeout);
    auto version = hello.find("protocol_version");
    if (version == hello.end() || !version->is_number_integer()) {
      fail<ProtocolError>("hello response lacks integer 'protocol_version'");
    }
    protocol_version_ = version->get<int>();
    if (protocol_version_ != kProtocolVersion) {
      fail<VersionMismatch>("plugin speaks protocol version " + std::to_string(protocol_version_) +
                            ", host requires " + std::to_string(kProtocolVersion));
    }
    if (auto caps = hello.find("capabilities"); caps != hello.end() && caps->is_array()) {
      for (const auto& c : *caps) {
        if (c.is_string()) capabilities_.insert(c.get<std::string>());
      }
    }
    if (auto ck = hello.find("checkpoint_id"); ck != hello.end() && ck->is_string()) {
      checkpoint_id_ = ck->get<std::string>();
    }
  }

  PluginSession(const PluginSession&) = delete;
  PluginSession& operator=(const PluginSession&) = delete;

  ~PluginSession() {
    if (child_ && !broken_ && !closed_) {
      try {
        shutdown();
      } catch (...) {
      }
    }
  }

  int protocol_version() const { return protocol_version_; }
  const std::set<std::string>& capabilities() const { return capabilities_; }
  bool has_capability(const std::string& c) const { return capabilities_.contains(c); }
  const std::string& checkpoint_id() const { return checkpoint_id_; }
  bool broken() const { return broken_; }

  /// Runs inference over the manifest at `manifest_path`; the plugin writes
  /// its DetectionSet to `output_path`. The result is validated against the
  /// manifest and detections below `score_floor` are dropped host-side.
  InferResult infer(const std::filesystem::path& manifest_path, const std::filesystem::path& output_path,
                    double score_floor = 0.0) {
    require_capability("infer");
    if (!in_unit_interval(score_floor)) throw ContractViolation("infer: score_floor must be in [0, 1]");
    const DatasetManifest manifest = load_manifest(manifest_path);
    const Json out = call(Command::kInfer,
                          {{"manifest_path", manifest_path.string()},
                           {"output_path", output_path.string()},
                           {"score_floor", score_floor}},
                          options_.request_timeout);
    std::filesystem::path written = output_path;
    if (auto p = out.find("detections_path"); p != out.end() && p->is_string()) written = p->get<std::string>();

    InferResult result;
    try {
      result.detections = load_detections(written, manifest);
    } catch (const DataError& e) {
      throw PluginOutputError(std::string("plugin produced invalid detections: ") + e.what());
    }
    const auto before = result.detections.detections.size();
    std::erase_if(result.detections.detections, [&](const Detection& d) { return d.score < score_floor; });
    result.dropped_below_floor = before - result.detections.detections.size();
    return result;
  }

  /// Fine-tunes for exactly `payload.num_batches` batches; returns the new
  /// checkpoint id.
  std::string train(const TrainPayload& payload) {
    require_capability("train");
    if (payload.num_batches < 1) throw ContractViolation("train: num_batches must be >= 1");
    if (!payload.hyperparameters.is_object()) throw ContractViolation("train: hyperparameters must be an object");
    if (!std::filesystem::exists(payload.annotations_path)) {
      throw IoError("train: annotation file " + payload.annotations_path.string() + " does not exist");
    }
    const Json out = call(Command::kTrain,
                          {{"annotations_path", payload.annotations_path.string()},
                           {"manifest_path", payload.manifest_path.string()},
                           {"num_batches", payload.num_batches},
                           {"hyperparameters", payload.hyperparameters}},
                          options_.train_timeout);
    return take_checkpoint_id(out, "train");
  }

  std::string save_checkpoint(const std::filesystem::path& path) {
    return take_checkpoint_id(call(Command::kSaveCheckpoint, {{"path", path.string()}}, options_.request_timeout),
                              "save_checkpoint");
  }

  std::string load_checkpoint(const std::filesystem::path& path) {
    return take_checkpoint_id(call(Command::kLoadCheckpoint, {{"path", path.string()}}, options_.request_timeout),
                              "load_checkpoint");
  }

  /// Asks the plugin to exit and reaps it. Returns the exit code if it exited
  /// normally.
  std::optional<int> shutdown(std::chrono::milliseconds timeout = std::chrono::milliseconds(5000)) {
    if (closed_) return child_->exit_code();
    closed_ = true;
    if (!broken_) {
      try {
        call(Command::kShutdown, Json::object(), timeout);
      } catch (const PluginError&) {
      }
    }
    child_->close_stdin();
    if (!child_->wait_for_exit(timeout)) child_->kill();
    return child_->exit_code();
  }

  /// Sends one request and returns the ok-payload. Exposed for conformance
  /// testing; prefer the typed commands.
  Json call(Command command, const Json& payload, std::chrono::milliseconds timeout) {
    if (broken_) throw PluginError("plugin session is no longer usable");
    if (closed_ && command != Command::kShutdown) throw PluginError("plugin session is shut down");
    const std::int64_t id = ++last_id_;
    const std::string frame = encode_request({id, command, payload});
    if (!child_->write_all(frame)) {
      fail<PluginCrashed>("plugin closed its input before '" + std::string(to_string(command)) + "' (" +
                          describe_exit() + ")");
    }
    std::string line;
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    switch (child_->read_line(line, deadline, kMaxFrameBytes - 1)) {
      case ChildProcess::ReadStatus::kLine: break;
      case ChildProcess::ReadStatus::kTimeout:
        fail<PluginTimeout>("plugin did not answer '" + std::string(to_string(command)) + "' within " +
                            std::to_string(timeout.count()) + " ms");
      case ChildProcess::ReadStatus::kOverflow:
        fail<ProtocolError>("plugin sent an oversize frame (limit " + std::to_string(kMaxFrameBytes) + " bytes)");
      case ChildProcess::ReadStatus::kEof:
        fail<PluginCrashed>("plugin exited during '" + std::string(to_string(command)) + "' (" + describe_exit() +
                            ")");
    }
    PluginResponse response;
    try {
      response = decode_response(line);
    } catch (const ProtocolError& e) {
      fail<ProtocolError>(e.what());
    }
    if (!response.id || *response.id != id) {
      fail<ProtocolError>("response id " + (response.id ? std::to_string(*response.id) : std::string("null")) +
                          " does not match request id " + std::to_string(id));
    }
    if (response.status == ResponseStatus::kError) {
      throw PluginReportedError("plugin reported error on '" + std::string(to_string(command)) +
                                "': " + response.error_message);
    }
    return response.payload;
  }

 private:
  template <typename E>
  [[noreturn]] void fail(const std::string& message) {
    broken_ = true;
    child_->kill();
    throw E(message);
  }

  std::string describe_exit() {
    child_->wait_for_exit(std::chrono::milliseconds(500));
    return child_->exit_description();
  }

  void require_capability(const std::string& c) const {
    if (!has_capability(c)) throw ContractViolation("plugin does not advertise the '" + c + "' capability");
  }

  std::string take_checkpoint_id(const Json& payload, const char* command) {
    auto ck = payload.find("checkpoint_id");
    if (ck == payload.end() || !ck->is_string()) {
      fail<ProtocolError>(std::string(command) + " response lacks string 'checkpoint_id'");
    }
    checkpoint_id_ = ck->get<std::string>();
    return checkpoint_id_;
  }

  SessionOptions options_;
  std::unique_ptr<ChildProcess> child_;
  std::int64_t last_id_ = 0;
  int protocol_version_ = 0;
  std::set<std::string> capabilities_;
  std::string checkpoint_id_;
  bool broken_ = false;
  bool closed_ = false;
};

// ---------------------------------------------------------------------------
// Plugin side

/// Handles one decoded request and returns the ok-payload; throwing turns
/// into an error response and the loop continues.
using RequestHandler = std::function<Json(const PluginRequest&)>;

/// Request loop for plugin executables. Malformed frames and non-increasing
/// ids get error responses and do not end the session. Returns after
/// answering `shutdown` or at end of input.
inline void serve_requests(std::istream& in, std::ostream& out, const RequestHandler& handler) {
  std::optional<std::int64_t> last_id;
  std::string line;
  auto send = [&](const PluginResponse& r) {
    std::string frame;
    try {
      frame = encode_response(r);
    } catch (const ProtocolError& e) {
      frame = encode_response({r.id, ResponseStatus::kError, Json::object(), e.what()});
    }
    out << frame;
    out.flush();
  };
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    PluginRequest request;
    try {
      request = decode_request(line);
    } catch (const ProtocolError& e) {
      // Best effort: echo the id when the frame is JSON with an integer id.
      std::optional<std::int64_t> id;
      if (line.size() < kMaxFrameBytes) {
        const Json j = Json::parse(line, nullptr, false);
        if (j.is_object() && j.contains("id") && j["id"].is_number_integer()) id = j["id"].get<std::int64_t>();
      }
      send({id, ResponseStatus::kError, Json::object(), e.what()});
      continue;
    }
    if (last_id && request.id <= *last_id) {
      send({request.id, ResponseStatus::kError, Json::object(),
            "request id " + std::to_string(request.id) + " is not greater than previous id " +
                std::to_string(*last_id)});
      continue;
    }
    last_id = request.id;
    if (request.command == Command::kHello) {
      auto v = request.payload.find("protocol_version");
      if (v != request.payload.end() && (!v->is_number_integer() || v->get<int>() != kProtocolVersion)) {
        send({request.id, ResponseStatus::kError, Json::object(),
              "unsupported protocol_version; this plugin speaks " + std::to_string(kProtocolVersion)});
        continue;
      }
    }
    try {
      Json payload = handler(request);
      send({request.id, ResponseStatus::kOk, payload.is_null() ? Json::object() : std::move(payload), {}});
    } catch (const std::exception& e) {
      send({request.id, ResponseStatus::kError, Json::object(), e.what()});
    }
    if (request.command == Command::kShutdown) return;
  }
}

}  // namespace selfdistill
