#pragma once

// Checkpoint container, version 1. All integers and floats little-endian.
//
//   magic        8 bytes  "MHVTCKPT"
//   version      u32      1
//   header       u32 length + UTF-8 JSON
//                {"config": ModelConfig, "masking": "on"|"off", "step": u64,
//                 "epochs_completed": u64, "metadata": object}
//   param_count  u32
//   per parameter, in model registration order:
//     name       u32 length + bytes
//     ndim       u32
//     dims       ndim x u64
//     values     prod(dims) x f64, row-major
//   adam_step    u64
//   per parameter: first moment (f64 x numel), then second moment (f64 x numel)
//
// JSON keys are emitted sorted, so save -> load -> save is byte-stable.

#include <cstdint>
#include <memory>
#include <string>

#include <nlohmann/json.hpp>

#include "mhvit/binary_io.hpp"
#include "mhvit/train.hpp"

namespace mhvit {

inline constexpr char kCheckpointMagic[] = "MHVTCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string serialize_checkpoint(const TrainingSession& session) {
  BinaryWriter w;
  w.put_bytes(std::string_view(kCheckpointMagic, 8));
  w.put<std::uint32_t>(kCheckpointVersion);
  const nlohmann::json header = {
      {"config", session.model().config()},
      {"masking", to_string(session.masking())},
      {"step", session.step()},
      {"epochs_completed", session.epochs_completed()},
      {"metadata", session.metadata()},
  };
  w.put_string(header.dump());

  const auto& params = session.model().parameters().items();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.put_string(p.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.tensor.ndim()));
    for (auto d : p.tensor.shape()) w.put<std::uint64_t>(d);
    w.put_doubles(p.tensor.data());
  }
  const AdamState& adam = session.optimizer();
  w.put<std::uint64_t>(adam.step);
  for (std::size_t i = 0; i < params.size(); ++i) {
    w.put_doubles(adam.m[i]);
    w.put_doubles(adam.v[i]);
  }
  return w.bytes();
}

inline std::unique_ptr<TrainingSession> deserialize_checkpoint(std::string bytes,
                                                               const std::string& source) {
  BinaryReader r(std::move(bytes), source);
  if (r.get_bytes(8) != std::string_view(kCheckpointMagic, 8))
    throw IoError(source + ": not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw IoError(source + ": unsupported checkpoint version " + std::to_string(version));

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.get_string());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(source + ": malformed header: " + e.what());
  }
  const auto config = header.at("config").get<ModelConfig>();
  auto session = std::make_unique<TrainingSession>(
      config, parse_masking(header.at("masking").get<std::string>()));
  session->set_counters(header.at("step").get<std::uint64_t>(),
                        header.at("epochs_completed").get<std::uint64_t>());
  session->metadata() = header.at("metadata");

  auto& store = session->model().parameters();
  const auto count = r.get<std::uint32_t>();
  if (count != store.size()) {
    throw IoError(source + ": holds " + std::to_string(count) + " parameters, model has " +
                  std::to_string(store.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.get_string();
    Tensor& t = store.items()[i].tensor;
    if (store.items()[i].name != name)
      throw IoError(source + ": parameter " + std::to_string(i) + " is '" + name +
                    "', expected '" + store.items()[i].name + "'");
    const auto ndim = r.get<std::uint32_t>();
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    if (shape != t.shape())
      throw IoError(source + ": parameter '" + name + "' has shape " + shape_str(shape) +
                    ", model expects " + shape_str(t.shape()));
    const auto values = r.get_doubles(t.numel());
    std::copy(values.begin(), values.end(), t.mutable_data().begin());
  }
  AdamState& adam = session->optimizer();
  adam.step = r.get<std::uint64_t>();
  for (std::size_t i = 0; i < store.size(); ++i) {
    adam.m[i] = r.get_doubles(adam.m[i].size());
    adam.v[i] = r.get_doubles(adam.v[i].size());
  }
  if (!r.at_end()) throw IoError(source + ": trailing bytes after checkpoint payload");
  return session;
}

inline void save_checkpoint(const TrainingSession& session, const std::string& path) {
  write_file(path, serialize_checkpoint(session));
}

inline std::unique_ptr<TrainingSession> load_checkpoint(const std::string& path) {
  return deserialize_checkpoint(read_file(path), path);
}

}  // namespace mhvit
