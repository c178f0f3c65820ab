#pragma once

// Checkpoint file: one JSON header line followed by little-endian float64
// parameter blocks in header order.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "batchrl/common.hpp"
#include "batchrl/rl.hpp"

namespace batchrl {

inline constexpr const char* kCheckpointFormat = "batchrl-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  Json header = Json::object();
  std::vector<std::pair<std::string, Vector>> blocks;

  void add(const std::string& name, const Vector& data) { blocks.emplace_back(name, data); }

  bool has(const std::string& name) const {
    for (const auto& [n, v] : blocks) {
      if (n == name) return true;
    }
    return false;
  }

  const Vector& block(const std::string& name) const {
    for (const auto& [n, v] : blocks) {
      if (n == name) return v;
    }
    throw DataError("checkpoint has no parameter block '" + name + "'");
  }
};

namespace checkpoint_detail {

inline std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  std::uint64_t out = 0;
  for (int i = 0; i < 8; ++i) out |= ((v >> (8 * i)) & 0xffULL) << (8 * (7 - i));
  return out;
}

}  // namespace checkpoint_detail

/// Serialized bytes of a checkpoint.
inline std::string checkpoint_bytes(const Checkpoint& ck) {
  Json header = ck.header;
  header["format"] = kCheckpointFormat;
  header["version"] = kCheckpointVersion;
  Json layout = Json::array();
  for (const auto& [name, v] : ck.blocks) layout.push_back({{"name", name}, {"size", v.size()}});
  header["blocks"] = layout;
  std::string out = header.dump();
  out.push_back('\n');
  for (const auto& [name, v] : ck.blocks) {
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      std::uint64_t bits = checkpoint_detail::to_little(std::bit_cast<std::uint64_t>(v[i]));
      char buf[8];
      std::memcpy(buf, &bits, 8);
      out.append(buf, 8);
    }
  }
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& what) {
  auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw DataError(what + ": missing checkpoint header");
  Checkpoint ck;
  try {
    ck.header = Json::parse(bytes.substr(0, nl));
  } catch (const Json::exception& e) {
    throw DataError(what + ": invalid checkpoint header: " + e.what());
  }
  if (ck.header.value("format", std::string()) != kCheckpointFormat) throw DataError(what + " is not a checkpoint");
  if (ck.header.value("version", 0) != kCheckpointVersion) throw DataError(what + ": unsupported checkpoint version");
  std::size_t pos = nl + 1;
  for (const auto& b : ck.header.at("blocks")) {
    auto size = b.at("size").get<std::size_t>();
    if (bytes.size() < pos + 8 * size) throw DataError(what + ": truncated parameter block '" + b.at("name").get<std::string>() + "'");
    Vector v(static_cast<Eigen::Index>(size));
    for (std::size_t i = 0; i < size; ++i) {
      std::uint64_t bits = 0;
      std::memcpy(&bits, bytes.data() + pos + 8 * i, 8);
      v[static_cast<Eigen::Index>(i)] = std::bit_cast<double>(checkpoint_detail::to_little(bits));
    }
    pos += 8 * size;
    ck.blocks.emplace_back(b.at("name").get<std::string>(), std::move(v));
  }
  if (pos != bytes.size()) throw DataError(what + ": trailing bytes after parameter blocks");
  return ck;
}

/// Writes atomically: a failed write leaves any previous file intact.
inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write checkpoint " + tmp);
    std::string bytes = checkpoint_bytes(ck);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("failed writing checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline Checkpoint load_checkpoint(const std::string& path) { return parse_checkpoint(read_file_bytes(path), path); }

/// Stores every block and optimizer of `agent` under `prefix/`.
inline void capture_agent(Checkpoint& ck, const std::string& prefix, Parametrized& agent) {
  for (const auto& b : agent.blocks()) ck.add(prefix + "/" + b.name, *b.data);
  Json opts = Json::array();
  for (const AdamState* o : agent.optimizers()) opts.push_back(o->hyper_json());
  ck.header["agents"][prefix] = {{"steps", agent.steps}, {"optimizers", opts}};
}

/// Restores `agent` from blocks under `prefix/`; sizes must match.
inline void restore_agent(const Checkpoint& ck, const std::string& prefix, Parametrized& agent) {
  for (const auto& b : agent.blocks()) {
    const Vector& v = ck.block(prefix + "/" + b.name);
    if (v.size() != b.data->size()) {
      throw DataError("checkpoint block '" + prefix + "/" + b.name + "' has " + std::to_string(v.size()) +
                      " values, the model expects " + std::to_string(b.data->size()) + " (topology mismatch)");
    }
    *b.data = v;
  }
  const Json& meta = ck.header.at("agents").at(prefix);
  auto opts = agent.optimizers();
  const Json& hyper = meta.at("optimizers");
  if (hyper.size() != opts.size()) throw DataError("checkpoint optimizer count mismatch for '" + prefix + "'");
  for (std::size_t i = 0; i < opts.size(); ++i) opts[i]->load_hyper(hyper.at(i));
  agent.steps = meta.at("steps").get<std::int64_t>();
}

}  // namespace batchrl
