#pragma once

// Checkpoint container: a JSON manifest (format version, config hash, step,
// named-array index with shapes and byte offsets) followed by raw
// little-endian scalar arrays. Round trips are bit-exact because the bytes
// are written and read verbatim.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rqunify/errors.hpp"
#include "rqunify/nn.hpp"
#include "rqunify/optim.hpp"
#include "rqunify/quantizer.hpp"
#include "rqunify/tensor.hpp"

namespace rqunify {

inline constexpr char kCheckpointMagic[8] = {'R', 'Q', 'C', 'K',
                                             'P', 'T', '0', '1'};

// FNV-1a over the canonical serialized config; stable across runs, cheap,
// and good enough to catch resuming under a different configuration.
inline std::string config_hash(const std::string& canonical) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : canonical) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", (unsigned long long)h);
  return buf;
}

template <typename S>
struct StateDictT {
  struct Entry {
    std::string name;
    Shape shape;
    std::vector<S> data;
  };
  std::string config_hash;
  int64_t step = 0;
  std::vector<Entry> arrays;

  void add(const std::string& name, Shape shape, std::vector<S> data) {
    if (shape_numel(shape) != int64_t(data.size()))
      throw ContractError("state dict entry '" + name + "': " +
                          std::to_string(data.size()) + " values vs shape " +
                          shape_str(shape));
    for (const auto& e : arrays)
      if (e.name == name)
        throw ContractError("duplicate state dict entry '" + name + "'");
    arrays.push_back({name, std::move(shape), std::move(data)});
  }

  const Entry& at(const std::string& name) const {
    for (const auto& e : arrays)
      if (e.name == name) return e;
    throw ContractError("state dict has no entry '" + name + "'");
  }

  bool has(const std::string& name) const {
    for (const auto& e : arrays)
      if (e.name == name) return true;
    return false;
  }
};

template <typename S>
void save_checkpoint(const std::string& path, const StateDictT<S>& sd) {
  nlohmann::json manifest;
  manifest["format_version"] = 1;
  manifest["scalar_bytes"] = int(sizeof(S));
  manifest["config_hash"] = sd.config_hash;
  manifest["step"] = sd.step;
  uint64_t offset = 0;
  auto& idx = manifest["arrays"] = nlohmann::json::array();
  for (const auto& e : sd.arrays) {
    idx.push_back({{"name", e.name},
                   {"shape", e.shape},
                   {"offset", offset},
                   {"count", e.data.size()}});
    offset += e.data.size() * sizeof(S);
  }
  std::string mjson = manifest.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  uint64_t mlen = mjson.size();
  out.write(reinterpret_cast<const char*>(&mlen), sizeof mlen);
  out.write(mjson.data(), std::streamsize(mjson.size()));
  for (const auto& e : sd.arrays)
    out.write(reinterpret_cast<const char*>(e.data.data()),
              std::streamsize(e.data.size() * sizeof(S)));
  if (!out) throw IoError("short write to checkpoint: " + path);
}

template <typename S>
StateDictT<S> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[sizeof kCheckpointMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw IoError("not a checkpoint file: " + path);
  uint64_t mlen = 0;
  in.read(reinterpret_cast<char*>(&mlen), sizeof mlen);
  std::string mjson(mlen, '\0');
  in.read(mjson.data(), std::streamsize(mlen));
  if (!in) throw IoError("truncated checkpoint manifest: " + path);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mjson);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint manifest: " + std::string(e.what()));
  }
  if (manifest.value("format_version", -1) != 1)
    throw IoError("unsupported checkpoint format version");
  if (manifest.value("scalar_bytes", 0) != int(sizeof(S)))
    throw IoError("checkpoint scalar width " +
                  std::to_string(manifest.value("scalar_bytes", 0)) +
                  " does not match this build");
  StateDictT<S> sd;
  sd.config_hash = manifest.value("config_hash", "");
  sd.step = manifest.value("step", int64_t(0));
  for (const auto& a : manifest["arrays"]) {
    typename StateDictT<S>::Entry e;
    e.name = a.at("name").get<std::string>();
    e.shape = a.at("shape").get<Shape>();
    e.data.resize(a.at("count").get<size_t>());
    in.read(reinterpret_cast<char*>(e.data.data()),
            std::streamsize(e.data.size() * sizeof(S)));
    if (!in) throw IoError("truncated checkpoint array '" + e.name + "'");
    if (shape_numel(e.shape) != int64_t(e.data.size()))
      throw IoError("checkpoint array '" + e.name + "' shape mismatch");
    sd.arrays.push_back(std::move(e));
  }
  return sd;
}

// ---- model-state packing helpers ------------------------------------------

template <typename S>
void pack_params(StateDictT<S>& sd, const std::string& prefix,
                 ParamSetT<S>& ps) {
  for (size_t i = 0; i < ps.size(); ++i)
    sd.add(prefix + "param/" + ps.names[i], ps.tensors[i].shape(),
           ps.tensors[i].data());
}

template <typename S>
void unpack_params(const StateDictT<S>& sd, const std::string& prefix,
                   ParamSetT<S>& ps) {
  for (size_t i = 0; i < ps.size(); ++i) {
    const auto& e = sd.at(prefix + "param/" + ps.names[i]);
    if (e.shape != ps.tensors[i].shape())
      throw ConfigError("checkpoint parameter '" + ps.names[i] +
                        "' has shape " + shape_str(e.shape) +
                        ", model expects " +
                        shape_str(ps.tensors[i].shape()));
    ps.tensors[i].data() = e.data;
  }
}

template <typename S>
void pack_adam(StateDictT<S>& sd, const std::string& prefix, AdamT<S>& opt,
               ParamSetT<S>& ps) {
  sd.add(prefix + "adam/step", Shape{1}, {S(opt.step_count())});
  if (opt.moment1().empty()) return;  // optimizer never stepped
  for (size_t i = 0; i < ps.size(); ++i) {
    sd.add(prefix + "adam/m/" + ps.names[i], ps.tensors[i].shape(),
           opt.moment1()[i]);
    sd.add(prefix + "adam/v/" + ps.names[i], ps.tensors[i].shape(),
           opt.moment2()[i]);
  }
}

template <typename S>
void unpack_adam(const StateDictT<S>& sd, const std::string& prefix,
                 AdamT<S>& opt, ParamSetT<S>& ps) {
  opt.set_step_count(int64_t(sd.at(prefix + "adam/step").data[0]));
  if (!sd.has(prefix + "adam/m/" + ps.names[0])) return;
  opt.moment1().resize(ps.size());
  opt.moment2().resize(ps.size());
  for (size_t i = 0; i < ps.size(); ++i) {
    opt.moment1()[i] = sd.at(prefix + "adam/m/" + ps.names[i]).data;
    opt.moment2()[i] = sd.at(prefix + "adam/v/" + ps.names[i]).data;
  }
}

template <typename S>
void pack_codebook(StateDictT<S>& sd, const std::string& prefix,
                   CodebookT<S>& cb) {
  sd.add(prefix + "codebook/embeddings", Shape{cb.size(), cb.dim()},
         cb.raw_embeddings());
  sd.add(prefix + "codebook/ema_counts", Shape{cb.size()},
         cb.raw_ema_counts());
  sd.add(prefix + "codebook/ema_sums", Shape{cb.size(), cb.dim()},
         cb.raw_ema_sums());
  std::vector<S> dead(cb.raw_dead_epochs().begin(),
                      cb.raw_dead_epochs().end());
  sd.add(prefix + "codebook/dead_epochs", Shape{cb.size()}, std::move(dead));
}

template <typename S>
void unpack_codebook(const StateDictT<S>& sd, const std::string& prefix,
                     CodebookT<S>& cb) {
  const auto& e = sd.at(prefix + "codebook/embeddings");
  if (e.shape != Shape{cb.size(), cb.dim()})
    throw ConfigError("checkpoint codebook shape " + shape_str(e.shape) +
                      " does not match configured [" +
                      std::to_string(cb.size()) + "x" +
                      std::to_string(cb.dim()) + "]");
  cb.raw_embeddings() = e.data;
  cb.raw_ema_counts() = sd.at(prefix + "codebook/ema_counts").data;
  cb.raw_ema_sums() = sd.at(prefix + "codebook/ema_sums").data;
  const auto& de = sd.at(prefix + "codebook/dead_epochs").data;
  cb.raw_dead_epochs().assign(de.begin(), de.end());
  for (size_t i = 0; i < de.size(); ++i) cb.raw_dead_epochs()[i] = int(de[i]);
}

}  // namespace rqunify
