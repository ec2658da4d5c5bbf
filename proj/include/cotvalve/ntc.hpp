#pragma once

// Named-tensor container (.ntc):
//
//   u64 little-endian   header length N
//   N bytes             JSON header
//   payload             raw little-endian float32 tensors
//
// Header: {"format":"ntc","version":1,"kind":...,"metadata":{...},
//          "tensors":[{"name","dtype":"float32","shape","offset",...}]}
// `offset` is relative to the start of the payload. Low-rank delta files
// store "<target>.lora_A" / "<target>.lora_B" and repeat target_name, rank,
// lora_alpha and multiplier on each entry.

#include <bit>
#include <cstring>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "cotvalve/adapter_arith.hpp"
#include "cotvalve/io.hpp"
#include "cotvalve/tensor.hpp"

namespace cotvalve::ntc {

static_assert(std::endian::native == std::endian::little,
              ".ntc payloads are written in native order");

using nlohmann::json;

struct Entry {
  std::string name;
  Tensor tensor;
  json extra = json::object();
};

struct File {
  std::string kind;  // "checkpoint" | "lowrank_delta" | "full_delta"
  json metadata = json::object();
  std::vector<Entry> entries;
};

inline std::string encode(const File& f) {
  json header;
  header["format"] = "ntc";
  header["version"] = 1;
  header["kind"] = f.kind;
  header["metadata"] = f.metadata;
  header["tensors"] = json::array();
  uint64_t offset = 0;
  for (const auto& e : f.entries) {
    json rec = e.extra;
    rec["name"] = e.name;
    rec["dtype"] = "float32";
    rec["shape"] = e.tensor.shape;
    rec["offset"] = offset;
    header["tensors"].push_back(rec);
    offset += e.tensor.data.size() * sizeof(float);
  }
  const std::string h = header.dump();
  std::string out(8, '\0');
  const uint64_t n = h.size();
  std::memcpy(out.data(), &n, 8);
  out += h;
  out.reserve(out.size() + offset);
  for (const auto& e : f.entries)
    out.append(reinterpret_cast<const char*>(e.tensor.data.data()),
               e.tensor.data.size() * sizeof(float));
  return out;
}

inline File decode(const std::string& bytes, const std::string& origin = "<memory>") {
  if (bytes.size() < 8) throw ParseError(origin + ": truncated .ntc header");
  uint64_t n = 0;
  std::memcpy(&n, bytes.data(), 8);
  if (n > bytes.size() - 8) throw ParseError(origin + ": header length out of range");
  json header;
  try {
    header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n));
  } catch (const json::exception& e) {
    throw ParseError(origin + ": bad .ntc header: " + e.what());
  }
  if (header.value("format", "") != "ntc")
    throw ParseError(origin + ": not an .ntc file");
  File f;
  f.kind = header.value("kind", "checkpoint");
  f.metadata = header.value("metadata", json::object());
  const size_t payload = 8 + n;
  for (const auto& rec : header.at("tensors")) {
    if (rec.value("dtype", "") != "float32")
      throw ParseError(origin + ": unsupported dtype for '" +
                       rec.value("name", "?") + "'");
    Entry e;
    e.name = rec.at("name").get<std::string>();
    e.tensor.shape = rec.at("shape").get<std::vector<int64_t>>();
    const uint64_t off = rec.at("offset").get<uint64_t>();
    const size_t count = static_cast<size_t>(Tensor::numel_of(e.tensor.shape));
    if (payload + off + count * sizeof(float) > bytes.size())
      throw ParseError(origin + ": payload for '" + e.name + "' is truncated");
    e.tensor.data.resize(count);
    std::memcpy(e.tensor.data.data(), bytes.data() + payload + off,
                count * sizeof(float));
    e.extra = rec;
    for (const char* k : {"name", "dtype", "shape", "offset"}) e.extra.erase(k);
    f.entries.push_back(std::move(e));
  }
  return f;
}

inline File read(const std::filesystem::path& path) {
  return decode(io::read_file(path), path.string());
}

inline void write(const std::filesystem::path& path, const File& f) {
  io::atomic_write(path, encode(f));
}

// ---------------------------------------------------------------------------
// Typed helpers

inline File from_checkpoint(const Checkpoint& ck, json metadata = json::object(),
                            std::string kind = "checkpoint") {
  File f;
  f.kind = std::move(kind);
  f.metadata = std::move(metadata);
  for (const auto& [name, t] : ck) f.entries.push_back({name, t, json::object()});
  return f;
}

inline Checkpoint to_checkpoint(const File& f) {
  Checkpoint ck;
  for (const auto& e : f.entries) ck.emplace(e.name, e.tensor);
  return ck;
}

inline File from_low_rank(const LowRankDeltaSet& deltas) {
  File f;
  f.kind = "lowrank_delta";
  for (const auto& d : deltas) {
    json extra = {{"target_name", d.target_name},
                  {"rank", d.rank()},
                  {"lora_alpha", d.lora_alpha},
                  {"multiplier", d.multiplier}};
    json ea = extra, eb = extra;
    ea["factor"] = "A";
    eb["factor"] = "B";
    f.entries.push_back({d.target_name + ".lora_A", Tensor::from_matrix(d.a), ea});
    f.entries.push_back({d.target_name + ".lora_B", Tensor::from_matrix(d.b), eb});
  }
  return f;
}

inline LowRankDeltaSet to_low_rank(const File& f) {
  if (f.kind != "lowrank_delta")
    throw ParseError("expected a lowrank_delta file, got '" + f.kind + "'");
  LowRankDeltaSet out;
  std::map<std::string, size_t> index;
  for (const auto& e : f.entries) {
    const auto target = e.extra.at("target_name").get<std::string>();
    auto [it, fresh] = index.emplace(target, out.size());
    if (fresh) {
      out.emplace_back();
      out.back().target_name = target;
      out.back().lora_alpha = e.extra.at("lora_alpha").get<float>();
      out.back().multiplier = e.extra.value("multiplier", 1.0);
    }
    LowRankDelta& d = out[it->second];
    if (e.tensor.shape.size() != 2)
      throw ConformanceError("factor '" + e.name + "' is not a matrix");
    RowMatrixF m = e.tensor.mat();
    const auto factor = e.extra.at("factor").get<std::string>();
    if (factor == "A")
      d.a = std::move(m);
    else if (factor == "B")
      d.b = std::move(m);
    else
      throw ParseError("unknown factor tag '" + factor + "'");
  }
  for (auto& d : out) {
    d.validate();
  }
  for (const auto& e : f.entries) {
    const auto& d = out[index.at(e.extra.at("target_name").get<std::string>())];
    if (e.extra.at("rank").get<int64_t>() != d.rank())
      throw ConformanceError("declared rank does not match factors for '" +
                             d.target_name + "'");
  }
  return out;
}

inline File from_full_delta(const FullDelta& d) {
  File f = from_checkpoint(d.entries, {{"multiplier", d.multiplier}}, "full_delta");
  return f;
}

inline FullDelta to_full_delta(const File& f) {
  if (f.kind != "full_delta")
    throw ParseError("expected a full_delta file, got '" + f.kind + "'");
  FullDelta d;
  d.entries = to_checkpoint(f);
  d.multiplier = f.metadata.value("multiplier", 1.0);
  return d;
}

}  // namespace cotvalve::ntc
