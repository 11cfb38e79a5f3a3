#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdmri/errors.hpp"
#include "kdmri/models.hpp"

namespace kdmri {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian");

template <class T>
struct AdamState {
  std::vector<T> m, v;
  int64_t t = 0;

  void reset(size_t n) {
    m.assign(n, T(0));
    v.assign(n, T(0));
    t = 0;
  }
  bool empty() const { return m.empty(); }
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double wall_seconds = 0;
};

// Persisted training state: parameters, optimizer moments, stage tag and the
// loss history so far. File layout: "KDCK" magic, u32 header length, header
// JSON, then the listed float32 little-endian blobs in declared parameter
// order (cascade-major, weights then bias per layer).
template <class T>
struct CheckpointRecord {
  NetworkParameters<T> params;
  AdamState<T> opt;
  std::string stage;
  int epoch = 0;
  int64_t step = 0;
  uint64_t seed = 0;
  std::vector<EpochStats> history;
  nlohmann::json extra = nlohmann::json::object();
};

namespace detail {

template <class T>
void write_f32_blob(std::ofstream& f, const std::vector<T>& v) {
  std::vector<float> tmp(v.size());
  for (size_t i = 0; i < v.size(); ++i) tmp[i] = static_cast<float>(v[i]);
  f.write(reinterpret_cast<const char*>(tmp.data()),
          static_cast<std::streamsize>(tmp.size() * sizeof(float)));
}

template <class T>
void read_f32_blob(std::ifstream& f, std::vector<T>& v, size_t n) {
  std::vector<float> tmp(n);
  f.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (!f) throw DataError("checkpoint: truncated blob");
  v.resize(n);
  for (size_t i = 0; i < n; ++i) v[i] = static_cast<T>(tmp[i]);
}

}  // namespace detail

template <class T>
void save_checkpoint(const std::string& path, const CheckpointRecord<T>& rec) {
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& e : rec.history)
    hist.push_back({e.epoch, e.train_loss, e.val_loss, e.wall_seconds});

  nlohmann::json blobs = nlohmann::json::array({"params"});
  if (!rec.opt.empty()) {
    blobs.push_back("adam_m");
    blobs.push_back("adam_v");
  }
  nlohmann::json header{{"version", 1},
                        {"config", rec.params.config_json()},
                        {"config_hash", rec.params.config_hash()},
                        {"stage", rec.stage},
                        {"epoch", rec.epoch},
                        {"step", rec.step},
                        {"seed", rec.seed},
                        {"adam_t", rec.opt.t},
                        {"param_count", rec.params.values.size()},
                        {"history", hist},
                        {"blobs", blobs},
                        {"extra", rec.extra}};
  const std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("checkpoint: cannot write " + path);
  f.write("KDCK", 4);
  const uint32_t len = static_cast<uint32_t>(hs.size());
  f.write(reinterpret_cast<const char*>(&len), 4);
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  detail::write_f32_blob(f, rec.params.values);
  if (!rec.opt.empty()) {
    detail::write_f32_blob(f, rec.opt.m);
    detail::write_f32_blob(f, rec.opt.v);
  }
  if (!f) throw DataError("checkpoint: write failed for " + path);
}

template <class T>
CheckpointRecord<T> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("checkpoint: cannot read " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "KDCK", 4) != 0)
    throw DataError("checkpoint: bad magic in " + path);
  uint32_t len = 0;
  f.read(reinterpret_cast<char*>(&len), 4);
  std::string hs(len, '\0');
  f.read(hs.data(), len);
  if (!f) throw DataError("checkpoint: truncated header in " + path);
  const auto header = nlohmann::json::parse(hs);

  CheckpointRecord<T> rec;
  const auto& cj = header.at("config");
  if (cj.at("type") == "dccnn")
    rec.params = make_layout<T>(cascade_config_from_json(cj));
  else if (cj.at("type") == "vdsr")
    rec.params = make_layout<T>(vdsr_config_from_json(cj));
  else
    throw DataError("checkpoint: unknown architecture " + cj.at("type").dump());

  const size_t n = header.at("param_count").get<size_t>();
  if (n != rec.params.values.size())
    throw DataError("checkpoint: parameter count does not match config");
  rec.stage = header.at("stage").get<std::string>();
  rec.epoch = header.at("epoch").get<int>();
  rec.step = header.at("step").get<int64_t>();
  rec.seed = header.at("seed").get<uint64_t>();
  rec.opt.t = header.value("adam_t", int64_t{0});
  rec.extra = header.value("extra", nlohmann::json::object());
  for (const auto& e : header.at("history")) {
    EpochStats s;
    s.epoch = e.at(0).get<int>();
    s.train_loss = e.at(1).get<double>();
    s.val_loss = e.at(2).get<double>();
    s.wall_seconds = e.at(3).get<double>();
    rec.history.push_back(s);
  }

  detail::read_f32_blob(f, rec.params.values, n);
  bool has_opt = false;
  for (const auto& b : header.at("blobs"))
    if (b == "adam_m") has_opt = true;
  if (has_opt) {
    detail::read_f32_blob(f, rec.opt.m, n);
    detail::read_f32_blob(f, rec.opt.v, n);
  }
  return rec;
}

}  // namespace kdmri
