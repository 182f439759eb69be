#pragma once

// Checkpoint container: magic "EMRF", version, embedded model config JSON,
// ordered named parameter records, trailing FNV-1a 64 checksum. Little-endian
// raw doubles; load reproduces every tensor bitwise.

#include <cstring>
#include <fstream>
#include <string>

#include <json.hpp>

#include "emrf/model.hpp"

namespace emrf {

constexpr uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[4] = {'E', 'M', 'R', 'F'};

inline nlohmann::json em_config_to_json(const EmConfig& c) {
  return {{"num_bases", c.num_bases},
          {"iterations", c.iterations},
          {"beta", c.beta},
          {"normalize_bases", c.normalize_bases},
          {"momentum", c.momentum}};
}

inline EmConfig em_config_from_json(const nlohmann::json& j) {
  EmConfig c;
  c.num_bases = j.at("num_bases").get<int64_t>();
  c.iterations = j.at("iterations").get<int64_t>();
  c.beta = j.at("beta").get<double>();
  c.normalize_bases = j.at("normalize_bases").get<bool>();
  c.momentum = j.at("momentum").get<double>();
  return c;
}

inline nlohmann::json lmrb_config_to_json(const LmrbConfig& c) {
  return {{"cascades", c.cascades}, {"reduction", c.reduction}, {"two_stream", c.two_stream}};
}

inline LmrbConfig lmrb_config_from_json(const nlohmann::json& j) {
  LmrbConfig c;
  c.cascades = j.at("cascades").get<int64_t>();
  c.reduction = j.at("reduction").get<int64_t>();
  c.two_stream = j.at("two_stream").get<bool>();
  return c;
}

inline std::string lmrb_placement_name(LmrbPlacement p) {
  switch (p) {
    case LmrbPlacement::SkipPaths: return "skip_paths";
    case LmrbPlacement::Bottleneck: return "bottleneck";
    case LmrbPlacement::Both: return "both";
  }
  fail("unknown lmrb placement");
}

inline LmrbPlacement lmrb_placement_from_name(const std::string& s) {
  if (s == "skip_paths") return LmrbPlacement::SkipPaths;
  if (s == "bottleneck") return LmrbPlacement::Bottleneck;
  if (s == "both") return LmrbPlacement::Both;
  fail("unknown lmrb_placement \"", s, "\" (want skip_paths|bottleneck|both)");
}

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"base_channels", c.base_channels},
          {"depths", c.depths},
          {"refinement_blocks", c.refinement_blocks},
          {"heads", c.heads},
          {"ffn_expansion", c.ffn_expansion},
          {"shallow_conv_bias", c.shallow_conv_bias},
          {"em", em_config_to_json(c.em)},
          {"lmrb", lmrb_config_to_json(c.lmrb)},
          {"lmrb_placement", lmrb_placement_name(c.lmrb_placement)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.base_channels = j.at("base_channels").get<int64_t>();
  c.depths = j.at("depths").get<std::vector<int64_t>>();
  c.refinement_blocks = j.at("refinement_blocks").get<int64_t>();
  c.heads = j.at("heads").get<std::vector<int64_t>>();
  c.ffn_expansion = j.at("ffn_expansion").get<double>();
  c.shallow_conv_bias = j.at("shallow_conv_bias").get<bool>();
  c.em = em_config_from_json(j.at("em"));
  c.lmrb = lmrb_config_from_json(j.at("lmrb"));
  c.lmrb_placement = lmrb_placement_from_name(j.at("lmrb_placement").get<std::string>());
  return c;
}

namespace detail {

inline uint64_t fnv1a64(const std::string& bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
void put_raw(std::string& out, const T& v) {
  static_assert(std::is_trivially_copyable_v<T>);
  const char* p = reinterpret_cast<const char*>(&v);
  out.append(p, sizeof(T));
}

template <typename T>
T get_raw(const std::string& bytes, size_t& pos, const std::string& path) {
  EMRF_CHECK(pos + sizeof(T) <= bytes.size(), path, ": truncated record at byte offset ", pos);
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                            const ParamStore& params) {
  std::string body;
  body.append(kCheckpointMagic, 4);
  detail::put_raw(body, kCheckpointVersion);

  std::string cfg_json = model_config_to_json(cfg).dump();
  detail::put_raw(body, uint64_t(cfg_json.size()));
  body += cfg_json;

  detail::put_raw(body, uint64_t(params.size()));
  for (const std::string& name : params.names()) {
    const Tensor& t = params.get(name);
    detail::put_raw(body, uint32_t(name.size()));
    body += name;
    detail::put_raw(body, uint8_t(0));  // dtype tag: 0 = f64
    detail::put_raw(body, uint32_t(t.rank()));
    for (int64_t e : t.shape()) detail::put_raw(body, uint64_t(e));
    for (double v : t.data()) detail::put_raw(body, v);
  }
  detail::put_raw(body, detail::fnv1a64(body));

  std::ofstream out(path, std::ios::binary);
  EMRF_CHECK(out.good(), "save_checkpoint: cannot write ", path);
  out.write(body.data(), std::streamsize(body.size()));
  EMRF_CHECK(out.good(), "save_checkpoint: write failed for ", path);
}

struct LoadedCheckpoint {
  ModelConfig config;
  Model model;  // rebuilt from config, parameter values restored bitwise
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  EMRF_CHECK(in.good(), "load_checkpoint: cannot open ", path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  EMRF_CHECK(bytes.size() >= 4 + sizeof(uint32_t) + sizeof(uint64_t), path,
             ": truncated checkpoint");
  uint64_t stored_sum;
  std::memcpy(&stored_sum, bytes.data() + bytes.size() - sizeof(uint64_t), sizeof(uint64_t));
  std::string body = bytes.substr(0, bytes.size() - sizeof(uint64_t));
  EMRF_CHECK(detail::fnv1a64(body) == stored_sum, path, ": checksum mismatch");

  size_t pos = 0;
  EMRF_CHECK(body.compare(0, 4, kCheckpointMagic, 4) == 0, path, ": bad magic \"",
             body.substr(0, 4), "\"");
  pos = 4;
  uint32_t version = detail::get_raw<uint32_t>(body, pos, path);
  EMRF_CHECK(version == kCheckpointVersion, path, ": unsupported version ", version,
             " (this build reads ", kCheckpointVersion, ")");

  uint64_t cfg_len = detail::get_raw<uint64_t>(body, pos, path);
  EMRF_CHECK(pos + cfg_len <= body.size(), path, ": truncated config blob");
  nlohmann::json cfg_json;
  try {
    cfg_json = nlohmann::json::parse(body.substr(pos, cfg_len));
  } catch (const std::exception& e) {
    fail(path, ": invalid config JSON: ", e.what());
  }
  pos += cfg_len;

  LoadedCheckpoint lc{model_config_from_json(cfg_json), Model{}};
  lc.model = build_model(lc.config, 0);

  uint64_t n_params = detail::get_raw<uint64_t>(body, pos, path);
  EMRF_CHECK(n_params == lc.model.store.size(), path, ": parameter count ", n_params,
             " does not match config-derived count ", lc.model.store.size());
  for (uint64_t i = 0; i < n_params; ++i) {
    uint32_t name_len = detail::get_raw<uint32_t>(body, pos, path);
    EMRF_CHECK(pos + name_len <= body.size(), path, ": truncated record (name)");
    std::string name = body.substr(pos, name_len);
    pos += name_len;
    uint8_t dtype = detail::get_raw<uint8_t>(body, pos, path);
    EMRF_CHECK(dtype == 0, path, ": unsupported dtype tag ", int(dtype));
    uint32_t rank = detail::get_raw<uint32_t>(body, pos, path);
    Shape shape;
    for (uint32_t d = 0; d < rank; ++d)
      shape.push_back(int64_t(detail::get_raw<uint64_t>(body, pos, path)));

    EMRF_CHECK(lc.model.store.has(name), path, ": unknown parameter \"", name, "\"");
    Tensor& t = lc.model.store.get(name);
    EMRF_CHECK(t.shape() == shape, path, ": parameter \"", name, "\" shape ",
               shape_str(shape), " does not match model shape ", shape_str(t.shape()));
    int64_t n = shape_numel(shape);
    EMRF_CHECK(pos + size_t(n) * sizeof(double) <= body.size(), path,
               ": truncated record for \"", name, "\" (declared ", n,
               " values, payload ends at byte ", body.size(), ")");
    std::memcpy(t.data().data(), body.data() + pos, size_t(n) * sizeof(double));
    pos += size_t(n) * sizeof(double);
  }
  EMRF_CHECK(pos == body.size(), path, ": trailing bytes after last record");

  // refresh momentum slots to the restored values
  for (EmSlot& s : lc.model.em_slots) *s.last_batch_bases = s.param.detach();
  return lc;
}

}  // namespace emrf
