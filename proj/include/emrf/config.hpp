#pragma once

// RunConfig: one JSON document covering model, train, rain and metric options.
// Any leaf is overridable on the command line by its dotted path
// (e.g. --model.em.iterations 3, --model.depths 2,2,2,0). Unknown keys and
// type mismatches against the defaults are rejected.

#include <string>

#include <json.hpp>

#include "emrf/checkpoint.hpp"
#include "emrf/rain.hpp"
#include "emrf/train.hpp"

namespace emrf {

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"patch", c.patch},
          {"epochs", c.epochs},
          {"steps_per_epoch", c.steps_per_epoch},
          {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"seed", c.seed},
          {"cosine_decay", c.cosine_decay},
          {"hflip", c.hflip}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = j.at("learning_rate").get<double>();
  c.batch_size = j.at("batch_size").get<int64_t>();
  c.patch = j.at("patch").get<int64_t>();
  c.epochs = j.at("epochs").get<int64_t>();
  c.steps_per_epoch = j.at("steps_per_epoch").get<int64_t>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.eps = j.at("eps").get<double>();
  c.seed = j.at("seed").get<uint64_t>();
  c.cosine_decay = j.at("cosine_decay").get<bool>();
  c.hflip = j.at("hflip").get<bool>();
  return c;
}

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  StreakParams rain;
  int64_t synth_count = 20;
  int64_t synth_height = 64;
  int64_t synth_width = 64;
  bool metrics_y_channel = true;
  uint64_t seed = 1;
};

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  return {{"model", model_config_to_json(c.model)},
          {"train", train_config_to_json(c.train)},
          {"rain", streak_params_to_json(c.rain)},
          {"synth", {{"count", c.synth_count}, {"height", c.synth_height}, {"width", c.synth_width}}},
          {"metrics", {{"y_channel", c.metrics_y_channel}}},
          {"seed", c.seed}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  c.model = model_config_from_json(j.at("model"));
  c.train = train_config_from_json(j.at("train"));
  c.rain = streak_params_from_json(j.at("rain"));
  c.synth_count = j.at("synth").at("count").get<int64_t>();
  c.synth_height = j.at("synth").at("height").get<int64_t>();
  c.synth_width = j.at("synth").at("width").get<int64_t>();
  c.metrics_y_channel = j.at("metrics").at("y_channel").get<bool>();
  c.seed = j.at("seed").get<uint64_t>();
  return c;
}

// Desk-scale defaults: tiny model, short schedule, 64x64 synthetic data.
inline RunConfig default_run_config() {
  RunConfig c;
  c.model = ModelConfig::desk();
  c.train = TrainConfig::desk();
  return c;
}

namespace detail {

inline void check_known_keys(const nlohmann::json& user, const nlohmann::json& defaults,
                             const std::string& path) {
  EMRF_CHECK(user.is_object(), "config: expected object at \"", path, "\"");
  for (auto it = user.begin(); it != user.end(); ++it) {
    std::string key_path = path.empty() ? it.key() : path + "." + it.key();
    EMRF_CHECK(defaults.contains(it.key()), "config: unknown key \"", key_path, "\"");
    if (defaults.at(it.key()).is_object())
      check_known_keys(it.value(), defaults.at(it.key()), key_path);
  }
}

inline nlohmann::json parse_override_value(const std::string& raw) {
  // try JSON first (numbers, bools, arrays); comma lists become arrays;
  // anything else is a string
  nlohmann::json v = nlohmann::json::parse(raw, nullptr, false);
  if (!v.is_discarded()) return v;
  if (raw.find(',') != std::string::npos) {
    nlohmann::json arr = nlohmann::json::array();
    size_t start = 0;
    while (start <= raw.size()) {
      size_t end = raw.find(',', start);
      std::string part = raw.substr(start, end == std::string::npos ? end : end - start);
      nlohmann::json pv = nlohmann::json::parse(part, nullptr, false);
      arr.push_back(pv.is_discarded() ? nlohmann::json(part) : pv);
      if (end == std::string::npos) break;
      start = end + 1;
    }
    return arr;
  }
  return raw;
}

}  // namespace detail

// Merge user JSON over the defaults, rejecting unknown keys.
inline nlohmann::json merge_config(const nlohmann::json& defaults, const nlohmann::json& user) {
  detail::check_known_keys(user, defaults, "");
  nlohmann::json out = defaults;
  out.merge_patch(user);
  return out;
}

// Apply one dotted override like "model.em.iterations" = "3".
inline void apply_override(nlohmann::json& cfg, const std::string& dotted,
                           const std::string& raw_value) {
  std::string pointer = "/";
  for (char c : dotted) pointer += (c == '.') ? '/' : c;
  nlohmann::json::json_pointer jp(pointer);
  EMRF_CHECK(cfg.contains(jp), "config: unknown override key \"", dotted, "\"");
  nlohmann::json v = detail::parse_override_value(raw_value);
  const nlohmann::json& old = cfg.at(jp);
  EMRF_CHECK(!old.is_object(), "config: cannot override object \"", dotted, "\" directly");
  if (old.is_array() && !v.is_array()) {
    nlohmann::json arr = nlohmann::json::array();
    arr.push_back(v);
    v = arr;
  }
  cfg[jp] = v;
}

inline RunConfig load_run_config(const std::string& config_path,
                                 const std::vector<std::pair<std::string, std::string>>& overrides) {
  nlohmann::json cfg = run_config_to_json(default_run_config());
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    EMRF_CHECK(in.good(), "config: cannot open ", config_path);
    nlohmann::json user;
    try {
      in >> user;
    } catch (const std::exception& e) {
      fail("config: invalid JSON in ", config_path, ": ", e.what());
    }
    cfg = merge_config(cfg, user);
  }
  for (const auto& [key, value] : overrides) apply_override(cfg, key, value);
  return run_config_from_json(cfg);
}

}  // namespace emrf
