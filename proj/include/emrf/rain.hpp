#pragma once

// Procedural rain: anti-aliased line segments with a Gaussian cross profile
// rendered onto a zero canvas, composed additively onto clean images.

#include <algorithm>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "emrf/image.hpp"
#include "emrf/image_io.hpp"

namespace emrf {

struct StreakParams {
  double density = 8.0;          // expected streaks per 1000 pixels
  double angle_deg = 75.0;       // mean orientation (degrees from horizontal)
  double angle_jitter_deg = 8.0;
  double length_px = 12.0;
  double length_jitter_px = 4.0;
  double width_px = 1.0;
  double intensity = 0.35;       // mean added brightness
  double intensity_jitter = 0.15;
  uint64_t seed = 1;

  void validate() const {
    EMRF_CHECK(density >= 0 && length_px >= 0 && width_px > 0, "StreakParams: negative mean");
    EMRF_CHECK(intensity >= 0 && intensity_jitter >= 0 &&
                   intensity + intensity_jitter <= 1.0,
               "StreakParams: intensity mean + jitter must be <= 1");
  }
};

// Streak layer I_s: grayscale streaks replicated to 3 channels, deterministic in seed.
inline Image synth_streaks(int64_t h, int64_t w, const StreakParams& p) {
  EMRF_CHECK(h > 0 && w > 0, "synth_streaks: extents must be positive");
  p.validate();
  Rng rng(derive_seed(p.seed, 0xA11));

  std::vector<double> canvas(size_t(h * w), 0.0);
  int64_t count = int64_t(std::llround(p.density * double(h * w) / 1000.0));
  constexpr double kPi = 3.14159265358979323846;

  for (int64_t s = 0; s < count; ++s) {
    double cx = rng.uniform(0.0, double(w));
    double cy = rng.uniform(0.0, double(h));
    double ang = (p.angle_deg + rng.uniform(-p.angle_jitter_deg, p.angle_jitter_deg)) *
                 kPi / 180.0;
    double len = std::max(1.0, p.length_px + rng.uniform(-p.length_jitter_px, p.length_jitter_px));
    double amp = std::max(0.0, p.intensity + rng.uniform(-p.intensity_jitter, p.intensity_jitter));
    double dx = std::cos(ang), dy = -std::sin(ang);  // image rows grow downward
    double half = len / 2.0;
    double sigma = p.width_px / 2.0;

    int64_t x0 = std::max<int64_t>(0, int64_t(cx - half - 3 * sigma - 1));
    int64_t x1 = std::min<int64_t>(w - 1, int64_t(cx + half + 3 * sigma + 1));
    int64_t y0 = std::max<int64_t>(0, int64_t(cy - half - 3 * sigma - 1));
    int64_t y1 = std::min<int64_t>(h - 1, int64_t(cy + half + 3 * sigma + 1));
    for (int64_t y = y0; y <= y1; ++y)
      for (int64_t x = x0; x <= x1; ++x) {
        // distance from pixel center to the segment
        double px = double(x) + 0.5 - cx, py = double(y) + 0.5 - cy;
        double t = std::clamp(px * dx + py * dy, -half, half);
        double ex = px - t * dx, ey = py - t * dy;
        double dist2 = ex * ex + ey * ey;
        double v = amp * std::exp(-dist2 / (2.0 * sigma * sigma));
        size_t i = size_t(y * w + x);
        canvas[i] = std::min(1.0, canvas[i] + v);
      }
  }

  Tensor px({3, h, w});
  for (int64_t c = 0; c < 3; ++c)
    std::copy(canvas.begin(), canvas.end(), px.data().begin() + c * h * w);
  return make_image(std::move(px), ImageRole::Streak);
}

// Smooth procedural background for self-contained datasets: low-resolution
// random RGB lattice, bilinearly upsampled, kept inside [0.05, 0.95].
inline Image synth_clean(int64_t h, int64_t w, uint64_t seed) {
  EMRF_CHECK(h > 0 && w > 0, "synth_clean: extents must be positive");
  Rng rng(derive_seed(seed, 0xC1EA));
  const int64_t gh = 5, gw = 5;
  std::vector<double> grid(size_t(3 * gh * gw));
  for (double& v : grid) v = rng.uniform(0.05, 0.95);

  Tensor px({3, h, w});
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        double fy = double(y) / double(h - 1 > 0 ? h - 1 : 1) * double(gh - 1);
        double fx = double(x) / double(w - 1 > 0 ? w - 1 : 1) * double(gw - 1);
        int64_t y0 = std::min<int64_t>(gh - 2, int64_t(fy));
        int64_t x0 = std::min<int64_t>(gw - 2, int64_t(fx));
        double ty = fy - double(y0), tx = fx - double(x0);
        auto g = [&](int64_t yy, int64_t xx) {
          return grid[size_t((c * gh + yy) * gw + xx)];
        };
        double v = (1 - ty) * ((1 - tx) * g(y0, x0) + tx * g(y0, x0 + 1)) +
                   ty * ((1 - tx) * g(y0 + 1, x0) + tx * g(y0 + 1, x0 + 1));
        px.data()[size_t((c * h + y) * w + x)] = v;
      }
  return make_image(std::move(px), ImageRole::Clean);
}

// I_rain = clamp(I_c + I_s)
inline Image compose_rainy(const Image& clean, const Image& streaks) {
  EMRF_CHECK(clean.pixels.shape() == streaks.pixels.shape(),
             "compose_rainy: shape mismatch ", shape_str(clean.pixels.shape()), " vs ",
             shape_str(streaks.pixels.shape()));
  Tensor out = clean.pixels.detach();
  for (int64_t i = 0; i < out.numel(); ++i)
    out.data()[size_t(i)] = std::min(1.0, std::max(0.0, out.at(i) + streaks.pixels.at(i)));
  return make_image(std::move(out), ImageRole::Rainy);
}

struct ManifestPair {
  std::string rainy, clean;
  uint64_t seed = 0;
};

struct Manifest {
  std::vector<ManifestPair> pairs;
  StreakParams params;
  uint64_t root_seed = 0;
  std::string created_at;
};

inline nlohmann::json streak_params_to_json(const StreakParams& p) {
  return {{"density", p.density},
          {"angle_deg", p.angle_deg},
          {"angle_jitter_deg", p.angle_jitter_deg},
          {"length_px", p.length_px},
          {"length_jitter_px", p.length_jitter_px},
          {"width_px", p.width_px},
          {"intensity", p.intensity},
          {"intensity_jitter", p.intensity_jitter},
          {"seed", p.seed}};
}

inline StreakParams streak_params_from_json(const nlohmann::json& j) {
  StreakParams p;
  p.density = j.at("density").get<double>();
  p.angle_deg = j.at("angle_deg").get<double>();
  p.angle_jitter_deg = j.at("angle_jitter_deg").get<double>();
  p.length_px = j.at("length_px").get<double>();
  p.length_jitter_px = j.at("length_jitter_px").get<double>();
  p.width_px = j.at("width_px").get<double>();
  p.intensity = j.at("intensity").get<double>();
  p.intensity_jitter = j.at("intensity_jitter").get<double>();
  p.seed = j.at("seed").get<uint64_t>();
  return p;
}

// Timestamp for generated artifacts. Honors SOURCE_DATE_EPOCH so that seeded
// runs can be made bit-for-bit reproducible.
inline std::string artifact_timestamp() {
  std::time_t t;
  if (const char* e = std::getenv("SOURCE_DATE_EPOCH")) {
    t = std::time_t(std::atoll(e));
  } else {
    t = std::time(nullptr);
  }
  char buf[32];
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

inline void save_manifest(const std::string& path, const Manifest& m) {
  nlohmann::json j;
  j["pairs"] = nlohmann::json::array();
  for (const auto& p : m.pairs)
    j["pairs"].push_back({{"rainy", p.rainy}, {"clean", p.clean}, {"seed", p.seed}});
  j["params"] = streak_params_to_json(m.params);
  j["root_seed"] = m.root_seed;
  j["created_at"] = m.created_at;
  std::ofstream out(path);
  EMRF_CHECK(out.good(), "save_manifest: cannot write ", path);
  out << j.dump(2) << "\n";
}

inline Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  EMRF_CHECK(in.good(), "load_manifest: cannot open ", path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    fail("load_manifest: invalid JSON in ", path, ": ", e.what());
  }
  Manifest m;
  for (const auto& pj : j.at("pairs"))
    m.pairs.push_back({pj.at("rainy").get<std::string>(), pj.at("clean").get<std::string>(),
                       pj.at("seed").get<uint64_t>()});
  m.params = streak_params_from_json(j.at("params"));
  m.root_seed = j.at("root_seed").get<uint64_t>();
  m.created_at = j.value("created_at", "");
  return m;
}

// Renders `count` rainy/clean pairs from the clean images in clean_dir
// (cycled in sorted order), one derived seed per pair.
inline Manifest make_dataset(const std::string& clean_dir, const std::string& out_dir,
                             const StreakParams& p, int64_t count) {
  namespace fs = std::filesystem;
  p.validate();
  EMRF_CHECK(count >= 0, "make_dataset: count must be >= 0");

  std::vector<std::string> clean_files;
  EMRF_CHECK(fs::is_directory(clean_dir), "make_dataset: clean_dir ", clean_dir,
             " is not a directory");
  for (const auto& e : fs::directory_iterator(clean_dir))
    if (e.is_regular_file()) clean_files.push_back(e.path().string());
  std::sort(clean_files.begin(), clean_files.end());
  EMRF_CHECK(count == 0 || !clean_files.empty(),
             "make_dataset: no readable images in ", clean_dir);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  EMRF_CHECK(fs::is_directory(out_dir), "make_dataset: cannot create output dir ", out_dir);

  Manifest m;
  m.params = p;
  m.root_seed = p.seed;
  m.created_at = artifact_timestamp();
  for (int64_t i = 0; i < count; ++i) {
    Image clean = read_image(clean_files[size_t(i) % clean_files.size()]);
    StreakParams pi = p;
    pi.seed = derive_seed(p.seed, uint64_t(i));
    Image streaks = synth_streaks(clean.height(), clean.width(), pi);
    Image rainy = compose_rainy(clean, streaks);

    char name[64];
    std::snprintf(name, sizeof name, "pair_%04lld", (long long)i);
    std::string rainy_path = (fs::path(out_dir) / (std::string(name) + "_rain.ppm")).string();
    std::string clean_path = (fs::path(out_dir) / (std::string(name) + "_clean.ppm")).string();
    write_image(rainy_path, rainy);
    write_image(clean_path, clean);
    m.pairs.push_back({rainy_path, clean_path, pi.seed});
  }
  save_manifest((fs::path(out_dir) / "manifest.json").string(), m);
  return m;
}

}  // namespace emrf
