#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <filesystem>

#include "emrf/metrics.hpp"
#include "emrf/rain.hpp"

using namespace emrf;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("emrf_rain_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

double mean_pixel(const Image& img) {
  double acc = 0;
  for (int64_t i = 0; i < img.pixels.numel(); ++i) acc += img.pixels.at(i);
  return acc / double(img.pixels.numel());
}

}  // namespace

TEST_CASE("zero density renders an empty layer") {
  StreakParams p;
  p.density = 0;
  Image s = synth_streaks(32, 32, p);
  for (int64_t i = 0; i < s.pixels.numel(); ++i) CHECK(s.pixels.at(i) == 0.0);
}

TEST_CASE("streak synthesis is deterministic in the seed") {
  StreakParams p;
  p.seed = 99;
  Image a = synth_streaks(48, 48, p);
  Image b = synth_streaks(48, 48, p);
  for (int64_t i = 0; i < a.pixels.numel(); ++i) CHECK(a.pixels.at(i) == b.pixels.at(i));

  p.seed = 100;
  Image c = synth_streaks(48, 48, p);
  bool any_diff = false;
  for (int64_t i = 0; i < a.pixels.numel(); ++i)
    if (a.pixels.at(i) != c.pixels.at(i)) any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("streak pixels stay within [0,1] and brightness grows with density") {
  double means[3] = {0, 0, 0};
  double densities[3] = {1, 5, 20};
  for (int d = 0; d < 3; ++d)
    for (uint64_t seed = 1; seed <= 10; ++seed) {
      StreakParams p;
      p.density = densities[d];
      p.seed = seed;
      Image s = synth_streaks(64, 64, p);
      for (int64_t i = 0; i < s.pixels.numel(); ++i) {
        CHECK(s.pixels.at(i) >= 0.0);
        CHECK(s.pixels.at(i) <= 1.0);
      }
      means[d] += mean_pixel(s) / 10.0;
    }
  CHECK(means[0] < means[1]);
  CHECK(means[1] < means[2]);
}

TEST_CASE("parameter validation") {
  StreakParams p;
  p.intensity = 0.8;
  p.intensity_jitter = 0.3;
  CHECK_THROWS_WITH_AS(p.validate(), doctest::Contains("intensity"), Error);
}

TEST_CASE("composition identities") {
  Image clean = synth_clean(32, 32, 5);
  StreakParams p;
  p.density = 0;
  Image zero = synth_streaks(32, 32, p);
  Image rainy = compose_rainy(clean, zero);
  for (int64_t i = 0; i < clean.pixels.numel(); ++i)
    CHECK(rainy.pixels.at(i) == clean.pixels.at(i));

  Image bright = make_image(Tensor::full({3, 2, 2}, 0.9), ImageRole::Clean);
  Image streak = make_image(Tensor::full({3, 2, 2}, 0.3), ImageRole::Streak);
  Image sat = compose_rainy(bright, streak);
  for (int64_t i = 0; i < sat.pixels.numel(); ++i) CHECK(sat.pixels.at(i) == 1.0);

  Image small = make_image(Tensor::zeros({3, 2, 3}), ImageRole::Streak);
  CHECK_THROWS_WITH_AS(compose_rainy(bright, small), doctest::Contains("shape"), Error);
}

TEST_CASE("heavier rain lowers the rainy-image fidelity") {
  Image clean = synth_clean(64, 64, 7);
  double prev = 1e300;
  for (double density : {2.0, 8.0, 24.0}) {
    StreakParams p;
    p.density = density;
    p.seed = 3;
    Image rainy = compose_rainy(clean, synth_streaks(64, 64, p));
    double v = psnr(rainy.pixels, clean.pixels);
    CHECK(v < prev);
    prev = v;
  }
}

TEST_CASE("procedural clean images are deterministic and in range") {
  Image a = synth_clean(40, 40, 11);
  Image b = synth_clean(40, 40, 11);
  for (int64_t i = 0; i < a.pixels.numel(); ++i) {
    CHECK(a.pixels.at(i) == b.pixels.at(i));
    CHECK(a.pixels.at(i) >= 0.05);
    CHECK(a.pixels.at(i) <= 0.95);
  }
}

TEST_CASE("empty dataset requests produce an empty manifest and no pair files") {
  TempDir clean_dir("clean0"), out_dir("out0");
  write_image((fs::path(clean_dir.str()) / "c.ppm").string(), synth_clean(16, 16, 1));
  StreakParams p;
  Manifest m = make_dataset(clean_dir.str(), out_dir.str(), p, 0);
  CHECK(m.pairs.empty());
  int files = 0;
  for (const auto& e : fs::directory_iterator(out_dir.str()))
    if (e.path().extension() == ".ppm") ++files;
  CHECK(files == 0);
  CHECK(fs::exists(fs::path(out_dir.str()) / "manifest.json"));
}

TEST_CASE("datasets regenerate bitwise-identically and round-trip their manifest") {
  TempDir clean_dir("clean1"), out_a("outa"), out_b("outb");
  for (int i = 0; i < 3; ++i)
    write_image((fs::path(clean_dir.str()) / ("c" + std::to_string(i) + ".ppm")).string(),
                synth_clean(24, 24, uint64_t(i)));
  StreakParams p;
  p.seed = 17;

  auto started = std::chrono::steady_clock::now();
  Manifest ma = make_dataset(clean_dir.str(), out_a.str(), p, 6);
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  CHECK(secs < 10.0);
  Manifest mb = make_dataset(clean_dir.str(), out_b.str(), p, 6);
  REQUIRE(ma.pairs.size() == 6);
  REQUIRE(mb.pairs.size() == 6);

  for (size_t i = 0; i < 6; ++i) {
    CHECK(ma.pairs[i].seed == mb.pairs[i].seed);
    Image ia = read_image(ma.pairs[i].rainy);
    Image ib = read_image(mb.pairs[i].rainy);
    for (int64_t j = 0; j < ia.pixels.numel(); ++j)
      CHECK(ia.pixels.at(j) == ib.pixels.at(j));
  }

  Manifest loaded = load_manifest((fs::path(out_a.str()) / "manifest.json").string());
  CHECK(loaded.pairs.size() == ma.pairs.size());
  CHECK(loaded.root_seed == ma.root_seed);
  CHECK(loaded.params.density == ma.params.density);
  CHECK(loaded.params.seed == ma.params.seed);
  for (size_t i = 0; i < 6; ++i) {
    CHECK(loaded.pairs[i].rainy == ma.pairs[i].rainy);
    CHECK(loaded.pairs[i].seed == ma.pairs[i].seed);
  }
}

TEST_CASE("dataset generation needs a readable clean directory") {
  TempDir out_dir("out2");
  StreakParams p;
  CHECK_THROWS_AS(make_dataset((fs::path(out_dir.str()) / "missing").string(), out_dir.str(), p, 1),
                  Error);
}
