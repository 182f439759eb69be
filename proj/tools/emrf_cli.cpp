// Command-line surface: synth | train | derain | eval | ablate | gradcheck.
// Any RunConfig leaf can be overridden by its dotted path, e.g.
//   emrf train --data out/manifest.json --out run --model.em.iterations 3

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "emrf/emrf.hpp"
#include "emrf/gradcheck_suite.hpp"

namespace fs = std::filesystem;
using namespace emrf;

namespace {

int worker_count() {
  if (const char* e = std::getenv("EMRF_THREADS")) {
    int n = std::atoi(e);
    if (n >= 1) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw ? int(hw) : 1;
}

template <typename Fn>
void parallel_for(size_t count, Fn&& fn) {
  int workers = std::min<int>(worker_count(), int(count));
  if (workers <= 1) {
    for (size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  std::atomic<bool> failed{false};
  std::string first_error;
  std::mutex err_mu;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) {
        if (failed.load()) return;
        try {
          fn(i);
        } catch (const std::exception& e) {
          std::lock_guard<std::mutex> lock(err_mu);
          if (!failed.exchange(true)) first_error = e.what();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (failed.load()) throw Error(first_error);
}

std::vector<std::string> list_ppm(const std::string& dir) {
  std::vector<std::string> files;
  EMRF_CHECK(fs::is_directory(dir), "not a directory: ", dir);
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ppm")
      files.push_back(e.path().string());
  std::sort(files.begin(), files.end());
  return files;
}

std::string fmt_metric(double v) {
  if (std::isinf(v)) return "inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// Pull "--dotted.path value" / "--dotted.path=value" tokens out of argv before
// CLI11 sees them.
std::vector<std::string> extract_overrides(
    std::vector<std::string>& args, std::vector<std::pair<std::string, std::string>>& overrides) {
  std::vector<std::string> rest;
  for (size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) == 0 && a.find('.') != std::string::npos && a.size() > 2) {
      std::string key = a.substr(2);
      size_t eq = key.find('=');
      if (eq != std::string::npos) {
        overrides.emplace_back(key.substr(0, eq), key.substr(eq + 1));
      } else {
        EMRF_CHECK(i + 1 < args.size(), "override ", a, " is missing a value");
        overrides.emplace_back(key, args[++i]);
      }
    } else {
      rest.push_back(a);
    }
  }
  return rest;
}

struct CsvWriter {
  std::ostream* os;
  std::ofstream file;
  explicit CsvWriter(const std::string& path) {
    if (path.empty()) {
      os = &std::cout;
    } else {
      file.open(path);
      EMRF_CHECK(file.good(), "cannot write ", path);
      os = &file;
    }
  }
};

void cmd_synth(const RunConfig& cfg, const std::string& clean_dir, const std::string& out_dir) {
  std::string cdir = clean_dir;
  if (cdir.empty()) {
    cdir = (fs::path(out_dir) / "clean_src").string();
    fs::create_directories(cdir);
    for (int64_t i = 0; i < std::max<int64_t>(1, cfg.synth_count); ++i) {
      Image img = synth_clean(cfg.synth_height, cfg.synth_width,
                              derive_seed(cfg.rain.seed, 0x5EED + uint64_t(i)));
      char name[32];
      std::snprintf(name, sizeof name, "clean_%04lld.ppm", (long long)i);
      write_image((fs::path(cdir) / name).string(), img);
    }
  }
  Manifest m = make_dataset(cdir, out_dir, cfg.rain, cfg.synth_count);
  std::cout << "wrote " << m.pairs.size() << " pairs to " << out_dir << "\n";
}

void cmd_train(const RunConfig& cfg, const std::string& manifest_path,
               const std::string& out_dir) {
  Manifest manifest = load_manifest(manifest_path);
  Model model = build_model(cfg.model, cfg.seed);
  std::cout << "model parameters: " << model.param_count() << "\n";
  TrainResult r = train_model(model, cfg.train, manifest, out_dir);
  if (!r.rows.empty())
    std::cout << "final train loss " << r.rows.back().train_loss << ", best val psnr_y "
              << fmt_metric(r.best_val_psnr_y) << "\n";
  std::cout << "log: " << r.log_csv << "\ncheckpoints: " << r.best_checkpoint << ", "
            << r.last_checkpoint << "\n";
}

void cmd_derain(const std::string& ckpt, const std::string& in_dir,
                const std::string& out_dir) {
  LoadedCheckpoint lc = load_checkpoint(ckpt);
  std::vector<std::string> files = list_ppm(in_dir);
  EMRF_CHECK(!files.empty(), "no .ppm files in ", in_dir);
  fs::create_directories(out_dir);
  parallel_for(files.size(), [&](size_t i) {
    NoGradGuard ng;
    Image img = read_image(files[i]);
    Tensor out = model_forward(lc.model, batch_of_image(img));
    Image res = make_image(reshape(out, {3, img.height(), img.width()}).detach(),
                           ImageRole::Derained);
    write_image((fs::path(out_dir) / fs::path(files[i]).filename()).string(), res);
  });
  std::cout << "derained " << files.size() << " images into " << out_dir << "\n";
}

void cmd_eval(const std::string& derained_dir, const std::string& gt_dir,
              const std::string& csv_path) {
  std::vector<std::string> a = list_ppm(derained_dir);
  std::vector<std::string> b = list_ppm(gt_dir);
  EMRF_CHECK(a.size() == b.size(), "directory sizes differ: ", a.size(), " vs ", b.size());
  EMRF_CHECK(!a.empty(), "no .ppm files to evaluate");

  std::vector<MetricRow> rows(a.size());
  parallel_for(a.size(), [&](size_t i) {
    Image out = read_image(a[i]);
    Image gt = read_image(b[i]);
    rows[i] = evaluate_pair(fs::path(a[i]).filename().string(), out.pixels, gt.pixels);
  });

  CsvWriter csv(csv_path);
  *csv.os << "name,psnr_y,ssim_y,mae,psnr_rgb,ssim_rgb\n";
  auto emit = [&](const MetricRow& r) {
    *csv.os << r.name << "," << fmt_metric(r.psnr_y) << "," << fmt_metric(r.ssim_y) << ","
            << fmt_metric(r.mae_v) << "," << fmt_metric(r.psnr_rgb) << ","
            << fmt_metric(r.ssim_rgb) << "\n";
  };
  for (const auto& r : rows) emit(r);

  auto stats = [&](auto get) {
    double m = 0;
    for (const auto& r : rows) m += get(r);
    m /= double(rows.size());
    double s = 0;
    for (const auto& r : rows) s += (get(r) - m) * (get(r) - m);
    return std::pair<double, double>(m, rows.size() > 1 ? std::sqrt(s / double(rows.size() - 1)) : 0.0);
  };
  MetricRow mean_row, std_row;
  mean_row.name = "mean";
  std_row.name = "std";
  std::tie(mean_row.psnr_y, std_row.psnr_y) = stats([](const MetricRow& r) { return r.psnr_y; });
  std::tie(mean_row.ssim_y, std_row.ssim_y) = stats([](const MetricRow& r) { return r.ssim_y; });
  std::tie(mean_row.mae_v, std_row.mae_v) = stats([](const MetricRow& r) { return r.mae_v; });
  std::tie(mean_row.psnr_rgb, std_row.psnr_rgb) =
      stats([](const MetricRow& r) { return r.psnr_rgb; });
  std::tie(mean_row.ssim_rgb, std_row.ssim_rgb) =
      stats([](const MetricRow& r) { return r.ssim_rgb; });
  emit(mean_row);
  emit(std_row);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void cmd_ablate(const RunConfig& base_cfg, const std::string& manifest_path,
                const std::string& out_dir, int seeds) {
  Manifest manifest = load_manifest(manifest_path);
  fs::create_directories(out_dir);

  struct SweepPoint {
    std::string sweep;
    int64_t value;
  };
  std::vector<SweepPoint> points;
  for (int64_t t = 1; t <= 4; ++t) points.push_back({"t", t});
  for (int64_t k = 1; k <= 4; ++k) points.push_back({"k", k});

  std::string csv_path = (fs::path(out_dir) / "ablate.csv").string();
  std::ofstream csv(csv_path);
  EMRF_CHECK(csv.good(), "cannot write ", csv_path);
  csv << "sweep,value,psnr_y,ssim_y\n";

  // one training job per (sweep point, seed); jobs are independent, so they
  // run on the worker pool and results land in job-indexed slots
  size_t jobs = points.size() * size_t(seeds);
  std::vector<double> job_psnr(jobs, 0.0), job_ssim(jobs, 0.0);
  parallel_for(jobs, [&](size_t j) {
    const SweepPoint& pt = points[j / size_t(seeds)];
    int s = int(j % size_t(seeds));
    RunConfig cfg = base_cfg;
    if (pt.sweep == "t")
      cfg.model.em.iterations = pt.value;
    else
      cfg.model.lmrb.cascades = pt.value;
    uint64_t seed = derive_seed(cfg.seed, uint64_t(s) * 131 + 7);
    cfg.train.seed = seed;
    Model model = build_model(cfg.model, seed);
    std::string run_dir =
        (fs::path(out_dir) / (pt.sweep + std::to_string(pt.value) + "_s" + std::to_string(s)))
            .string();
    TrainResult r = train_model(model, cfg.train, manifest, run_dir);
    job_psnr[j] = r.best_val_psnr_y;
    double best_ssim = 0;
    for (const auto& row : r.rows) best_ssim = std::max(best_ssim, row.val_ssim_y);
    job_ssim[j] = best_ssim;
  });

  for (size_t p = 0; p < points.size(); ++p) {
    const SweepPoint& pt = points[p];
    std::vector<double> psnrs(job_psnr.begin() + int64_t(p) * seeds,
                              job_psnr.begin() + int64_t(p + 1) * seeds);
    std::vector<double> ssims(job_ssim.begin() + int64_t(p) * seeds,
                              job_ssim.begin() + int64_t(p + 1) * seeds);
    for (int s = 0; s < seeds; ++s)
      std::cout << pt.sweep << "=" << pt.value << " seed " << s << ": psnr_y "
                << fmt_metric(psnrs[size_t(s)]) << "\n";
    csv << pt.sweep << "," << pt.value << "," << fmt_metric(median(psnrs)) << ","
        << fmt_metric(median(ssims)) << "\n";
  }
  std::cout << "ablation table: " << csv_path << "\n";
}

int cmd_gradcheck() {
  auto entries = run_gradcheck_suite();
  bool all_pass = true;
  for (const auto& e : entries) {
    std::printf("%-24s max rel err %.3e  %s\n", e.name.c_str(), e.max_rel_error,
                e.pass ? "pass" : "FAIL");
    all_pass = all_pass && e.pass;
  }
  std::printf("%zu checks, %s\n", entries.size(), all_pass ? "all passed" : "FAILURES");
  return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> raw(argv + 1, argv + argc);
  std::vector<std::pair<std::string, std::string>> overrides;
  std::vector<std::string> args;
  try {
    args = extract_overrides(raw, overrides);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  CLI::App app{"EMResformer rain-streak removal toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir, clean_dir, manifest_path, ckpt_path, in_dir, gt_dir,
      csv_path;
  uint64_t seed = 0;
  bool seed_given = false;
  int ablate_seeds = 1;

  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--seed", seed, "root seed (overrides config seed)")
      ->each([&](const std::string&) { seed_given = true; });

  auto* synth = app.add_subcommand("synth", "generate a paired rainy/clean dataset");
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--clean", clean_dir, "directory of clean source images (optional)");

  auto* train = app.add_subcommand("train", "train a model on a dataset manifest");
  train->add_option("--data", manifest_path, "dataset manifest.json")->required();
  train->add_option("--out", out_dir, "run output directory")->required();

  auto* derain = app.add_subcommand("derain", "run a checkpoint over a directory of images");
  derain->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  derain->add_option("--in", in_dir, "input directory of .ppm images")->required();
  derain->add_option("--out", out_dir, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "paired-directory metric report");
  eval->add_option("--derained", in_dir, "derained/output image directory")->required();
  eval->add_option("--gt", gt_dir, "ground-truth image directory")->required();
  eval->add_option("--csv", csv_path, "CSV output path (default stdout)");

  auto* ablate = app.add_subcommand("ablate", "sweep EM iterations t and LMRB cascades k");
  ablate->add_option("--data", manifest_path, "dataset manifest.json")->required();
  ablate->add_option("--out", out_dir, "output directory")->required();
  ablate->add_option("--seeds", ablate_seeds, "seeds per sweep point (median reported)");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
  (void)gradcheck;

  try {
    std::reverse(args.begin(), args.end());  // CLI11's vector parse wants reversed argv
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  try {
    RunConfig cfg = load_run_config(config_path, overrides);
    if (seed_given) {
      cfg.seed = seed;
      cfg.rain.seed = seed;
      cfg.train.seed = seed;
    }
    if (synth->parsed()) {
      cmd_synth(cfg, clean_dir, out_dir);
    } else if (train->parsed()) {
      cmd_train(cfg, manifest_path, out_dir);
    } else if (derain->parsed()) {
      cmd_derain(ckpt_path, in_dir, out_dir);
    } else if (eval->parsed()) {
      cmd_eval(in_dir, gt_dir, csv_path);
    } else if (ablate->parsed()) {
      cmd_ablate(cfg, manifest_path, out_dir, ablate_seeds);
    } else if (gradcheck->parsed()) {
      return cmd_gradcheck();
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
