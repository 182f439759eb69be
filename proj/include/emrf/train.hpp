#pragma once

// Desk-scale training: AdamW with decoupled weight decay, aligned patch
// sampling with optional horizontal flips, epoch loop with CSV logging and
// best/last checkpointing.

#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "emrf/checkpoint.hpp"
#include "emrf/metrics.hpp"
#include "emrf/model.hpp"
#include "emrf/rain.hpp"

namespace emrf {

struct TrainConfig {
  double learning_rate = 1e-4;
  int64_t batch_size = 4;
  int64_t patch = 128;
  int64_t epochs = 500;
  int64_t steps_per_epoch = 0;  // 0: ceil(train pairs / batch size)
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  uint64_t seed = 1;
  bool cosine_decay = false;
  bool hflip = true;

  static TrainConfig desk() {
    TrainConfig c;
    c.learning_rate = 2e-3;
    c.patch = 32;
    c.epochs = 20;
    c.steps_per_epoch = 10;  // 200 optimization steps
    return c;
  }

  void validate() const {
    EMRF_CHECK(learning_rate >= 0, "train: learning_rate must be >= 0");
    EMRF_CHECK(batch_size > 0 && patch > 0 && epochs >= 0, "train: sizes must be positive");
    EMRF_CHECK(patch % 8 == 0, "train: patch ", patch, " must be divisible by 8");
    EMRF_CHECK(weight_decay >= 0 && beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 &&
                   eps > 0,
               "train: invalid optimizer constants");
  }
};

struct OptState {
  std::unordered_map<std::string, Tensor> m1, m2;  // first/second moments
  int64_t step = 0;
};

inline void adamw_step(ParamStore& params,
                       const std::unordered_map<std::string, Tensor>& grads, OptState& state,
                       const TrainConfig& cfg, double lr_scale = 1.0) {
  ++state.step;
  double lr = cfg.learning_rate * lr_scale;
  double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  for (const std::string& name : params.names()) {
    auto git = grads.find(name);
    EMRF_CHECK(git != grads.end(), "adamw_step: missing gradient for parameter \"", name, "\"");
    Tensor& p = params.get(name);
    const Tensor& g = git->second;
    EMRF_CHECK(g.shape() == p.shape(), "adamw_step: gradient shape mismatch for \"", name, "\"");
    Tensor& m1 = state.m1.try_emplace(name, Tensor::zeros(p.shape())).first->second;
    Tensor& m2 = state.m2.try_emplace(name, Tensor::zeros(p.shape())).first->second;
    for (int64_t i = 0; i < p.numel(); ++i) {
      double gv = g.at(i);
      double& pv = p.data()[size_t(i)];
      pv -= lr * cfg.weight_decay * pv;  // decoupled decay
      double& a = m1.data()[size_t(i)];
      double& b = m2.data()[size_t(i)];
      a = cfg.beta1 * a + (1.0 - cfg.beta1) * gv;
      b = cfg.beta2 * b + (1.0 - cfg.beta2) * gv * gv;
      pv -= lr * (a / bc1) / (std::sqrt(b / bc2) + cfg.eps);
    }
  }
}

struct ImagePair {
  Image rainy, clean;
};

inline std::vector<ImagePair> load_pairs(const Manifest& manifest) {
  std::vector<ImagePair> pairs;
  for (const auto& p : manifest.pairs)
    pairs.push_back({read_image(p.rainy), read_image(p.clean)});
  return pairs;
}

// Aligned rainy/clean crops (same coordinates, same flips) stacked to batches.
inline std::pair<Tensor, Tensor> sample_patches(const std::vector<ImagePair>& pairs,
                                                int64_t patch, int64_t batch, Rng& rng,
                                                bool hflip = true) {
  EMRF_CHECK(!pairs.empty(), "sample_patches: no pairs");
  Tensor rainy({batch, 3, patch, patch});
  Tensor clean({batch, 3, patch, patch});
  for (int64_t b = 0; b < batch; ++b) {
    const ImagePair& pair = pairs[size_t(rng.uniform_int(0, int64_t(pairs.size()) - 1))];
    int64_t H = pair.rainy.height(), W = pair.rainy.width();
    EMRF_CHECK(H >= patch && W >= patch, "sample_patches: image ", H, "x", W,
               " smaller than patch ", patch);
    int64_t y0 = H == patch ? 0 : rng.uniform_int(0, H - patch);
    int64_t x0 = W == patch ? 0 : rng.uniform_int(0, W - patch);
    bool flip = hflip && rng.uniform() < 0.5;
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < patch; ++y)
        for (int64_t x = 0; x < patch; ++x) {
          int64_t sx = flip ? (x0 + patch - 1 - x) : (x0 + x);
          size_t dst = size_t(((b * 3 + c) * patch + y) * patch + x);
          rainy.data()[dst] = pair.rainy.pixels.at((c * H + y0 + y) * W + sx);
          clean.data()[dst] = pair.clean.pixels.at((c * H + y0 + y) * W + sx);
        }
  }
  return {std::move(rainy), std::move(clean)};
}

struct EpochRow {
  int64_t epoch = 0;
  double train_loss = 0;
  double val_psnr_y = 0;
  double val_ssim_y = 0;
};

struct TrainResult {
  std::vector<EpochRow> rows;
  std::string best_checkpoint;
  std::string last_checkpoint;
  std::string log_csv;
  double best_val_psnr_y = -1;
};

inline Tensor batch_of_image(const Image& img) {
  return reshape(img.pixels, {1, 3, img.height(), img.width()});
}

inline double validate_psnr_y(const Model& m, const std::vector<ImagePair>& val,
                              double* ssim_y_out = nullptr) {
  NoGradGuard ng;
  double psnr_acc = 0, ssim_acc = 0;
  for (const ImagePair& p : val) {
    Tensor out = model_forward(m, batch_of_image(p.rainy));
    Tensor img = reshape(out, {3, p.rainy.height(), p.rainy.width()});
    Tensor ya = rgb_to_y(img), yb = rgb_to_y(p.clean.pixels);
    psnr_acc += psnr(ya, yb);
    ssim_acc += ssim(ya, yb);
  }
  if (ssim_y_out) *ssim_y_out = val.empty() ? 0 : ssim_acc / double(val.size());
  return val.empty() ? 0 : psnr_acc / double(val.size());
}

inline double param_l2_norm(const ParamStore& params) {
  double acc = 0;
  for (const std::string& n : params.names())
    for (double v : params.get(n).data()) acc += v * v;
  return std::sqrt(acc);
}

// Deterministic given (model seed, cfg.seed, manifest). The last 10% of the
// manifest pairs are the validation split.
inline TrainResult train_model(Model& model, const TrainConfig& cfg, const Manifest& manifest,
                               const std::string& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  std::vector<ImagePair> all = load_pairs(manifest);
  EMRF_CHECK(!all.empty(), "train: manifest has no pairs");
  size_t val_n = all.size() >= 2 ? std::max<size_t>(1, all.size() / 10) : 0;
  std::vector<ImagePair> train_set(all.begin(), all.end() - ptrdiff_t(val_n));
  std::vector<ImagePair> val_set(all.end() - ptrdiff_t(val_n), all.end());

  int64_t steps = cfg.steps_per_epoch > 0
                      ? cfg.steps_per_epoch
                      : (int64_t(train_set.size()) + cfg.batch_size - 1) / cfg.batch_size;

  Rng rng(derive_seed(cfg.seed, 0x7e1));
  OptState opt;
  TrainResult result;
  result.best_checkpoint = (fs::path(out_dir) / "best.emrf").string();
  result.last_checkpoint = (fs::path(out_dir) / "last.emrf").string();
  result.log_csv = (fs::path(out_dir) / "train_log.csv").string();

  int64_t total_steps = std::max<int64_t>(1, cfg.epochs * steps);
  int64_t step_index = 0;

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_acc = 0;
    for (int64_t s = 0; s < steps; ++s, ++step_index) {
      auto [rainy, clean] = sample_patches(train_set, cfg.patch, cfg.batch_size, rng, cfg.hflip);
      model.store.zero_grads();
      Tensor out = model_forward(model, rainy, /*training=*/true);
      Tensor loss = ssim_loss(out, clean);
      double lv = loss.at(0);
      if (!std::isfinite(lv))
        fail("train: non-finite loss at epoch ", epoch, " batch ", s,
             " (parameter L2 norm ", param_l2_norm(model.store), ")");
      loss_acc += lv;
      backward(loss);
      double lr_scale = 1.0;
      if (cfg.cosine_decay)
        lr_scale = 0.5 * (1.0 + std::cos(3.14159265358979323846 * double(step_index) /
                                         double(total_steps)));
      adamw_step(model.store, model.store.grads(), opt, cfg, lr_scale);
      if (cfg.learning_rate > 0) apply_em_momentum(model);
    }

    EpochRow row;
    row.epoch = epoch;
    row.train_loss = loss_acc / double(steps);
    row.val_psnr_y = validate_psnr_y(model, val_set, &row.val_ssim_y);
    result.rows.push_back(row);
    if (row.val_psnr_y > result.best_val_psnr_y) {
      result.best_val_psnr_y = row.val_psnr_y;
      save_checkpoint(result.best_checkpoint, model.cfg, model.store);
    }
  }

  if (cfg.epochs == 0 || result.best_val_psnr_y < 0)
    save_checkpoint(result.best_checkpoint, model.cfg, model.store);
  save_checkpoint(result.last_checkpoint, model.cfg, model.store);

  std::ofstream csv(result.log_csv);
  EMRF_CHECK(csv.good(), "train: cannot write ", result.log_csv);
  csv << "epoch,train_ssim_loss,val_psnr_y,val_ssim_y\n";
  char line[160];
  for (const EpochRow& r : result.rows) {
    std::snprintf(line, sizeof line, "%lld,%.10g,%.10g,%.10g\n", (long long)r.epoch,
                  r.train_loss, r.val_psnr_y, r.val_ssim_y);
    csv << line;
  }
  return result;
}

}  // namespace emrf
