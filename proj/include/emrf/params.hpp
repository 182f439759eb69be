#pragma once

// Ordered store of named learnable tensors. Names are hierarchical
// ("enc1.emb0.ioab.qkv.w") and stable across builds with the same config,
// which is what the checkpoint format relies on.

#include <string>
#include <unordered_map>
#include <vector>

#include "emrf/tensor.hpp"

namespace emrf {

class ParamStore {
 public:
  Tensor& create(const std::string& name, Tensor value) {
    EMRF_CHECK(!by_name_.count(name), "duplicate parameter name: ", name);
    value.set_requires_grad(true);
    order_.push_back(name);
    auto [it, ok] = by_name_.emplace(name, std::move(value));
    (void)ok;
    return it->second;
  }

  Tensor& get(const std::string& name) {
    auto it = by_name_.find(name);
    EMRF_CHECK(it != by_name_.end(), "unknown parameter: ", name);
    return it->second;
  }
  const Tensor& get(const std::string& name) const {
    auto it = by_name_.find(name);
    EMRF_CHECK(it != by_name_.end(), "unknown parameter: ", name);
    return it->second;
  }

  bool has(const std::string& name) const { return by_name_.count(name) > 0; }
  const std::vector<std::string>& names() const { return order_; }
  size_t size() const { return order_.size(); }

  int64_t scalar_count() const {
    int64_t n = 0;
    for (const auto& name : order_) n += by_name_.at(name).numel();
    return n;
  }

  void zero_grads() {
    for (const auto& name : order_) by_name_.at(name).zero_grad();
  }

  // name -> accumulated gradient, as value tensors
  std::unordered_map<std::string, Tensor> grads() {
    std::unordered_map<std::string, Tensor> out;
    for (const auto& name : order_) {
      Tensor& p = by_name_.at(name);
      out.emplace(name, Tensor::from(p.shape(), p.grad()));
    }
    return out;
  }

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Tensor> by_name_;
};

// Kaiming-style fan-in scaled uniform init for conv/linear weights.
inline Tensor conv_weight_init(Shape shape, Rng& rng) {
  int64_t fan_in = 1;
  for (size_t d = 1; d < shape.size(); ++d) fan_in *= shape[d];
  double bound = std::sqrt(1.0 / double(fan_in));
  return Tensor::uniform(std::move(shape), rng, -bound, bound);
}

// Unit-variance scaled uniform, then L2-normalized rows.
inline Tensor basis_init(int64_t k, int64_t d, Rng& rng) {
  Tensor b = Tensor::uniform({k, d}, rng, -std::sqrt(3.0), std::sqrt(3.0));
  for (int64_t q = 0; q < k; ++q) {
    double norm = 0.0;
    for (int64_t j = 0; j < d; ++j) norm += b.at(q * d + j) * b.at(q * d + j);
    norm = std::sqrt(std::max(norm, 1e-24));
    for (int64_t j = 0; j < d; ++j) b.data()[size_t(q * d + j)] /= norm;
  }
  return b;
}

}  // namespace emrf
