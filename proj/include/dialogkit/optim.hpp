#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dialogkit/tensor.hpp"

namespace dialogkit::nn {

// Named trainable parameters, iterated in name order.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t);
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  bool contains(const std::string& name) const { return params_.contains(name); }

  std::vector<Tensor> tensors() const;
  const std::map<std::string, Tensor>& items() const { return params_; }
  std::size_t size() const { return params_.size(); }
  std::size_t parameter_count() const;

  void zero_grad();
  // Deep copy with fresh storage.
  ParamStore clone() const;
  // FNV-1a over names, shapes and values.
  std::uint64_t fingerprint() const;

 private:
  std::map<std::string, Tensor> params_;
};

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

enum class AdamOutcome { kApplied, kRejectedNonFinite };

// One bias-corrected Adam update from each parameter's accumulated grad
// (missing grads count as zero). If any grad is NaN or infinite nothing is
// changed and kRejectedNonFinite is returned.
AdamOutcome adam_step(std::vector<Tensor>& params, AdamState& state, double lr);

// Linear warmup to max_lr followed by inverse-square-root decay.
struct LrSchedule {
  double max_lr = 1e-3;
  std::int64_t warmup_steps = 100;
};

double lr_at(const LrSchedule& schedule, std::int64_t step);

}  // namespace dialogkit::nn
