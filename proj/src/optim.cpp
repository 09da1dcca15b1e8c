#include "dialogkit/optim.hpp"

#include <cmath>
#include <cstring>

#include "dialogkit/rng.hpp"

namespace dialogkit::nn {

Tensor& ParamStore::add(const std::string& name, Tensor t) {
  auto [it, inserted] = params_.emplace(name, std::move(t));
  if (!inserted) throw ContractError("ParamStore: duplicate parameter " + name);
  return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("ParamStore: no parameter " + name);
  return it->second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("ParamStore: no parameter " + name);
  return it->second;
}

std::vector<Tensor> ParamStore::tensors() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& [_, t] : params_) out.push_back(t);
  return out;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : params_) t.zero_grad();
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [name, t] : params_) out.add(name, t.clone(t.requires_grad()));
  return out;
}

std::uint64_t ParamStore::fingerprint() const {
  std::uint64_t h = fnv1a("params");
  for (const auto& [name, t] : params_) {
    h = fnv1a(name, h);
    h = fnv1a(shape_str(t.shape()), h);
    const auto d = t.data();
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(d.data()),
                               d.size() * sizeof(double)),
              h);
  }
  return h;
}

AdamOutcome adam_step(std::vector<Tensor>& params, AdamState& state, double lr) {
  if (!(lr > 0.0)) throw ContractError("adam_step: learning rate must be > 0");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) {
    throw ContractError("adam_step: optimizer state does not match parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].numel()) {
      throw DimensionError("adam_step: moment buffer shape mismatch");
    }
    for (double g : params[i].grad()) {
      if (!std::isfinite(g)) return AdamOutcome::kRejectedNonFinite;
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.has_grad()) {
      // Zero gradient: moments still decay, and the update below is zero
      // only while both moments are zero.
      auto& m = state.m[i];
      auto& v = state.v[i];
      auto w = p.mutable_data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] *= state.beta1;
        v[j] *= state.beta2;
        w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.eps);
      }
      continue;
    }
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.eps);
    }
  }
  return AdamOutcome::kApplied;
}

double lr_at(const LrSchedule& schedule, std::int64_t step) {
  if (step < 1) throw ContractError("lr_at: step must be >= 1");
  if (schedule.warmup_steps < 1) throw ContractError("lr_at: warmup_steps must be >= 1");
  const double t = static_cast<double>(step);
  const double w = static_cast<double>(schedule.warmup_steps);
  return schedule.max_lr * std::min(t / w, std::sqrt(w / t));
}

}  // namespace dialogkit::nn
