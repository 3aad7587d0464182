#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>

#include "wbm/rng.hpp"
#include "wbm/tape.hpp"

namespace wbm::nn {

// Stable name hash for per-tensor init streams (std::hash is not portable).
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Named, shaped tensors. The map keeps names sorted, which fixes iteration
// order for optimizer updates and checkpoints.
template <typename S>
struct ParamTree {
  std::map<std::string, Matrix<S>> tensors;

  Matrix<S>& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
  }
  const Matrix<S>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }

  void add(const std::string& name, Matrix<S> value) {
    auto [it, inserted] = tensors.emplace(name, std::move(value));
    if (!inserted) throw ContractError("duplicate parameter name: " + name);
  }

  std::size_t tensor_count() const { return tensors.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [k, v] : tensors) n += static_cast<std::size_t>(v.size());
    return n;
  }

  template <typename T>
  ParamTree<T> cast() const {
    ParamTree<T> out;
    for (const auto& [k, v] : tensors) out.tensors.emplace(k, v.template cast<T>());
    return out;
  }

  // Throws ContractError unless `other` has exactly the same names and shapes.
  void check_congruent(const ParamTree& other, const char* what) const {
    if (tensors.size() != other.tensors.size()) {
      throw ContractError(std::string(what) + ": tensor count mismatch");
    }
    auto a = tensors.begin();
    auto b = other.tensors.begin();
    for (; a != tensors.end(); ++a, ++b) {
      if (a->first != b->first) {
        throw ContractError(std::string(what) + ": name mismatch '" + a->first + "' vs '" + b->first + "'");
      }
      if (a->second.rows() != b->second.rows() || a->second.cols() != b->second.cols()) {
        throw ContractError(std::string(what) + ": shape mismatch for '" + a->first + "'");
      }
    }
  }
};

// Parameter handles after uploading a tree onto a tape.
template <typename S>
struct VarMap {
  std::map<std::string, ad::Var<S>> vars;

  ad::Var<S> at(const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw ContractError("unknown parameter var: " + name);
    return it->second;
  }
};

template <typename S>
VarMap<S> upload(ad::Tape<S>& tape, const ParamTree<S>& params, bool needs_grad = true) {
  VarMap<S> out;
  for (const auto& [name, tensor] : params.tensors) {
    out.vars.emplace(name, tape.leaf(tensor, needs_grad));
  }
  return out;
}

template <typename S>
ParamTree<S> collect_grads(ad::Tape<S>& tape, const VarMap<S>& vars) {
  ParamTree<S> grads;
  for (const auto& [name, var] : vars.vars) grads.tensors.emplace(name, tape.grad_of(var));
  return grads;
}

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

template <typename S>
Matrix<S> uniform_init(Eigen::Index rows, Eigen::Index cols, double limit, Rng rng) {
  Matrix<S> m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = static_cast<S>(rng.uniform(-limit, limit));
  }
  return m;
}

template <typename S>
Matrix<S> glorot_init(Eigen::Index fan_in, Eigen::Index fan_out, Rng rng) {
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform_init<S>(fan_in, fan_out, limit, rng);
}

template <typename S>
Matrix<S> normal_init(Eigen::Index rows, Eigen::Index cols, double sd, Rng rng) {
  Matrix<S> m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = static_cast<S>(rng.normal(0.0, sd));
  }
  return m;
}

// Per-tensor init stream: independent of insertion order and of every other
// tensor, so adding a parameter never reshuffles existing ones.
inline Rng init_stream(std::uint64_t seed, const std::string& name) {
  return Rng(seed).fork(fnv1a(name), 0x1217ull);
}

// ---------------------------------------------------------------------------
// AdamW (decoupled weight decay, bias-corrected moments)
// ---------------------------------------------------------------------------

template <typename S>
struct AdamW {
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
  S weight_decay = S(0);

  ParamTree<S> m;
  ParamTree<S> v;
  std::int64_t step = 0;

  void init(const ParamTree<S>& params) {
    m.tensors.clear();
    v.tensors.clear();
    for (const auto& [name, tensor] : params.tensors) {
      m.tensors.emplace(name, Matrix<S>::Zero(tensor.rows(), tensor.cols()));
      v.tensors.emplace(name, Matrix<S>::Zero(tensor.rows(), tensor.cols()));
    }
    step = 0;
  }

  void update(ParamTree<S>& params, const ParamTree<S>& grads, S lr) {
    params.check_congruent(grads, "adamw update");
    params.check_congruent(m, "adamw state");
    ++step;
    const S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta1), static_cast<double>(step)));
    const S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta2), static_cast<double>(step)));
    auto gi = grads.tensors.begin();
    auto mi = m.tensors.begin();
    auto vi = v.tensors.begin();
    for (auto pi = params.tensors.begin(); pi != params.tensors.end(); ++pi, ++gi, ++mi, ++vi) {
      const Matrix<S>& g = gi->second;
      Matrix<S>& mm = mi->second;
      Matrix<S>& vv = vi->second;
      Matrix<S>& p = pi->second;
      mm = beta1 * mm + (S(1) - beta1) * g;
      vv = beta2 * vv + (S(1) - beta2) * g.cwiseProduct(g);
      Matrix<S> mhat = mm / bc1;
      Matrix<S> vhat = vv / bc2;
      // Decay applies to the parameter directly, never through the moments.
      p.array() -= lr * (mhat.array() / (vhat.array().sqrt() + eps) + weight_decay * p.array());
    }
  }
};

// ---------------------------------------------------------------------------
// learning-rate schedule: linear warmup from base*start_factor, then
// exponential decay by gamma per epoch (or per step).
// ---------------------------------------------------------------------------

struct LrSchedule {
  double base_lr = 1e-3;
  std::int64_t warmup_steps = 1000;
  double start_factor = 0.5;
  double gamma = 0.995;
  bool per_step_decay = false;
  std::int64_t steps_per_epoch = 1;  // locates the epoch in which warmup ends

  void validate() const {
    if (base_lr <= 0) throw ConfigError("optimizer.lr must be positive");
    if (start_factor <= 0 || start_factor > 1) throw ConfigError("optimizer.start_factor must be in (0, 1]");
    if (gamma <= 0 || gamma > 1) throw ConfigError("optimizer.gamma must be in (0, 1]");
    if (warmup_steps < 0) throw ConfigError("optimizer.warmup_steps must be >= 0");
    if (steps_per_epoch < 1) throw ConfigError("steps_per_epoch must be >= 1");
  }
};

inline double lr_at(const LrSchedule& s, std::int64_t step, std::int64_t epoch) {
  if (step < 0) throw ContractError("lr_at: step must be >= 0");
  if (s.warmup_steps > 0 && step < s.warmup_steps) {
    double frac = static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    return s.base_lr * (s.start_factor + (1.0 - s.start_factor) * frac);
  }
  std::int64_t units;
  if (s.per_step_decay) {
    units = step - s.warmup_steps;
  } else {
    std::int64_t warmup_epoch = s.warmup_steps / std::max<std::int64_t>(1, s.steps_per_epoch);
    units = std::max<std::int64_t>(0, epoch - warmup_epoch);
  }
  return s.base_lr * std::pow(s.gamma, static_cast<double>(units));
}

// ---------------------------------------------------------------------------
// value_and_grad
// ---------------------------------------------------------------------------

// Runs `build(tape, vars) -> scalar Var` and returns (loss, gradient tree).
// Non-finite losses or gradients raise NumericError naming the offending
// parameter.
template <typename S, typename BuildFn>
std::pair<S, ParamTree<S>> value_and_grad(BuildFn&& build, const ParamTree<S>& params) {
  ad::Tape<S> tape;
  VarMap<S> vars = upload(tape, params, true);
  ad::Var<S> loss = build(tape, vars);
  S value = ad::scalar_value(loss);
  if (!std::isfinite(static_cast<double>(value))) {
    throw NumericError("non-finite loss value");
  }
  tape.backward(loss);
  ParamTree<S> grads = collect_grads(tape, vars);
  for (const auto& [name, g] : grads.tensors) {
    if (!g.allFinite()) throw NumericError("non-finite gradient for parameter '" + name + "'");
  }
  return {value, std::move(grads)};
}

}  // namespace wbm::nn
