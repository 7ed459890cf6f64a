#pragma once

// Parameter storage, tape binding and the Adam optimizer.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vfd/autograd.hpp"
#include "vfd/errors.hpp"
#include "vfd/rng.hpp"
#include "vfd/tensor.hpp"

namespace vfd {

// Named tensors in a fixed (lexicographic) order, so iteration and
// serialization are deterministic.
template <typename T>
class ParamSet {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  void add(const std::string& name, Tensor<T> value) {
    if (!tensors_.emplace(name, std::move(value)).second) {
      throw ShapeMismatch("duplicate parameter '" + name + "'");
    }
  }

  const Tensor<T>& at(const std::string& name) const { return find(name)->second; }
  Tensor<T>& at(const std::string& name) { return const_cast<Tensor<T>&>(std::as_const(*this).at(name)); }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  std::size_t size() const noexcept { return tensors_.size(); }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.numel();
    return n;
  }

  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& [name, t] : tensors_) out.add(name, t.template cast<U>());
    return out;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) { return a.tensors_ == b.tensors_; }

 private:
  typename Map::const_iterator find(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ShapeMismatch("unknown parameter '" + name + "'");
    return it;
  }

  Map tensors_;
};

// Lazily places parameters on a tape as leaves, once per name.
template <typename T>
class Binder {
 public:
  Binder(Tape<T>& tape, const ParamSet<T>& params, bool trainable = true)
      : tape_(&tape), params_(&params), trainable_(trainable) {}

  Var<T> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    Var<T> v = tape_->leaf(params_->at(name), trainable_);
    bound_.emplace(name, v);
    return v;
  }

  // Uses `v` for `name` instead of the stored tensor.
  void bind(const std::string& name, Var<T> v) {
    if (params_->at(name).shape() != v.shape()) throw ShapeMismatch("bind: shape differs for '" + name + "'");
    bound_.insert_or_assign(name, v);
  }

  Tape<T>& tape() const { return *tape_; }
  const ParamSet<T>& params() const { return *params_; }

  // Gradients of the last backward() for every bound parameter.
  std::map<std::string, Tensor<T>> grads() const {
    std::map<std::string, Tensor<T>> out;
    for (const auto& [name, v] : bound_) out.emplace(name, tape_->grad(v));
    return out;
  }

 private:
  Tape<T>* tape_;
  const ParamSet<T>* params_;
  bool trainable_;
  std::map<std::string, Var<T>> bound_;
};

// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for conv/linear layers.
template <typename T>
Tensor<T> init_fan_in(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
Tensor<T> init_normal(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(stddev * rng.normal());
  return t;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  const AdamConfig& config() const noexcept { return cfg_; }
  std::uint64_t steps() const noexcept { return t_; }
  const ParamSet<T>& first_moment() const noexcept { return m_; }
  const ParamSet<T>& second_moment() const noexcept { return v_; }

  void restore(ParamSet<T> m, ParamSet<T> v, std::uint64_t t) {
    m_ = std::move(m);
    v_ = std::move(v);
    t_ = t;
  }

  // Parameters without a gradient entry are left untouched.
  void step(ParamSet<T>& params, const std::map<std::string, Tensor<T>>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
      Tensor<T>& p = params.at(name);
      if (!m_.contains(name)) {
        m_.add(name, Tensor<T>(p.shape()));
        v_.add(name, Tensor<T>(p.shape()));
      }
      Tensor<T>& m = m_.at(name);
      Tensor<T>& v = v_.at(name);
      for (std::size_t i = 0; i < p.numel(); ++i) {
        m[i] = static_cast<T>(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i]);
        v[i] = static_cast<T>(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i]);
        const double mh = m[i] / c1;
        const double vh = v[i] / c2;
        p[i] = static_cast<T>(p[i] - cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
  }

 private:
  AdamConfig cfg_;
  ParamSet<T> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace vfd
