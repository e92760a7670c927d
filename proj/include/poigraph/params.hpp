#pragma once

// Named trainable parameter collection with deterministic iteration order,
// plus Adam and the parameter <-> tape bridge.

#include <map>
#include <string>
#include <vector>

#include "poigraph/rng.hpp"
#include "poigraph/tape.hpp"
#include "poigraph/tensor.hpp"

namespace poigraph {

template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool grad_populated = false;
  };

  void add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw ConfigError("parameter registered twice: " + name);
    index_[name] = entries_.size();
    Entry e;
    e.name = name;
    e.grad = Tensor<T>(value.shape());
    e.value = std::move(value);
    entries_.push_back(std::move(e));
  }

  // Scaled-uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
  void add_uniform(const std::string& name, Shape shape, int64_t fan_in, RngStream rng) {
    Tensor<T> t(shape);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    T* p = t.mut();
    for (int64_t i = 0; i < t.numel(); ++i) {
      p[i] = static_cast<T>(rng.uniform(-bound, bound));
    }
    add(name, std::move(t));
  }

  void add_zeros(const std::string& name, Shape shape) {
    add(name, Tensor<T>(std::move(shape)));
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }
  size_t size() const { return entries_.size(); }

  Entry& entry(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return entries_[it->second];
  }
  const Entry& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return entries_[it->second];
  }

  Tensor<T>& value(const std::string& name) { return entry(name).value; }
  const Tensor<T>& value(const std::string& name) const { return entry(name).value; }

  // Registration order, which is deterministic per model construction.
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, size_t> index_;
};

// Leaf handles for one forward/backward pass.
template <typename T>
class Lease {
 public:
  Lease(Tape<T>& tape, ParamStore<T>& params) : tape_(&tape), params_(&params) {
    for (auto& e : params.entries()) {
      vars_[e.name] = tape.leaf(e.value, true);
    }
  }

  Var operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ConfigError("parameter not leased: " + name);
    return it->second;
  }

  GruVars gru(const std::string& prefix) const {
    return GruVars{(*this)[prefix + ".wx"], (*this)[prefix + ".wh"], (*this)[prefix + ".b"]};
  }

  // Accumulates tape-side gradients back into the store.
  void collect() {
    for (auto& e : params_->entries()) {
      Var v = vars_.at(e.name);
      if (!tape_->requires_grad(v)) continue;
      const Tensor<T>& g = tape_->grad_if_any(v);
      if (g.numel() == 0) continue;  // parameter unused by this loss
      T* dst = e.grad.mut();
      const T* src = g.data();
      for (int64_t i = 0; i < g.numel(); ++i) dst[i] += src[i];
      e.grad_populated = true;
    }
  }

 private:
  Tape<T>* tape_;
  ParamStore<T>* params_;
  std::map<std::string, Var> vars_;
};

template <typename T>
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int64_t step = 0;
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
};

// One Adam update over every parameter; gradients are zeroed afterwards.
// Requires every parameter's gradient to have been populated since the last
// step.
template <typename T>
void adam_step(ParamStore<T>& params, AdamState<T>& state) {
  for (const auto& e : params.entries()) {
    if (!e.grad_populated) {
      throw TrainingStateError("adam_step: gradient missing for parameter '" + e.name + "'");
    }
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (auto& e : params.entries()) {
    auto mit = state.m.find(e.name);
    if (mit == state.m.end()) {
      mit = state.m.emplace(e.name, Tensor<T>(e.value.shape())).first;
      state.v.emplace(e.name, Tensor<T>(e.value.shape()));
    }
    Tensor<T>& m = mit->second;
    Tensor<T>& v = state.v.at(e.name);
    if (m.shape() != e.value.shape()) {
      throw TrainingStateError("adam_step: moment shape drifted for '" + e.name + "'");
    }
    T* pm = m.mut();
    T* pv = v.mut();
    T* pw = e.value.mut();
    T* pg = e.grad.mut();
    const int64_t n = e.value.numel();
    for (int64_t i = 0; i < n; ++i) {
      const double g = static_cast<double>(pg[i]);
      const double mi = state.beta1 * static_cast<double>(pm[i]) + (1.0 - state.beta1) * g;
      const double vi = state.beta2 * static_cast<double>(pv[i]) + (1.0 - state.beta2) * g * g;
      pm[i] = static_cast<T>(mi);
      pv[i] = static_cast<T>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      pw[i] = static_cast<T>(static_cast<double>(pw[i]) -
                             state.lr * mhat / (std::sqrt(vhat) + state.epsilon));
      pg[i] = T(0);
    }
    e.grad_populated = false;
  }
}

}  // namespace poigraph
