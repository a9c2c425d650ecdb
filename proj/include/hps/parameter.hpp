#pragma once

#include <cstddef>
#include <deque>
#include <string>
#include <unordered_map>

#include "hps/autograd.hpp"

namespace hps {

enum class ParamGroup { backbone, head };

template <typename T>
struct Parameter {
  std::string name;
  Var<T> var;  // value + gradient; requires_grad mirrors `learnable`
  ParamGroup group = ParamGroup::head;
  int stage = -1;  // backbone stage index, -1 for head parameters
  bool learnable = true;

  Tensor<T>& value() { return var->value; }
  const Tensor<T>& value() const { return var->value; }
  Tensor<T>& gradient() { return var->grad_buffer(); }

  void set_learnable(bool on) {
    learnable = on;
    var->requires_grad = on;
  }
};

// Owns the parameters of a model. Addresses are stable (deque storage) so
// modules may keep references.
template <typename T>
class ParameterSet {
 public:
  Parameter<T>& add(const std::string& name, Tensor<T> init,
                    ParamGroup group = ParamGroup::head, int stage = -1) {
    if (index_.count(name)) {
      throw ConfigError("duplicate parameter name: " + name);
    }
    Parameter<T>& p = params_.emplace_back();
    p.name = name;
    p.var = make_var(std::move(init), true);
    p.group = group;
    p.stage = stage;
    index_[name] = params_.size() - 1;
    return p;
  }

  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  void zero_grad() {
    for (auto& p : params_) {
      if (!p.var->grad.empty()) p.var->grad.fill(T(0));
    }
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value().size();
    return n;
  }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }

 private:
  std::deque<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace hps
