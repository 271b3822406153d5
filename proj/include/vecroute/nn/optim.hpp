#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vecroute/errors.hpp"
#include "vecroute/nn/graph.hpp"

namespace vecroute::nn {

// Adaptive-moment optimizer over a named subset of a ParamStore.
// Updates are skipped entirely for lr == 0 so parameters stay bit-identical.
template <class S>
class Adam {
 public:
  struct Config {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
  };

  Adam(ParamStore<S>& store, std::vector<std::string> names, Config cfg)
      : store_(&store), names_(std::move(names)), cfg_(cfg) {
    if (cfg_.lr < 0) throw ConfigError("adam: negative learning rate");
    for (const auto& n : names_) {
      const auto& p = store.at(n);
      moments_.emplace(n, Moments{Tensor<S>(p.value.shape()), Tensor<S>(p.value.shape())});
    }
  }

  // All parameters whose name starts with one of the prefixes.
  static Adam for_prefix(ParamStore<S>& store, const std::string& prefix, Config cfg) {
    std::vector<std::string> names;
    for (const auto& n : store.names())
      if (n.rfind(prefix, 0) == 0) names.push_back(n);
    if (names.empty()) throw NotFoundError("adam: no parameters under prefix '" + prefix + "'");
    return Adam(store, std::move(names), cfg);
  }

  long step() const { return step_; }
  const Config& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  // One update from the gradients currently held in the store. Gradients of
  // the covered parameters are cleared afterwards.
  void apply() {
    ++step_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double bias1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double bias2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (const auto& name : names_) {
      Param<S>& p = store_->at(name);
      Moments& mo = moments_.at(name);
      S* w = p.value.data();
      S* g = p.grad.data();
      S* m = mo.m.data();
      S* v = mo.v.data();
      const std::size_t n = p.value.size();
      for (std::size_t i = 0; i < n; ++i) {
        const double gi = static_cast<double>(g[i]);
        const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
        const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
        m[i] = static_cast<S>(mi);
        v[i] = static_cast<S>(vi);
        if (cfg_.lr != 0.0) {
          const double update = cfg_.lr * (mi / bias1) / (std::sqrt(vi / bias2) + cfg_.epsilon);
          w[i] = static_cast<S>(static_cast<double>(w[i]) - update);
        }
        g[i] = S(0);
      }
    }
  }

 private:
  struct Moments {
    Tensor<S> m, v;
  };

  ParamStore<S>* store_;
  std::vector<std::string> names_;
  Config cfg_;
  long step_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace vecroute::nn
