#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "openkd/autodiff.hpp"
#include "openkd/errors.hpp"
#include "openkd/tensor.hpp"

namespace openkd::nn {

// Parameter groups. Learning rates and trainability are assigned per group.
inline constexpr const char* kAdapterGroup = "adapter";
inline constexpr const char* kDecoderGroup = "decoder";
inline constexpr const char* kEncoderStageGroup = "encoder_stage";
inline constexpr const char* kFrozenGroup = "frozen";

struct Parameter {
  std::string name;
  std::string group;
  ad::Var var;
  bool trainable = true;
};

// Owns every named parameter of a model. Insertion order is stable, which
// makes checkpoints and checksums reproducible.
class ParameterStore {
 public:
  ad::Var add(const std::string& name, Tensor init, const std::string& group, bool trainable = true) {
    if (index_.count(name)) throw ConfigurationError("duplicate parameter name: " + name);
    index_[name] = params_.size();
    params_.push_back({name, group, ad::leaf(std::move(init), trainable), trainable});
    return params_.back().var;
  }

  const std::vector<Parameter>& all() const noexcept { return params_; }
  std::vector<Parameter>& all() noexcept { return params_; }

  const Parameter& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigurationError("unknown parameter: " + name);
    return params_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t count_scalars(bool trainable_only = false) const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (!trainable_only || p.trainable) n += p.var.value().size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  // Checksum over all parameters whose group matches (empty = every group).
  std::uint64_t checksum(const std::string& group = "") const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& p : params_)
      if (group.empty() || p.group == group) h = openkd::checksum(p.var.value(), h);
    return h;
  }

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

inline Tensor random_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

// y = x W + b applied to every row of [n x in] (or every cell of a grid).
class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, int in, int out, const std::string& group,
         std::mt19937_64& rng, double init_scale = 1.0, bool trainable = true)
      : in_(in), out_(out) {
    weight_ = store.add(name + ".weight",
                        random_normal({in, out}, init_scale / std::sqrt(static_cast<double>(in)), rng),
                        group, trainable);
    bias_ = store.add(name + ".bias", Tensor({out}, 0.0), group, trainable);
  }

  ad::Var operator()(const ad::Var& x) const {
    if (x.shape().back() != in_) {
      throw DimensionError("linear layer expects " + std::to_string(in_) + " features, got " +
                           shape_str(x.shape()));
    }
    const Shape s = x.shape();
    const int rows = static_cast<int>(x.value().size() / in_);
    auto y = ad::add_row_vector(ad::matmul(ad::reshape(x, {rows, in_}), weight_), bias_);
    Shape os = s;
    os.back() = out_;
    return ad::reshape(y, os);
  }

  const ad::Var& weight() const noexcept { return weight_; }
  const ad::Var& bias() const noexcept { return bias_; }
  int in_features() const noexcept { return in_; }
  int out_features() const noexcept { return out_; }

 private:
  int in_ = 0, out_ = 0;
  ad::Var weight_, bias_;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParameterStore& store, const std::string& name, int cin, int cout, int kernel,
         const std::string& group, std::mt19937_64& rng, double init_scale = 1.0, bool with_bias = true)
      : cin_(cin), cout_(cout) {
    const double fan_in = static_cast<double>(kernel * kernel * cin);
    weight_ = store.add(name + ".weight",
                        random_normal({kernel, kernel, cin, cout}, init_scale * std::sqrt(2.0 / fan_in), rng),
                        group);
    if (with_bias) bias_ = store.add(name + ".bias", Tensor({cout}, 0.0), group);
  }

  ad::Var operator()(const ad::Var& x) const { return ad::conv2d(x, weight_, bias_); }

  int in_channels() const noexcept { return cin_; }
  int out_channels() const noexcept { return cout_; }
  const ad::Var& weight() const noexcept { return weight_; }

 private:
  int cin_ = 0, cout_ = 0;
  ad::Var weight_, bias_;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::map<std::string, double> group_lr;  // missing group => not updated
};

// Adaptive-moment gradient descent. Only trainable parameters of groups with
// a configured learning rate move.
class Adam {
 public:
  explicit Adam(AdamOptions opts) : opts_(std::move(opts)) {}

  void step(ParameterStore& store) {
    ++t_;
    for (auto& p : store.all()) {
      if (!p.trainable) continue;
      auto lr_it = opts_.group_lr.find(p.group);
      if (lr_it == opts_.group_lr.end() || lr_it->second == 0.0) continue;
      const Tensor g = p.var.grad();
      auto& [m, v] = state_[p.name];
      if (m.size() != g.size()) {
        m = Tensor(g.shape(), 0.0);
        v = Tensor(g.shape(), 0.0);
      }
      const double b1t = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
      const double b2t = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
      Tensor& w = p.var.mutable_value();
      for (std::size_t i = 0; i < g.size(); ++i) {
        m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * g[i];
        v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * g[i] * g[i];
        w[i] -= lr_it->second * (m[i] / b1t) / (std::sqrt(v[i] / b2t) + opts_.eps);
      }
    }
  }

  long steps() const noexcept { return t_; }

 private:
  AdamOptions opts_;
  long t_ = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> state_;
};

}  // namespace openkd::nn
