#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ctfm/cost.hpp"
#include "ctfm/error.hpp"
#include "ctfm/tensor.hpp"

namespace ctfm {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

inline std::string join_path(const std::string& prefix, const std::string& local) {
  if (prefix.empty()) return local;
  if (local.empty()) return prefix;
  return prefix + "." + local;
}

/// A node of the layer tree: owns named weight tensors (parameters),
/// non-trainable state (buffers, e.g. batchnorm running statistics) and
/// child modules. Every module is addressed by its dotted path, e.g.
/// "encoder.stage2.block1.mobile.dw.conv".
///
/// Modules are pinned in memory (children are referenced by pointer), so they
/// are neither copyable nor movable; build them behind unique_ptr.
template <typename T>
class Module {
 public:
  explicit Module(std::string name) : name_(std::move(name)) {}
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  const std::string& name() const { return name_; }

  /// Single-input forward. Multi-input blocks expose their own signature.
  virtual Tensor<T> forward(const Tensor<T>& /*x*/) {
    fail(ErrorKind::InvalidParameter, name_ + ": not a single-input layer");
  }

  /// Shape propagation with cost accounting; appends rows to `report` and
  /// returns the output shape. Never touches weight values.
  virtual Shape trace(const Shape& /*in*/, CostReport& /*report*/) const {
    fail(ErrorKind::InvalidParameter, name_ + ": cannot be traced from a single input shape");
  }

  /// Unique parameters of this subtree in registration order.
  std::vector<NamedTensor<T>> parameters() const {
    std::vector<NamedTensor<T>> out;
    std::unordered_set<const void*> seen;
    collect(out, seen, /*params=*/true, /*buffers=*/false);
    return out;
  }

  std::vector<NamedTensor<T>> buffers() const {
    std::vector<NamedTensor<T>> out;
    std::unordered_set<const void*> seen;
    collect(out, seen, false, true);
    return out;
  }

  /// Parameters and buffers: everything a checkpoint has to carry.
  std::vector<NamedTensor<T>> state() const {
    std::vector<NamedTensor<T>> out;
    std::unordered_set<const void*> seen;
    collect(out, seen, true, true);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& p : parameters()) total += p.tensor.numel();
    return total;
  }

  std::size_t own_parameter_count() const {
    std::size_t total = 0;
    for (const auto& p : params_) total += p.tensor.numel();
    return total;
  }

  const std::vector<NamedTensor<T>>& own_parameters() const { return params_; }
  const std::vector<Module*>& children() const { return children_; }

  void train(bool on = true) {
    training_ = on;
    for (auto* child : children_) child->train(on);
  }
  void eval() { train(false); }
  bool training() const { return training_; }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }

 protected:
  Tensor<T> add_parameter(const std::string& local, Tensor<T> tensor) {
    tensor.set_requires_grad(true);
    params_.push_back(NamedTensor<T>{join_path(name_, local), tensor});
    return tensor;
  }

  Tensor<T> add_buffer(const std::string& local, Tensor<T> tensor) {
    buffers_.push_back(NamedTensor<T>{join_path(name_, local), tensor});
    return tensor;
  }

  template <typename M, typename... Args>
  M& add_module(const std::string& local, Args&&... args) {
    auto module = std::make_unique<M>(join_path(name_, local), std::forward<Args>(args)...);
    M& ref = *module;
    children_.push_back(&ref);
    owned_.push_back(std::move(module));
    return ref;
  }

  /// Parameters of this module (not children) not yet counted by `report`.
  std::uint64_t claim_own_parameters(CostReport& report) const {
    std::uint64_t total = 0;
    for (const auto& p : params_)
      if (report.claim(p.tensor.id())) total += p.tensor.numel();
    return total;
  }

 private:
  void collect(std::vector<NamedTensor<T>>& out, std::unordered_set<const void*>& seen,
               bool params, bool buffers) const {
    if (params)
      for (const auto& p : params_)
        if (seen.insert(p.tensor.id()).second) out.push_back(p);
    if (buffers)
      for (const auto& b : buffers_)
        if (seen.insert(b.tensor.id()).second) out.push_back(b);
    for (const auto* child : children_) child->collect(out, seen, params, buffers);
  }

  std::string name_;
  bool training_ = true;
  std::vector<NamedTensor<T>> params_;
  std::vector<NamedTensor<T>> buffers_;
  std::vector<Module*> children_;
  std::vector<std::unique_ptr<Module>> owned_;
};

/// Runs children in registration order.
template <typename T>
class Sequential : public Module<T> {
 public:
  explicit Sequential(std::string name) : Module<T>(std::move(name)) {}

  template <typename M, typename... Args>
  M& append(const std::string& local, Args&&... args) {
    return this->template add_module<M>(local, std::forward<Args>(args)...);
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    Tensor<T> y = x;
    for (auto* child : this->children()) y = child->forward(y);
    return y;
  }

  Shape trace(const Shape& in, CostReport& report) const override {
    Shape s = in;
    for (const auto* child : this->children()) s = child->trace(s, report);
    return s;
  }
};

/// Cost of one forward pass of `model` at `input_shape`.
template <typename T>
CostReport cost(const Module<T>& model, const Shape& input_shape) {
  CostReport report;
  model.trace(input_shape, report);
  return report;
}

}  // namespace ctfm
