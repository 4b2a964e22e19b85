#pragma once

#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ctfm/error.hpp"
#include "ctfm/tensor.hpp"

namespace ctfm {

/// Reverse-mode recording of primitive applications.
///
/// Ops append a node whenever a tape is active on the calling thread and at
/// least one input requires a gradient. Nodes are appended in execution order,
/// so the list is already topologically sorted and backward() is a single
/// reverse sweep visiting each node once.
template <typename T>
class Tape {
 public:
  /// Receives the output gradient and accumulates into the inputs' grads.
  using BackwardFn = std::function<void(std::span<const T>)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::vector<Tensor<T>> inputs, Tensor<T> output, BackwardFn backward) {
    require(!consumed_, ErrorKind::Autograd,
            "tape: recording after backward(); call reset() first");
    nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(backward)});
  }

  void backward(Tensor<T> loss) {
    require(!consumed_, ErrorKind::Autograd,
            "backward: tape already consumed; call reset() before another backward");
    require(loss.defined() && loss.numel() == 1, ErrorKind::Autograd,
            "backward: loss must be a scalar, got shape " +
                (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
    require(loss.requires_grad(), ErrorKind::Autograd,
            "backward: loss is detached from the tape (no input requires grad)");

    consumed_ = true;
    loss.ensure_grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!it->output.has_grad()) continue;
      it->backward(it->output.grad());
    }
    // Inputs that sit on the tape but received no signal still get a (zero) grad.
    for (auto& node : nodes_)
      for (auto& input : node.inputs)
        if (input.requires_grad()) input.ensure_grad();
  }

  /// Drop every recorded node and allow recording again.
  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Node {
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

template <typename T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

/// Installs a tape on the current thread for the lifetime of the scope.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(active_tape<T>()) { active_tape<T>() = &tape; }
  ~TapeScope() { active_tape<T>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording, e.g. for evaluation inside a training step.
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(active_tape<T>()) { active_tape<T>() = nullptr; }
  ~NoGradScope() { active_tape<T>() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Backward pass on the thread's active tape.
template <typename T>
void backward(const Tensor<T>& loss) {
  Tape<T>* tape = active_tape<T>();
  require(tape != nullptr, ErrorKind::Autograd, "backward: no active tape on this thread");
  tape->backward(loss);
}

namespace detail {

/// Hook an op's output into the active tape when any input needs a gradient.
/// `fn` is called with the output gradient during the reverse sweep.
template <typename T, typename Fn>
void record(std::vector<Tensor<T>> inputs, Tensor<T>& output, Fn&& fn) {
  Tape<T>* tape = active_tape<T>();
  if (tape == nullptr) return;
  bool any = false;
  for (const auto& input : inputs) any = any || input.requires_grad();
  if (!any) return;
  output.set_requires_grad(true);
  tape->record(std::move(inputs), output, std::forward<Fn>(fn));
}

/// Gradient buffer of `t` if it is tracked. Tensors are handles, so a const
/// copy captured by a backward closure still addresses the shared storage.
template <typename T>
inline T* grad_sink(const Tensor<T>& t) {
  return t.requires_grad() ? const_cast<Tensor<T>&>(t).ensure_grad().data() : nullptr;
}

}  // namespace detail

}  // namespace ctfm
