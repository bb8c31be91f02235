#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "itx/tensor.hpp"

namespace itx {
namespace ad {

template <typename T>
class GraphT;

template <typename T>
using BackwardFn = std::function<void(GraphT<T>&, int32_t)>;

/// One recorded operation: its output value, the gradient buffer, parent
/// links and the rule that pushes the output gradient to the parents.
template <typename T>
struct Node {
  TensorT<T> value;
  TensorT<T> grad;  // allocated on first accumulation
  std::vector<int32_t> parents;
  BackwardFn<T> backward;
  bool needs_grad = false;
  std::string param_name;
};

/// Define-by-run tape. Nodes are appended in evaluation order, which is a
/// topological order, so reverse iteration implements backpropagation.
/// One tape per training step; tapes are not shared across threads.
template <typename T>
class GraphT {
public:
  using Id = int32_t;

  explicit GraphT(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }

  Id input(TensorT<T> v) {
    nodes_.push_back(Node<T>{std::move(v), {}, {}, nullptr, false, {}});
    return static_cast<Id>(nodes_.size() - 1);
  }

  Id param(const std::string& name, TensorT<T> v) {
    nodes_.push_back(Node<T>{std::move(v), {}, {}, nullptr, recording_, name});
    return static_cast<Id>(nodes_.size() - 1);
  }

  Id emit(TensorT<T> out, std::vector<Id> parents, BackwardFn<T> fn) {
    bool needs = false;
    if (recording_)
      for (Id p : parents)
        if (nodes_[p].needs_grad) needs = true;
    Node<T> n;
    n.value = std::move(out);
    if (needs) {
      n.parents = std::move(parents);
      n.backward = std::move(fn);
      n.needs_grad = true;
    }
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
  }

  const TensorT<T>& val(Id id) const { return nodes_[id].value; }
  bool needs_grad(Id id) const { return nodes_[id].needs_grad; }
  size_t size() const { return nodes_.size(); }

  TensorT<T>& grad(Id id) {
    Node<T>& n = nodes_[id];
    if (n.grad.empty() && n.value.size() > 0) n.grad = TensorT<T>(n.value.dims());
    return n.grad;
  }

  void accum(Id id, const TensorT<T>& g) {
    if (!nodes_[id].needs_grad) return;
    TensorT<T>& dst = grad(id);
    check_shape(dst.dims() == g.dims(), "gradient dims mismatch");
    for (int64_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }

  /// Backpropagates from a scalar loss; gradients land on every reachable
  /// parameter leaf. The gradient of the loss w.r.t. itself is 1.
  void backward(Id loss) {
    check_shape(nodes_[loss].value.size() == 1,
                "backward requires a scalar loss node");
    if (!nodes_[loss].needs_grad)
      throw std::runtime_error(
          "backward: loss was not produced by recorded operations");
    grad(loss)[0] = T(1);
    for (Id id = loss; id >= 0; --id) {
      Node<T>& n = nodes_[id];
      if (!n.needs_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, id);
    }
  }

  /// Parameter-name -> gradient map after backward().
  std::unordered_map<std::string, TensorT<T>> param_grads() {
    std::unordered_map<std::string, TensorT<T>> out;
    for (Node<T>& n : nodes_)
      if (!n.param_name.empty()) {
        if (n.grad.empty()) n.grad = TensorT<T>(n.value.dims());
        out.emplace(n.param_name, n.grad);
      }
    return out;
  }

private:
  std::vector<Node<T>> nodes_;
  bool recording_;
};

using Graph = GraphT<float>;
using Graphd = GraphT<double>;

/// Central-difference gradient check. `loss` re-evaluates the scalar
/// objective from the current contents of the parameter tensors;
/// `analytic` pairs each parameter tensor with its analytic gradient.
/// Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
template <typename T>
double finite_diff_check(
    const std::function<double()>& loss,
    const std::vector<std::pair<TensorT<T>*, const TensorT<T>*>>& analytic,
    T eps, int64_t samples_per_tensor = -1, uint64_t seed = 7) {
  check_config(eps > T(0), "finite_diff_check: eps must be positive");
  std::mt19937_64 rng(seed);
  double max_rel = 0.0;
  for (const auto& [valp, gradp] : analytic) {
    TensorT<T>& v = *valp;
    std::vector<int64_t> coords;
    if (samples_per_tensor <= 0 ||
        samples_per_tensor >= v.size()) {
      coords.resize(static_cast<size_t>(v.size()));
      for (int64_t i = 0; i < v.size(); ++i) coords[i] = i;
    } else {
      std::uniform_int_distribution<int64_t> pick(0, v.size() - 1);
      for (int64_t i = 0; i < samples_per_tensor; ++i) coords.push_back(pick(rng));
    }
    for (int64_t i : coords) {
      const T saved = v[i];
      v[i] = saved + eps;
      const double fp = loss();
      v[i] = saved - eps;
      const double fm = loss();
      v[i] = saved;
      const double numeric = (fp - fm) / (2.0 * static_cast<double>(eps));
      const double analytic_v = static_cast<double>((*gradp)[i]);
      const double denom =
          std::max({std::abs(analytic_v), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, std::abs(analytic_v - numeric) / denom);
    }
  }
  return max_rel;
}

}  // namespace ad
}  // namespace itx
