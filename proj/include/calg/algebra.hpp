#pragma once

// Algebra of classifiers.
//
//   g_and(a, b) = W2 · LeakyReLU(W1 · [a; b] + b1) + b2     (learned)
//   g_not(w)    = −w                                          (analytic)
//   g_or(a, b)  = g_not(g_and(g_not(a), g_not(b)))            (De Morgan)
//
// compose() maps an expression to a classifier by walking its tree in
// post-order; compose_backward() is the matching reverse-mode pass. The net
// parameters are shared by every conjunction in the tree, so their gradient
// contributions accumulate.

#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "calg/errors.hpp"
#include "calg/exprlang.hpp"
#include "calg/numcore.hpp"
#include "calg/primitives.hpp"

namespace calg {

struct CompositionNet {
  std::size_t dim = 0;     // classifier length D+1
  std::size_t hidden = 0;  // round(1.5 · dim)
  double slope = 0.1;
  Matrix w1;  // hidden × 2·dim
  Vector b1;  // hidden
  Matrix w2;  // dim × hidden
  Vector b2;  // dim

  static std::size_t hidden_for(std::size_t dim) {
    return static_cast<std::size_t>(std::llround(1.5 * static_cast<double>(dim)));
  }

  static CompositionNet zeros(std::size_t dim, double slope = 0.1) {
    if (!(slope > 0.0 && slope < 1.0)) throw Error(ErrorCode::Usage, "slope must be in (0,1)");
    CompositionNet net;
    net.dim = dim;
    net.hidden = hidden_for(dim);
    net.slope = slope;
    net.w1 = Matrix(net.hidden, 2 * dim);
    net.b1 = Vector(net.hidden);
    net.w2 = Matrix(dim, net.hidden);
    net.b2 = Vector(dim);
    return net;
  }

  /// Kaiming-uniform fan-in initialization for the weights, zero biases.
  static CompositionNet kaiming(std::size_t dim, RngStream& rng, double slope = 0.1) {
    CompositionNet net = zeros(dim, slope);
    const double gain = std::sqrt(2.0 / (1.0 + slope * slope));
    const double bound1 = gain * std::sqrt(3.0 / static_cast<double>(2 * dim));
    const double bound2 = gain * std::sqrt(3.0 / static_cast<double>(net.hidden));
    for (double& v : net.w1.span()) v = rng.uniform(-bound1, bound1);
    for (double& v : net.w2.span()) v = rng.uniform(-bound2, bound2);
    return net;
  }

  CompositionNet zeros_like() const { return zeros(dim, slope); }

  std::size_t parameter_count() const { return w1.size() + b1.size() + w2.size() + b2.size(); }

  /// Parameters in fixed order W1, b1, W2, b2.
  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    out.insert(out.end(), w1.span().begin(), w1.span().end());
    out.insert(out.end(), b1.begin(), b1.end());
    out.insert(out.end(), w2.span().begin(), w2.span().end());
    out.insert(out.end(), b2.begin(), b2.end());
    return out;
  }

  void assign(std::span<const double> flat) {
    detail::require_shape(flat.size() == parameter_count(), "net assign", flat.size(),
                          parameter_count());
    auto it = flat.begin();
    for (auto block : parameter_blocks()) {
      std::copy(it, it + static_cast<std::ptrdiff_t>(block.size()), block.begin());
      it += static_cast<std::ptrdiff_t>(block.size());
    }
  }

  /// Views of W1, b1, W2, b2 in serialization order.
  std::vector<std::span<double>> parameter_blocks() {
    return {w1.span(), b1.span(), w2.span(), b2.span()};
  }
  std::vector<std::span<const double>> parameter_blocks() const {
    return {w1.span(), b1.span(), w2.span(), b2.span()};
  }

  bool finite() const {
    for (auto block : parameter_blocks()) {
      if (!all_finite(block)) return false;
    }
    return true;
  }

  bool operator==(const CompositionNet& o) const {
    return dim == o.dim && hidden == o.hidden && slope == o.slope && w1 == o.w1 &&
           b1 == o.b1 && w2 == o.w2 && b2 == o.b2;
  }
};

/// Conjunction network plus the optional pieces used for ablations: a
/// separately learned disjunction network (otherwise g_or is derived) and
/// unit-norm rescaling of composed classifiers before they are re-composed.
struct NeuralAlgebra {
  CompositionNet conj;
  std::optional<CompositionNet> disj;
  bool unit_norm = false;

  static NeuralAlgebra init(std::size_t classifier_dim, RngStream& rng, double slope = 0.1,
                            bool learn_disjunction = false) {
    NeuralAlgebra a;
    a.conj = CompositionNet::kaiming(classifier_dim, rng, slope);
    if (learn_disjunction) a.disj = CompositionNet::kaiming(classifier_dim, rng, slope);
    return a;
  }

  NeuralAlgebra zeros_like() const {
    NeuralAlgebra g;
    g.conj = conj.zeros_like();
    if (disj) g.disj = disj->zeros_like();
    g.unit_norm = unit_norm;
    return g;
  }

  std::size_t classifier_dim() const { return conj.dim; }

  std::vector<double> flatten() const {
    auto out = conj.flatten();
    if (disj) {
      auto d = disj->flatten();
      out.insert(out.end(), d.begin(), d.end());
    }
    return out;
  }

  void assign(std::span<const double> flat) {
    conj.assign(flat.first(conj.parameter_count()));
    if (disj) disj->assign(flat.subspan(conj.parameter_count()));
  }

  std::size_t parameter_count() const {
    return conj.parameter_count() + (disj ? disj->parameter_count() : 0);
  }

  bool operator==(const NeuralAlgebra&) const = default;
};

// ---------------------------------------------------------------------------
// Single-step composition functions

struct NetActivations {
  Vector input;   // [a; b]
  Vector pre;     // W1·input + b1
  Vector hidden;  // LeakyReLU(pre)
  Vector output;  // W2·hidden + b2
};

inline NetActivations net_forward(const CompositionNet& net, std::span<const double> wa,
                                  std::span<const double> wb) {
  detail::require_shape(wa.size() == net.dim, "g_and left operand", wa.size(), net.dim);
  detail::require_shape(wb.size() == net.dim, "g_and right operand", wb.size(), net.dim);
  NetActivations act;
  act.input = concat(wa, wb);
  act.pre = gemv(net.w1, act.input);
  axpy_inplace(1.0, net.b1, act.pre);
  act.hidden = leaky_relu(act.pre, net.slope);
  act.output = gemv(net.w2, act.hidden);
  axpy_inplace(1.0, net.b2, act.output);
  return act;
}

/// Accumulates parameter gradients into `grad` and returns d/d[a; b].
inline Vector net_backward(const CompositionNet& net, const NetActivations& act,
                           std::span<const double> upstream, CompositionNet& grad) {
  axpy_inplace(1.0, upstream, grad.b2);
  add_outer(grad.w2, 1.0, upstream, act.hidden);
  Vector g_hidden = gemv_transposed(net.w2, upstream);
  const Vector dact = leaky_relu_grad(act.pre, net.slope);
  for (std::size_t i = 0; i < g_hidden.size(); ++i) g_hidden[i] *= dact[i];
  axpy_inplace(1.0, g_hidden, grad.b1);
  add_outer(grad.w1, 1.0, g_hidden, act.input);
  return gemv_transposed(net.w1, g_hidden);
}

inline Classifier g_and(const CompositionNet& net, const Classifier& wa, const Classifier& wb) {
  return {net_forward(net, wa.weights, wb.weights).output, ClassifierSource::Composed};
}

inline Classifier g_not(const Classifier& w) {
  Classifier out{scaled(w.weights, -1.0), w.source};
  return out;
}

inline Classifier g_or(const CompositionNet& net, const Classifier& wa, const Classifier& wb) {
  return g_not(g_and(net, g_not(wa), g_not(wb)));
}

inline double score(const Classifier& w, std::span<const double> features) {
  return decision_value(w.weights, features);
}

/// ‖g(a,b) − g(b,a)‖ / ‖g(a,b)‖: how far the learned conjunction is from
/// being operand-order invariant.
inline double symmetry_statistic(const CompositionNet& net, const Classifier& a,
                                 const Classifier& b) {
  const auto ab = g_and(net, a, b);
  const auto ba = g_and(net, b, a);
  const double denom = norm(ab.weights);
  double diff = 0.0;
  for (std::size_t i = 0; i < ab.weights.size(); ++i) {
    diff += (ab.weights[i] - ba.weights[i]) * (ab.weights[i] - ba.weights[i]);
  }
  return denom > 0 ? std::sqrt(diff) / denom : 0.0;
}

// ---------------------------------------------------------------------------
// Recursive composition

struct TraceNode {
  Op op = Op::Primitive;
  std::string name;  // primitives only
  int left = -1;     // child (Not) or left operand
  int right = -1;
  Vector output;  // classifier produced at this node
  // Binary nodes only.
  bool learned_or = false;  // applied the separate disjunction net
  NetActivations act;
  bool normalized = false;
  double raw_norm = 0.0;  // norm before unit rescaling
};

/// Per-node record of one compose() call, in post-order.
struct CompositionTrace {
  std::vector<TraceNode> nodes;
  std::size_t dim = 0;
  std::size_t hidden = 0;
  bool has_disjunction_net = false;

  /// Number of conjunction-net applications (including those inside g_or).
  std::size_t conjunction_applications() const {
    std::size_t n = 0;
    for (const auto& node : nodes) {
      if ((node.op == Op::And || node.op == Op::Or) && !node.learned_or) ++n;
    }
    return n;
  }
  std::size_t net_applications() const {
    std::size_t n = 0;
    for (const auto& node : nodes) n += (node.op == Op::And || node.op == Op::Or) ? 1 : 0;
    return n;
  }
};

struct Composition {
  Classifier classifier;
  CompositionTrace trace;
};

namespace detail {

inline int compose_node(const NeuralAlgebra& alg, const PrimitiveBank& bank, const Expression& e,
                        bool feeds_binary, CompositionTrace& trace) {
  TraceNode node;
  node.op = e.op();
  switch (e.op()) {
    case Op::Primitive: {
      node.name = e.name();
      node.output = bank.at(e.name()).weights;
      detail::require_shape(node.output.size() == alg.classifier_dim(), "bank classifier",
                            node.output.size(), alg.classifier_dim());
      break;
    }
    case Op::Not: {
      node.left = compose_node(alg, bank, e.child(), feeds_binary, trace);
      node.output = scaled(trace.nodes[static_cast<std::size_t>(node.left)].output, -1.0);
      break;
    }
    case Op::And:
    case Op::Or: {
      node.left = compose_node(alg, bank, e.left(), true, trace);
      node.right = compose_node(alg, bank, e.right(), true, trace);
      const Vector& a = trace.nodes[static_cast<std::size_t>(node.left)].output;
      const Vector& b = trace.nodes[static_cast<std::size_t>(node.right)].output;
      if (e.op() == Op::And) {
        node.act = net_forward(alg.conj, a, b);
        node.output = node.act.output;
      } else if (alg.disj) {
        node.learned_or = true;
        node.act = net_forward(*alg.disj, a, b);
        node.output = node.act.output;
      } else {
        node.act = net_forward(alg.conj, scaled(a, -1.0), scaled(b, -1.0));
        node.output = scaled(node.act.output, -1.0);
      }
      if (alg.unit_norm && feeds_binary) {
        node.raw_norm = norm(node.output);
        if (node.raw_norm > 0.0) {
          node.normalized = true;
          for (double& v : node.output) v /= node.raw_norm;
        }
      }
      break;
    }
  }
  trace.nodes.push_back(std::move(node));
  return static_cast<int>(trace.nodes.size() - 1);
}

}  // namespace detail

inline Composition compose(const NeuralAlgebra& alg, const PrimitiveBank& bank,
                           const Expression& expr) {
  for (const auto& name : expr.primitives()) {
    if (!bank.find(name)) throw Error(ErrorCode::UnknownPrimitive, "'" + name + "' not in bank");
  }
  Composition out;
  out.trace.dim = alg.conj.dim;
  out.trace.hidden = alg.conj.hidden;
  out.trace.has_disjunction_net = alg.disj.has_value();
  out.trace.nodes.reserve(expr.node_count());
  detail::compose_node(alg, bank, expr, false, out.trace);
  const auto& root = out.trace.nodes.back();
  out.classifier = {root.output, root.op == Op::Primitive ? bank.at(root.name).source
                                                          : ClassifierSource::Composed};
  return out;
}

inline Composition compose(const CompositionNet& net, const PrimitiveBank& bank,
                           const Expression& expr) {
  NeuralAlgebra alg;
  alg.conj = net;
  return compose(alg, bank, expr);
}

struct CompositionGrad {
  NeuralAlgebra params;                       // same shapes as the algebra
  std::map<std::string, Vector> leaves;       // d/d(primitive classifier)
};

/// Reverse-mode pass for a trace produced by compose() with the same algebra.
/// Accumulates into `out` (which must be shaped like `alg`).
inline void compose_backward_into(const NeuralAlgebra& alg, const CompositionTrace& trace,
                                  std::span<const double> grad_output, CompositionGrad& out) {
  if (trace.nodes.empty() || trace.dim != alg.conj.dim || trace.hidden != alg.conj.hidden ||
      trace.has_disjunction_net != alg.disj.has_value()) {
    throw Error(ErrorCode::TraceMismatch, "trace was not produced by this algebra");
  }
  detail::require_shape(grad_output.size() == trace.dim, "compose_backward", grad_output.size(),
                        trace.dim);
  std::vector<Vector> grads(trace.nodes.size());
  grads.back() = Vector(grad_output);
  for (std::size_t k = trace.nodes.size(); k-- > 0;) {
    const TraceNode& node = trace.nodes[k];
    Vector& g = grads[k];
    if (g.empty()) continue;  // unreachable for a well-formed trace
    auto push = [&grads](int idx, std::span<const double> v, double sign) {
      Vector& dst = grads[static_cast<std::size_t>(idx)];
      if (dst.empty()) dst = Vector(v.size());
      axpy_inplace(sign, v, dst);
    };
    switch (node.op) {
      case Op::Primitive: {
        auto [it, inserted] = out.leaves.try_emplace(node.name, Vector(g.size()));
        axpy_inplace(1.0, g, it->second);
        break;
      }
      case Op::Not:
        push(node.left, g, -1.0);
        break;
      case Op::And:
      case Op::Or: {
        Vector upstream = g;
        if (node.normalized) {
          // y = v/‖v‖  ⇒  dv = (dy − y (y·dy)) / ‖v‖
          const double proj = dot(node.output, upstream);
          for (std::size_t i = 0; i < upstream.size(); ++i) {
            upstream[i] = (upstream[i] - node.output[i] * proj) / node.raw_norm;
          }
        }
        const bool derived_or = node.op == Op::Or && !node.learned_or;
        const CompositionNet& net = node.learned_or ? *alg.disj : alg.conj;
        CompositionNet& gnet = node.learned_or ? *out.params.disj : out.params.conj;
        if (derived_or) {
          for (double& v : upstream) v = -v;
        }
        const Vector g_in = net_backward(net, node.act, upstream, gnet);
        const double sign = derived_or ? -1.0 : 1.0;
        const std::span<const double> gin(g_in.data(), g_in.size());
        push(node.left, gin.first(trace.dim), sign);
        push(node.right, gin.subspan(trace.dim), sign);
        break;
      }
    }
  }
}

inline CompositionGrad compose_backward(const NeuralAlgebra& alg, const CompositionTrace& trace,
                                        std::span<const double> grad_output) {
  CompositionGrad out{alg.zeros_like(), {}};
  compose_backward_into(alg, trace, grad_output, out);
  return out;
}

}  // namespace calg
