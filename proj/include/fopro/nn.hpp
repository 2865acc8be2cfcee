// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense layers with hand-written backward passes. Forward is const and
// records what backward needs in a caller-owned tape, so inference can run
// concurrently while backward accumulates into per-layer gradient buffers.

#include "fopro/core.hpp"

#include <string>
#include <utility>
#include <vector>

namespace fopro::nn {

enum class Activation { identity, relu, tanh };

inline void apply(Activation a, Matrix& x) {
  switch (a) {
    case Activation::identity: break;
    case Activation::relu: x = x.cwiseMax(0.0); break;
    case Activation::tanh: x = x.array().tanh().matrix(); break;
  }
}

// Derivative expressed through the activation output y.
inline void apply_derivative(Activation a, const Matrix& y, Matrix& grad) {
  switch (a) {
    case Activation::identity: break;
    case Activation::relu: grad = (y.array() > 0.0).select(grad, 0.0); break;
    case Activation::tanh: grad.array() *= (1.0 - y.array().square()); break;
  }
}

struct Linear {
  Matrix weight;  // out x in
  Matrix bias;    // 1 x out
  Matrix grad_weight;
  Matrix grad_bias;

  Linear() = default;
  Linear(int in, int out, Rng& rng)
      : weight(gaussian_matrix(out, in, 1.0 / std::sqrt(static_cast<double>(in)), rng)),
        bias(Matrix::Zero(1, out)),
        grad_weight(Matrix::Zero(out, in)),
        grad_bias(Matrix::Zero(1, out)) {}

  int in_features() const { return static_cast<int>(weight.cols()); }
  int out_features() const { return static_cast<int>(weight.rows()); }

  Matrix forward(const Matrix& x) const {
    Matrix y = x * weight.transpose();
    y.rowwise() += bias.row(0);
    return y;
  }

  Matrix backward(const Matrix& x, const Matrix& dy) {
    grad_weight.noalias() += dy.transpose() * x;
    grad_bias += dy.colwise().sum();
    return dy * weight;
  }
};

class Mlp {
 public:
  struct Tape {
    std::vector<Matrix> inputs;   // input to each layer
    std::vector<Matrix> outputs;  // post-activation output of each layer
  };

  Mlp() = default;

  // widths = {in, h1, ..., out}; `hidden` follows every layer but the last.
  Mlp(const std::vector<int>& widths, Activation hidden, Activation output, Rng& rng) : hidden_(hidden), output_(output) {
    require(widths.size() >= 2, "Mlp needs at least input and output widths");
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) layers_.emplace_back(widths[i], widths[i + 1], rng);
  }

  int in_features() const { return layers_.front().in_features(); }
  int out_features() const { return layers_.back().out_features(); }

  Matrix forward(const Matrix& x, Tape* tape = nullptr) const {
    if (x.cols() != in_features())
      throw DimensionError("Mlp: expected " + std::to_string(in_features()) + " input columns, got " + std::to_string(x.cols()));
    if (tape) {
      tape->inputs.clear();
      tape->outputs.clear();
    }
    Matrix h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (tape) tape->inputs.push_back(h);
      h = layers_[i].forward(h);
      apply(activation(i), h);
      if (tape) tape->outputs.push_back(h);
    }
    return h;
  }

  // Accumulates parameter gradients; returns the gradient w.r.t. the input.
  Matrix backward(const Tape& tape, Matrix grad) {
    for (std::size_t i = layers_.size(); i-- > 0;) {
      apply_derivative(activation(i), tape.outputs[i], grad);
      grad = layers_[i].backward(tape.inputs[i], grad);
    }
    return grad;
  }

  void zero_grad() {
    for (auto& l : layers_) {
      l.grad_weight.setZero();
      l.grad_bias.setZero();
    }
  }

  // f(name, value, grad)
  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      f(prefix + "." + std::to_string(i) + ".weight", layers_[i].weight, layers_[i].grad_weight);
      f(prefix + "." + std::to_string(i) + ".bias", layers_[i].bias, layers_[i].grad_bias);
    }
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

  std::vector<Linear>& layers() { return layers_; }
  const std::vector<Linear>& layers() const { return layers_; }

 private:
  Activation activation(std::size_t i) const { return i + 1 == layers_.size() ? output_ : hidden_; }

  std::vector<Linear> layers_;
  Activation hidden_ = Activation::relu;
  Activation output_ = Activation::identity;
};

inline Matrix softmax_rows(const Matrix& logits) {
  Matrix out = logits;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double m = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

inline RowVector log_softmax(const RowVector& logits) {
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return (logits.array() - lse).matrix();
}

// dL/dlogits from dL/dp for a row-wise softmax.
inline Matrix softmax_backward(const Matrix& probs, const Matrix& grad_probs) {
  Matrix out = probs.cwiseProduct(grad_probs);
  for (Eigen::Index r = 0; r < out.rows(); ++r) out.row(r) -= probs.row(r) * out.row(r).sum();
  return out;
}

inline Matrix l2_normalize_rows(const Matrix& x) {
  Matrix out = x;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double n = out.row(r).norm();
    if (n > 0.0) out.row(r) /= n;
  }
  return out;
}

// z = u/|u|  =>  dL/du = (g - z (z.g)) / |u|
inline Matrix l2_normalize_backward(const Matrix& u, const Matrix& z, const Matrix& grad_z) {
  Matrix out(grad_z.rows(), grad_z.cols());
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double n = u.row(r).norm();
    if (n == 0.0) {
      out.row(r).setZero();
      continue;
    }
    out.row(r) = (grad_z.row(r) - z.row(r) * z.row(r).dot(grad_z.row(r))) / n;
  }
  return out;
}

}  // namespace fopro::nn
