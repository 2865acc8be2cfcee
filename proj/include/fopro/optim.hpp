// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "fopro/model.hpp"

#include <map>
#include <span>
#include <string>

namespace fopro {

// Momentum SGD or Adam with L2 weight decay over selected parameter groups.
class Optimizer {
 public:
  struct Slot {
    Matrix first;
    Matrix second;
  };

  Optimizer() = default;
  Optimizer(std::string kind, double momentum, double weight_decay) : kind_(std::move(kind)), momentum_(momentum), weight_decay_(weight_decay) {}

  void step(Network& net, std::span<const Group> groups, double lr) {
    ++steps_;
    for (Group g : groups) {
      net.visit(g, [&](const std::string& name, Matrix& value, Matrix& grad) {
        Slot& s = slots_[name];
        if (s.first.size() == 0) {
          s.first = Matrix::Zero(value.rows(), value.cols());
          if (kind_ == "adam") s.second = Matrix::Zero(value.rows(), value.cols());
        }
        const Matrix g_total = grad + weight_decay_ * value;
        if (kind_ == "adam") {
          constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
          auto& count = counts_[name];
          ++count;
          s.first = b1 * s.first + (1.0 - b1) * g_total;
          s.second = b2 * s.second + (1.0 - b2) * g_total.cwiseAbs2();
          const double c1 = 1.0 - std::pow(b1, count), c2 = 1.0 - std::pow(b2, count);
          value.array() -= lr * (s.first.array() / c1) / ((s.second.array() / c2).sqrt() + eps);
        } else {
          s.first = momentum_ * s.first + g_total;
          value -= lr * s.first;
        }
      });
    }
  }

  const std::string& kind() const { return kind_; }
  std::map<std::string, Slot>& slots() { return slots_; }
  const std::map<std::string, Slot>& slots() const { return slots_; }
  std::map<std::string, long long>& counts() { return counts_; }
  const std::map<std::string, long long>& counts() const { return counts_; }
  long long steps() const { return steps_; }
  void set_steps(long long s) { steps_ = s; }

 private:
  std::string kind_ = "sgd";
  double momentum_ = 0.9;
  double weight_decay_ = 0.0;
  std::map<std::string, Slot> slots_;
  std::map<std::string, long long> counts_;
  long long steps_ = 0;
};

}  // namespace fopro
