// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "fopro/core.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

namespace fopro {

struct PrototypeConfig {
  double momentum = 0.999;  // m_p
  double alpha = 10.0;      // smoother in the concentration estimate
  double tau = 0.1;         // default temperature before the first refresh
  double phi_min_scale = 0.05;
  double phi_max_scale = 20.0;

  double phi_min() const { return phi_min_scale * tau; }
  double phi_max() const { return phi_max_scale * tau; }
};

struct Prototype {
  Vector center;
  double temperature = 0.1;
  int member_count = 0;
};

class PrototypeStore {
 public:
  PrototypeStore() = default;

  // Mean of each class's embeddings, then normalized.
  static PrototypeStore from_fewshots(const Matrix& z, std::span<const int> labels, int num_classes, const PrototypeConfig& cfg) {
    require(static_cast<std::size_t>(z.rows()) == labels.size(), "prototypes: label count mismatch");
    PrototypeStore store(num_classes, static_cast<int>(z.cols()), cfg);
    std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
    Matrix sums = Matrix::Zero(num_classes, z.cols());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const int k = labels[static_cast<std::size_t>(i)];
      require(k >= 0 && k < num_classes, "prototypes: label out of range");
      sums.row(k) += z.row(i);
      ++counts[static_cast<std::size_t>(k)];
    }
    for (int k = 0; k < num_classes; ++k) {
      if (counts[static_cast<std::size_t>(k)] == 0) throw Error("prototypes: class " + std::to_string(k) + " has no few-shot samples");
      Vector c = (sums.row(k) / counts[static_cast<std::size_t>(k)]).transpose();
      require(c.norm() > 0.0, "prototypes: degenerate class mean");
      store.protos_[static_cast<std::size_t>(k)].center = c / c.norm();
    }
    return store;
  }

  // Zero-shot fallback: average per_class_n randomly drawn web embeddings per
  // class (all of them if the class has fewer). `chosen` receives the row
  // indices used, grouped by class.
  static PrototypeStore from_web_sample(const Matrix& z, std::span<const int> labels, int num_classes, int per_class_n,
                                        const PrototypeConfig& cfg, Rng& rng, std::vector<std::vector<std::size_t>>* chosen = nullptr) {
    require(per_class_n > 0, "prototypes: per_class_n must be positive");
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(num_classes));
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[static_cast<std::size_t>(labels[i])].push_back(i);
    Matrix picked_z(0, z.cols());
    std::vector<int> picked_labels;
    std::vector<std::vector<std::size_t>> used(static_cast<std::size_t>(num_classes));
    for (int k = 0; k < num_classes; ++k) {
      auto& idx = by_class[static_cast<std::size_t>(k)];
      rng.shuffle(idx);
      const std::size_t take = std::min<std::size_t>(idx.size(), static_cast<std::size_t>(per_class_n));
      for (std::size_t j = 0; j < take; ++j) {
        picked_z.conservativeResize(picked_z.rows() + 1, Eigen::NoChange);
        picked_z.row(picked_z.rows() - 1) = z.row(static_cast<Eigen::Index>(idx[j]));
        picked_labels.push_back(k);
        used[static_cast<std::size_t>(k)].push_back(idx[j]);
      }
    }
    if (chosen) *chosen = std::move(used);
    return from_fewshots(picked_z, picked_labels, num_classes, cfg);
  }

  int num_classes() const { return static_cast<int>(protos_.size()); }
  int dim() const { return protos_.empty() ? 0 : static_cast<int>(protos_.front().center.size()); }
  const PrototypeConfig& config() const { return cfg_; }
  const Prototype& operator[](int k) const { return protos_[static_cast<std::size_t>(k)]; }
  Prototype& operator[](int k) { return protos_[static_cast<std::size_t>(k)]; }

  Matrix centers() const {
    Matrix c(num_classes(), dim());
    for (int k = 0; k < num_classes(); ++k) c.row(k) = protos_[static_cast<std::size_t>(k)].center.transpose();
    return c;
  }

  Vector temperatures() const {
    Vector t(num_classes());
    for (int k = 0; k < num_classes(); ++k) t[k] = protos_[static_cast<std::size_t>(k)].temperature;
    return t;
  }

  // phi_k = sum_{y_i=k} |z_i - c_k| / (N_k log(N_k + alpha)), clamped.
  // Labels equal to kOod (or any negative value) are skipped; empty classes
  // keep their previous temperature. member_count is reset to N_k.
  void refresh_temperatures(const Matrix& z, std::span<const int> labels) {
    require(static_cast<std::size_t>(z.rows()) == labels.size(), "refresh_temperatures: label count mismatch");
    std::vector<double> dist(protos_.size(), 0.0);
    std::vector<int> counts(protos_.size(), 0);
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const int k = labels[static_cast<std::size_t>(i)];
      if (k < 0) continue;
      dist[static_cast<std::size_t>(k)] += (z.row(i).transpose() - protos_[static_cast<std::size_t>(k)].center).norm();
      ++counts[static_cast<std::size_t>(k)];
    }
    for (std::size_t k = 0; k < protos_.size(); ++k) {
      if (counts[k] == 0) continue;
      protos_[k].temperature = concentration(dist[k], counts[k], cfg_.alpha, cfg_.phi_min(), cfg_.phi_max());
      protos_[k].member_count = counts[k];
    }
  }

  static double concentration_unclamped(double distance_sum, int n, double alpha) {
    return distance_sum / (n * std::log(n + alpha));
  }

  static double concentration(double distance_sum, int n, double alpha, double lo, double hi) {
    return std::clamp(concentration_unclamped(distance_sum, n, alpha), lo, hi);
  }

  // c_k <- normalize(m_p c_k + (1 - m_p) z)
  void ema_update(const Vector& z, int k) {
    if (k == kOod) throw Error("prototype update rejected for an OOD-flagged sample");
    require(k >= 0 && k < num_classes(), "prototype update: class out of range");
    auto& p = protos_[static_cast<std::size_t>(k)];
    Vector c = cfg_.momentum * p.center + (1.0 - cfg_.momentum) * z;
    const double n = c.norm();
    if (n > 0.0) p.center = c / n;
    ++p.member_count;
  }

  void reset_member_counts() {
    for (auto& p : protos_) p.member_count = 0;
  }

  // Restores from raw state (checkpoints).
  static PrototypeStore restore(const Matrix& centers, const Vector& temps, const std::vector<int>& counts, const PrototypeConfig& cfg) {
    PrototypeStore s(static_cast<int>(centers.rows()), static_cast<int>(centers.cols()), cfg);
    for (Eigen::Index k = 0; k < centers.rows(); ++k) {
      auto& p = s.protos_[static_cast<std::size_t>(k)];
      p.center = centers.row(k).transpose();
      p.temperature = temps[k];
      p.member_count = counts[static_cast<std::size_t>(k)];
    }
    return s;
  }

 private:
  PrototypeStore(int num_classes, int dim, const PrototypeConfig& cfg) : cfg_(cfg), protos_(static_cast<std::size_t>(num_classes)) {
    for (auto& p : protos_) {
      p.center = Vector::Zero(dim);
      p.temperature = cfg.tau;
    }
  }

  PrototypeConfig cfg_;
  std::vector<Prototype> protos_;
};

// Tab-separated dump: class, phi, N, cosine to the few-shot mean, center.
inline std::string prototype_report(const PrototypeStore& store, const Matrix* fewshot_means = nullptr) {
  std::ostringstream out;
  out.precision(10);
  out << "class\tphi\tmember_count\tfewshot_cosine\tcenter\n";
  for (int k = 0; k < store.num_classes(); ++k) {
    const auto& p = store[k];
    out << k << '\t' << p.temperature << '\t' << p.member_count << '\t';
    if (fewshot_means && fewshot_means->row(k).norm() > 0.0)
      out << p.center.dot(fewshot_means->row(k).transpose()) / fewshot_means->row(k).norm();
    else
      out << "nan";
    out << '\t';
    for (Eigen::Index i = 0; i < p.center.size(); ++i) out << (i ? "," : "") << p.center[i];
    out << '\n';
  }
  return out.str();
}

}  // namespace fopro
