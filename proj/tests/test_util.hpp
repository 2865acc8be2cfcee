// SPDX-License-Identifier: Apache-2.0
#pragma once

// Helpers shared by the unit tests and the acceptance binary.

#include "fopro/fopro.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace fopro::testing {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) { return gaussian_matrix(rows, cols, scale, rng); }

inline Matrix random_unit_rows(Eigen::Index rows, Eigen::Index cols, Rng& rng) { return nn::l2_normalize_rows(gaussian_matrix(rows, cols, 1.0, rng)); }

inline Vector random_unit(Eigen::Index dim, Rng& rng) { return random_unit_rows(1, dim, rng).row(0).transpose(); }

inline std::vector<double> random_probs(std::size_t n, Rng& rng) {
  std::vector<double> p(n);
  double sum = 0.0;
  for (auto& x : p) sum += (x = rng.uniform(0.05, 1.0));
  for (auto& x : p) x /= sum;
  return p;
}

// Small enough for exhaustive finite differences (a few hundred parameters).
inline ModelConfig tiny_model() {
  ModelConfig m;
  m.input_dim = 6;
  m.num_classes = 4;
  m.hidden_dim = 8;
  m.feature_dim = 6;
  m.projection_dim = 5;
  m.bank_size = 16;
  return m;
}

inline TrainConfig small_config(int classes, int dim, int web_per_class, int shots, std::array<int, 4> stages, std::uint64_t seed) {
  TrainConfig c;
  c.data.num_classes = classes;
  c.data.input_dim = dim;
  c.data.web_per_class = web_per_class;
  c.data.shots_per_class = shots;
  c.data.test_per_class = 40;
  c.data.seed = seed;
  c.seed = seed;
  c.model.input_dim = dim;
  c.model.num_classes = classes;
  c.model.hidden_dim = 32;
  c.model.feature_dim = 32;
  c.model.projection_dim = 16;
  c.model.bank_size = 512;
  c.curation.sigma = 2.5;
  c.schedule.t1 = stages[0];
  c.schedule.t2 = stages[1];
  c.schedule.t3 = stages[2];
  c.schedule.t4 = stages[3];
  return c;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t nonzero = 0;  // entries with a non-negligible gradient
  std::string worst;
};

// `loss(net, backward)` returns the scalar loss and, when backward is true,
// leaves the analytic gradient in the network's gradient buffers.
using LossFn = std::function<double(Network&, bool)>;

inline GradCheckResult grad_check(Network& net, const LossFn& loss, double step = 1e-5, double floor = 1e-6) {
  net.zero_grad();
  loss(net, true);
  GradCheckResult r;
  for (Group g : kAllGroups) {
    std::vector<Matrix> analytic;
    net.visit(g, [&](const std::string&, Matrix&, Matrix& grad) { analytic.push_back(grad); });
    std::size_t idx = 0;
    net.visit(g, [&](const std::string& name, Matrix& value, Matrix&) {
      const Matrix& a = analytic[idx++];
      for (Eigen::Index i = 0; i < value.rows(); ++i)
        for (Eigen::Index j = 0; j < value.cols(); ++j) {
          const double saved = value(i, j);
          value(i, j) = saved + step;
          const double up = loss(net, false);
          value(i, j) = saved - step;
          const double down = loss(net, false);
          value(i, j) = saved;
          const double numeric = (up - down) / (2.0 * step);
          const double rel = std::abs(a(i, j) - numeric) / std::max({std::abs(a(i, j)), std::abs(numeric), floor});
          ++r.checked;
          if (std::max(std::abs(a(i, j)), std::abs(numeric)) > floor) ++r.nonzero;
          if (rel > r.max_rel_error) {
            r.max_rel_error = rel;
            r.worst = name + "(" + std::to_string(i) + "," + std::to_string(j) + ") analytic=" + std::to_string(a(i, j)) +
                      " numeric=" + std::to_string(numeric);
          }
        }
    });
  }
  return r;
}

// Fixed inputs for the per-loss gradient checks.
struct GradFixture {
  ModelConfig cfg = tiny_model();
  Matrix x;
  std::vector<int> labels;
  std::vector<double> margins;
  std::vector<double> confidence;
  loss::Rows all, web, fewshot;
  Matrix positives;
  Matrix bank;
  std::optional<PrototypeStore> store;
  double tau = 0.1;

  explicit GradFixture(std::uint64_t seed) {
    Rng rng(seed);
    const int n = 7, n_web = 5;
    x = random_matrix(n, cfg.input_dim, rng);
    for (int i = 0; i < n; ++i) {
      labels.push_back(static_cast<int>(rng.index(static_cast<std::size_t>(cfg.num_classes))));
      margins.push_back(i < n_web ? 0.0 : 0.5);
      confidence.push_back(rng.uniform(0.1, 0.9));
      all.push_back(i);
      (i < n_web ? web : fewshot).push_back(i);
    }
    positives = random_unit_rows(n, cfg.projection_dim, rng);
    bank = random_unit_rows(10, cfg.projection_dim, rng);
    const Matrix centers = random_unit_rows(cfg.num_classes, cfg.projection_dim, rng);
    std::vector<int> center_labels(static_cast<std::size_t>(cfg.num_classes));
    for (int k = 0; k < cfg.num_classes; ++k) center_labels[static_cast<std::size_t>(k)] = k;
    PrototypeConfig pc;
    store = PrototypeStore::from_fewshots(centers, center_labels, cfg.num_classes, pc);
    for (int k = 0; k < cfg.num_classes; ++k) (*store)[k].temperature = rng.uniform(0.1, 0.3);
  }

  static void apply(Network& net, const PlainForward& f, HeadGrads g, bool backward) {
    if (backward) net.backward_plain(f, g);
  }

  LossFn classification() const {
    return [this](Network& net, bool backward) {
      const PlainForward f = net.forward_plain(x);
      const loss::Term t = loss::cross_entropy_batch(f.logits, labels, all);
      HeadGrads g;
      g.logits = t.grad;
      apply(net, f, g, backward);
      return t.value;
    };
  }

  LossFn projection() const {
    return [this](Network& net, bool backward) {
      const PlainForward f = net.forward_plain(x);
      const loss::ProjectionTerm t = loss::projection_batch(f.v_rec, f.v, f.aux_logits, labels, all, fewshot);
      HeadGrads g;
      g.v = t.grad_v;
      g.v_rec = t.grad_v_rec;
      g.aux_logits = t.grad_aux_logits;
      apply(net, f, g, backward);
      return t.value();
    };
  }

  LossFn prototypical() const {
    return [this](Network& net, bool backward) {
      const PlainForward f = net.forward_plain(x);
      const loss::Term t = loss::prototypical_batch(f.z, labels, margins, *store, all);
      HeadGrads g;
      g.z = t.grad;
      apply(net, f, g, backward);
      return t.value;
    };
  }

  LossFn instance() const {
    return [this](Network& net, bool backward) {
      const PlainForward f = net.forward_plain(x);
      const loss::Term t = loss::instance_batch(f.z, positives, bank, tau, all);
      HeadGrads g;
      g.z = t.grad;
      apply(net, f, g, backward);
      return t.value;
    };
  }

  // Relation loss on fixed embeddings; training detaches the encoder, so only
  // relation parameters may receive gradient.
  LossFn relation() const {
    return [this](Network& net, bool backward) {
      const Matrix& z = positives;
      const RelationForward rf = net.relation_forward(z, store->centers());
      const loss::Term t = loss::cross_entropy_batch(rf.scores, labels, all);
      if (backward) net.backward_relation(rf, t.grad);
      return t.value;
    };
  }

  LossFn hybrid() const {
    return [this](Network& net, bool backward) {
      const PlainForward f = net.forward_plain(x);
      const loss::Term fs = loss::cross_entropy_batch(f.logits, labels, fewshot);
      const loss::Term w = loss::hybrid_web_batch(f.logits, labels, confidence, web);
      HeadGrads g;
      g.logits = fs.grad + w.grad;
      apply(net, f, g, backward);
      return fs.value + w.value;
    };
  }
};

}  // namespace fopro::testing
