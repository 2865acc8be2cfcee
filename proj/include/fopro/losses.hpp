// SPDX-License-Identifier: Apache-2.0
#pragma once

// Training objectives. Each objective comes in two forms: a per-sample scalar
// used by the oracle tests and reports, and a batch form returning the mean
// loss over a row subset together with its gradient w.r.t. the network output
// that feeds it (logits or embeddings).

#include "fopro/core.hpp"
#include "fopro/nn.hpp"
#include "fopro/prototypes.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

namespace fopro::loss {

struct LossConfig {
  double tau = 0.1;      // instance temperature
  double delta_w = 0.0;  // margin for web samples
  double delta_t = 0.5;  // margin for few-shot samples
  double beta = 0.5;     // hybrid-score mix (consumed by curation)
  double w_cls = 1.0;
  double w_prj = 1.0;
  double w_proto = 1.0;
  double w_ins = 1.0;
  double w_rel = 1.0;
  double w_hybrid = 1.0;

  void validate() const {
    require(tau > 0.0, "losses: tau must be positive");
    require(delta_t >= delta_w, "losses: delta_t must be >= delta_w");
    require(beta >= 0.0 && beta <= 1.0, "losses: beta must lie in [0,1]");
  }
};

namespace detail {
inline void check_label(int label, std::size_t classes) {
  if (label < 0 || static_cast<std::size_t>(label) >= classes) throw Error("loss: label out of range");
}

inline RowVector to_row(std::span<const double> x) {
  return Eigen::Map<const RowVector>(x.data(), static_cast<Eigen::Index>(x.size()));
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Per-sample forms

inline double classification(std::span<const double> p, int label) {
  detail::check_label(label, p.size());
  return -std::log(p[static_cast<std::size_t>(label)]);
}

inline double projection(std::span<const double> v_rec, std::span<const double> v, std::span<const double> q,
                         std::optional<int> fewshot_label) {
  require(v_rec.size() == v.size(), "loss_prj: feature width mismatch");
  double rec = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) rec += (v_rec[i] - v[i]) * (v_rec[i] - v[i]);
  if (!fewshot_label) return rec;
  return rec + classification(q, *fewshot_label);
}

// Margin is subtracted inside every term, target and denominator alike.
inline double prototypical(std::span<const double> z, int label, const PrototypeStore& store, double margin) {
  require(store.num_classes() > 0, "loss_proto: prototype store not initialized");
  detail::check_label(label, static_cast<std::size_t>(store.num_classes()));
  const RowVector zr = detail::to_row(z);
  RowVector logits(store.num_classes());
  for (int k = 0; k < store.num_classes(); ++k) logits[k] = (zr.dot(store[k].center.transpose()) - margin) / store[k].temperature;
  return -nn::log_softmax(logits)[label];
}

// The positive sits at index 0 of the denominator, followed by the bank.
inline double instance(std::span<const double> z, std::span<const double> positive, const Eigen::Ref<const Matrix>& bank, double tau) {
  const RowVector zr = detail::to_row(z);
  RowVector logits(1 + bank.rows());
  logits[0] = zr.dot(detail::to_row(positive)) / tau;
  if (bank.rows() > 0) logits.tail(bank.rows()) = (bank * zr.transpose()).transpose() / tau;
  return -nn::log_softmax(logits)[0];
}

inline double relation(std::span<const double> scores, int label) {
  detail::check_label(label, scores.size());
  return -nn::log_softmax(detail::to_row(scores))[label];
}

// -log p^t[y^t] - s log p^w[y_hat] - (1 - s) sum_k p^w_k log p^w_k
// with s clamped to [0,1].
inline double hybrid(std::span<const double> p_web, int corrected_label, double confidence, std::span<const double> p_fewshot,
                     int fewshot_label) {
  const double s = std::clamp(confidence, 0.0, 1.0);
  detail::check_label(corrected_label, p_web.size());
  double plogp = 0.0;
  for (double pk : p_web)
    if (pk > 0.0) plogp += pk * std::log(pk);
  return classification(p_fewshot, fewshot_label) - s * std::log(p_web[static_cast<std::size_t>(corrected_label)]) - (1.0 - s) * plogp;
}

// ---------------------------------------------------------------------------
// Batch forms: value is the mean over `rows`; grad has the shape of the input
// with zeros outside `rows` and already carries the 1/|rows| factor.

struct Term {
  double value = 0.0;
  Matrix grad;
};

using Rows = std::vector<Eigen::Index>;

inline Term cross_entropy_batch(const Matrix& logits, std::span<const int> labels, const Rows& rows) {
  Term t{0.0, Matrix::Zero(logits.rows(), logits.cols())};
  if (rows.empty()) return t;
  const double scale = 1.0 / static_cast<double>(rows.size());
  for (Eigen::Index r : rows) {
    const int y = labels[static_cast<std::size_t>(r)];
    detail::check_label(y, static_cast<std::size_t>(logits.cols()));
    const RowVector lp = nn::log_softmax(logits.row(r));
    t.value -= lp[y] * scale;
    t.grad.row(r) = lp.array().exp().matrix() * scale;
    t.grad(r, y) -= scale;
  }
  return t;
}

struct ProjectionTerm {
  double reconstruction = 0.0;
  double auxiliary = 0.0;
  Matrix grad_v;
  Matrix grad_v_rec;
  Matrix grad_aux_logits;
  double value() const { return reconstruction + auxiliary; }
};

// Reconstruction over `rec_rows`, auxiliary classification over `aux_rows`.
inline ProjectionTerm projection_batch(const Matrix& v_rec, const Matrix& v, const Matrix& aux_logits, std::span<const int> labels,
                                       const Rows& rec_rows, const Rows& aux_rows) {
  ProjectionTerm t;
  t.grad_v = Matrix::Zero(v.rows(), v.cols());
  t.grad_v_rec = Matrix::Zero(v.rows(), v.cols());
  if (!rec_rows.empty()) {
    const double scale = 1.0 / static_cast<double>(rec_rows.size());
    for (Eigen::Index r : rec_rows) {
      const RowVector diff = v_rec.row(r) - v.row(r);
      t.reconstruction += diff.squaredNorm() * scale;
      t.grad_v_rec.row(r) = 2.0 * scale * diff;
      t.grad_v.row(r) = -2.0 * scale * diff;
    }
  }
  Term aux = cross_entropy_batch(aux_logits, labels, aux_rows);
  t.auxiliary = aux.value;
  t.grad_aux_logits = std::move(aux.grad);
  return t;
}

inline Term prototypical_batch(const Matrix& z, std::span<const int> labels, std::span<const double> margins, const PrototypeStore& store,
                               const Rows& rows) {
  require(store.num_classes() > 0, "loss_proto: prototype store not initialized");
  Term t{0.0, Matrix::Zero(z.rows(), z.cols())};
  if (rows.empty()) return t;
  const Matrix centers = store.centers();
  const RowVector inv_phi = store.temperatures().cwiseInverse().transpose();
  const double scale = 1.0 / static_cast<double>(rows.size());
  for (Eigen::Index r : rows) {
    const int y = labels[static_cast<std::size_t>(r)];
    detail::check_label(y, static_cast<std::size_t>(centers.rows()));
    const RowVector sims = z.row(r) * centers.transpose();
    const RowVector logits = (sims.array() - margins[static_cast<std::size_t>(r)]).matrix().cwiseProduct(inv_phi);
    const RowVector lp = nn::log_softmax(logits);
    t.value -= lp[y] * scale;
    RowVector dlogits = lp.array().exp().matrix();
    dlogits[y] -= 1.0;
    t.grad.row(r) = scale * dlogits.cwiseProduct(inv_phi) * centers;
  }
  return t;
}

// Positives are stop-gradient (momentum path), as are bank entries.
inline Term instance_batch(const Matrix& z, const Matrix& positives, const Eigen::Ref<const Matrix>& bank, double tau, const Rows& rows) {
  Term t{0.0, Matrix::Zero(z.rows(), z.cols())};
  if (rows.empty()) return t;
  const double scale = 1.0 / static_cast<double>(rows.size());
  for (Eigen::Index r : rows) {
    RowVector logits(1 + bank.rows());
    logits[0] = z.row(r).dot(positives.row(r)) / tau;
    if (bank.rows() > 0) logits.tail(bank.rows()) = (bank * z.row(r).transpose()).transpose() / tau;
    const RowVector lp = nn::log_softmax(logits);
    t.value -= lp[0] * scale;
    RowVector w = lp.array().exp().matrix();
    w[0] -= 1.0;
    RowVector g = w[0] * positives.row(r);
    if (bank.rows() > 0) g += w.tail(bank.rows()) * bank;
    t.grad.row(r) = g * (scale / tau);
  }
  return t;
}

// Web part of the hybrid objective over `rows` (labels are the corrected
// ones, confidences the clamped hybrid scores). The few-shot cross-entropy
// part is a plain cross_entropy_batch over few-shot rows.
inline Term hybrid_web_batch(const Matrix& logits, std::span<const int> corrected, std::span<const double> confidence, const Rows& rows) {
  Term t{0.0, Matrix::Zero(logits.rows(), logits.cols())};
  if (rows.empty()) return t;
  const double scale = 1.0 / static_cast<double>(rows.size());
  for (Eigen::Index r : rows) {
    const int y = corrected[static_cast<std::size_t>(r)];
    detail::check_label(y, static_cast<std::size_t>(logits.cols()));
    const double s = std::clamp(confidence[static_cast<std::size_t>(r)], 0.0, 1.0);
    const RowVector lp = nn::log_softmax(logits.row(r));
    const RowVector p = lp.array().exp().matrix();
    t.value += scale * (-s * lp[y] - (1.0 - s) * p.dot(lp));
    // dL/dp_k = -s [k=y] / p_y - (1-s)(log p_k + 1); chain through softmax.
    const RowVector g_ent = -(1.0 - s) * (lp.array() + 1.0).matrix();
    RowVector d = p.cwiseProduct(g_ent);
    d -= p * d.sum();
    RowVector d_ce = p * s;
    d_ce[y] -= s;
    t.grad.row(r) = scale * (d + d_ce);
  }
  return t;
}

}  // namespace fopro::loss
