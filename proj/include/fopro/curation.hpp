// SPDX-License-Identifier: Apache-2.0
#pragma once

// Clean-set selection, hybrid confidence scoring and the four-branch label
// adjustment rule.

#include "fopro/core.hpp"

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

namespace fopro {

struct CurationConfig {
  double sigma = 20.0;  // clean-set threshold
  double beta = 0.5;    // classifier vs. prototype similarity mix
  double gamma = 0.6;   // acceptance threshold

  void validate() const {
    require(sigma > 0.0, "curation: sigma must be positive");
    require(beta >= 0.0 && beta <= 1.0, "curation: beta must lie in [0,1]");
    require(gamma > 0.0 && gamma < 1.0, "curation: gamma must lie in (0,1)");
  }
};

enum class Verdict { kept, corrected, ood };

inline const char* to_string(Verdict v) {
  switch (v) {
    case Verdict::kept: return "kept";
    case Verdict::corrected: return "corrected";
    case Verdict::ood: return "ood";
  }
  return "?";
}

struct LabelState {
  std::int64_t sample_id = 0;
  Verdict verdict = Verdict::kept;
  int given_label = 0;
  int label = 0;  // label used for supervision; kOod when verdict == ood
  double relation_prob = 0.0;  // verification score of the given label
  std::vector<double> hybrid_score;
  int branch = 0;  // 1..4

  double confidence() const {
    return label >= 0 ? hybrid_score[static_cast<std::size_t>(label)] : 0.0;
  }
};

// sum_j |(z - c_y) . c_j| <= sigma
inline double clean_criterion(const RowVector& z, int label, const Matrix& centers) {
  const RowVector diff = z - centers.row(label);
  return (centers * diff.transpose()).cwiseAbs().sum();
}

inline std::vector<bool> select_clean_stage3(const Matrix& z, std::span<const int> labels, const Matrix& centers, double sigma) {
  require(static_cast<std::size_t>(z.rows()) == labels.size(), "select_clean: label count mismatch");
  std::vector<bool> flags(labels.size());
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    flags[static_cast<std::size_t>(i)] = clean_criterion(z.row(i), labels[static_cast<std::size_t>(i)], centers) <= sigma;
  return flags;
}

// Training set for the relation module in stage 3: web rows passing the
// criterion plus every few-shot row.
inline std::vector<bool> clean_set(const Matrix& z, std::span<const int> labels, const std::vector<bool>& is_fewshot, const Matrix& centers,
                                   double sigma) {
  require(is_fewshot.size() == labels.size(), "clean_set: source flag count mismatch");
  std::vector<bool> flags(labels.size());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const auto u = static_cast<std::size_t>(i);
    flags[u] = is_fewshot[u] || clean_criterion(z.row(i), labels[u], centers) <= sigma;
  }
  return flags;
}

// s = beta p + (1 - beta) [c_1 .. c_C]^T z, unnormalized.
inline std::vector<double> hybrid_score(std::span<const double> p, const RowVector& z, const Matrix& centers, double beta) {
  require(static_cast<Eigen::Index>(p.size()) == centers.rows(), "hybrid_score: class count mismatch");
  const Vector sims = centers * z.transpose();
  std::vector<double> s(p.size());
  for (std::size_t k = 0; k < p.size(); ++k) s[k] = beta * p[k] + (1.0 - beta) * sims[static_cast<Eigen::Index>(k)];
  return s;
}

// Four-branch rule with an arbitrary verifier for the first branch: the
// relation probability of the given label in the full method, a cosine
// similarity in the ablation.
inline LabelState adjust_label_with_verifier(double verify_score, double verify_threshold, std::vector<double> s, int given, double gamma) {
  LabelState st;
  st.given_label = given;
  st.relation_prob = verify_score;
  const int C = static_cast<int>(s.size());
  require(given >= 0 && given < C, "adjust_label: given label out of range");
  const int best = argmax(s);
  if (verify_score > verify_threshold) {
    st.branch = 1;
    st.verdict = Verdict::kept;
    st.label = given;
  } else if (s[static_cast<std::size_t>(best)] > gamma) {
    st.branch = 2;
    st.label = best;
    st.verdict = best == given ? Verdict::kept : Verdict::corrected;
  } else if (s[static_cast<std::size_t>(given)] > 1.0 / C) {
    st.branch = 3;
    st.verdict = Verdict::kept;
    st.label = given;
  } else {
    st.branch = 4;
    st.verdict = Verdict::ood;
    st.label = kOod;
  }
  st.hybrid_score = std::move(s);
  return st;
}

inline LabelState adjust_label(std::span<const double> relation_prob, std::vector<double> s, int given, double gamma) {
  require(relation_prob.size() == s.size(), "adjust_label: class count mismatch");
  require(given >= 0 && static_cast<std::size_t>(given) < s.size(), "adjust_label: given label out of range");
  return adjust_label_with_verifier(relation_prob[static_cast<std::size_t>(given)], gamma, std::move(s), given, gamma);
}

// Positions of branch-1 and branch-2 verdicts.
inline std::vector<std::size_t> select_reliable_for_relation(std::span<const LabelState> states) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < states.size(); ++i)
    if (states[i].branch == 1 || states[i].branch == 2) out.push_back(i);
  return out;
}

// ---------------------------------------------------------------------------
// Truth-scored report. Truth labels are aligned with `states`.

struct CurationScore {
  std::size_t branch_counts[4] = {0, 0, 0, 0};
  std::size_t n_corrected = 0;
  std::size_t n_correct_corrections = 0;
  std::size_t n_flipped = 0;
  std::size_t n_flipped_recovered = 0;
  std::size_t n_flagged_ood = 0;
  std::size_t n_true_ood = 0;
  std::size_t n_flagged_true_ood = 0;

  static double ratio(std::size_t a, std::size_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); }
  double correction_precision() const { return ratio(n_correct_corrections, n_corrected); }
  double correction_recall() const { return ratio(n_flipped_recovered, n_flipped); }
  double correction_f1() const {
    const double p = correction_precision(), r = correction_recall();
    return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
  }
  double ood_precision() const { return ratio(n_flagged_true_ood, n_flagged_ood); }
  double ood_recall() const { return ratio(n_flagged_true_ood, n_true_ood); }
};

inline CurationScore score_curation(std::span<const LabelState> states, std::span<const int> truth) {
  require(states.size() == truth.size(), "score_curation: truth alignment mismatch");
  CurationScore sc;
  for (std::size_t i = 0; i < states.size(); ++i) {
    const auto& st = states[i];
    const int y_true = truth[i];
    if (st.branch >= 1 && st.branch <= 4) ++sc.branch_counts[st.branch - 1];
    const bool flipped = y_true != kOod && st.given_label != y_true;
    if (flipped) ++sc.n_flipped;
    if (y_true == kOod) ++sc.n_true_ood;
    if (st.verdict == Verdict::corrected) {
      ++sc.n_corrected;
      if (st.label == y_true) ++sc.n_correct_corrections;
      if (flipped && st.label == y_true) ++sc.n_flipped_recovered;
    }
    if (st.verdict == Verdict::ood) {
      ++sc.n_flagged_ood;
      if (y_true == kOod) ++sc.n_flagged_true_ood;
    }
  }
  return sc;
}

inline std::string curation_report_header() {
  return "epoch\tbranch1\tbranch2\tbranch3\tbranch4\tcorrected\tcorrection_precision\tcorrection_recall\tcorrection_f1\tflagged_ood\tood_precision\tood_recall";
}

inline std::string curation_report_row(int epoch, const CurationScore& sc) {
  std::ostringstream out;
  out.precision(6);
  out << epoch << '\t' << sc.branch_counts[0] << '\t' << sc.branch_counts[1] << '\t' << sc.branch_counts[2] << '\t' << sc.branch_counts[3]
      << '\t' << sc.n_corrected << '\t' << sc.correction_precision() << '\t' << sc.correction_recall() << '\t' << sc.correction_f1() << '\t'
      << sc.n_flagged_ood << '\t' << sc.ood_precision() << '\t' << sc.ood_recall();
  return out.str();
}

}  // namespace fopro
