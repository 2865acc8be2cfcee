// SPDX-License-Identifier: Apache-2.0
#pragma once

// Scoring against ground truth, K-shot sweeps, the relation-module ablation,
// embedding export and small SVG plots. This is the only code that reads
// truth labels.

#include "fopro/checkpoint.hpp"
#include "fopro/curation.hpp"
#include "fopro/datagen.hpp"
#include "fopro/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace fopro {

struct EvalReport {
  double top1 = 0.0;
  double top5 = 0.0;
  double web_test_accuracy = 0.0;
  double gap = 0.0;  // web_test_accuracy - top1
  bool has_curation = false;
  CurationScore curation;
  std::vector<double> proto_fewshot_cosine;  // empty without prototypes or few shots
  double mean_intra_class_distance = 0.0;
  double mean_inter_prototype_distance = 0.0;

  double correction_precision() const { return curation.correction_precision(); }
  double correction_recall() const { return curation.correction_recall(); }
  double correction_f1() const { return curation.correction_f1(); }
  double ood_precision() const { return curation.ood_precision(); }
  double ood_recall() const { return curation.ood_recall(); }
};

namespace detail {

inline Matrix stack(const std::vector<const Sample*>& rows, int dim) {
  Matrix x(static_cast<Eigen::Index>(rows.size()), dim);
  for (std::size_t i = 0; i < rows.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = rows[i]->input.transpose();
  return x;
}

inline double topk_hit(std::span<const double> p, int label, int k) {
  const double target = p[static_cast<std::size_t>(label)];
  int better = 0;
  for (std::size_t j = 0; j < p.size(); ++j)
    if (p[j] > target || (p[j] == target && static_cast<int>(j) < label)) ++better;
  return better < k ? 1.0 : 0.0;
}

// Shortest text that reads back to the same double.
inline std::string exact(double x) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

}  // namespace detail

inline EvalReport evaluate(const TrainState& st, const Dataset& ds) {
  const auto& mc = st.net.config();
  if (mc.input_dim != ds.spec.input_dim) throw DimensionError("checkpoint expects input width " + std::to_string(mc.input_dim) + ", dataset has " + std::to_string(ds.spec.input_dim));
  if (mc.num_classes != ds.spec.num_classes) throw DimensionError("checkpoint has " + std::to_string(mc.num_classes) + " classes, dataset has " + std::to_string(ds.spec.num_classes));
  require(!ds.test.empty(), "evaluate: dataset has no test samples");
  const int dim = ds.spec.input_dim;
  EvalReport r;

  std::vector<const Sample*> test;
  for (const auto& s : ds.test) test.push_back(&s);
  const Matrix p = st.net.predict(detail::stack(test, dim));
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto row = row_span(p, static_cast<Eigen::Index>(i));
    r.top1 += detail::topk_hit(row, test[i]->truth_label, 1);
    r.top5 += detail::topk_hit(row, test[i]->truth_label, std::min(5, ds.spec.num_classes));
  }
  r.top1 /= static_cast<double>(test.size());
  r.top5 /= static_cast<double>(test.size());

  std::vector<const Sample*> holdout;
  for (const auto& s : ds.web)
    if (is_web_holdout(s.sample_id) && !s.is_ood()) holdout.push_back(&s);
  if (!holdout.empty()) {
    const Matrix pw = st.net.predict(detail::stack(holdout, dim));
    double hits = 0.0;
    for (std::size_t i = 0; i < holdout.size(); ++i) hits += detail::topk_hit(row_span(pw, static_cast<Eigen::Index>(i)), holdout[i]->truth_label, 1);
    r.web_test_accuracy = hits / static_cast<double>(holdout.size());
  }
  r.gap = r.web_test_accuracy - r.top1;

  if (!st.verdicts.empty()) {
    std::unordered_map<std::int64_t, int> truth;
    for (const auto& s : ds.web) truth.emplace(s.sample_id, s.truth_label);
    std::vector<int> aligned;
    for (const auto& v : st.verdicts) {
      const auto it = truth.find(v.sample_id);
      if (it == truth.end()) throw Error("evaluate: verdict for unknown sample " + std::to_string(v.sample_id));
      aligned.push_back(it->second);
    }
    r.has_curation = true;
    r.curation = score_curation(st.verdicts, aligned);
  }

  if (st.prototypes) {
    const Matrix centers = st.prototypes->centers();
    const int C = ds.spec.num_classes;
    if (!ds.fewshot.empty()) {
      std::vector<const Sample*> fs;
      for (const auto& s : ds.fewshot) fs.push_back(&s);
      const Matrix z = st.net.forward_momentum(detail::stack(fs, dim));
      Matrix sums = Matrix::Zero(C, z.cols());
      for (std::size_t i = 0; i < fs.size(); ++i) sums.row(fs[i]->given_label) += z.row(static_cast<Eigen::Index>(i));
      for (int k = 0; k < C; ++k) {
        const double n = sums.row(k).norm();
        r.proto_fewshot_cosine.push_back(n > 0.0 ? centers.row(k).dot(sums.row(k)) / n : 0.0);
      }
    }
    const Matrix zt = st.net.forward_momentum(detail::stack(test, dim));
    for (std::size_t i = 0; i < test.size(); ++i)
      r.mean_intra_class_distance += (zt.row(static_cast<Eigen::Index>(i)) - centers.row(test[i]->truth_label)).norm();
    r.mean_intra_class_distance /= static_cast<double>(test.size());
    int pairs = 0;
    for (int j = 0; j < C; ++j)
      for (int k = j + 1; k < C; ++k, ++pairs) r.mean_inter_prototype_distance += (centers.row(j) - centers.row(k)).norm();
    if (pairs) r.mean_inter_prototype_distance /= pairs;
  }
  return r;
}

// key<TAB>value lines in a fixed order.
inline std::string format_report(const EvalReport& r) {
  using detail::exact;
  std::ostringstream out;
  out << "top1\t" << exact(r.top1) << "\ntop5\t" << exact(r.top5) << "\nweb_test_accuracy\t" << exact(r.web_test_accuracy) << "\ngap\t"
      << exact(r.gap) << '\n';
  if (r.has_curation) {
    const auto& c = r.curation;
    out << "branch1\t" << c.branch_counts[0] << "\nbranch2\t" << c.branch_counts[1] << "\nbranch3\t" << c.branch_counts[2] << "\nbranch4\t"
        << c.branch_counts[3] << "\ncorrected\t" << c.n_corrected << "\ncorrect_corrections\t" << c.n_correct_corrections << "\nflipped\t"
        << c.n_flipped << "\nflipped_recovered\t" << c.n_flipped_recovered << "\nflagged_ood\t" << c.n_flagged_ood << "\ntrue_ood\t" << c.n_true_ood
        << "\nflagged_true_ood\t" << c.n_flagged_true_ood << "\ncorrection_precision\t" << exact(r.correction_precision()) << "\ncorrection_recall\t"
        << exact(r.correction_recall()) << "\ncorrection_f1\t" << exact(r.correction_f1()) << "\nood_precision\t" << exact(r.ood_precision())
        << "\nood_recall\t" << exact(r.ood_recall()) << '\n';
  }
  for (std::size_t k = 0; k < r.proto_fewshot_cosine.size(); ++k) out << "proto_fewshot_cosine_" << k << '\t' << exact(r.proto_fewshot_cosine[k]) << '\n';
  out << "mean_intra_class_distance\t" << exact(r.mean_intra_class_distance) << "\nmean_inter_prototype_distance\t"
      << exact(r.mean_inter_prototype_distance) << '\n';
  return out.str();
}

inline std::map<std::string, std::string> parse_report(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto tab = line.find('\t');
    if (tab != std::string::npos) out[line.substr(0, tab)] = line.substr(tab + 1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Experiments

struct RunResult {
  TrainState state;
  EvalReport report;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

inline RunResult run_fopro(const TrainConfig& cfg, const Dataset& ds, const EpochCallback& on_epoch = {}) {
  Trainer t(cfg, make_train_data(ds));
  t.train(on_epoch);
  RunResult r{t.state(), {}};
  r.report = evaluate(r.state, ds);
  return r;
}

inline RunResult run_vanilla(const TrainConfig& cfg, const Dataset& ds) {
  RunResult r{train_vanilla(cfg, make_train_data(ds)), {}};
  r.report = evaluate(r.state, ds);
  return r;
}

struct SweepRow {
  int shots = 0;
  EvalReport report;
  double gain = 0.0;  // top1 minus the first row's top1
};

// One train+evaluate per K; the dataset seed is shared so web and test sets
// are identical across rows and only the few shots change.
inline std::vector<SweepRow> kshot_sweep(const TrainConfig& base, const std::vector<int>& shots, const EpochCallback& on_epoch = {}) {
  std::vector<SweepRow> rows;
  for (int k : shots) {
    TrainConfig cfg = base;
    cfg.data.shots_per_class = k;
    const Dataset ds = generate(cfg.data);
    rows.push_back({k, run_fopro(cfg, ds, on_epoch).report, 0.0});
  }
  for (auto& r : rows) r.gain = r.report.top1 - rows.front().report.top1;
  return rows;
}

inline std::string format_sweep(const std::vector<SweepRow>& rows) {
  using detail::exact;
  std::ostringstream out;
  out << "K\ttop1\ttop5\tweb_test_accuracy\tgap\tgain\tcorrection_f1\tood_precision\n";
  for (const auto& r : rows)
    out << r.shots << '\t' << exact(r.report.top1) << '\t' << exact(r.report.top5) << '\t' << exact(r.report.web_test_accuracy) << '\t'
        << exact(r.report.gap) << '\t' << exact(r.gain) << '\t' << exact(r.report.correction_f1()) << '\t' << exact(r.report.ood_precision()) << '\n';
  return out.str();
}

struct AblationResult {
  RunResult full;
  RunResult ablated;
  double fewshot_acceptance = 0.0;  // branch-1 acceptance matched between the runs
};

// Run A uses the relation module; run B replaces it by cosine(z, c_y) with a
// threshold reproducing run A's branch-1 acceptance on the few shots.
inline AblationResult ablate_relation(const TrainConfig& base, const EpochCallback& on_epoch = {}) {
  const Dataset ds = generate(base.data);
  TrainConfig a = base;
  a.relation_module = true;
  AblationResult out;
  out.full = run_fopro(a, ds, on_epoch);
  const double acc = out.full.state.fewshot_relation_acceptance;
  out.fewshot_acceptance = std::isnan(acc) ? 1.0 : acc;
  TrainConfig b = base;
  b.relation_module = false;
  b.ablation_fewshot_acceptance = out.fewshot_acceptance;
  out.ablated = run_fopro(b, ds, on_epoch);
  return out;
}

inline std::string format_ablation(const AblationResult& a) {
  std::ostringstream out;
  out.precision(6);
  out << "variant\ttop1\tcorrection_precision\tcorrection_recall\tcorrection_f1\tood_precision\tood_recall\n";
  for (const auto* r : {&a.full, &a.ablated}) {
    const auto& e = r->report;
    out << (r == &a.full ? "relation" : "cosine") << '\t' << e.top1 << '\t' << e.correction_precision() << '\t' << e.correction_recall() << '\t'
        << e.correction_f1() << '\t' << e.ood_precision() << '\t' << e.ood_recall() << '\n';
  }
  out << "# fewshot_acceptance\t" << a.fewshot_acceptance << '\n';
  return out.str();
}

// sample_id, source, given_label, truth_label, z...
inline std::string export_embeddings(const TrainState& st, const Dataset& ds) {
  if (st.net.config().input_dim != ds.spec.input_dim) throw DimensionError("export_embeddings: input width mismatch");
  std::ostringstream out;
  out.precision(17);
  out << "sample_id\tsource\tgiven_label\ttruth_label";
  for (int j = 0; j < st.net.config().projection_dim; ++j) out << "\tz" << j;
  out << '\n';
  for (const auto* set : {&ds.web, &ds.fewshot, &ds.test}) {
    if (set->empty()) continue;
    std::vector<const Sample*> rows;
    for (const auto& s : *set) rows.push_back(&s);
    const Matrix z = st.net.embed(detail::stack(rows, ds.spec.input_dim));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& s = *rows[i];
      out << s.sample_id << '\t' << to_string(s.source) << '\t' << s.given_label << '\t';
      if (s.is_ood())
        out << "ood";
      else
        out << s.truth_label;
      for (Eigen::Index j = 0; j < z.cols(); ++j) out << '\t' << z(static_cast<Eigen::Index>(i), j);
      out << '\n';
    }
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Static line plots

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

inline std::string svg_line_plot(const std::string& title, const std::string& xlabel, const std::string& ylabel, const std::vector<Series>& series) {
  constexpr double W = 640, H = 400, L = 60, R = 150, T = 40, B = 50;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};
  char buf[128];
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4, yv = y0 + (y1 - y0) * i / 4;
    std::snprintf(buf, sizeof buf, "%.3g", xv);
    out << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << buf << "</text>\n";
    std::snprintf(buf, sizeof buf, "%.3g", yv);
    out << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << buf << "</text>\n";
  }
  out << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
  out << "<text transform=\"translate(16," << (T + H - B) / 2 << ") rotate(-90)\" text-anchor=\"middle\">" << ylabel << "</text>\n";
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = colors[si % 8];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      if (std::isfinite(s.y[i])) out << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
    out << "\"/>\n";
    out << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * (si + 1) << "\" fill=\"" << color << "\">" << s.name << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

// Loss curves from the per-epoch history, one series per loss name.
inline std::string loss_curve_svg(const std::vector<EpochMetrics>& history) {
  std::map<std::string, Series> by_name;
  for (const auto& m : history)
    for (const auto& [name, value] : m.losses) {
      auto& s = by_name[name];
      s.name = name;
      s.x.push_back(m.epoch);
      s.y.push_back(value);
    }
  std::vector<Series> series;
  for (auto& [_, s] : by_name) series.push_back(std::move(s));
  return svg_line_plot("training losses", "epoch", "loss", series);
}

inline std::string sweep_svg(const std::vector<SweepRow>& rows) {
  Series top1{"real top-1", {}, {}}, gap{"web-real gap", {}, {}};
  for (const auto& r : rows) {
    top1.x.push_back(r.shots);
    top1.y.push_back(r.report.top1);
    gap.x.push_back(r.shots);
    gap.y.push_back(r.report.gap);
  }
  return svg_line_plot("accuracy and gap vs. shots per class", "K", "fraction", {top1, gap});
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

}  // namespace fopro
