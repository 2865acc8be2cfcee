// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic "web" and "real-world" datasets with hidden ground truth.
//
// Real-domain classes are isotropic Gaussians around well separated means.
// The web domain applies a fixed rotation to the whole input space plus a
// per-class translation, both scaled by domain_shift. Web labels are then
// corrupted by symmetric flips and out-of-distribution samples drawn from
// distractor clusters that sit at least one separation away from every class.

#include "fopro/core.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fopro {

struct DatasetSpec {
  int num_classes = 10;
  int input_dim = 32;
  int web_per_class = 300;
  int shots_per_class = 16;
  int test_per_class = 100;
  double flip_rate = 0.3;
  double ood_rate = 0.1;
  double domain_shift = 0.5;
  double class_spread = 0.1;
  // Shrinks inter-mean distances to emulate fine-grained categories.
  bool fine_grained = false;
  int ood_clusters = 0;  // 0 selects num_classes
  // Optional per-class flip rates; overrides flip_rate when non-empty.
  std::vector<double> per_class_flip_rate;
  std::uint64_t seed = 0;

  double separation() const { return fine_grained ? 0.35 : 1.0; }

  double flip_rate_for(int k) const {
    return per_class_flip_rate.empty() ? flip_rate : per_class_flip_rate[static_cast<std::size_t>(k)];
  }

  void validate() const {
    if (num_classes < 2) throw Error("datagen: num_classes must be >= 2");
    if (input_dim < 1) throw Error("datagen: input_dim must be positive");
    if (web_per_class < 1) throw Error("datagen: web_per_class must be positive");
    if (shots_per_class < 0) throw Error("datagen: shots_per_class must be non-negative");
    if (test_per_class < 1) throw Error("datagen: test_per_class must be positive");
    if (!(flip_rate >= 0.0 && flip_rate < 1.0)) throw Error("datagen: flip_rate must lie in [0,1)");
    if (!(ood_rate >= 0.0 && ood_rate < 1.0)) throw Error("datagen: ood_rate must lie in [0,1)");
    if (!(flip_rate + ood_rate < 1.0)) throw Error("datagen: flip_rate + ood_rate must be < 1");
    if (!(domain_shift >= 0.0)) throw Error("datagen: domain_shift must be non-negative");
    if (!(class_spread > 0.0)) throw Error("datagen: class_spread must be positive");
    if (ood_clusters < 0) throw Error("datagen: ood_clusters must be non-negative");
    if (!per_class_flip_rate.empty()) {
      if (static_cast<int>(per_class_flip_rate.size()) != num_classes)
        throw Error("datagen: per_class_flip_rate needs one entry per class");
      for (double r : per_class_flip_rate)
        if (!(r >= 0.0 && r < 1.0 && r + ood_rate < 1.0)) throw Error("datagen: per-class flip rate out of range");
    }
  }
};

enum class Source { web, fewshot, test };

inline const char* to_string(Source s) {
  switch (s) {
    case Source::web: return "web";
    case Source::fewshot: return "fewshot";
    case Source::test: return "test";
  }
  return "?";
}

inline Source parse_source(const std::string& s) {
  if (s == "web") return Source::web;
  if (s == "fewshot") return Source::fewshot;
  if (s == "test") return Source::test;
  throw Error("unknown sample source: " + s);
}

struct Sample {
  std::int64_t sample_id = 0;
  Vector input;
  int given_label = 0;
  Source source = Source::web;
  int truth_label = 0;  // kOod for out-of-distribution samples

  bool is_ood() const { return truth_label == kOod; }
  bool is_flipped() const { return !is_ood() && given_label != truth_label; }
};

struct Dataset {
  DatasetSpec spec;
  std::vector<Sample> web;
  std::vector<Sample> fewshot;
  std::vector<Sample> test;
};

struct DomainGeometry {
  Matrix class_means;   // C x d_in
  Matrix ood_means;     // clusters x d_in
  Matrix rotation;      // d_in x d_in, identity when domain_shift == 0
  Matrix translations;  // C x d_in
};

namespace detail {

inline Vector random_unit(int dim, Rng& rng) {
  Vector v(dim);
  do {
    for (int i = 0; i < dim; ++i) v[i] = rng.normal();
  } while (v.norm() < 1e-12);
  return v / v.norm();
}

// Points on a sphere of radius `radius` with every pairwise distance >= min_dist
// and distance >= min_dist to every row of `avoid`. The radius grows when the
// sphere is too crowded for rejection sampling to succeed.
inline Matrix separated_points(int count, int dim, double radius, double min_dist, const Matrix& avoid, Rng& rng) {
  Matrix out(count, dim);
  for (;;) {
    int placed = 0;
    int tries = 0;
    while (placed < count && tries < 4000) {
      ++tries;
      const Vector cand = radius * random_unit(dim, rng);
      bool ok = true;
      for (int j = 0; j < placed && ok; ++j) ok = (out.row(j).transpose() - cand).norm() >= min_dist;
      for (Eigen::Index j = 0; j < avoid.rows() && ok; ++j) ok = (avoid.row(j).transpose() - cand).norm() >= min_dist;
      if (ok) out.row(placed++) = cand.transpose();
    }
    if (placed == count) return out;
    radius *= 1.1;
  }
}

inline Matrix rotation_matrix(int dim, double angle, Rng& rng) {
  Matrix basis = gaussian_matrix(dim, dim, 1.0, rng);
  if (angle == 0.0) return Matrix::Identity(dim, dim);
  Eigen::HouseholderQR<Matrix> qr(basis);
  Matrix q = qr.householderQ();
  Matrix block = Matrix::Identity(dim, dim);
  const double c = std::cos(angle), s = std::sin(angle);
  for (int i = 0; i + 1 < dim; i += 2) {
    block(i, i) = c;
    block(i, i + 1) = -s;
    block(i + 1, i) = s;
    block(i + 1, i + 1) = c;
  }
  return q * block * q.transpose();
}

}  // namespace detail

inline DomainGeometry make_geometry(const DatasetSpec& spec) {
  Rng rng(mix_seed(spec.seed, 1));
  const double sep = spec.separation();
  DomainGeometry g;
  g.class_means = detail::separated_points(spec.num_classes, spec.input_dim, sep, sep, Matrix(0, spec.input_dim), rng);
  const int clusters = spec.ood_clusters > 0 ? spec.ood_clusters : spec.num_classes;
  g.ood_means = detail::separated_points(clusters, spec.input_dim, sep, sep, g.class_means, rng);
  // A quarter turn per unit of shift in every rotation plane.
  g.rotation = detail::rotation_matrix(spec.input_dim, std::min(spec.domain_shift, 2.0) * M_PI / 2.0, rng);
  g.translations = Matrix::Zero(spec.num_classes, spec.input_dim);
  for (int k = 0; k < spec.num_classes; ++k)
    g.translations.row(k) = spec.domain_shift * sep * detail::random_unit(spec.input_dim, rng).transpose();
  return g;
}

inline Vector draw_real(const DomainGeometry& g, int k, double spread, Rng& rng) {
  Vector x = g.class_means.row(k).transpose();
  for (Eigen::Index i = 0; i < x.size(); ++i) x[i] += spread * rng.normal();
  return x;
}

inline Dataset generate(const DatasetSpec& spec) {
  spec.validate();
  const DomainGeometry geom = make_geometry(spec);
  const int C = spec.num_classes;
  Dataset ds;
  ds.spec = spec;

  const int n_web = C * spec.web_per_class;
  const int n_ood = static_cast<int>(std::lround(spec.ood_rate * n_web));
  Rng rng(mix_seed(spec.seed, 2));
  std::vector<std::size_t> order = iota_indices(static_cast<std::size_t>(n_web));
  rng.shuffle(order);
  std::vector<bool> ood_slot(static_cast<std::size_t>(n_web), false);
  for (int i = 0; i < n_ood; ++i) ood_slot[order[static_cast<std::size_t>(i)]] = true;

  std::int64_t next_id = 0;
  ds.web.reserve(static_cast<std::size_t>(n_web));
  for (int i = 0; i < n_web; ++i) {
    Sample s;
    s.sample_id = next_id++;
    s.source = Source::web;
    const int slot_class = i % C;
    if (ood_slot[static_cast<std::size_t>(i)]) {
      // crawled for query `slot_class` but belongs to no class
      const auto j = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(geom.ood_means.rows())));
      Vector x = geom.ood_means.row(j).transpose();
      for (Eigen::Index d = 0; d < x.size(); ++d) x[d] += spec.class_spread * rng.normal();
      s.input = geom.rotation * x;
      s.truth_label = kOod;
      s.given_label = slot_class;
    } else {
      s.truth_label = slot_class;
      s.given_label = slot_class;
      if (rng.bernoulli(spec.flip_rate_for(slot_class))) {
        const int other = static_cast<int>(rng.index(static_cast<std::size_t>(C - 1)));
        s.given_label = other >= slot_class ? other + 1 : other;
      }
      s.input = geom.rotation * draw_real(geom, slot_class, spec.class_spread, rng) + geom.translations.row(slot_class).transpose();
    }
    ds.web.push_back(std::move(s));
  }

  // Per-class streams: a K-shot set is a prefix of any larger K-shot set.
  std::vector<std::vector<Sample>> shots(static_cast<std::size_t>(C));
  for (int k = 0; k < C; ++k) {
    Rng shot_rng(mix_seed(spec.seed, 3, static_cast<std::uint64_t>(k)));
    for (int j = 0; j < spec.shots_per_class; ++j) {
      Sample s;
      s.source = Source::fewshot;
      s.truth_label = s.given_label = k;
      s.input = draw_real(geom, k, spec.class_spread, shot_rng);
      shots[static_cast<std::size_t>(k)].push_back(std::move(s));
    }
  }
  for (int j = 0; j < spec.shots_per_class; ++j)
    for (int k = 0; k < C; ++k) {
      Sample s = shots[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)];
      s.sample_id = next_id++;
      ds.fewshot.push_back(std::move(s));
    }

  Rng test_rng(mix_seed(spec.seed, 4));
  for (int i = 0; i < C * spec.test_per_class; ++i) {
    Sample s;
    s.sample_id = next_id++;
    s.source = Source::test;
    s.truth_label = s.given_label = i % C;
    s.input = draw_real(geom, i % C, spec.class_spread, test_rng);
    ds.test.push_back(std::move(s));
  }
  return ds;
}

struct NoiseSummary {
  std::size_t n_clean = 0;
  std::size_t n_flipped = 0;
  std::size_t n_ood = 0;
  bool operator==(const NoiseSummary&) const = default;
};

inline NoiseSummary noise_summary(std::span<const Sample> web) {
  NoiseSummary out;
  for (const auto& s : web) {
    if (s.is_ood())
      ++out.n_ood;
    else if (s.is_flipped())
      ++out.n_flipped;
    else
      ++out.n_clean;
  }
  return out;
}

// Additive isotropic Gaussian perturbation; stands in for image augmentation.
inline Vector perturb(const Vector& input, double strength, std::uint64_t seed) {
  if (strength < 0.0) throw Error("perturb: strength must be non-negative");
  if (strength == 0.0) return input;
  Rng rng(seed);
  Vector out = input;
  for (Eigen::Index i = 0; i < out.size(); ++i) out[i] += strength * rng.normal();
  return out;
}

// Deterministic 10% web-domain holdout keyed on the sample id only.
inline bool is_web_holdout(std::int64_t sample_id) {
  return mix_seed(static_cast<std::uint64_t>(sample_id), 0x5eedULL) % 10 == 0;
}

// ---------------------------------------------------------------------------
// Directory format: meta.json plus web/fewshot/test TSV files.

inline nlohmann::json to_json(const DatasetSpec& s) {
  return {{"num_classes", s.num_classes},       {"input_dim", s.input_dim},
          {"web_per_class", s.web_per_class},   {"shots_per_class", s.shots_per_class},
          {"test_per_class", s.test_per_class}, {"flip_rate", s.flip_rate},
          {"ood_rate", s.ood_rate},             {"domain_shift", s.domain_shift},
          {"class_spread", s.class_spread},     {"fine_grained", s.fine_grained},
          {"ood_clusters", s.ood_clusters},     {"per_class_flip_rate", s.per_class_flip_rate},
          {"seed", s.seed}};
}

inline DatasetSpec dataset_spec_from_json(const nlohmann::json& j, DatasetSpec base = {}) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("num_classes", base.num_classes);
  get("input_dim", base.input_dim);
  get("web_per_class", base.web_per_class);
  get("shots_per_class", base.shots_per_class);
  get("test_per_class", base.test_per_class);
  get("flip_rate", base.flip_rate);
  get("ood_rate", base.ood_rate);
  get("domain_shift", base.domain_shift);
  get("class_spread", base.class_spread);
  get("fine_grained", base.fine_grained);
  get("ood_clusters", base.ood_clusters);
  get("per_class_flip_rate", base.per_class_flip_rate);
  get("seed", base.seed);
  return base;
}

namespace detail {

inline void write_samples(const std::filesystem::path& path, std::span<const Sample> samples, int dim) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "sample_id\tgiven_label\ttruth_label\tsource";
  for (int i = 0; i < dim; ++i) out << "\tx" << i;
  out << '\n';
  char buf[40];
  for (const auto& s : samples) {
    out << s.sample_id << '\t' << s.given_label << '\t';
    if (s.is_ood())
      out << "ood";
    else
      out << s.truth_label;
    out << '\t' << to_string(s.source);
    for (Eigen::Index i = 0; i < s.input.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", s.input[i]);
      out << '\t' << buf;
    }
    out << '\n';
  }
}

// The truth column is skipped entirely when with_truth is false.
inline std::vector<Sample> read_samples(const std::filesystem::path& path, int dim, bool with_truth) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  std::vector<Sample> out;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string id, given, truth, source;
    std::getline(row, id, '\t');
    std::getline(row, given, '\t');
    std::getline(row, truth, '\t');
    std::getline(row, source, '\t');
    Sample s;
    s.sample_id = std::stoll(id);
    s.given_label = std::stoi(given);
    s.source = parse_source(source);
    if (with_truth) s.truth_label = truth == "ood" ? kOod : std::stoi(truth);
    s.input.resize(dim);
    std::string field;
    int i = 0;
    while (std::getline(row, field, '\t')) {
      if (i >= dim) throw DimensionError("too many feature columns in " + path.string());
      s.input[i++] = std::strtod(field.c_str(), nullptr);
    }
    if (i != dim) throw DimensionError("feature count mismatch in " + path.string());
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace detail

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const NoiseSummary counts = noise_summary(ds.web);
  nlohmann::json meta = {{"spec", to_json(ds.spec)},
                         {"counts",
                          {{"web", ds.web.size()},
                           {"fewshot", ds.fewshot.size()},
                           {"test", ds.test.size()},
                           {"web_clean", counts.n_clean},
                           {"web_flipped", counts.n_flipped},
                           {"web_ood", counts.n_ood}}}};
  std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';
  const int dim = ds.spec.input_dim;
  detail::write_samples(dir / "web.tsv", ds.web, dim);
  detail::write_samples(dir / "fewshot.tsv", ds.fewshot, dim);
  detail::write_samples(dir / "test.tsv", ds.test, dim);
}

inline DatasetSpec read_dataset_spec(const std::filesystem::path& dir) {
  std::ifstream in(dir / "meta.json");
  if (!in) throw Error("missing meta.json in " + dir.string());
  return dataset_spec_from_json(nlohmann::json::parse(in).at("spec"));
}

// fewshot.tsv may be absent (zero-shot datasets).
inline Dataset read_dataset(const std::filesystem::path& dir, bool with_truth = true) {
  Dataset ds;
  ds.spec = read_dataset_spec(dir);
  const int dim = ds.spec.input_dim;
  ds.web = detail::read_samples(dir / "web.tsv", dim, with_truth);
  if (std::filesystem::exists(dir / "fewshot.tsv")) ds.fewshot = detail::read_samples(dir / "fewshot.tsv", dim, with_truth);
  ds.test = detail::read_samples(dir / "test.tsv", dim, with_truth);
  return ds;
}

}  // namespace fopro
