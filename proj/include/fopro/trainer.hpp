// SPDX-License-Identifier: Apache-2.0
#pragma once

// Four-stage curriculum:
//   1. warm-up: classification + projection/reconstruction
//   2. prototypes initialized from few shots; prototypical and instance contrast
//   3. encoder and heads frozen; relation module trained on the clean subset
//   4. label adjustment, OOD removal, prototype polish, hybrid targets
//
// The trainer only ever sees TrainSample, which carries no ground truth.

#include "fopro/config.hpp"
#include "fopro/curation.hpp"
#include "fopro/datagen.hpp"
#include "fopro/losses.hpp"
#include "fopro/model.hpp"
#include "fopro/optim.hpp"
#include "fopro/prototypes.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fopro {

struct TrainSample {
  std::int64_t sample_id = 0;
  Vector input;
  int label = 0;
};

template <typename T>
concept CarriesTruth = requires(const T& t) { t.truth_label; };
static_assert(!CarriesTruth<TrainSample>, "training samples must not expose ground truth");

struct TrainData {
  int num_classes = 0;
  int input_dim = 0;
  std::vector<TrainSample> web;  // web-domain holdout already removed
  std::vector<TrainSample> fewshot;
};

namespace detail {
inline TrainSample strip(const Sample& s) { return {s.sample_id, s.input, s.given_label}; }
}  // namespace detail

inline TrainData make_train_data(const Dataset& ds) {
  TrainData td;
  td.num_classes = ds.spec.num_classes;
  td.input_dim = ds.spec.input_dim;
  for (const auto& s : ds.web)
    if (!is_web_holdout(s.sample_id)) td.web.push_back(detail::strip(s));
  for (const auto& s : ds.fewshot) td.fewshot.push_back(detail::strip(s));
  return td;
}

// Reads a dataset directory without touching the truth column.
inline TrainData load_train_data(const std::filesystem::path& dir) { return make_train_data(read_dataset(dir, /*with_truth=*/false)); }

struct EpochMetrics {
  int epoch = 0;
  int stage = 0;
  double learning_rate = 0.0;
  std::map<std::string, double> losses;
  double train_accuracy = 0.0;
  std::array<std::size_t, 4> branch_counts{};
  double clean_fraction = 0.0;
  double fewshot_relation_accuracy = std::numeric_limits<double>::quiet_NaN();
};

inline nlohmann::json to_json(const EpochMetrics& m) {
  nlohmann::json j = {{"epoch", m.epoch}, {"stage", m.stage}, {"lr", m.learning_rate}, {"losses", m.losses}, {"train_accuracy", m.train_accuracy}};
  if (m.stage == 4) j["branch_counts"] = m.branch_counts;
  if (m.stage == 3) j["clean_fraction"] = m.clean_fraction;
  if (!std::isnan(m.fewshot_relation_accuracy)) j["fewshot_relation_accuracy"] = m.fewshot_relation_accuracy;
  return j;
}

struct TrainState {
  int epoch = 0;
  Network net;
  std::optional<PrototypeStore> prototypes;
  EmbeddingBank bank;
  std::vector<LabelState> verdicts;  // aligned with TrainData::web; stage 4 only
  Optimizer optimizer;
  Rng rng;
  double fewshot_relation_acceptance = std::numeric_limits<double>::quiet_NaN();
  double cosine_threshold = std::numeric_limits<double>::quiet_NaN();
  std::vector<EpochMetrics> history;
};

// Smallest threshold t such that round(fraction * n) values are strictly above t.
inline double threshold_for_acceptance(std::vector<double> values, double fraction) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end(), std::greater<>());
  const auto n = values.size();
  const auto m = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(n)));
  if (m == 0) return values.front();
  if (m >= n) return std::nextafter(values.back(), -std::numeric_limits<double>::infinity());
  return 0.5 * (values[m - 1] + values[m]);
}

class Trainer {
 public:
  Trainer(TrainConfig cfg, TrainData data) : cfg_(std::move(cfg)), data_(std::move(data)) {
    setup();
    state_.net = Network(cfg_.model, mix_seed(cfg_.seed, 11));
    state_.bank = EmbeddingBank(cfg_.model.bank_size, cfg_.model.projection_dim);
    state_.optimizer = Optimizer(cfg_.schedule.optimizer, cfg_.schedule.momentum, cfg_.schedule.weight_decay);
    state_.rng = Rng(mix_seed(cfg_.seed, 12));
  }

  Trainer(TrainConfig cfg, TrainData data, TrainState restored) : cfg_(std::move(cfg)), data_(std::move(data)), state_(std::move(restored)) {
    setup();
  }

  const TrainConfig& config() const { return cfg_; }
  const TrainData& data() const { return data_; }
  const TrainState& state() const { return state_; }
  TrainState& state() { return state_; }

  bool finished() const { return state_.epoch >= cfg_.schedule.total_epochs(); }
  int stage() const { return finished() ? 0 : cfg_.schedule.stage_of(state_.epoch); }

  void run_stage1() { run_stage(1); }
  void run_stage2() { run_stage(2); }
  void run_stage3() { run_stage(3); }
  void run_stage4() { run_stage(4); }

  void train(const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
    while (!finished()) {
      const EpochMetrics m = run_epoch();
      if (on_epoch) on_epoch(m);
    }
  }

  EpochMetrics run_epoch() {
    require(!finished(), "training already finished");
    const int s = stage();
    ensure_prototypes();
    if (s == 4 && state_.epoch == cfg_.schedule.t1 + cfg_.schedule.t2 + cfg_.schedule.t3) calibrate_verifier();
    EpochMetrics m;
    m.epoch = state_.epoch;
    m.stage = s;
    m.learning_rate = cfg_.schedule.learning_rate_at(state_.epoch);
    if (s == 3)
      relation_epoch(m);
    else
      supervised_epoch(s, m);
    if (s == 2 || s == 4) refresh_temperatures(s);
    if (s >= 3 && state_.prototypes && cfg_.relation_module && !data_.fewshot.empty()) m.fewshot_relation_accuracy = fewshot_relation_accuracy();
    ++state_.epoch;
    state_.history.push_back(m);
    return m;
  }

  // Row subsets of a batch laid out as [web rows | few-shot rows]. Rows whose
  // label is negative (OOD verdicts) are left out of every supervised set.
  struct RowSets {
    loss::Rows all, supervised, web_supervised, fewshot;
  };

  static RowSets partition_rows(std::span<const int> labels, Eigen::Index n_web) {
    RowSets s;
    for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(labels.size()); ++r) {
      s.all.push_back(r);
      if (labels[static_cast<std::size_t>(r)] < 0) continue;
      s.supervised.push_back(r);
      (r < n_web ? s.web_supervised : s.fewshot).push_back(r);
    }
    return s;
  }

  // Builds the prototype store if training has reached stage 2 and it does
  // not exist yet. Called automatically by run_epoch.
  void ensure_prototypes() {
    if (stage() >= 2 && !state_.prototypes) init_prototypes();
  }

  int fewshot_per_batch() const {
    if (data_.fewshot.empty()) return 0;
    const int B = cfg_.schedule.batch_size;
    const double ratio = static_cast<double>(B) * static_cast<double>(data_.fewshot.size()) / static_cast<double>(std::max<std::size_t>(1, data_.web.size()));
    return std::min(std::max(1, static_cast<int>(std::lround(ratio))), std::max(1, B / 4));
  }

  Matrix stack_inputs(const std::vector<const TrainSample*>& rows, double strength, int view) const {
    Matrix x(static_cast<Eigen::Index>(rows.size()), data_.input_dim);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto seed = mix_seed(cfg_.seed ^ 0xa11a11ULL, static_cast<std::uint64_t>(state_.epoch),
                                 static_cast<std::uint64_t>(rows[i]->sample_id) * 2 + static_cast<std::uint64_t>(view));
      x.row(static_cast<Eigen::Index>(i)) = perturb(rows[i]->input, strength, seed).transpose();
    }
    return x;
  }

  Matrix all_inputs(const std::vector<TrainSample>& samples) const {
    Matrix x(static_cast<Eigen::Index>(samples.size()), data_.input_dim);
    for (std::size_t i = 0; i < samples.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = samples[i].input.transpose();
    return x;
  }

 private:
  void setup() {
    cfg_.model.input_dim = data_.input_dim;
    cfg_.model.num_classes = data_.num_classes;
    cfg_.losses.beta = cfg_.curation.beta;
    cfg_.prototypes.tau = cfg_.losses.tau;
    cfg_.validate();
    for (const auto* set : {&data_.web, &data_.fewshot})
      for (const auto& s : *set) {
        if (s.input.size() != data_.input_dim) throw DimensionError("training sample has wrong input width");
        require(s.label >= 0 && s.label < data_.num_classes, "training sample label out of range");
      }
    require(!data_.web.empty(), "no web samples to train on");
  }

  void run_stage(int s) {
    require(stage() == s, "stage " + std::to_string(s) + " requested but trainer is at stage " + std::to_string(stage()));
    while (!finished() && stage() == s) run_epoch();
  }

  void init_prototypes() {
    const int C = data_.num_classes;
    if (!data_.fewshot.empty()) {
      const Matrix z = state_.net.forward_momentum(all_inputs(data_.fewshot));
      std::vector<int> labels;
      for (const auto& s : data_.fewshot) labels.push_back(s.label);
      state_.prototypes = PrototypeStore::from_fewshots(z, labels, C, cfg_.prototypes);
    } else {
      const Matrix z = state_.net.forward_momentum(all_inputs(data_.web));
      std::vector<int> labels;
      for (const auto& s : data_.web) labels.push_back(s.label);
      state_.prototypes = PrototypeStore::from_web_sample(z, labels, C, cfg_.schedule.zero_shot_per_class, cfg_.prototypes, state_.rng);
    }
  }

  // Few-shot acceptance of the relation verifier (full method) or the cosine
  // threshold reproducing a given acceptance (ablation).
  void calibrate_verifier() {
    if (data_.fewshot.empty()) {
      state_.cosine_threshold = cfg_.curation.gamma;
      return;
    }
    const Matrix z = state_.net.embed(all_inputs(data_.fewshot));
    const Matrix centers = state_.prototypes->centers();
    if (cfg_.relation_module) {
      const Matrix probs = nn::softmax_rows(state_.net.relation_scores(z, centers));
      std::size_t accepted = 0;
      for (std::size_t i = 0; i < data_.fewshot.size(); ++i)
        if (probs(static_cast<Eigen::Index>(i), data_.fewshot[i].label) > cfg_.curation.gamma) ++accepted;
      state_.fewshot_relation_acceptance = static_cast<double>(accepted) / static_cast<double>(data_.fewshot.size());
    } else {
      std::vector<double> cosines;
      for (std::size_t i = 0; i < data_.fewshot.size(); ++i)
        cosines.push_back(z.row(static_cast<Eigen::Index>(i)).dot(centers.row(data_.fewshot[i].label)));
      state_.cosine_threshold = threshold_for_acceptance(std::move(cosines), cfg_.ablation_fewshot_acceptance);
    }
  }

  double fewshot_relation_accuracy() const {
    const Matrix z = state_.net.embed(all_inputs(data_.fewshot));
    const Matrix scores = state_.net.relation_scores(z, state_.prototypes->centers());
    std::size_t hits = 0;
    for (std::size_t i = 0; i < data_.fewshot.size(); ++i)
      if (argmax(RowVector(scores.row(static_cast<Eigen::Index>(i)))) == data_.fewshot[i].label) ++hits;
    return static_cast<double>(hits) / static_cast<double>(data_.fewshot.size());
  }

  std::vector<Group> trainable_groups(int s) const {
    if (s == 3) return {Group::relation};
    std::vector<Group> groups;
    for (Group g : kAllGroups) {
      if (g == Group::relation && (s < 4 || !cfg_.relation_module)) continue;
      if (g == Group::encoder && state_.epoch < cfg_.schedule.warmup_epochs) continue;
      groups.push_back(g);
    }
    return groups;
  }

  struct BatchPlan {
    std::vector<std::size_t> web;
    std::vector<std::size_t> fewshot;
  };

  std::vector<BatchPlan> plan_epoch() {
    std::vector<std::size_t> order = iota_indices(data_.web.size());
    state_.rng.shuffle(order);
    std::vector<std::size_t> fs_order = iota_indices(data_.fewshot.size());
    state_.rng.shuffle(fs_order);
    const int bt = fewshot_per_batch();
    const auto B = static_cast<std::size_t>(cfg_.schedule.batch_size);
    std::vector<BatchPlan> plans;
    std::size_t cursor = 0;
    for (std::size_t start = 0; start < order.size(); start += B) {
      BatchPlan p;
      p.web.assign(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(std::min(start + B, order.size())));
      for (int j = 0; j < bt; ++j) {
        p.fewshot.push_back(fs_order[cursor % fs_order.size()]);
        ++cursor;
      }
      plans.push_back(std::move(p));
    }
    return plans;
  }

  void supervised_epoch(int s, EpochMetrics& m) {
    const auto groups = trainable_groups(s);
    const double lr = m.learning_rate;
    const auto& lc = cfg_.losses;
    const bool curate = s == 4;
    const bool polish = s == 4 || (s == 2 && cfg_.schedule.polish_in_stage2);
    if (curate) state_.verdicts.assign(data_.web.size(), LabelState{});

    std::map<std::string, double> sums;
    std::size_t batches = 0, correct = 0, seen = 0;

    for (const BatchPlan& plan : plan_epoch()) {
      std::vector<const TrainSample*> rows;
      for (auto i : plan.web) rows.push_back(&data_.web[i]);
      for (auto i : plan.fewshot) rows.push_back(&data_.fewshot[i]);
      const auto n_w = static_cast<Eigen::Index>(plan.web.size());
      const auto n = static_cast<Eigen::Index>(rows.size());

      const PlainForward fwd = state_.net.forward_plain(stack_inputs(rows, cfg_.aug_weak, 0));
      const Matrix zm = state_.net.forward_momentum(stack_inputs(rows, cfg_.aug_strong, 1));

      std::vector<int> labels(static_cast<std::size_t>(n));
      std::vector<double> margins(static_cast<std::size_t>(n));
      std::vector<double> confidence(static_cast<std::size_t>(n), 1.0);
      std::vector<int> branch(static_cast<std::size_t>(n), 0);
      for (Eigen::Index r = 0; r < n; ++r) {
        labels[static_cast<std::size_t>(r)] = rows[static_cast<std::size_t>(r)]->label;
        margins[static_cast<std::size_t>(r)] = r < n_w ? lc.delta_w : lc.delta_t;
      }

      RelationForward rf;
      if (curate) {
        const Matrix centers = state_.prototypes->centers();
        Matrix verify;
        if (cfg_.relation_module) {
          rf = state_.net.relation_forward(fwd.z, centers);
          verify = nn::softmax_rows(rf.scores);
        }
        for (Eigen::Index r = 0; r < n_w; ++r) {
          const int given = labels[static_cast<std::size_t>(r)];
          auto score = hybrid_score(row_span(fwd.p, r), fwd.z.row(r), centers, cfg_.curation.beta);
          LabelState st = cfg_.relation_module
                              ? adjust_label(row_span(verify, r), std::move(score), given, cfg_.curation.gamma)
                              : adjust_label_with_verifier(fwd.z.row(r).dot(centers.row(given)), state_.cosine_threshold, std::move(score), given,
                                                           cfg_.curation.gamma);
          st.sample_id = rows[static_cast<std::size_t>(r)]->sample_id;
          labels[static_cast<std::size_t>(r)] = st.label;
          confidence[static_cast<std::size_t>(r)] = st.confidence();
          branch[static_cast<std::size_t>(r)] = st.branch;
          ++m.branch_counts[static_cast<std::size_t>(st.branch - 1)];
          state_.verdicts[plan.web[static_cast<std::size_t>(r)]] = std::move(st);
        }
      }

      RowSets sets = partition_rows(labels, n_w);
      loss::Rows& all_rows = sets.all;
      loss::Rows& supervised_rows = sets.supervised;
      loss::Rows& web_supervised = sets.web_supervised;
      loss::Rows& fs_rows = sets.fewshot;
      loss::Rows aux_rows;
      if (data_.fewshot.empty()) {
        // zero-shot: confident web samples stand in for the few shots
        for (Eigen::Index r : web_supervised)
          if (fwd.p(r, labels[static_cast<std::size_t>(r)]) > cfg_.curation.gamma) aux_rows.push_back(r);
      } else {
        aux_rows = fs_rows;
      }

      HeadGrads g;
      if (s == 4) {
        const loss::Term fs_ce = loss::cross_entropy_batch(fwd.logits, labels, fs_rows);
        const loss::Term web = loss::hybrid_web_batch(fwd.logits, labels, confidence, web_supervised);
        sums["hybrid"] += fs_ce.value + web.value;
        g.logits = lc.w_hybrid * (fs_ce.grad + web.grad);
      } else {
        const loss::Term cls = loss::cross_entropy_batch(fwd.logits, labels, supervised_rows);
        sums["cls"] += cls.value;
        g.logits = lc.w_cls * cls.grad;
      }

      const loss::ProjectionTerm prj = loss::projection_batch(fwd.v_rec, fwd.v, fwd.aux_logits, labels, all_rows, aux_rows);
      sums["prj"] += prj.value();
      g.v = lc.w_prj * prj.grad_v;
      g.v_rec = lc.w_prj * prj.grad_v_rec;
      g.aux_logits = lc.w_prj * prj.grad_aux_logits;

      if (s >= 2) {
        const loss::Term proto = loss::prototypical_batch(fwd.z, labels, margins, *state_.prototypes, supervised_rows);
        const loss::Term ins = loss::instance_batch(fwd.z, zm, state_.bank.active(), lc.tau, all_rows);
        sums["proto"] += proto.value;
        sums["ins"] += ins.value;
        g.z = lc.w_proto * proto.grad + lc.w_ins * ins.grad;
      }

      state_.net.zero_grad();
      state_.net.backward_plain(fwd, g);

      if (curate && cfg_.relation_module) {
        loss::Rows rel_rows;
        for (Eigen::Index r = 0; r < n; ++r)
          if (r >= n_w || branch[static_cast<std::size_t>(r)] == 1 || branch[static_cast<std::size_t>(r)] == 2) rel_rows.push_back(r);
        const loss::Term rel = loss::cross_entropy_batch(rf.scores, labels, rel_rows);
        sums["rel"] += rel.value;
        state_.net.backward_relation(rf, lc.w_rel * rel.grad);  // z is detached for this term
      }

      state_.optimizer.step(state_.net, groups, lr);
      state_.net.ema_step();

      if (polish) {
        for (Eigen::Index r = 0; r < n; ++r) {
          const int y = labels[static_cast<std::size_t>(r)];
          const bool accept = r >= n_w || (s == 4 ? (branch[static_cast<std::size_t>(r)] == 1 || branch[static_cast<std::size_t>(r)] == 2) : true);
          if (accept && y >= 0) state_.prototypes->ema_update(zm.row(r).transpose(), y);
        }
      }

      std::vector<int> bank_labels(labels.begin(), labels.end());
      for (int& y : bank_labels)
        if (y < 0) y = EmbeddingBank::kUnlabeled;
      state_.bank.push(zm, bank_labels);

      for (Eigen::Index r : web_supervised) {
        ++seen;
        if (argmax(row_span(fwd.p, r)) == labels[static_cast<std::size_t>(r)]) ++correct;
      }
      ++batches;
    }
    for (auto& [name, total] : sums) m.losses[name] = total / static_cast<double>(std::max<std::size_t>(1, batches));
    m.train_accuracy = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
  }

  void relation_epoch(EpochMetrics& m) {
    if (!cfg_.relation_module) {
      m.losses["rel"] = 0.0;
      return;
    }
    const Matrix centers = state_.prototypes->centers();
    double total = 0.0;
    std::size_t batches = 0, clean = 0, web_seen = 0;
    for (const BatchPlan& plan : plan_epoch()) {
      std::vector<const TrainSample*> rows;
      for (auto i : plan.web) rows.push_back(&data_.web[i]);
      for (auto i : plan.fewshot) rows.push_back(&data_.fewshot[i]);
      const auto n_w = static_cast<Eigen::Index>(plan.web.size());
      const Matrix z = state_.net.embed(stack_inputs(rows, cfg_.aug_weak, 0));
      std::vector<int> labels;
      for (const auto* r : rows) labels.push_back(r->label);
      std::vector<bool> is_fewshot(rows.size(), false);
      std::fill(is_fewshot.begin() + n_w, is_fewshot.end(), true);
      const auto flags = clean_set(z, labels, is_fewshot, centers, cfg_.curation.sigma);
      loss::Rows rel_rows;
      for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(rows.size()); ++r)
        if (flags[static_cast<std::size_t>(r)]) rel_rows.push_back(r);
      clean += static_cast<std::size_t>(std::count(flags.begin(), flags.begin() + n_w, true));
      web_seen += static_cast<std::size_t>(n_w);

      const RelationForward rf = state_.net.relation_forward(z, centers);
      const loss::Term rel = loss::cross_entropy_batch(rf.scores, labels, rel_rows);
      state_.net.zero_grad();
      state_.net.backward_relation(rf, cfg_.losses.w_rel * rel.grad);
      state_.optimizer.step(state_.net, std::vector<Group>{Group::relation}, m.learning_rate);
      total += rel.value;
      ++batches;
    }
    m.losses["rel"] = total / static_cast<double>(std::max<std::size_t>(1, batches));
    m.clean_fraction = web_seen ? static_cast<double>(clean) / static_cast<double>(web_seen) : 0.0;
  }

  // Momentum-path embeddings of currently clean samples plus few shots.
  void refresh_temperatures(int s) {
    std::vector<TrainSample> members;
    std::vector<int> labels;
    for (std::size_t i = 0; i < data_.web.size(); ++i) {
      const int y = s == 4 ? state_.verdicts[i].label : data_.web[i].label;
      members.push_back(data_.web[i]);
      labels.push_back(y);
    }
    for (const auto& f : data_.fewshot) {
      members.push_back(f);
      labels.push_back(f.label);
    }
    const Matrix z = state_.net.forward_momentum(all_inputs(members));
    state_.prototypes->refresh_temperatures(z, labels);
  }

  TrainConfig cfg_;
  TrainData data_;
  TrainState state_;
};

// Cross-entropy on web labels as given, same encoder/classifier and schedule.
inline TrainState train_vanilla(TrainConfig cfg, const TrainData& data) {
  cfg.model.input_dim = data.input_dim;
  cfg.model.num_classes = data.num_classes;
  cfg.validate();
  TrainState st;
  st.net = Network(cfg.model, mix_seed(cfg.seed, 11));
  st.optimizer = Optimizer(cfg.schedule.optimizer, cfg.schedule.momentum, cfg.schedule.weight_decay);
  st.rng = Rng(mix_seed(cfg.seed, 13));
  const std::vector<Group> groups = {Group::encoder, Group::classifier};
  const auto B = static_cast<std::size_t>(cfg.schedule.batch_size);
  for (int epoch = 0; epoch < cfg.schedule.total_epochs(); ++epoch) {
    std::vector<std::size_t> order = iota_indices(data.web.size());
    st.rng.shuffle(order);
    const double lr = cfg.schedule.learning_rate_at(epoch);
    EpochMetrics m;
    m.epoch = epoch;
    m.stage = 1;
    m.learning_rate = lr;
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += B) {
      const std::size_t end = std::min(start + B, order.size());
      Matrix x(static_cast<Eigen::Index>(end - start), data.input_dim);
      std::vector<int> labels;
      loss::Rows rows;
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = data.web[order[i]];
        const auto seed = mix_seed(cfg.seed ^ 0xa11a11ULL, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(s.sample_id) * 2);
        x.row(static_cast<Eigen::Index>(i - start)) = perturb(s.input, cfg.aug_weak, seed).transpose();
        labels.push_back(s.label);
        rows.push_back(static_cast<Eigen::Index>(i - start));
      }
      const PlainForward fwd = st.net.forward_plain(x);
      const loss::Term cls = loss::cross_entropy_batch(fwd.logits, labels, rows);
      HeadGrads g;
      g.logits = cls.grad;
      st.net.zero_grad();
      st.net.backward_plain(fwd, g);
      st.optimizer.step(st.net, groups, lr);
      total += cls.value;
      ++batches;
    }
    m.losses["cls"] = total / static_cast<double>(std::max<std::size_t>(1, batches));
    st.history.push_back(m);
    st.epoch = epoch + 1;
  }
  return st;
}

}  // namespace fopro
