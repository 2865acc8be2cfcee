// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run configuration. The on-disk form is a JSON object with the sections
// data, model, losses, curation, schedule and seed. Hyperparameters keep
// their conventional short names (m_e, m_p, d_p, Q, tau, alpha, sigma, beta,
// gamma, delta_w, delta_t, T1..T4).

#include "fopro/curation.hpp"
#include "fopro/datagen.hpp"
#include "fopro/losses.hpp"
#include "fopro/model.hpp"
#include "fopro/prototypes.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>

namespace fopro {

struct ScheduleConfig {
  int t1 = 20;
  int t2 = 5;
  int t3 = 20;
  int t4 = 175;
  int warmup_epochs = 0;  // linear ramp with the encoder frozen
  int batch_size = 64;
  double learning_rate = 0.01;
  std::string optimizer = "sgd";  // "sgd" (momentum) or "adam"
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool polish_in_stage2 = false;
  int zero_shot_per_class = 16;

  int total_epochs() const { return t1 + t2 + t3 + t4; }

  int stage_of(int epoch) const {
    if (epoch < t1) return 1;
    if (epoch < t1 + t2) return 2;
    if (epoch < t1 + t2 + t3) return 3;
    return 4;
  }

  double learning_rate_at(int epoch) const {
    if (epoch < warmup_epochs) return learning_rate * (epoch + 1) / warmup_epochs;
    const int span = total_epochs() - warmup_epochs;
    if (span <= 0) return learning_rate;
    return learning_rate * 0.5 * (1.0 + std::cos(M_PI * (epoch - warmup_epochs) / span));
  }

  void validate() const {
    require(t1 >= 0 && t2 >= 0 && t3 >= 0 && t4 >= 0, "schedule: stage lengths must be non-negative");
    require(warmup_epochs >= 0, "schedule: warmup_epochs must be non-negative");
    require(batch_size > 0, "schedule: batch_size must be positive");
    require(learning_rate > 0.0, "schedule: learning rate must be positive");
    require(optimizer == "sgd" || optimizer == "adam", "schedule: optimizer must be sgd or adam");
    require(zero_shot_per_class > 0, "schedule: zero_shot_per_class must be positive");
  }
};

struct TrainConfig {
  DatasetSpec data;
  double aug_weak = 0.02;
  double aug_strong = 0.08;
  ModelConfig model;
  loss::LossConfig losses;
  PrototypeConfig prototypes;
  CurationConfig curation;
  ScheduleConfig schedule;
  std::uint64_t seed = 0;
  // Ablation: branch 1 of the label rule tests cosine(z, c_y) instead of the
  // relation module, with the threshold chosen so that this fraction of few
  // shots passes it.
  bool relation_module = true;
  double ablation_fewshot_acceptance = 1.0;

  void validate() const {
    model.validate();
    losses.validate();
    curation.validate();
    schedule.validate();
    require(aug_weak >= 0.0 && aug_strong >= aug_weak, "data: need 0 <= aug_weak <= aug_strong");
    require(prototypes.momentum >= 0.0 && prototypes.momentum < 1.0, "losses: m_p must lie in [0,1)");
    require(prototypes.alpha > 0.0, "losses: alpha must be positive");
    require(ablation_fewshot_acceptance >= 0.0 && ablation_fewshot_acceptance <= 1.0, "ablation acceptance must lie in [0,1]");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json data = to_json(c.data);
  data["aug_weak"] = c.aug_weak;
  data["aug_strong"] = c.aug_strong;
  return {
      {"data", data},
      {"model",
       {{"hidden_dim", c.model.hidden_dim}, {"d_e", c.model.feature_dim}, {"d_p", c.model.projection_dim}, {"Q", c.model.bank_size}, {"m_e", c.model.encoder_momentum}}},
      {"losses",
       {{"tau", c.losses.tau},
        {"delta_w", c.losses.delta_w},
        {"delta_t", c.losses.delta_t},
        {"alpha", c.prototypes.alpha},
        {"m_p", c.prototypes.momentum},
        {"phi_min_scale", c.prototypes.phi_min_scale},
        {"phi_max_scale", c.prototypes.phi_max_scale},
        {"w_cls", c.losses.w_cls},
        {"w_prj", c.losses.w_prj},
        {"w_proto", c.losses.w_proto},
        {"w_ins", c.losses.w_ins},
        {"w_rel", c.losses.w_rel},
        {"w_hybrid", c.losses.w_hybrid}}},
      {"curation",
       {{"sigma", c.curation.sigma},
        {"beta", c.curation.beta},
        {"gamma", c.curation.gamma},
        {"relation_module", c.relation_module},
        {"ablation_fewshot_acceptance", c.ablation_fewshot_acceptance}}},
      {"schedule",
       {{"T1", c.schedule.t1},
        {"T2", c.schedule.t2},
        {"T3", c.schedule.t3},
        {"T4", c.schedule.t4},
        {"warmup_epochs", c.schedule.warmup_epochs},
        {"batch_size", c.schedule.batch_size},
        {"lr", c.schedule.learning_rate},
        {"optimizer", c.schedule.optimizer},
        {"momentum", c.schedule.momentum},
        {"weight_decay", c.schedule.weight_decay},
        {"polish_in_stage2", c.schedule.polish_in_stage2},
        {"zero_shot_per_class", c.schedule.zero_shot_per_class}}},
      {"seed", c.seed},
  };
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  auto get = [](const nlohmann::json& obj, const char* key, auto& field) {
    if (obj.contains(key)) obj.at(key).get_to(field);
  };
  static const char* kSections[] = {"data", "model", "losses", "curation", "schedule", "seed"};
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* s : kSections) known = known || key == s;
    if (!known) throw Error("config: unknown section '" + key + "'");
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    c.data = dataset_spec_from_json(d, c.data);
    get(d, "aug_weak", c.aug_weak);
    get(d, "aug_strong", c.aug_strong);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    get(m, "hidden_dim", c.model.hidden_dim);
    get(m, "d_e", c.model.feature_dim);
    get(m, "d_p", c.model.projection_dim);
    get(m, "Q", c.model.bank_size);
    get(m, "m_e", c.model.encoder_momentum);
  }
  if (j.contains("losses")) {
    const auto& l = j.at("losses");
    get(l, "tau", c.losses.tau);
    get(l, "delta_w", c.losses.delta_w);
    get(l, "delta_t", c.losses.delta_t);
    get(l, "alpha", c.prototypes.alpha);
    get(l, "m_p", c.prototypes.momentum);
    get(l, "phi_min_scale", c.prototypes.phi_min_scale);
    get(l, "phi_max_scale", c.prototypes.phi_max_scale);
    get(l, "w_cls", c.losses.w_cls);
    get(l, "w_prj", c.losses.w_prj);
    get(l, "w_proto", c.losses.w_proto);
    get(l, "w_ins", c.losses.w_ins);
    get(l, "w_rel", c.losses.w_rel);
    get(l, "w_hybrid", c.losses.w_hybrid);
  }
  if (j.contains("curation")) {
    const auto& u = j.at("curation");
    get(u, "sigma", c.curation.sigma);
    get(u, "beta", c.curation.beta);
    get(u, "gamma", c.curation.gamma);
    get(u, "relation_module", c.relation_module);
    get(u, "ablation_fewshot_acceptance", c.ablation_fewshot_acceptance);
  }
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    get(s, "T1", c.schedule.t1);
    get(s, "T2", c.schedule.t2);
    get(s, "T3", c.schedule.t3);
    get(s, "T4", c.schedule.t4);
    get(s, "warmup_epochs", c.schedule.warmup_epochs);
    get(s, "batch_size", c.schedule.batch_size);
    get(s, "lr", c.schedule.learning_rate);
    get(s, "optimizer", c.schedule.optimizer);
    get(s, "momentum", c.schedule.momentum);
    get(s, "weight_decay", c.schedule.weight_decay);
    get(s, "polish_in_stage2", c.schedule.polish_in_stage2);
    get(s, "zero_shot_per_class", c.schedule.zero_shot_per_class);
  }
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
  c.losses.beta = c.curation.beta;
  c.prototypes.tau = c.losses.tau;
  c.model.input_dim = c.data.input_dim;
  c.model.num_classes = c.data.num_classes;
  return c;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read config " + path.string());
  return train_config_from_json(nlohmann::json::parse(in));
}

}  // namespace fopro
