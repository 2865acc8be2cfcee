// SPDX-License-Identifier: Apache-2.0
#pragma once

// Checkpoint layout:
//   "FOPROCK1\n"
//   u64 header length, JSON header (config, counters, verdicts, tensor table)
//   raw little-endian doubles for every tensor in table order
// Restoring gives back the exact bits of every parameter, optimizer slot,
// bank row and prototype.

#include "fopro/trainer.hpp"

#include <json.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace fopro {

struct Checkpoint {
  TrainConfig config;
  TrainState state;
};

namespace detail {

inline constexpr char kCheckpointMagic[] = "FOPROCK1\n";

inline nlohmann::json nan_to_null(double x) { return std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x); }
inline double null_to_nan(const nlohmann::json& j) { return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>(); }

inline EpochMetrics epoch_metrics_from_json(const nlohmann::json& j) {
  EpochMetrics m;
  m.epoch = j.at("epoch").get<int>();
  m.stage = j.at("stage").get<int>();
  m.learning_rate = j.at("lr").get<double>();
  m.losses = j.at("losses").get<std::map<std::string, double>>();
  m.train_accuracy = j.at("train_accuracy").get<double>();
  if (j.contains("branch_counts")) m.branch_counts = j.at("branch_counts").get<std::array<std::size_t, 4>>();
  if (j.contains("clean_fraction")) m.clean_fraction = j.at("clean_fraction").get<double>();
  if (j.contains("fewshot_relation_accuracy")) m.fewshot_relation_accuracy = j.at("fewshot_relation_accuracy").get<double>();
  return m;
}

inline nlohmann::json verdict_to_json(const LabelState& s) {
  return {{"id", s.sample_id}, {"verdict", static_cast<int>(s.verdict)}, {"given", s.given_label}, {"label", s.label},
          {"relation_prob", nan_to_null(s.relation_prob)}, {"score", s.hybrid_score}, {"branch", s.branch}};
}

inline LabelState verdict_from_json(const nlohmann::json& j) {
  LabelState s;
  s.sample_id = j.at("id").get<std::int64_t>();
  s.verdict = static_cast<Verdict>(j.at("verdict").get<int>());
  s.given_label = j.at("given").get<int>();
  s.label = j.at("label").get<int>();
  s.relation_prob = null_to_nan(j.at("relation_prob"));
  s.hybrid_score = j.at("score").get<std::vector<double>>();
  s.branch = j.at("branch").get<int>();
  return s;
}

struct TensorRef {
  std::string name;
  Matrix* value;
};

// Every tensor in a fixed order. Adam second moments exist only for adam.
inline std::vector<TensorRef> collect_tensors(TrainState& st, Matrix& bank, Matrix& centers, Matrix& temps) {
  std::vector<TensorRef> out;
  st.net.visit_all([&](const std::string& name, Matrix& value, Matrix&) { out.push_back({"param/" + name, &value}); });
  for (auto& [name, slot] : st.optimizer.slots()) {
    out.push_back({"opt1/" + name, &slot.first});
    if (slot.second.size()) out.push_back({"opt2/" + name, &slot.second});
  }
  out.push_back({"bank", &bank});
  if (st.prototypes) {
    out.push_back({"proto/centers", &centers});
    out.push_back({"proto/temperatures", &temps});
  }
  return out;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg, const TrainState& state_in) {
  TrainState st = state_in;  // collect_tensors needs mutable access
  Matrix bank = st.bank.storage();
  Matrix centers, temps;
  std::vector<int> member_counts;
  if (st.prototypes) {
    centers = st.prototypes->centers();
    temps = st.prototypes->temperatures();
    for (int k = 0; k < st.prototypes->num_classes(); ++k) member_counts.push_back((*st.prototypes)[k].member_count);
  }
  const auto tensors = detail::collect_tensors(st, bank, centers, temps);

  nlohmann::json header;
  header["config"] = to_json(cfg);
  header["epoch"] = st.epoch;
  header["rng"] = st.rng.state();
  header["bank"] = {{"head", st.bank.head()}, {"size", st.bank.size()}, {"labels", st.bank.raw_labels()}};
  header["optimizer"] = {{"kind", st.optimizer.kind()}, {"steps", st.optimizer.steps()}, {"counts", st.optimizer.counts()}};
  header["prototypes"] = st.prototypes ? nlohmann::json{{"member_counts", member_counts}} : nlohmann::json(nullptr);
  header["fewshot_relation_acceptance"] = detail::nan_to_null(st.fewshot_relation_acceptance);
  header["cosine_threshold"] = detail::nan_to_null(st.cosine_threshold);
  header["relation_calls"] = st.net.relation_calls();
  auto& verdicts = header["verdicts"] = nlohmann::json::array();
  for (const auto& v : st.verdicts) verdicts.push_back(detail::verdict_to_json(v));
  auto& history = header["history"] = nlohmann::json::array();
  for (const auto& m : st.history) history.push_back(to_json(m));
  auto& table = header["tensors"] = nlohmann::json::array();
  for (const auto& t : tensors) table.push_back({t.name, t.value->rows(), t.value->cols()});

  std::filesystem::create_directories(path.has_parent_path() ? path.parent_path() : std::filesystem::path("."));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  const std::string text = header.dump();
  const std::uint64_t len = text.size();
  out.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic) - 1);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors)
    out.write(reinterpret_cast<const char*>(t.value->data()), static_cast<std::streamsize>(t.value->size() * sizeof(double)));
  if (!out) throw Error("short write to checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read checkpoint " + path.string());
  char magic[sizeof(detail::kCheckpointMagic) - 1];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, detail::kCheckpointMagic, sizeof magic) != 0) throw Error(path.string() + " is not a checkpoint");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw Error("truncated checkpoint header");
  const auto header = nlohmann::json::parse(text);

  Checkpoint ck;
  ck.config = train_config_from_json(header.at("config"));
  TrainState& st = ck.state;
  st.epoch = header.at("epoch").get<int>();
  st.net = Network(ck.config.model, 0);
  st.net.set_relation_calls(header.value("relation_calls", std::uint64_t{0}));
  st.rng.set_state(header.at("rng").get<std::uint64_t>());
  const auto& opt = header.at("optimizer");
  st.optimizer = Optimizer(opt.at("kind").get<std::string>(), ck.config.schedule.momentum, ck.config.schedule.weight_decay);
  st.optimizer.set_steps(opt.at("steps").get<long long>());
  st.optimizer.counts() = opt.at("counts").get<std::map<std::string, long long>>();
  st.fewshot_relation_acceptance = detail::null_to_nan(header.at("fewshot_relation_acceptance"));
  st.cosine_threshold = detail::null_to_nan(header.at("cosine_threshold"));
  for (const auto& v : header.at("verdicts")) st.verdicts.push_back(detail::verdict_from_json(v));
  for (const auto& m : header.at("history")) st.history.push_back(detail::epoch_metrics_from_json(m));

  // Shape the containers so collect_tensors yields the same table.
  const auto& table = header.at("tensors");
  for (const auto& t : table) {
    const auto name = t.at(0).get<std::string>();
    const auto rows = t.at(1).get<Eigen::Index>(), cols = t.at(2).get<Eigen::Index>();
    if (name.rfind("opt1/", 0) == 0) st.optimizer.slots()[name.substr(5)].first = Matrix::Zero(rows, cols);
    if (name.rfind("opt2/", 0) == 0) st.optimizer.slots()[name.substr(5)].second = Matrix::Zero(rows, cols);
  }
  const bool has_protos = !header.at("prototypes").is_null();
  const int C = ck.config.model.num_classes;
  if (has_protos)
    st.prototypes = PrototypeStore::restore(Matrix::Zero(C, ck.config.model.projection_dim), Vector::Zero(C), std::vector<int>(static_cast<std::size_t>(C), 0),
                                            ck.config.prototypes);
  Matrix bank, centers, temps;
  const auto tensors = detail::collect_tensors(st, bank, centers, temps);
  if (tensors.size() != table.size()) throw Error("checkpoint tensor table does not match the model");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& t = table[i];
    if (t.at(0).get<std::string>() != tensors[i].name) throw Error("checkpoint tensor " + t.at(0).get<std::string>() + " out of order");
    Matrix& m = *tensors[i].value;
    const auto rows = t.at(1).get<Eigen::Index>(), cols = t.at(2).get<Eigen::Index>();
    if (m.size() && (m.rows() != rows || m.cols() != cols)) throw DimensionError("checkpoint tensor " + tensors[i].name + " has the wrong shape");
    m.resize(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw Error("truncated checkpoint payload");
  }
  const auto& b = header.at("bank");
  st.bank = EmbeddingBank(ck.config.model.bank_size, ck.config.model.projection_dim);
  st.bank.restore(std::move(bank), b.at("labels").get<std::vector<int>>(), b.at("head").get<int>(), b.at("size").get<int>());
  if (has_protos)
    st.prototypes = PrototypeStore::restore(centers, Eigen::Map<const Vector>(temps.data(), temps.size()), header.at("prototypes").at("member_counts").get<std::vector<int>>(),
                                            ck.config.prototypes);
  return ck;
}

}  // namespace fopro
