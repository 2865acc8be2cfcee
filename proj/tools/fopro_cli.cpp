// SPDX-License-Identifier: Apache-2.0
//
// fopro: data generation, training, evaluation and the sweep/ablation
// experiments from the command line.

#include "fopro/fopro.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace fopro;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = true) {
  cmd->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "seed for data and training (overrides the config)");
  auto* out = cmd->add_option("--out", c.out, "output location");
  if (out_required) out->required();
}

TrainConfig resolve(const Common& c) {
  TrainConfig cfg = c.config.empty() ? TrainConfig{} : load_train_config(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.data.seed = *c.seed;
  }
  cfg.validate();
  return cfg;
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

// Stage-4 verdicts scored against truth, one row per epoch.
class CurationLog {
 public:
  CurationLog(const Dataset& ds) {
    for (const auto& s : ds.web) truth_.emplace(s.sample_id, s.truth_label);
    out_ << curation_report_header() << '\n';
  }

  void record(int epoch, const std::vector<LabelState>& verdicts) {
    std::vector<int> aligned;
    for (const auto& v : verdicts) aligned.push_back(truth_.at(v.sample_id));
    out_ << curation_report_row(epoch, score_curation(verdicts, aligned)) << '\n';
  }

  std::string str() const { return out_.str(); }

 private:
  std::unordered_map<std::int64_t, int> truth_;
  std::ostringstream out_;
};

std::string fewshot_prototype_report(const TrainState& st, const Dataset& ds) {
  if (!st.prototypes) return "no prototypes (training stopped before stage 2)\n";
  if (ds.fewshot.empty()) return prototype_report(*st.prototypes);
  const int C = ds.spec.num_classes;
  Matrix x(static_cast<Eigen::Index>(ds.fewshot.size()), ds.spec.input_dim);
  for (std::size_t i = 0; i < ds.fewshot.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = ds.fewshot[i].input.transpose();
  const Matrix z = st.net.forward_momentum(x);
  Matrix means = Matrix::Zero(C, z.cols());
  for (std::size_t i = 0; i < ds.fewshot.size(); ++i) means.row(ds.fewshot[i].given_label) += z.row(static_cast<Eigen::Index>(i));
  for (int k = 0; k < C; ++k)
    if (means.row(k).norm() > 0.0) means.row(k).normalize();
  return prototype_report(*st.prototypes, &means);
}

int cmd_generate(const Common& c, std::optional<int> shots) {
  TrainConfig cfg = resolve(c);
  if (shots) cfg.data.shots_per_class = *shots;
  const Dataset ds = generate(cfg.data);
  write_dataset(ds, c.out);
  const auto n = noise_summary(ds.web);
  std::printf("wrote %s: %zu web (%zu flipped, %zu ood), %zu few-shot, %zu test\n", c.out.c_str(), ds.web.size(), n.n_flipped, n.n_ood,
              ds.fewshot.size(), ds.test.size());
  return 0;
}

int cmd_train(const Common& c, const std::string& data_dir, bool vanilla) {
  TrainConfig cfg = resolve(c);
  const fs::path out = c.out;
  fs::create_directories(out);
  Dataset ds;
  if (data_dir.empty()) {
    ds = generate(cfg.data);
    write_dataset(ds, out / "data");
  } else {
    ds = read_dataset(data_dir, /*with_truth=*/true);
    cfg.data = ds.spec;
  }
  write_json(out / "config.json", to_json(cfg));

  TrainState final_state;
  std::ofstream metrics(out / "metrics.jsonl");
  if (vanilla) {
    final_state = train_vanilla(cfg, make_train_data(ds));
    for (const auto& m : final_state.history) metrics << to_json(m).dump() << '\n';
  } else {
    CurationLog curation(ds);
    Trainer trainer(cfg, make_train_data(ds));
    trainer.train([&](const EpochMetrics& m) {
      metrics << to_json(m).dump() << '\n';
      metrics.flush();
      std::fprintf(stderr, "epoch %d stage %d %s\n", m.epoch, m.stage, nlohmann::json(m.losses).dump().c_str());
      if (m.stage == 4) curation.record(m.epoch, trainer.state().verdicts);
    });
    final_state = trainer.state();
    cfg = trainer.config();
    write_text(out / "curation.tsv", curation.str());
    write_text(out / "prototypes.tsv", fewshot_prototype_report(final_state, ds));
  }
  save_checkpoint(out / "checkpoint.bin", cfg, final_state);
  const EvalReport report = evaluate(final_state, ds);
  write_text(out / "report.txt", format_report(report));
  write_text(out / "loss_curves.svg", loss_curve_svg(final_state.history));
  std::printf("top1 %.4f  top5 %.4f  web %.4f  gap %.4f\n", report.top1, report.top5, report.web_test_accuracy, report.gap);
  return 0;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& data_dir, const std::string& out) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Dataset ds = read_dataset(data_dir, /*with_truth=*/true);
  const std::string text = format_report(evaluate(ck.state, ds));
  write_text(out, text);
  std::cout << text;
  return 0;
}

int cmd_inspect(const std::string& checkpoint, const std::string& data_dir, const std::string& out) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  std::string text;
  if (!data_dir.empty())
    text = fewshot_prototype_report(ck.state, read_dataset(data_dir, true));
  else
    text = ck.state.prototypes ? prototype_report(*ck.state.prototypes) : "no prototypes (training stopped before stage 2)\n";
  if (out.empty())
    std::cout << text;
  else
    write_text(out, text);
  return 0;
}

int cmd_ablate(const Common& c) {
  const TrainConfig cfg = resolve(c);
  const AblationResult a = ablate_relation(cfg);
  write_text(fs::path(c.out) / "ablation.tsv", format_ablation(a));
  std::cout << format_ablation(a);
  return 0;
}

int cmd_sweep(const Common& c, const std::vector<int>& shots) {
  const TrainConfig cfg = resolve(c);
  const auto rows = kshot_sweep(cfg, shots);
  write_text(fs::path(c.out) / "sweep.tsv", format_sweep(rows));
  write_text(fs::path(c.out) / "sweep.svg", sweep_svg(rows));
  std::cout << format_sweep(rows);
  return 0;
}

int cmd_export(const std::string& checkpoint, const std::string& data_dir, const std::string& out) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  write_text(out, export_embeddings(ck.state, read_dataset(data_dir, true)));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot guided prototype learning on synthetic web data"};
  app.require_subcommand(1);

  Common gen_opts;
  std::optional<int> gen_shots;
  auto* gen = app.add_subcommand("generate-data", "write a synthetic web/few-shot/test dataset");
  add_common(gen, gen_opts);
  gen->add_option("--shots", gen_shots, "few shots per class (overrides the config)");

  Common train_opts;
  std::string train_data;
  auto* train = app.add_subcommand("train", "run the four-stage curriculum");
  add_common(train, train_opts);
  train->add_option("--data", train_data, "dataset directory (generated from the config when omitted)");

  Common base_opts;
  std::string base_data;
  auto* base = app.add_subcommand("baseline", "train the plain cross-entropy baseline on web labels");
  add_common(base, base_opts);
  base->add_option("--data", base_data, "dataset directory");

  Common eval_opts;
  std::string eval_ckpt, eval_data;
  auto* ev = app.add_subcommand("evaluate", "score a checkpoint against a dataset");
  add_common(ev, eval_opts);
  ev->add_option("--checkpoint", eval_ckpt)->required()->check(CLI::ExistingFile);
  ev->add_option("--data", eval_data)->required()->check(CLI::ExistingDirectory);

  Common insp_opts;
  std::string insp_ckpt, insp_data;
  auto* insp = app.add_subcommand("inspect-prototypes", "dump prototype centers and temperatures");
  add_common(insp, insp_opts, /*out_required=*/false);
  insp->add_option("--checkpoint", insp_ckpt)->required()->check(CLI::ExistingFile);
  insp->add_option("--data", insp_data, "dataset directory for few-shot cosines")->check(CLI::ExistingDirectory);

  Common abl_opts;
  bool no_relation = false;
  auto* abl = app.add_subcommand("ablate", "paired run with and without the relation module");
  add_common(abl, abl_opts);
  abl->add_flag("--no-relation-module", no_relation, "compare against cosine verification")->required();

  Common sweep_opts;
  std::vector<int> sweep_shots = {0, 1, 2, 4, 8, 16};
  auto* sweep = app.add_subcommand("sweep-k", "train and evaluate once per few-shot count");
  add_common(sweep, sweep_opts);
  sweep->add_option("--shots", sweep_shots, "few-shot counts")->delimiter(',');

  Common exp_opts;
  std::string exp_ckpt, exp_data;
  auto* exp = app.add_subcommand("export-embeddings", "write embeddings of every sample as TSV");
  add_common(exp, exp_opts);
  exp->add_option("--checkpoint", exp_ckpt)->required()->check(CLI::ExistingFile);
  exp->add_option("--data", exp_data)->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_generate(gen_opts, gen_shots);
    if (*train) return cmd_train(train_opts, train_data, false);
    if (*base) return cmd_train(base_opts, base_data, true);
    if (*ev) return cmd_evaluate(eval_ckpt, eval_data, eval_opts.out);
    if (*insp) return cmd_inspect(insp_ckpt, insp_data, insp_opts.out);
    if (*abl) return cmd_ablate(abl_opts);
    if (*sweep) return cmd_sweep(sweep_opts, sweep_shots);
    if (*exp) return cmd_export(exp_ckpt, exp_data, exp_opts.out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
