// SPDX-License-Identifier: Apache-2.0
// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include "test_util.hpp"

#include <chrono>
#include <cstdio>
#include <set>
#include <sstream>

using namespace fopro;
using namespace fopro::testing;

namespace {

class Clock {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

struct Outcome {
  bool pass = true;
  std::string detail;
};

int failures = 0;

void report(int id, const char* name, const Outcome& o, double secs) {
  std::printf("criterion %d %s: %s (%.1fs) %s\n", id, name, o.pass ? "PASS" : "FAIL", secs, o.detail.c_str());
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

// ---------------------------------------------------------------------------
// criterion 1: oracles

double lse(const std::vector<double>& x) {
  double m = x[0], s = 0.0;
  for (double v : x) m = std::max(m, v);
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

std::vector<double> row_vec(const Matrix& m, Eigen::Index r) { return {m.row(r).data(), m.row(r).data() + m.cols()}; }

Outcome oracle_suite() {
  Outcome o;
  int instances = 0;
  double worst = 0.0;
  auto check = [&](double got, double want, double tol) {
    ++instances;
    worst = std::max(worst, std::abs(got - want));
    if (!(std::abs(got - want) <= tol)) o.pass = false;
  };
  Rng rng(2024);
  for (int t = 0; t < 25; ++t) {
    // prototypical with heterogeneous temperatures and a margin
    const int C = 5, d = 6;
    const Matrix centers = random_unit_rows(C, d, rng);
    std::vector<int> lab(C);
    for (int k = 0; k < C; ++k) lab[static_cast<std::size_t>(k)] = k;
    auto store = PrototypeStore::from_fewshots(centers, lab, C, {});
    std::vector<double> phi(C);
    for (int k = 0; k < C; ++k) store[k].temperature = phi[static_cast<std::size_t>(k)] = rng.uniform(0.05, 0.5);
    const Vector z = random_unit(d, rng);
    const int y = static_cast<int>(rng.index(C));
    const double delta = rng.uniform(0.0, 0.8);
    std::vector<double> logits;
    for (int k = 0; k < C; ++k) logits.push_back((z.dot(centers.row(k).transpose()) - delta) / phi[static_cast<std::size_t>(k)]);
    const std::vector<double> zv(z.data(), z.data() + d);
    check(loss::prototypical(zv, y, store, delta), lse(logits) - logits[static_cast<std::size_t>(y)], 1e-6);

    // instance
    const Vector pos = random_unit(d, rng);
    const Matrix bank = random_unit_rows(8, d, rng);
    std::vector<double> il = {z.dot(pos) / 0.1};
    for (Eigen::Index q = 0; q < bank.rows(); ++q) il.push_back(z.dot(bank.row(q).transpose()) / 0.1);
    check(loss::instance(zv, std::vector<double>(pos.data(), pos.data() + d), bank, 0.1), lse(il) - il[0], 1e-6);

    // relation
    const Matrix scores = random_matrix(1, C, rng, 3.0);
    const auto sv = row_vec(scores, 0);
    check(loss::relation(sv, y), lse(sv) - sv[static_cast<std::size_t>(y)], 1e-6);

    // hybrid
    std::vector<double> pw = random_probs(C, rng), pt = random_probs(C, rng);
    const double s = rng.uniform(0.0, 1.0);
    double plogp = 0.0;
    for (double p : pw) plogp += p * std::log(p);
    const int yt = static_cast<int>(rng.index(C));
    check(loss::hybrid(pw, y, s, pt, yt), -std::log(pt[static_cast<std::size_t>(yt)]) - s * std::log(pw[static_cast<std::size_t>(y)]) - (1 - s) * plogp, 1e-6);

    // concentration
    const int n = 2 + static_cast<int>(rng.index(10));
    const Matrix members = random_unit_rows(n, d, rng);
    double dist = 0.0;
    for (int i = 0; i < n; ++i) dist += (members.row(i) - centers.row(0)).norm();
    auto s2 = store;
    s2.refresh_temperatures(members, std::vector<int>(static_cast<std::size_t>(n), 0));
    const auto& pc = s2.config();
    check(s2[0].temperature, std::clamp(dist / (n * std::log(n + pc.alpha)), pc.phi_min(), pc.phi_max()), 1e-9);
  }

  // frozen hand-worked examples
  {
    PrototypeConfig pc;
    Matrix c(2, 3), z(2, 3);
    c << 1, 0, 0, 0, 1, 0;
    z << 1, 0.2, 0, 1, 0, 0.4;
    auto s = PrototypeStore::from_fewshots(c, std::vector<int>{0, 1}, 2, pc);
    s.refresh_temperatures(z, std::vector<int>{0, 0});
    check(s[0].temperature, 0.1207288813145534, 1e-12);
    auto two = PrototypeStore::from_fewshots(Matrix::Identity(2, 2), std::vector<int>{0, 1}, 2, pc);
    check(loss::prototypical(std::vector<double>{0.9, 0.1}, 0, two, 0.0), 3.354063728956624e-4, 1e-12);
    const std::vector<double> pw = {0.7, 0.3}, pt = {0.9, 0.1};
    check(loss::hybrid(pw, 0, 0.5, pt, 0), 0.5891301386546393, 1e-12);
  }

  // four-branch rule over a 10x10x10 grid
  std::set<int> seen;
  const int C = 10;
  const double gamma = 0.6;
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 10; ++j)
      for (int k = 0; k < 10; ++k) {
        const double rel_y = 0.05 + 0.1 * i, max_s = 0.05 + 0.1 * j, s_y = max_s * (k + 1) / 10.0;
        const int y = (i + j + k) % C;
        std::vector<double> s(C, 0.0), rel(C, (1.0 - rel_y) / (C - 1));
        rel[static_cast<std::size_t>(y)] = rel_y;
        s[static_cast<std::size_t>(y)] = s_y;
        if (s_y < max_s) s[static_cast<std::size_t>((y + 3) % C)] = max_s;
        int branch = 4, label = kOod;
        const int best = static_cast<int>(std::max_element(s.begin(), s.end()) - s.begin());
        if (rel_y > gamma)
          branch = 1, label = y;
        else if (s[static_cast<std::size_t>(best)] > gamma)
          branch = 2, label = best;
        else if (s_y > 1.0 / C)
          branch = 3, label = y;
        const LabelState got = adjust_label(rel, s, y, gamma);
        ++instances;
        if (got.branch != branch || got.label != label) o.pass = false;
        seen.insert(got.branch);
      }
  if (seen.size() != 4) o.pass = false;
  o.detail = "instances=" + std::to_string(instances) + fmt(" max_abs_err=%.2e", worst) + " branches_hit=" + std::to_string(seen.size());
  return o;
}

// ---------------------------------------------------------------------------
// criterion 2: gradient checks

Outcome grad_checks() {
  Outcome o;
  double worst = 0.0;
  std::string where;
  for (std::uint64_t seed : {1, 2, 3}) {
    GradFixture f(seed);
    const std::vector<std::pair<std::string, LossFn>> objectives = {
        {"cls", f.classification()}, {"prj", f.projection()}, {"proto", f.prototypical()},
        {"ins", f.instance()},       {"rel", f.relation()},   {"hybrid", f.hybrid()}};
    for (const auto& [name, fn] : objectives) {
      Network net(f.cfg, seed);
      const GradCheckResult r = grad_check(net, fn);
      if (r.max_rel_error > worst) worst = r.max_rel_error, where = name + " " + r.worst;
      if (!(r.max_rel_error < 1e-3) || r.nonzero == 0) o.pass = false;
    }
  }
  o.detail = fmt("max_rel_err=%.2e", worst) + " at " + where;
  return o;
}

// ---------------------------------------------------------------------------
// criteria 3-6: toy experiments

TrainConfig toy(std::uint64_t seed, int shots) {
  TrainConfig c = load_train_config(std::string(FOPRO_SOURCE_DIR) + "/configs/toy.json");
  c.seed = seed;
  c.data.seed = seed;
  c.data.shots_per_class = shots;
  c.validate();
  return c;
}

struct ToyRuns {
  std::map<int, std::vector<RunResult>> by_shots;  // K -> seeds 1..3
  std::vector<RunResult> vanilla;
};

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

Outcome beats_vanilla(ToyRuns& runs) {
  Outcome o;
  std::vector<double> fopro, base, recall, ood_prec;
  for (std::uint64_t seed : {1, 2, 3}) {
    const TrainConfig c = toy(seed, 16);
    const Dataset ds = generate(c.data);
    runs.by_shots[16].push_back(run_fopro(c, ds));
    runs.vanilla.push_back(run_vanilla(c, ds));
    const auto& r = runs.by_shots[16].back().report;
    fopro.push_back(r.top1);
    base.push_back(runs.vanilla.back().report.top1);
    recall.push_back(r.correction_recall());
    ood_prec.push_back(r.ood_precision());
  }
  const double gain = mean(fopro) - mean(base);
  o.pass = gain >= 0.05 && mean(recall) >= 0.5 && mean(ood_prec) >= 0.6;
  o.detail = fmt("fopro=%.4f vanilla=%.4f gain=%.4f", mean(fopro), mean(base), gain) + fmt(" recall=%.4f ood_precision=%.4f", mean(recall), mean(ood_prec));
  return o;
}

Outcome shots_monotone(ToyRuns& runs) {
  Outcome o;
  for (int k : {0, 4})
    for (std::uint64_t seed : {1, 2, 3}) {
      const TrainConfig c = toy(seed, k);
      runs.by_shots[k].push_back(run_fopro(c, generate(c.data)));
    }
  std::map<int, double> top1, gap;
  for (auto& [k, rs] : runs.by_shots) {
    std::vector<double> t, g;
    for (const auto& r : rs) t.push_back(r.report.top1), g.push_back(r.report.gap);
    top1[k] = mean(t);
    gap[k] = mean(g);
  }
  int violations = 0;
  bool small = true;
  for (auto [a, b] : {std::pair{0, 4}, std::pair{4, 16}})
    if (top1[b] < top1[a]) {
      ++violations;
      small = small && top1[a] - top1[b] <= 0.01;
    }
  o.pass = violations <= 1 && small && gap[16] < gap[0];
  o.detail = fmt("top1 K0=%.4f K4=%.4f K16=%.4f", top1[0], top1[4], top1[16]) + fmt(" gap K0=%.4f K16=%.4f", gap[0], gap[16]);
  return o;
}

Outcome relation_ablation(std::vector<AblationResult>& out) {
  Outcome o;
  int wins = 0;
  std::ostringstream d;
  for (std::uint64_t seed : {1, 2, 3}) {
    out.push_back(ablate_relation(toy(seed, 1)));
    const auto& a = out.back();
    const double fr = a.full.report.correction_f1(), fc = a.ablated.report.correction_f1();
    if (fr >= fc) ++wins;
    char buf[128];
    std::snprintf(buf, sizeof buf, "seed%d relation_f1=%.4f cosine_f1=%.4f; ", static_cast<int>(seed), fr, fc);
    d << buf;
    if (a.ablated.state.net.relation_calls() != 0) o.pass = false;
  }
  o.pass = o.pass && wins >= 2;
  o.detail = d.str() + "wins=" + std::to_string(wins);
  return o;
}

Outcome invariants(const ToyRuns& runs, const std::vector<AblationResult>& ablations) {
  Outcome o;
  int checks = 0;
  auto expect = [&](bool ok, const std::string& what) {
    ++checks;
    if (!ok && o.pass) o.detail = "violated: " + what + "; ";
    o.pass = o.pass && ok;
  };
  for (const auto& [k, rs] : runs.by_shots)
    for (const auto& r : rs) {
      const TrainState& st = r.state;
      expect(st.prototypes.has_value(), "prototypes exist");
      const auto& pc = st.prototypes->config();
      for (int c = 0; c < st.prototypes->num_classes(); ++c) {
        expect(std::abs((*st.prototypes)[c].center.norm() - 1.0) < 1e-9, "unit prototype");
        const double phi = (*st.prototypes)[c].temperature;
        expect(phi >= pc.phi_min() && phi <= pc.phi_max(), "phi within clamp");
      }
      const Matrix bank = st.bank.view().embeddings;
      for (Eigen::Index i = 0; i < bank.rows(); ++i) expect(std::abs(bank.row(i).norm() - 1.0) < 1e-9, "unit bank row");
      std::array<std::size_t, 4> counts{};
      for (const auto& v : st.verdicts) {
        expect(v.branch >= 1 && v.branch <= 4, "branch in range");
        expect((v.branch == 4) == (v.verdict == Verdict::ood), "branch 4 iff ood");
        expect(v.verdict != Verdict::corrected || v.label != v.given_label, "correction changes label");
        ++counts[static_cast<std::size_t>(v.branch - 1)];
      }
      for (std::size_t b = 0; b < 4; ++b) expect(r.report.curation.branch_counts[b] == counts[b], "branch counts match verdicts");
      expect(r.report.top5 >= r.report.top1, "top5 >= top1");
      expect(r.report.gap == r.report.web_test_accuracy - r.report.top1, "gap arithmetic");
      expect(st.net.relation_calls() > 0, "relation module used");
    }
  for (const auto& a : ablations) expect(a.ablated.state.net.relation_calls() == 0, "ablation skips relation module");
  o.detail += std::to_string(checks) + " checks";
  return o;
}

}  // namespace

// Runs `body` and reports it with its wall time.
template <class F>
void criterion(int id, const char* name, double limit, F&& body) {
  Clock c;
  Outcome o = body();
  const double t = c.seconds();
  if (limit > 0.0 && t > limit) o.pass = false, o.detail += " (over time limit)";
  report(id, name, o, t);
}

int main() {
  criterion(1, "oracle suite", 60.0, oracle_suite);
  criterion(2, "gradient checks", 120.0, grad_checks);
  ToyRuns runs;
  std::vector<AblationResult> ablations;
  criterion(3, "beats vanilla on toy config", 0.0, [&] { return beats_vanilla(runs); });
  criterion(4, "few-shot count sweep", 0.0, [&] { return shots_monotone(runs); });
  criterion(5, "relation module vs cosine", 0.0, [&] { return relation_ablation(ablations); });
  criterion(6, "invariant spot checks", 0.0, [&] { return invariants(runs, ablations); });
  std::printf("%s: %d criterion failure(s)\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
