/*
Copyright 2026 The wmcert Authors.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
*/

// wmcert: command-line driver for the watermark pipeline.
//
//   wmcert init | pilot | allocate | embed | verify | certify | attack <kind>
//          | plotdata | replay
//
// Every run writes <run-dir>/<subcommand>.manifest.json (or --manifest) with
// the effective configuration, seeds and SHA-256 digests of inputs and
// outputs. `wmcert replay --manifest m.json` re-executes it and compares the
// output digests.
//
// Exit status: 0 ok, 1 verify --assert found no watermark, 2 usage/config/IO
// error, 3 numeric failure (or replay mismatch).

#include <fcntl.h>
#include <openssl/evp.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "wmcert/attack.hpp"
#include "wmcert/certify.hpp"
#include "wmcert/embed.hpp"
#include "wmcert/io.hpp"
#include "wmcert/params.hpp"
#include "wmcert/synthetic.hpp"
#include "wmcert/verify.hpp"

#ifndef WMCERT_VERSION
#define WMCERT_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using wmcert::io::Json;

namespace wmcert::cli {
namespace {

constexpr int kExitOk = 0;
constexpr int kExitNegative = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

// --- small utilities -------------------------------------------------------

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int n = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), md, &n, EVP_sha256(), nullptr))
    fail(ErrorKind::kIo, "SHA-256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < n; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

std::string file_digest(const std::string& path) { return sha256_hex(io::read_file(path)); }

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class RunLock {
 public:
  explicit RunLock(const fs::path& dir) {
    fs::create_directories(dir);
    path_ = (dir / ".wmcert.lock").string();
    fd_ = ::open(path_.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
    if (fd_ < 0) fail(ErrorKind::kIo, "cannot open lock file '" + path_ + "'");
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      fail(ErrorKind::kIo, "another wmcert process is using run directory '" + dir.string() + "'");
    }
  }
  ~RunLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::string path_;
  int fd_ = -1;
};

// Bookkeeping shared by every subcommand.
struct Context {
  Json inputs = Json::object();
  Json outputs = Json::object();
  Json seeds = Json::object();

  void input(const std::string& path) {
    if (!path.empty()) inputs[path] = file_digest(path);
  }
  void output(const std::string& path) {
    if (!path.empty()) outputs[path] = file_digest(path);
  }
};

struct Seed {
  std::uint64_t value = 0;
  CLI::Option* opt = nullptr;
  bool generated = false;

  void attach(CLI::App* sub) {
    opt = sub->add_option("--seed", value, "RNG seed (random and recorded when omitted)");
  }
  void resolve() {
    if (opt->count() > 0) return;
    std::random_device rd;
    value = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
    generated = true;
  }
};

std::vector<ImageFamily> parse_families(const std::vector<std::string>& names) {
  std::vector<ImageFamily> out;
  for (const auto& n : names) out.push_back(parse_family(n));
  return out;
}

ToyGenerator load_generator(Context& ctx, const std::string& path) {
  ctx.input(path);
  return io::generator_from_checkpoint(io::load_checkpoint(path));
}

EnergyClassifier load_classifier(Context& ctx, const std::string& path) {
  ctx.input(path);
  return io::classifier_from_checkpoint(io::load_checkpoint(path));
}

NoiseSpec load_noise(Context& ctx, const std::string& path) {
  ctx.input(path);
  const Json j = io::read_json(path);
  try {
    return io::noise_from_json(j.contains("noise") ? j.at("noise") : j);
  } catch (const Json::exception& e) {
    fail(ErrorKind::kIo, "bad noise spec '" + path + "': " + e.what());
  }
}

void save_generator(Context& ctx, const std::string& path, const ToyGenerator& g) {
  io::save_checkpoint(path, io::generator_checkpoint(g));
  ctx.output(path);
}

void save_json(Context& ctx, const std::string& path, const Json& j) {
  io::write_json(path, j);
  ctx.output(path);
}

// --- subcommands -----------------------------------------------------------

struct InitArgs {
  std::string generator_out, classifier_out;
  std::size_t steps = 1500, samples = 200, labels = 2, latent = 8, embed_dim = 4;
  std::size_t height = 16, width = 16, mc_draws = 32;
  std::vector<std::size_t> hidden = {32, 64};
  std::vector<double> noise_levels = {0.1, 0.2, 0.4, 0.8};
  Seed seed;
};

int run_init(InitArgs& a, Context& ctx) {
  GeneratorArch arch;
  arch.latent_dim = a.latent;
  arch.embed_dim = a.embed_dim;
  arch.num_labels = a.labels;
  arch.height = a.height;
  arch.width = a.width;
  arch.hidden = a.hidden;
  arch.validate();
  ClassifierConfig cc;
  cc.noise_levels = a.noise_levels;
  cc.mc_draws = a.mc_draws;
  cc.validate();
  const ToyGenerator base = pretrained_generator(arch, a.seed.value, a.steps);
  const EnergyClassifier clf =
      classifier_from_generator(base, a.samples, derive(a.seed.value, {0xc1f}), cc);
  save_generator(ctx, a.generator_out, base);
  io::save_checkpoint(a.classifier_out, io::classifier_checkpoint(clf));
  ctx.output(a.classifier_out);
  return kExitOk;
}

struct PilotArgs {
  std::string generator, out, trajectories;
  std::vector<std::string> tasks = {"ellipses", "gradients", "checkers", "rings"};
  std::size_t steps = 300, snapshot_every = 50;
  double lr = 0.05;
  Seed seed;
};

Json ecdf_json(const std::vector<EcdfPoint>& pts) {
  Json out = Json::array();
  for (const auto& p : pts) out.push_back({{"value", p.value}, {"cumulative", p.cumulative}});
  return out;
}

int run_pilot(PilotArgs& a, Context& ctx) {
  require(a.tasks.size() >= 2, "pilot needs at least two tasks", ErrorKind::kInvalidConfiguration);
  const ToyGenerator base = load_generator(ctx, a.generator);
  const auto families = parse_families(a.tasks);
  std::vector<TrainingTrajectory> trajs;
  Json per_task = Json::array();
  std::vector<double> mean(base.layout().num_blocks(), 0.0);
  for (std::size_t i = 0; i < families.size(); ++i) {
    auto ft = finetune_drift(base, families[i], a.steps, a.lr, derive(a.seed.value, {0x9170, i}),
                             a.snapshot_every);
    const auto l = lfs(ft.trajectory);
    for (std::size_t b = 0; b < l.size(); ++b) mean[b] += l[b] / static_cast<double>(families.size());
    per_task.push_back({{"task", a.tasks[i]}, {"lfs", l},
                        {"update_magnitudes", layer_update_magnitudes(ft.trajectory)}});
    if (!a.trajectories.empty()) {
      fs::create_directories(a.trajectories);
      const std::string p = (fs::path(a.trajectories) / (a.tasks[i] + ".wmtr")).string();
      io::write_file(p, io::encode_trajectory(ft.trajectory));
      ctx.output(p);
    }
    trajs.push_back(std::move(ft.trajectory));
  }
  const auto rs = rank_dispersion_and_stability(trajs);
  const double frac = rs.fraction_stable();
  if (frac <= 0.5)
    std::cerr << "warning: only " << frac << " of layers have S > 0.5\n";
  save_json(ctx, a.out,
            Json{{"tasks", per_task},
                 {"steps", a.steps},
                 {"learning_rate", a.lr},
                 {"layer_dims", base.layout().dims()},
                 {"mean_lfs", mean},
                 {"rank_dispersion", rs.rank_dispersion},
                 {"stability", rs.stability},
                 {"ranks", rs.ranks},
                 {"rd_ecdf", ecdf_json(rs.rd_ecdf)},
                 {"stability_ecdf", ecdf_json(rs.stability_ecdf)},
                 {"fraction_stable", frac},
                 {"majority_stable", frac > 0.5}});
  return kExitOk;
}

struct AllocateArgs {
  std::string pilot, generator, out;
  std::vector<double> lfs_values;
  double sigma_u = 0.01, k = 1.0;
  bool uniform = false;
};

int run_allocate(AllocateArgs& a, Context& ctx) {
  std::vector<double> l = a.lfs_values;
  std::vector<std::size_t> dims;
  if (!a.pilot.empty()) {
    ctx.input(a.pilot);
    const Json p = io::read_json(a.pilot);
    if (l.empty()) l = p.at("mean_lfs").get<std::vector<double>>();
    dims = p.at("layer_dims").get<std::vector<std::size_t>>();
  }
  if (!a.generator.empty()) dims = load_generator(ctx, a.generator).layout().dims();
  require(!dims.empty(), "allocate needs --pilot or --generator for the layer sizes",
          ErrorKind::kInvalidConfiguration);
  NoiseSpec spec;
  if (a.uniform) {
    spec = NoiseSpec::uniform(Layout(dims), a.sigma_u, a.k);
  } else {
    require(!l.empty(), "allocate needs LFS values (--pilot or --lfs)",
            ErrorKind::kInvalidConfiguration);
    spec = allocate(l, dims, a.sigma_u).with_scale(a.k);
  }
  Json j = io::to_json(spec);
  j["sigma_u"] = a.sigma_u;
  j["lfs"] = l;
  j["budget_gap"] = spec.with_scale(1.0).budget_gap(a.sigma_u);
  save_json(ctx, a.out, j);
  return kExitOk;
}

struct EmbedArgs {
  std::string generator, classifier, noise, out, log;
  EmbedConfig cfg;
  Seed seed;
};

int run_embed(EmbedArgs& a, Context& ctx) {
  const ToyGenerator gen = load_generator(ctx, a.generator);
  const EnergyClassifier clf = load_classifier(ctx, a.classifier);
  a.cfg.noise = load_noise(ctx, a.noise);
  std::ofstream log;
  if (!a.log.empty()) {
    log.open(a.log, std::ios::trunc);
    if (!log) fail(ErrorKind::kIo, "cannot write '" + a.log + "'");
  }
  auto res = embed(gen, clf, a.cfg, a.seed.value, [&](const EmbedLogRecord& r) {
    if (log) log << io::to_json(r).dump() << '\n' << std::flush;
  });
  if (log) {
    log.close();
    ctx.output(a.log);
  }
  save_generator(ctx, a.out, res.generator);
  return kExitOk;
}

struct VerifyArgs {
  std::string suspect, reference, classifier, noise, out;
  VerifyConfig cfg;
  bool assert_mode = false;
  Seed seed;
};

int run_verify(VerifyArgs& a, Context& ctx) {
  const ToyGenerator s = load_generator(ctx, a.suspect);
  const ToyGenerator r = load_generator(ctx, a.reference);
  const EnergyClassifier clf = load_classifier(ctx, a.classifier);
  const NoiseSpec noise = load_noise(ctx, a.noise);
  const auto rep = verify_ownership(s, r, clf, noise, a.cfg, a.seed.value);
  Json j = io::to_json(rep);
  j["seed"] = a.seed.value;
  j["delta"] = a.cfg.delta;
  if (!a.out.empty()) save_json(ctx, a.out, j);
  std::cout << "decision: " << decision_name(rep.decision) << " (WR " << rep.wr << ", RP "
            << rep.rp << ", tau " << rep.tau << ")\n";
  if (rep.routes_disagree) std::cout << "note: threshold and t-test routes disagree\n";
  return a.assert_mode && rep.decision != Decision::kWatermarked ? kExitNegative : kExitOk;
}

struct CertifyArgs {
  std::string suspect, reference, classifier, noise, out;
  CertifyConfig cfg;
  double k = 0.0;  // 0: keep the noise file's scale
  Seed seed;
};

int run_certify(CertifyArgs& a, Context& ctx) {
  const ToyGenerator s = load_generator(ctx, a.suspect);
  const ToyGenerator r = load_generator(ctx, a.reference);
  const EnergyClassifier clf = load_classifier(ctx, a.classifier);
  NoiseSpec noise = load_noise(ctx, a.noise);
  if (a.k > 0.0) noise = noise.with_scale(a.k);
  const Certificate c = certify(s, clf, r, noise, a.cfg, a.seed.value);
  save_json(ctx, a.out, io::to_json(c));
  std::cout << "status: " << c.status << ", R* = " << c.r_star << " (tau " << c.tau << ")\n";
  return kExitOk;
}

// Attack metric: either the fraction of repeated verifications that still
// decide "watermarked", or the sign-test detection rate against the reference.
struct MetricArgs {
  std::string kind = "none";
  std::string classifier, reference, noise;
  Label prompt = 0, target = 1;
  std::size_t M = 10, N = 10, repeats = 3, images = 20, trials = 20;
};

struct AttackCommon {
  std::string generator, out, report;
  MetricArgs metric;
  Seed seed;
};

struct MetricBundle {
  std::optional<EnergyClassifier> clf;
  std::optional<ToyGenerator> reference;
  std::optional<NoiseSpec> noise;
  GeneratorMetric fn;
};

MetricBundle make_metric(const MetricArgs& m, Context& ctx, std::uint64_t seed,
                         bool need_classifier) {
  MetricBundle b;
  if (!m.classifier.empty()) b.clf = load_classifier(ctx, m.classifier);
  if (need_classifier)
    require(b.clf.has_value(), "this attack needs --classifier", ErrorKind::kInvalidConfiguration);
  if (m.kind == "none") return b;
  require(b.clf && !m.reference.empty() && !m.noise.empty(),
          "metric '" + m.kind + "' needs --classifier, --reference and --noise",
          ErrorKind::kInvalidConfiguration);
  b.reference = load_generator(ctx, m.reference);
  b.noise = load_noise(ctx, m.noise);
  const EnergyClassifier* clf = &*b.clf;
  const ToyGenerator* ref = &*b.reference;
  const NoiseSpec* noise = &*b.noise;
  if (m.kind == "vsr") {
    b.fn = [=](const ToyGenerator& g) {
      VerifyConfig vc;
      vc.query = {m.prompt, m.target, m.M, m.N};
      std::size_t hits = 0;
      for (std::size_t r = 0; r < m.repeats; ++r)
        hits += verify_ownership(g, *ref, *clf, *noise, vc, derive(seed, {0x3e7, r})).decision ==
                Decision::kWatermarked;
      return static_cast<double>(hits) / static_cast<double>(m.repeats);
    };
  } else if (m.kind == "tpr") {
    b.fn = [=](const ToyGenerator& g) {
      const std::uint64_t is = derive(seed, {0x7a1}), ts = derive(seed, {0x7a2});
      const auto cw = target_confidences(g, *clf, *noise, m.prompt, m.target, m.images, m.trials,
                                         is, ts);
      const auto cc = target_confidences(*ref, *clf, *noise, m.prompt, m.target, m.images,
                                         m.trials, is, ts);
      return sign_test_tpr(cw, cc);
    };
  } else {
    fail(ErrorKind::kInvalidConfiguration, "--metric must be one of none, vsr, tpr");
  }
  return b;
}

Json attack_json(const AttackResult& r, const std::string& metric) {
  Json trace = Json::array();
  for (const auto& p : r.trace) trace.push_back({{"budget", p.budget}, {"metric", p.metric}});
  return Json{{"kind", r.kind},          {"seed", r.seed},
              {"metric", metric},        {"trace", trace},
              {"l2_norm", r.l2_norm},    {"mahalanobis", r.mahalanobis},
              {"diverged", r.diverged},  {"fallback", r.fallback}};
}

void finish_attack(const AttackCommon& c, Context& ctx, const AttackResult& r) {
  if (!c.out.empty()) save_generator(ctx, c.out, r.generator);
  if (!c.report.empty()) save_json(ctx, c.report, attack_json(r, c.metric.kind));
  for (const auto& p : r.trace)
    std::cout << r.kind << " budget " << p.budget << " metric " << p.metric << "\n";
}

AttackResult shifted(const ToyGenerator& gen, const LayeredParams& dir, double eps,
                     const GeneratorMetric& fn, std::string kind, std::uint64_t seed) {
  AttackResult r;
  r.kind = std::move(kind);
  r.seed = seed;
  LayeredParams p = gen.params();
  p.axpy(eps, dir);
  r.generator = gen.with_params(std::move(p));
  r.l2_norm = std::abs(eps) * dir.l2_norm();
  r.trace.push_back({eps, fn ? fn(r.generator) : 0.0});
  return r;
}

struct RandomArgs {
  double eps = 0.5;
};
struct AdversarialArgs {
  double eps = 0.5, step_size = 0.05;
  std::size_t steps = 200;
};
struct PgdArgs {
  std::vector<double> budgets = {0.2, 0.4, 0.6, 0.8};
  std::size_t steps = 50, batch = 8;
  double step_size = 0.05;
  bool mahalanobis = false;
};
struct FinetuneArgs {
  std::string task = "ellipses", trajectory;
  std::size_t steps = 300, snapshot_every = 50;
  double lr = 0.05;
};
struct QuantizeArgs {
  int bits = 8;
};
struct PruneArgs {
  double fraction = 0.5;
};
struct SweepArgs {
  std::vector<double> eps_n = {-1.0, -0.5, 0.0, 0.5, 1.0};
  std::vector<double> eps_a = {-1.0, -0.5, 0.0, 0.5, 1.0};
  std::size_t adv_steps = 200;
};
struct AuditArgs {
  Label plus = 0, minus = 1;
  std::size_t images = 16;
};

struct AttackArgs {
  std::map<std::string, AttackCommon> common;
  RandomArgs random;
  AdversarialArgs adversarial;
  PgdArgs pgd;
  FinetuneArgs finetune;
  QuantizeArgs quantize;
  PruneArgs prune;
  SweepArgs sweep;
  AuditArgs audit;
};

int run_attack(const std::string& kind, AttackArgs& a, Context& ctx) {
  AttackCommon& c = a.common.at(kind);
  const std::uint64_t seed = c.seed.value;
  const ToyGenerator gen = load_generator(ctx, c.generator);
  const bool need_clf = kind == "adversarial" || kind == "pgd" || kind == "sweep";
  MetricBundle mb = make_metric(c.metric, ctx, derive(seed, {0x3e70}), need_clf);
  if (kind == "sweep")
    require(mb.fn != nullptr, "sweep needs --metric vsr or tpr", ErrorKind::kInvalidConfiguration);

  if (kind == "random") {
    finish_attack(c, ctx,
                  shifted(gen, random_direction(gen.layout(), seed), a.random.eps, mb.fn, "random",
                          seed));
  } else if (kind == "adversarial") {
    const auto dir = adversarial_direction(gen, *mb.clf, c.metric.prompt, a.adversarial.steps,
                                           seed, a.adversarial.step_size);
    auto r = shifted(gen, dir.direction, a.adversarial.eps, mb.fn, "adversarial", seed);
    r.fallback = dir.fallback;
    finish_attack(c, ctx, r);
  } else if (kind == "pgd") {
    PgdConfig pc;
    pc.prompt = c.metric.prompt;
    pc.budgets = a.pgd.budgets;
    pc.steps = a.pgd.steps;
    pc.step_size = a.pgd.step_size;
    pc.batch = a.pgd.batch;
    if (a.pgd.mahalanobis) {
      require(mb.noise.has_value() || !c.metric.noise.empty(),
              "--mahalanobis needs --noise", ErrorKind::kInvalidConfiguration);
      pc.mahalanobis = mb.noise ? *mb.noise : load_noise(ctx, c.metric.noise);
    }
    finish_attack(c, ctx, pgd_attack(gen, *mb.clf, pc, seed, mb.fn));
  } else if (kind == "finetune") {
    auto ft = finetune_drift(gen, parse_family(a.finetune.task), a.finetune.steps, a.finetune.lr,
                             seed, a.finetune.snapshot_every, mb.fn);
    if (!a.finetune.trajectory.empty()) {
      io::write_file(a.finetune.trajectory, io::encode_trajectory(ft.trajectory));
      ctx.output(a.finetune.trajectory);
    }
    finish_attack(c, ctx, ft.attack);
  } else if (kind == "quantize" || kind == "prune") {
    AttackResult r;
    r.kind = kind;
    r.seed = seed;
    r.generator = kind == "quantize" ? quantize(gen, a.quantize.bits) : prune(gen, a.prune.fraction);
    r.l2_norm = (r.generator.params() - gen.params()).l2_norm();
    r.trace.push_back({kind == "quantize" ? static_cast<double>(a.quantize.bits) : a.prune.fraction,
                       mb.fn ? mb.fn(r.generator) : 0.0});
    finish_attack(c, ctx, r);
  } else if (kind == "sweep") {
    require(!c.out.empty(), "sweep needs --out for the CSV", ErrorKind::kInvalidConfiguration);
    const LayeredParams dn = random_direction(gen.layout(), derive(seed, {0xd17}));
    const auto da = adversarial_direction(gen, *mb.clf, c.metric.prompt, a.sweep.adv_steps,
                                          derive(seed, {0xd1a}));
    const auto grid = landscape_sweep(gen, dn, da.direction, a.sweep.eps_n, a.sweep.eps_a, mb.fn);
    std::string csv = "eps_N,eps_A,metric\n";
    for (std::size_t i = 0; i < a.sweep.eps_n.size(); ++i)
      for (std::size_t j = 0; j < a.sweep.eps_a.size(); ++j)
        csv += num(a.sweep.eps_n[i]) + "," + num(a.sweep.eps_a[j]) + "," + num(grid[i][j]) + "\n";
    io::write_file(c.out, csv);
    ctx.output(c.out);
    if (!c.report.empty())
      save_json(ctx, c.report,
                Json{{"kind", "sweep"},
                     {"seed", seed},
                     {"metric", c.metric.kind},
                     {"eps_N", a.sweep.eps_n},
                     {"eps_A", a.sweep.eps_a},
                     {"values", grid},
                     {"adversarial_fallback", da.fallback},
                     {"adversarial_loss", da.loss_trace}});
  } else if (kind == "audit") {
    const double mp = within_prompt_distance(gen, a.audit.plus, a.audit.images, seed);
    const double mm = within_prompt_distance(gen, a.audit.minus, a.audit.images, seed);
    const double susp = image_suspiciousness(gen, a.audit.plus, a.audit.minus, a.audit.images, seed);
    std::cout << "suspiciousness " << susp << "\n";
    if (!c.report.empty())
      save_json(ctx, c.report,
                Json{{"kind", "audit"},
                     {"seed", seed},
                     {"prompt_plus", a.audit.plus},
                     {"prompt_minus", a.audit.minus},
                     {"images", a.audit.images},
                     {"distance_plus", mp},
                     {"distance_minus", mm},
                     {"suspiciousness", susp}});
  }
  return kExitOk;
}

// Long format: source,series,x,y,value. Sweeps map to (eps_N, eps_A), embed
// logs to one series per logged quantity over t, pilots to per-layer series,
// attack reports to their traces.
struct PlotArgs {
  std::vector<std::string> sweeps, logs, pilots, reports;
  std::string out;
};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

int run_plotdata(PlotArgs& a, Context& ctx) {
  std::string out = "source,series,x,y,value\n";
  auto row = [&](const std::string& src, const std::string& series, const std::string& x,
                 const std::string& y, double v) {
    out += src + "," + series + "," + x + "," + y + "," + num(v) + "\n";
  };
  for (const auto& p : a.sweeps) {
    ctx.input(p);
    std::stringstream ss(io::read_file(p));
    std::string line;
    std::getline(ss, line);
    const auto head = split_csv_line(line);
    require(head.size() == 3 && head[0] == "eps_N" && head[1] == "eps_A",
            "'" + p + "' is not a sweep CSV", ErrorKind::kIo);
    while (std::getline(ss, line)) {
      if (line.empty()) continue;
      const auto c = split_csv_line(line);
      require(c.size() == 3, "malformed row in '" + p + "'", ErrorKind::kIo);
      row(p, head[2], c[0], c[1], std::stod(c[2]));
    }
  }
  for (const auto& p : a.logs) {
    ctx.input(p);
    std::stringstream ss(io::read_file(p));
    std::string line;
    while (std::getline(ss, line)) {
      if (line.empty()) continue;
      const Json r = Json::parse(line);
      const std::string t = std::to_string(r.at("t").get<std::size_t>());
      for (const char* k : {"m_t", "omega_t", "kl", "ssim", "grad_norm"})
        row(p, k, t, "", r.at(k).get<double>());
    }
  }
  for (const auto& p : a.pilots) {
    ctx.input(p);
    const Json j = io::read_json(p);
    for (const char* k : {"mean_lfs", "rank_dispersion", "stability"}) {
      const auto v = j.at(k).get<std::vector<double>>();
      for (std::size_t l = 0; l < v.size(); ++l) row(p, k, std::to_string(l), "", v[l]);
    }
    for (const auto& t : j.at("tasks")) {
      const auto v = t.at("lfs").get<std::vector<double>>();
      for (std::size_t l = 0; l < v.size(); ++l)
        row(p, "lfs:" + t.at("task").get<std::string>(), std::to_string(l), "", v[l]);
    }
    for (const char* k : {"rd_ecdf", "stability_ecdf"})
      for (const auto& e : j.at(k)) row(p, k, num(e.at("value")), "", e.at("cumulative"));
  }
  for (const auto& p : a.reports) {
    ctx.input(p);
    const Json j = io::read_json(p);
    for (const auto& e : j.at("trace"))
      row(p, j.at("kind").get<std::string>() + ":" + j.value("metric", "none"),
          num(e.at("budget")), "", e.at("metric"));
  }
  io::write_file(a.out, out);
  ctx.output(a.out);
  return kExitOk;
}

// --- driver ----------------------------------------------------------------

Json option_snapshot(const CLI::App* app) {
  Json out = Json::object();
  for (const CLI::Option* o : app->get_options()) {
    if (o == app->get_help_ptr() || o == app->get_config_ptr() || o == app->get_version_ptr())
      continue;
    const std::string name = o->get_single_name();
    if (name.empty()) continue;
    if (o->count() > 0) {
      const auto& r = o->results();
      out[name] = r.size() == 1 ? Json(r[0]) : Json(r);
    } else {
      out[name] = o->get_default_str();
    }
  }
  return out;
}

struct Invocation {
  std::string manifest_override;  // replay writes next to the original
  bool take_lock = true;
};

int run(const std::vector<std::string>& args, const Invocation& inv);

struct ReplayArgs {
  std::string manifest;
};

int run_replay(const ReplayArgs& a, Context& ctx, const std::string& run_dir) {
  ctx.input(a.manifest);
  const Json m = io::read_json(a.manifest);
  require(m.at("subcommand") != "replay", "cannot replay a replay", ErrorKind::kInvalidConfiguration);
  const fs::path cwd = m.at("cwd").get<std::string>();
  if (fs::current_path() != cwd) fs::current_path(cwd);
  for (const auto& [path, digest] : m.at("inputs").items())
    if (!fs::exists(path) || file_digest(path) != digest.get<std::string>())
      fail(ErrorKind::kIo, "input '" + path + "' changed since the recorded run");
  const std::string replay_manifest =
      (fs::path(run_dir) / (m.at("subcommand").get<std::string>() + ".replay.manifest.json"))
          .string();
  const int rc = run(m.at("argv").get<std::vector<std::string>>(), {replay_manifest, false});
  if (rc != m.value("exit_status", 0))
    fail(ErrorKind::kNumeric, "replay exit status " + std::to_string(rc) + " differs from recorded " +
                                  std::to_string(m.value("exit_status", 0)));
  const Json r = io::read_json(replay_manifest);
  bool same = true;
  for (const auto& [path, digest] : m.at("outputs").items()) {
    const bool ok = r.at("outputs").contains(path) && r.at("outputs").at(path) == digest;
    std::cout << (ok ? "match    " : "MISMATCH ") << path << "\n";
    same &= ok;
  }
  ctx.outputs = r.at("outputs");
  if (!same) fail(ErrorKind::kNumeric, "replayed outputs differ from the manifest");
  return kExitOk;
}

int run(const std::vector<std::string>& args, const Invocation& inv) {
  const auto t0 = std::chrono::steady_clock::now();
  CLI::App app{"Layer-adaptive smoothing watermark toolkit", "wmcert"};
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "INI config file; command-line flags take precedence");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.set_version_flag("--version", WMCERT_VERSION);
  app.require_subcommand(1);
  app.fallthrough();
  std::string run_dir = ".", manifest_path;
  app.add_option("--run-dir", run_dir, "Directory for the lock file and manifests");
  app.add_option("--manifest", manifest_path, "Manifest path (default <run-dir>/<cmd>.manifest.json)");

  auto positive = CLI::PositiveNumber;
  auto prob = CLI::Range(0.0, 1.0);

  InitArgs ia;
  auto* init = app.add_subcommand("init", "Pretrain a base generator and fit its classifier");
  init->add_option("--generator-out", ia.generator_out)->required();
  init->add_option("--classifier-out", ia.classifier_out)->required();
  init->add_option("--steps", ia.steps, "Pretraining steps")->check(positive);
  init->add_option("--samples", ia.samples, "Classifier samples per label")->check(CLI::Range(2, 1 << 20));
  init->add_option("--labels", ia.labels)->check(CLI::Range(2, 64));
  init->add_option("--latent-dim", ia.latent)->check(positive);
  init->add_option("--embed-dim", ia.embed_dim)->check(positive);
  init->add_option("--height", ia.height)->check(positive);
  init->add_option("--width", ia.width)->check(positive);
  init->add_option("--hidden", ia.hidden, "Hidden layer widths")->delimiter(',');
  init->add_option("--mc-draws", ia.mc_draws)->check(positive);
  init->add_option("--noise-levels", ia.noise_levels)->delimiter(',');
  ia.seed.attach(init);

  PilotArgs pa;
  auto* pilot = app.add_subcommand("pilot", "Fine-tune on surrogate tasks and score layer sensitivity");
  pilot->add_option("--generator", pa.generator)->required()->check(CLI::ExistingFile);
  pilot->add_option("--out", pa.out)->required();
  pilot->add_option("--tasks", pa.tasks, "Surrogate image families")->delimiter(',');
  pilot->add_option("--steps", pa.steps)->check(positive);
  pilot->add_option("--lr", pa.lr)->check(positive);
  pilot->add_option("--snapshot-every", pa.snapshot_every);
  pilot->add_option("--trajectories", pa.trajectories, "Directory for trajectory files");
  pa.seed.attach(pilot);

  AllocateArgs aa;
  auto* alloc = app.add_subcommand("allocate", "Turn layer sensitivities into per-layer noise levels");
  alloc->add_option("--pilot", aa.pilot)->check(CLI::ExistingFile);
  alloc->add_option("--generator", aa.generator)->check(CLI::ExistingFile);
  alloc->add_option("--lfs", aa.lfs_values)->delimiter(',');
  alloc->add_option("--sigma-u", aa.sigma_u)->check(positive);
  alloc->add_option("--k", aa.k, "Noise scale multiplier")->check(positive);
  alloc->add_flag("--uniform", aa.uniform, "Use sigma_u on every layer");
  alloc->add_option("--out", aa.out)->required();

  EmbedArgs ea;
  auto* emb = app.add_subcommand("embed", "Embed the watermark with noise-aware training");
  emb->add_option("--generator", ea.generator)->required()->check(CLI::ExistingFile);
  emb->add_option("--classifier", ea.classifier)->required()->check(CLI::ExistingFile);
  emb->add_option("--noise", ea.noise)->required()->check(CLI::ExistingFile);
  emb->add_option("--out", ea.out)->required();
  emb->add_option("--log", ea.log, "JSONL training log");
  emb->add_option("--prompt", ea.cfg.prompt);
  emb->add_option("--target", ea.cfg.target);
  emb->add_option("--lambda", ea.cfg.lambda)->check(CLI::Range(0.5, 1.0));
  emb->add_option("--target-posterior", ea.cfg.target_posterior)->delimiter(',');
  emb->add_option("--omega0", ea.cfg.omega0)->check(CLI::NonNegativeNumber);
  emb->add_option("--doubling-period", ea.cfg.doubling_period)->check(positive);
  emb->add_option("--m-max", ea.cfg.m_max)->check(positive);
  emb->add_option("--fixed-draws", ea.cfg.fixed_draws);
  emb->add_option("--steps", ea.cfg.steps);
  emb->add_option("--lr", ea.cfg.learning_rate)->check(positive);
  emb->add_option("--batch", ea.cfg.batch)->check(positive);
  ea.seed.attach(emb);

  VerifyArgs va;
  auto* ver = app.add_subcommand("verify", "Decide whether a suspect model carries the watermark");
  ver->add_option("--suspect", va.suspect)->required()->check(CLI::ExistingFile);
  ver->add_option("--reference", va.reference)->required()->check(CLI::ExistingFile);
  ver->add_option("--classifier", va.classifier)->required()->check(CLI::ExistingFile);
  ver->add_option("--noise", va.noise)->required()->check(CLI::ExistingFile);
  ver->add_option("--prompt", va.cfg.query.prompt);
  ver->add_option("--target", va.cfg.query.target);
  ver->add_option("-M,--noise-trials", va.cfg.query.M)->check(positive);
  ver->add_option("-N,--generations", va.cfg.query.N)->check(CLI::Range(2, 1 << 24));
  ver->add_option("--alpha", va.cfg.alpha)->check(prob);
  ver->add_option("--delta", va.cfg.delta)->check(prob);
  ver->add_option("--out", va.out, "Report JSON");
  ver->add_flag("--assert", va.assert_mode, "Exit 1 unless the decision is watermarked");
  va.seed.attach(ver);

  CertifyArgs ca;
  auto* cert = app.add_subcommand("certify", "Certified robustness radius for a suspect model");
  cert->add_option("--suspect", ca.suspect)->required()->check(CLI::ExistingFile);
  cert->add_option("--reference", ca.reference)->required()->check(CLI::ExistingFile);
  cert->add_option("--classifier", ca.classifier)->required()->check(CLI::ExistingFile);
  cert->add_option("--noise", ca.noise)->required()->check(CLI::ExistingFile);
  cert->add_option("--out", ca.out)->required();
  cert->add_option("--prompt", ca.cfg.query.prompt);
  cert->add_option("--target", ca.cfg.query.target);
  cert->add_option("-M,--noise-trials", ca.cfg.query.M)->check(positive);
  cert->add_option("-N,--generations", ca.cfg.query.N)->check(positive);
  cert->add_option("--grid-size", ca.cfg.grid_size)->check(positive);
  cert->add_option("--alpha", ca.cfg.alpha)->check(prob);
  cert->add_option("--delta", ca.cfg.delta)->check(prob);
  cert->add_option("--tolerance", ca.cfg.tolerance)->check(positive);
  cert->add_option("--k", ca.k, "Override the noise scale");
  ca.seed.attach(cert);

  AttackArgs ata;
  auto* att = app.add_subcommand("attack", "Perturb a model and trace the verification metric");
  att->require_subcommand(1);
  std::map<std::string, CLI::App*> kinds;
  for (const char* k :
       {"random", "adversarial", "pgd", "finetune", "quantize", "prune", "sweep", "audit"}) {
    auto* s = att->add_subcommand(k);
    kinds[k] = s;
    AttackCommon& c = ata.common[k];
    s->add_option("--generator", c.generator)->required()->check(CLI::ExistingFile);
    s->add_option("--out", c.out, std::string(k) == "sweep" ? "CSV output" : "Attacked checkpoint");
    s->add_option("--report", c.report, "JSON report");
    s->add_option("--metric", c.metric.kind)->check(CLI::IsMember({"none", "vsr", "tpr"}));
    s->add_option("--classifier", c.metric.classifier)->check(CLI::ExistingFile);
    s->add_option("--reference", c.metric.reference)->check(CLI::ExistingFile);
    s->add_option("--noise", c.metric.noise)->check(CLI::ExistingFile);
    s->add_option("--prompt", c.metric.prompt);
    s->add_option("--target", c.metric.target);
    s->add_option("--metric-M", c.metric.M)->check(positive);
    s->add_option("--metric-N", c.metric.N)->check(CLI::Range(2, 1 << 24));
    s->add_option("--metric-repeats", c.metric.repeats)->check(positive);
    s->add_option("--metric-images", c.metric.images)->check(positive);
    s->add_option("--metric-trials", c.metric.trials)->check(positive);
    c.seed.attach(s);
  }
  kinds["random"]->add_option("--eps", ata.random.eps);
  kinds["adversarial"]->add_option("--eps", ata.adversarial.eps);
  kinds["adversarial"]->add_option("--steps", ata.adversarial.steps);
  kinds["adversarial"]->add_option("--step-size", ata.adversarial.step_size)->check(positive);
  kinds["pgd"]->add_option("--budgets", ata.pgd.budgets)->delimiter(',');
  kinds["pgd"]->add_option("--steps", ata.pgd.steps);
  kinds["pgd"]->add_option("--step-size", ata.pgd.step_size)->check(positive);
  kinds["pgd"]->add_option("--batch", ata.pgd.batch)->check(positive);
  kinds["pgd"]->add_flag("--mahalanobis", ata.pgd.mahalanobis, "Budgets in the noise geometry");
  kinds["finetune"]->add_option("--task", ata.finetune.task);
  kinds["finetune"]->add_option("--steps", ata.finetune.steps);
  kinds["finetune"]->add_option("--lr", ata.finetune.lr)->check(positive);
  kinds["finetune"]->add_option("--snapshot-every", ata.finetune.snapshot_every);
  kinds["finetune"]->add_option("--trajectory", ata.finetune.trajectory);
  kinds["quantize"]->add_option("--bits", ata.quantize.bits)->check(CLI::Range(1, 16));
  kinds["prune"]->add_option("--fraction", ata.prune.fraction)->check(CLI::Range(0.0, 0.999999));
  kinds["sweep"]->add_option("--eps-n", ata.sweep.eps_n)->delimiter(',');
  kinds["sweep"]->add_option("--eps-a", ata.sweep.eps_a)->delimiter(',');
  kinds["sweep"]->add_option("--adv-steps", ata.sweep.adv_steps);
  kinds["audit"]->add_option("--prompt-plus", ata.audit.plus);
  kinds["audit"]->add_option("--prompt-minus", ata.audit.minus);
  kinds["audit"]->add_option("--images", ata.audit.images)->check(CLI::Range(2, 1 << 20));

  PlotArgs pl;
  auto* plot = app.add_subcommand("plotdata", "Convert sweeps, logs and pilots to a long CSV");
  plot->add_option("--sweep", pl.sweeps)->check(CLI::ExistingFile);
  plot->add_option("--embed-log", pl.logs)->check(CLI::ExistingFile);
  plot->add_option("--pilot", pl.pilots)->check(CLI::ExistingFile);
  plot->add_option("--attack-report", pl.reports)->check(CLI::ExistingFile);
  plot->add_option("--out", pl.out)->required();

  ReplayArgs ra;
  auto* rep = app.add_subcommand("replay", "Re-run a manifest and compare output digests");
  rep->add_option("--manifest-file", ra.manifest, "Manifest to replay")->required()->check(CLI::ExistingFile);

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  // Leaf subcommand and its display path ("attack-pgd").
  const CLI::App* leaf = app.get_subcommands().front();
  std::string name = leaf->get_name();
  std::string attack_kind;
  if (leaf == att) {
    leaf = att->get_subcommands().front();
    attack_kind = leaf->get_name();
    name += "-" + attack_kind;
  }

  Seed* seed = nullptr;
  if (leaf == init) seed = &ia.seed;
  if (leaf == pilot) seed = &pa.seed;
  if (leaf == emb) seed = &ea.seed;
  if (leaf == ver) seed = &va.seed;
  if (leaf == cert) seed = &ca.seed;
  if (!attack_kind.empty()) seed = &ata.common.at(attack_kind).seed;
  std::vector<std::string> argv = args;
  Context ctx;
  if (seed) {
    seed->resolve();
    if (seed->generated) {
      argv.push_back("--seed");
      argv.push_back(std::to_string(seed->value));
    }
    ctx.seeds["seed"] = seed->value;
    ctx.seeds["generated"] = seed->generated;
  }

  int rc = kExitOk;
  try {
    std::optional<RunLock> lock;
    if (inv.take_lock) lock.emplace(run_dir);
    if (const auto* cfg = app.get_config_ptr(); cfg && cfg->count() > 0)
      ctx.input(cfg->as<std::string>());
    if (leaf == init) rc = run_init(ia, ctx);
    else if (leaf == pilot) rc = run_pilot(pa, ctx);
    else if (leaf == alloc) rc = run_allocate(aa, ctx);
    else if (leaf == emb) rc = run_embed(ea, ctx);
    else if (leaf == ver) rc = run_verify(va, ctx);
    else if (leaf == cert) rc = run_certify(ca, ctx);
    else if (!attack_kind.empty()) rc = run_attack(attack_kind, ata, ctx);
    else if (leaf == plot) rc = run_plotdata(pl, ctx);
    else if (leaf == rep) rc = run_replay(ra, ctx, run_dir);

    Json config = option_snapshot(&app);
    Json sub = option_snapshot(leaf);
    if (seed) sub["seed"] = std::to_string(seed->value);
    config[name] = sub;
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    Json manifest{{"subcommand", name},
                  {"argv", argv},
                  {"cwd", fs::current_path().string()},
                  {"config", config},
                  {"seeds", ctx.seeds},
                  {"inputs", ctx.inputs},
                  {"outputs", ctx.outputs},
                  {"exit_status", rc},
                  {"version", WMCERT_VERSION},
                  {"duration_seconds", secs}};
    std::string mpath = !inv.manifest_override.empty() ? inv.manifest_override
                        : !manifest_path.empty()        ? manifest_path
                                                        : (fs::path(run_dir) / (name + ".manifest.json")).string();
    io::write_json(mpath, manifest);
  } catch (const Error& e) {
    std::cerr << "wmcert " << name << ": " << e.what() << "\n";
    return e.numeric() ? kExitNumeric : kExitUsage;
  } catch (const Json::exception& e) {
    std::cerr << "wmcert " << name << ": malformed input: " << e.what() << "\n";
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "wmcert " << name << ": " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "wmcert " << name << ": " << e.what() << "\n";
    return kExitNumeric;
  }
  return rc;
}

}  // namespace
}  // namespace wmcert::cli

int main(int argc, char** argv) {
  return wmcert::cli::run(std::vector<std::string>(argv + 1, argv + argc), {});
}
