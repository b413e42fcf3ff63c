#pragma once
// Experiment driver shared by the command-line tool and the reproduction
// harness: corpus assembly, teacher pre-training, distillation runs, network
// checkpoints, run-directory artifacts, the meta-gradient self-check, and the
// four-arm comparison sweep.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "metasr/config.hpp"
#include "metasr/gradcheck.hpp"
#include "metasr/meta.hpp"
#include "metasr/metrics.hpp"
#include "metasr/tensor_io.hpp"

namespace metasr {

// ---------------------------------------------------------------------------
// Seeds

// Stable per-role seed. Unlike Rng::child this is a pure function of its
// arguments, so adding a consumer never shifts anyone else's stream.
inline uint64_t derive_seed(uint64_t base, const std::string& role) {
  uint64_t h = fnv1a(role);
  h ^= base + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  return h ? h : 0x6a09e667f3bcc909ull;
}

// ---------------------------------------------------------------------------
// Data

struct DataBundle {
  std::vector<ImagePair> train;
  std::vector<ImagePair> val;
  std::vector<std::string> skipped;  // unreadable files from a directory scan
};

// Synthetic corpora draw train and val from independent generators so they
// never overlap. Directory corpora reserve the tail for validation unless a
// separate benchmark folder is configured.
inline DataBundle build_data(const RunConfig& rc) {
  DataBundle d;
  const int64_t s = rc.data.scale;
  if (rc.data.corpus.empty()) {
    Rng tr(derive_seed(rc.data.seed, "corpus/train"));
    d.train = make_synthetic_corpus(rc.data.synthetic_count, rc.data.synthetic_size, s, tr);
    Rng vr(derive_seed(rc.data.seed, "corpus/val"));
    d.val = make_synthetic_corpus(std::max<int64_t>(rc.data.val_count, 1),
                                  rc.data.synthetic_size, s, vr);
  } else {
    d.train = load_corpus_dir(rc.data.corpus, s, true, &d.skipped);
    if (!rc.eval.benchmark.empty()) {
      d.val = load_corpus_dir(rc.eval.benchmark, s);
    } else if (d.train.size() > 1) {
      const size_t keep = std::min<size_t>(
          static_cast<size_t>(std::max<int64_t>(rc.data.val_count, 1)), d.train.size() - 1);
      d.val.assign(d.train.end() - static_cast<std::ptrdiff_t>(keep), d.train.end());
      d.train.resize(d.train.size() - keep);
    } else {
      d.val = d.train;  // single image: validate in-sample rather than starve training
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Inference and validation

// Freezes the parameters into constants and returns a pure (3,h,w) -> SR map.
inline SrFn make_sr_fn(const ParamSet& params, const NetConfig& cfg) {
  ParamSet frozen = params.as_constants();
  return [frozen, cfg](const Tensor& lr) {
    NoGradGuard guard;
    Tensor x = lr.reshaped({1, lr.dim(0), lr.dim(1), lr.dim(2)});
    Tensor y = forward(frozen, cfg, constant(x)).value();
    return y.reshaped({y.dim(1), y.dim(2), y.dim(3)});
  };
}

inline double validation_psnr(const ParamSet& params, const NetConfig& cfg,
                              const std::vector<ImagePair>& val) {
  if (val.empty()) return std::numeric_limits<double>::quiet_NaN();
  return evaluate_pairs(make_sr_fn(params, cfg), val, cfg.scale).mean_psnr;
}

// ---------------------------------------------------------------------------
// Network checkpoints

inline void save_network(const std::string& path, const Network& net,
                         const ParamSet& phi = {}, KrMode mode = KrMode::none) {
  Checkpoint ck;
  ck.meta["kind"] = "net";
  ck.meta["groups"] = std::to_string(net.config.n_groups);
  ck.meta["blocks"] = std::to_string(net.config.n_blocks);
  ck.meta["feats"] = std::to_string(net.config.n_feats);
  ck.meta["scale"] = std::to_string(net.config.scale);
  ck.meta["taps"] = std::to_string(net.config.n_taps);
  ck.meta["attention"] = net.config.use_channel_attention ? "1" : "0";
  ck.meta["kr_mode"] = kr_mode_name(mode);
  ck.add_params("net.", net.params.named_values());
  const ParamList extra = phi.named_values();
  if (!extra.empty()) ck.add_params("phi.", extra);
  save_checkpoint(path, ck);
}

struct LoadedNet {
  Network net;
  ParamSet phi;  // empty unless the checkpoint carried matcher parameters
  KrMode mode = KrMode::none;
};

inline LoadedNet load_network(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  auto meta_int = [&](const std::string& key) {
    auto it = ck.meta.find(key);
    if (it == ck.meta.end())
      throw IoError("checkpoint " + path + " lacks field '" + key + "'");
    return static_cast<int64_t>(std::strtoll(it->second.c_str(), nullptr, 10));
  };
  if (!ck.meta.count("kind") || ck.meta.at("kind") != "net")
    throw IoError("checkpoint " + path + " is not a network checkpoint");
  NetConfig cfg;
  cfg.n_groups = meta_int("groups");
  cfg.n_blocks = meta_int("blocks");
  cfg.n_feats = meta_int("feats");
  cfg.scale = meta_int("scale");
  cfg.n_taps = meta_int("taps");
  cfg.use_channel_attention = meta_int("attention") != 0;
  cfg.validate();

  LoadedNet out{build_network(cfg, 0), {}, KrMode::none};
  out.net.params.load_values(ck.take_params("net."), true);
  const ParamList extra = ck.take_params("phi.");
  if (!extra.empty()) out.phi = ParamSet::from_list(extra, true);
  if (ck.meta.count("kr_mode")) out.mode = kr_mode_from(ck.meta.at("kr_mode"));
  return out;
}

// ---------------------------------------------------------------------------
// Training fronts

struct FitResult {
  Network net;                      // trained weights
  ParamSet phi;                     // matcher parameters (empty for vanilla runs)
  std::vector<RoundStats> history;
  std::vector<std::string> log;     // one JSON record per round
  double val_psnr = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline TrainCallbacks wire_callbacks(FitResult& out, const NetConfig& cfg,
                                     const DataBundle& data, const TrainCallbacks* hooks) {
  TrainCallbacks cb;
  cb.validate = [cfg, &data](const ParamSet& ps) { return validation_psnr(ps, cfg, data.val); };
  cb.log_line = [&out, hooks](const std::string& line) {
    out.log.push_back(line);
    if (hooks && hooks->log_line) hooks->log_line(line);
  };
  if (hooks && hooks->checkpoint) cb.checkpoint = hooks->checkpoint;
  return cb;
}

}  // namespace detail

// Supervised pre-training: plain reconstruction on the teacher architecture,
// no matching loss, no meta updates.
inline FitResult train_teacher(const RunConfig& rc, const DataBundle& data,
                               const TrainCallbacks* hooks = nullptr) {
  const NetConfig cfg = to_net_config(rc.teacher, rc.data.scale);
  FitResult out;
  out.net = build_network(cfg, derive_seed(rc.data.seed, "teacher/init"));

  Distiller d;
  d.teacher_cfg = cfg;
  d.student_cfg = cfg;
  d.mode = KrMode::none;

  TrainPlan plan;
  plan.mode = KrMode::none;
  plan.meta = false;
  plan.rounds = rc.meta.rounds;
  plan.inner_steps = 0;
  plan.train_steps = rc.meta.train_steps;
  plan.lr0 = rc.optim.lr0;
  plan.lr_min = rc.optim.lr_min;
  plan.total_steps = rc.optim.total_steps;
  plan.val_every = rc.meta.val_every;
  plan.ckpt_every = rc.meta.ckpt_every;
  plan.validate();

  BatchSampler sampler(&data.train, rc.optim.batch, rc.optim.patch, rc.data.scale,
                       Rng(derive_seed(rc.data.seed, "teacher/sampler")), rc.data.augment);
  ParamSet phi;
  auto cb = detail::wire_callbacks(out, cfg, data, hooks);
  out.history = train_loop(d, out.net.params, phi, sampler, plan, cb);
  out.val_psnr = validation_psnr(out.net.params, cfg, data.val);
  return out;
}

inline ParamSet build_phi(KrMode mode, const NetConfig& scfg, const NetConfig& tcfg,
                          const KrConfig& kr, uint64_t seed) {
  if (mode == KrMode::krnet) return build_krnet(kr, seed);
  if (mode == KrMode::conv_adapter)
    return build_adapter(scfg.n_feats, tcfg.n_feats, scfg.n_taps, seed);
  return {};
}

// Distills a student against a frozen teacher per the run config.
inline FitResult run_distill(const RunConfig& rc, const DataBundle& data, const Network& teacher,
                             const TrainCallbacks* hooks = nullptr) {
  const NetConfig scfg = to_net_config(rc.student, rc.data.scale);
  Distiller d;
  d.teacher_cfg = teacher.config;
  d.student_cfg = scfg;
  d.teacher = teacher.params.as_constants();
  d.mode = kr_mode_from(rc.krnet.mode);
  if (d.mode == KrMode::krnet)
    d.kr = to_kr_config(rc.krnet, scfg.n_feats, teacher.config.n_feats);
  d.validate();

  FitResult out;
  out.net = build_network(scfg, derive_seed(rc.data.seed, "student/init"));
  out.phi = build_phi(d.mode, scfg, teacher.config, d.kr, derive_seed(rc.data.seed, "phi/init"));

  const TrainPlan plan = to_train_plan(rc);
  BatchSampler sampler(&data.train, rc.optim.batch, rc.optim.patch, rc.data.scale,
                       Rng(derive_seed(rc.data.seed, "student/sampler")), rc.data.augment);
  auto cb = detail::wire_callbacks(out, scfg, data, hooks);
  out.history = train_loop(d, out.net.params, out.phi, sampler, plan, cb);
  out.val_psnr = validation_psnr(out.net.params, scfg, data.val);
  return out;
}

// ---------------------------------------------------------------------------
// Run directories

inline std::string timestamp_utc() {
  std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
  return buf;
}

// <root>/<config-hash>-<timestamp>; an explicit override wins verbatim.
inline std::string pick_run_dir(const RunConfig& rc, const std::string& root,
                                const std::string& override_dir) {
  if (!override_dir.empty()) return override_dir;
  return (root.empty() ? std::string("runs") : root) + "/" + config_hash(rc) + "-" +
         timestamp_utc();
}

// Owns a run directory: canonical config echo plus a streaming metric log.
// Round records carry no timestamps, so identical runs produce byte-identical
// logs.
class RunWriter {
 public:
  RunWriter(const RunConfig& rc, const std::string& dir) : dir_(dir) {
    std::filesystem::create_directories(dir_);
    std::ofstream cfg(dir_ + "/config.ini", std::ios::binary | std::ios::trunc);
    cfg << emit_config(rc);
    if (!cfg) throw IoError("cannot write " + dir_ + "/config.ini");
    metrics_.open(dir_ + "/metrics.jsonl", std::ios::binary | std::ios::trunc);
    if (!metrics_) throw IoError("cannot open " + dir_ + "/metrics.jsonl");
  }

  const std::string& dir() const { return dir_; }

  void log_line(const std::string& line) {
    metrics_ << line << "\n";
    metrics_.flush();
  }

 private:
  std::string dir_;
  std::ofstream metrics_;
};

// Full distillation run with artifacts: config echo, metric log, periodic and
// final student checkpoints.
inline FitResult distill_run(const RunConfig& rc, const DataBundle& data, const Network& teacher,
                             const std::string& dir) {
  RunWriter w(rc, dir);
  const KrMode mode = kr_mode_from(rc.krnet.mode);
  TrainCallbacks hooks;
  hooks.log_line = [&w](const std::string& line) { w.log_line(line); };
  hooks.checkpoint = [&](const ParamSet& th, const ParamSet& ph, const std::string& tag) {
    save_network(dir + "/student-" + tag + ".ckpt",
                 Network{to_net_config(rc.student, rc.data.scale), th}, ph, mode);
  };
  FitResult r = run_distill(rc, data, teacher, &hooks);
  save_network(dir + "/student-final.ckpt", r.net, r.phi, mode);
  return r;
}

// ---------------------------------------------------------------------------
// Comparison sweep

struct AblationCase {
  std::string name;
  std::string mode;  // none | conv | krnet
  bool meta = false;
};

inline std::vector<AblationCase> ablation_cases() {
  return {{"vanilla", "none", false},
          {"conv-kr", "conv", false},
          {"krnet", "krnet", false},
          {"krnet+meta", "krnet", true}};
}

struct AblationRow {
  std::string name;
  std::vector<double> per_seed;  // validation PSNR per seed
  double mean = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline AblationRow sweep_row(const std::string& name, const RunConfig& base,
                             const DataBundle& data, const Network& teacher,
                             const std::vector<uint64_t>& seeds,
                             const std::function<void(RunConfig&)>& mutate,
                             const std::function<void(const std::string&)>& progress) {
  AblationRow row;
  row.name = name;
  double sum = 0.0;
  for (uint64_t seed : seeds) {
    RunConfig rc = base;
    rc.data.seed = seed;
    mutate(rc);
    const FitResult r = run_distill(rc, data, teacher);
    row.per_seed.push_back(r.val_psnr);
    sum += r.val_psnr;
    if (progress) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.4f", r.val_psnr);
      progress(name + " seed " + std::to_string(seed) + ": " + buf + " dB");
    }
  }
  if (!row.per_seed.empty()) row.mean = sum / static_cast<double>(row.per_seed.size());
  return row;
}

}  // namespace detail

// Runs the four arms over the given seeds against one shared teacher. Every
// arm sees the same corpus; seeds move only the student/matcher init and the
// patch sampler.
inline std::vector<AblationRow> run_ablation(
    const RunConfig& base, const DataBundle& data, const Network& teacher,
    const std::vector<uint64_t>& seeds,
    const std::function<void(const std::string&)>& progress = {}) {
  std::vector<AblationRow> rows;
  for (const auto& c : ablation_cases())
    rows.push_back(detail::sweep_row(
        c.name, base, data, teacher, seeds,
        [&c](RunConfig& rc) {
          rc.krnet.mode = c.mode;
          rc.meta.enabled = c.meta;
        },
        progress));
  return rows;
}

// Kernel-count sweep: the full matcher arm at several kernels-per-sample
// settings.
inline std::vector<AblationRow> run_c0_sweep(
    const RunConfig& base, const DataBundle& data, const Network& teacher,
    const std::vector<int64_t>& values, const std::vector<uint64_t>& seeds,
    const std::function<void(const std::string&)>& progress = {}) {
  std::vector<AblationRow> rows;
  for (int64_t v : values)
    rows.push_back(detail::sweep_row(
        "c0=" + std::to_string(v), base, data, teacher, seeds,
        [v](RunConfig& rc) {
          rc.krnet.mode = "krnet";
          rc.krnet.c_o = v;
        },
        progress));
  return rows;
}

// ---------------------------------------------------------------------------
// Meta-gradient self-check

struct GradCheckReport {
  double worst = 0.0;   // max relative error over all matcher entries
  int64_t entries = 0;  // scalar entries compared
  bool pass = false;
  std::vector<std::string> lines;  // one summary per unroll depth
};

// Central-difference check of the analytic meta-gradient over every matcher
// entry on a miniature distiller, at one- and two-step unrolls.
inline GradCheckReport check_meta_gradient(uint64_t seed = 7, double tol = 1e-4) {
  Distiller d;
  d.teacher_cfg = NetConfig{2, 1, 4, 2, true, 2, 4};
  d.student_cfg = NetConfig{2, 1, 2, 2, true, 2, 4};
  d.mode = KrMode::krnet;
  d.kr = KrConfig{2, 4, 0, 2, 3};
  d.teacher = build_network(d.teacher_cfg, derive_seed(seed, "gc/teacher")).params.as_constants();
  d.validate();

  ParamSet theta = build_network(d.student_cfg, derive_seed(seed, "gc/student")).params;
  // Undamped generators: gradient magnitudes stay O(1), so the comparison
  // against the difference quotient is meaningful rather than vacuous.
  ParamSet phi = build_krnet(d.kr, derive_seed(seed, "gc/phi"), 1.0);

  Rng rng(derive_seed(seed, "gc/data"));
  Batch inner;
  inner.lr = Tensor::uniform({1, 3, 8, 8}, rng, 0.05, 0.95);
  inner.hr = Tensor::uniform({1, 3, 16, 16}, rng, 0.05, 0.95);
  Batch meta_batch;
  meta_batch.lr = Tensor::uniform({1, 3, 8, 8}, rng, 0.05, 0.95);
  meta_batch.hr = Tensor::uniform({1, 3, 16, 16}, rng, 0.05, 0.95);

  const auto names = param_names(theta);
  const double alpha = 1e-3;
  const double h = 1e-6;
  auto eval_loss = [&](const ParamSet& phi_v, int64_t steps) {
    auto loss_fn = d.inner_loss(names, &phi_v, inner);
    auto unroll = unroll_inner(theta.vars(), loss_fn, steps, alpha, false);
    return d.recon_loss(names, unroll.theta, meta_batch).value().item();
  };

  GradCheckReport rep;
  for (int64_t steps : {1, 2}) {
    const MetaRound mr = meta_gradient(d, theta, phi, inner, meta_batch, steps, alpha, false);
    double worst_t = 0.0;
    int64_t count_t = 0;
    for (size_t i = 0; i < phi.items().size(); ++i) {
      const Tensor base = phi.items()[i].second.value();
      for (int64_t e = 0; e < base.numel(); ++e) {
        auto bumped = [&](double delta) {
          ParamSet out;
          for (size_t j = 0; j < phi.items().size(); ++j) {
            Tensor v = phi.items()[j].second.value().clone();
            if (j == i) v.mutable_data()[e] += delta;
            out.add(phi.items()[j].first, parameter(v));
          }
          return out;
        };
        const double fd = (eval_loss(bumped(h), steps) - eval_loss(bumped(-h), steps)) / (2 * h);
        const double an = mr.grad_phi[i].data()[e];
        const double rel = std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
        worst_t = std::max(worst_t, rel);
        ++count_t;
      }
    }
    char buf[96];
    std::snprintf(buf, sizeof(buf), "T=%lld: %lld entries, worst rel err %.3g",
                  static_cast<long long>(steps), static_cast<long long>(count_t), worst_t);
    rep.lines.emplace_back(buf);
    rep.worst = std::max(rep.worst, worst_t);
    rep.entries += count_t;
  }
  rep.pass = rep.worst < tol;
  return rep;
}

}  // namespace metasr
