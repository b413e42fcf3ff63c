#pragma once

// Run configuration: a flat INI-style file with one section per subsystem.
// A single field table drives both the parser and the emitter, so
// emit -> parse -> emit is byte-identical and unknown keys are impossible to
// let through. '#' starts a comment; a repeated key takes its last value.

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include "metasr/data.hpp"
#include "metasr/krnet.hpp"
#include "metasr/meta.hpp"
#include "metasr/sr_model.hpp"

namespace metasr {

struct NetFileConfig {
  int64_t groups = 4;
  int64_t blocks = 4;
  int64_t feats = 32;
  int64_t taps = 4;
  bool attention = true;
};

struct KrFileConfig {
  std::string mode = "krnet";  // none | conv | krnet
  int64_t c_o = 64;            // kernels per sample; must be a perfect square
  int64_t k = 3;
  int64_t c_mid = 0;           // matcher hidden width; 0 means teacher width
};

struct MetaConfig {
  bool enabled = true;
  bool first_order = false;
  int64_t inner_steps = 1;
  double alpha = 1e-4;
  double lambda = 1.0;
  int64_t rounds = 100;
  int64_t train_steps = 1;
  double phi_lr = 1e-4;
  int64_t val_every = 0;
  int64_t ckpt_every = 0;
};

struct OptimConfig {
  double lr0 = 1e-4;
  double lr_min = 5e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int64_t batch = 16;
  int64_t patch = 48;  // LR patch edge
  int64_t total_steps = 0;
};

struct DataConfig {
  std::string corpus;  // folder of HR images; empty means synthetic
  int64_t synthetic_count = 200;
  int64_t synthetic_size = 96;  // LR side at the default scale matches the patch
  int64_t val_count = 24;
  int64_t scale = 2;
  uint64_t seed = 1;
  bool augment = true;
};

struct EvalConfig {
  std::string benchmark;  // folder for cmd_eval / validation; empty -> synthetic
};

struct RunConfig {
  NetFileConfig teacher{4, 4, 32, 4, true};
  NetFileConfig student{4, 1, 16, 4, true};
  KrFileConfig krnet;
  MetaConfig meta;
  OptimConfig optim;
  DataConfig data;
  EvalConfig eval;
};

// ---------------------------------------------------------------------------
// Field table

namespace detail {

struct FieldRef {
  const char* section;
  const char* key;
  enum class Kind { i64, u64, f64, boolean, str } kind;
  void* p;
};

inline std::vector<FieldRef> config_fields(RunConfig& rc) {
  using K = FieldRef::Kind;
  auto net = [](const char* sec, NetFileConfig& n) {
    return std::vector<FieldRef>{
        {sec, "groups", K::i64, &n.groups}, {sec, "blocks", K::i64, &n.blocks},
        {sec, "feats", K::i64, &n.feats},   {sec, "taps", K::i64, &n.taps},
        {sec, "attention", K::boolean, &n.attention},
    };
  };
  std::vector<FieldRef> f = net("teacher", rc.teacher);
  for (auto& e : net("student", rc.student)) f.push_back(e);
  f.insert(f.end(), {
    {"krnet", "mode", K::str, &rc.krnet.mode},
    {"krnet", "c_o", K::i64, &rc.krnet.c_o},
    {"krnet", "k", K::i64, &rc.krnet.k},
    {"krnet", "c_mid", K::i64, &rc.krnet.c_mid},
    {"meta", "enabled", K::boolean, &rc.meta.enabled},
    {"meta", "first_order", K::boolean, &rc.meta.first_order},
    {"meta", "inner_steps", K::i64, &rc.meta.inner_steps},
    {"meta", "alpha", K::f64, &rc.meta.alpha},
    {"meta", "lambda", K::f64, &rc.meta.lambda},
    {"meta", "rounds", K::i64, &rc.meta.rounds},
    {"meta", "train_steps", K::i64, &rc.meta.train_steps},
    {"meta", "phi_lr", K::f64, &rc.meta.phi_lr},
    {"meta", "val_every", K::i64, &rc.meta.val_every},
    {"meta", "ckpt_every", K::i64, &rc.meta.ckpt_every},
    {"optim", "lr0", K::f64, &rc.optim.lr0},
    {"optim", "lr_min", K::f64, &rc.optim.lr_min},
    {"optim", "beta1", K::f64, &rc.optim.beta1},
    {"optim", "beta2", K::f64, &rc.optim.beta2},
    {"optim", "batch", K::i64, &rc.optim.batch},
    {"optim", "patch", K::i64, &rc.optim.patch},
    {"optim", "total_steps", K::i64, &rc.optim.total_steps},
    {"data", "corpus", K::str, &rc.data.corpus},
    {"data", "synthetic_count", K::i64, &rc.data.synthetic_count},
    {"data", "synthetic_size", K::i64, &rc.data.synthetic_size},
    {"data", "val_count", K::i64, &rc.data.val_count},
    {"data", "scale", K::i64, &rc.data.scale},
    {"data", "seed", K::u64, &rc.data.seed},
    {"data", "augment", K::boolean, &rc.data.augment},
    {"eval", "benchmark", K::str, &rc.eval.benchmark},
  });
  return f;
}

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::string format_f64(double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline void assign_field(const FieldRef& f, const std::string& raw, int line) {
  const std::string where = "config line " + std::to_string(line) + ": key '" +
                            std::string(f.key) + "'";
  using K = FieldRef::Kind;
  const char* b = raw.c_str();
  const char* e = b + raw.size();
  switch (f.kind) {
    case K::i64: {
      auto* dst = static_cast<int64_t*>(f.p);
      auto res = std::from_chars(b, e, *dst);
      if (res.ec != std::errc{} || res.ptr != e)
        throw ConfigError(where + " wants an integer, got '" + raw + "'");
      break;
    }
    case K::u64: {
      auto* dst = static_cast<uint64_t*>(f.p);
      auto res = std::from_chars(b, e, *dst);
      if (res.ec != std::errc{} || res.ptr != e)
        throw ConfigError(where + " wants a non-negative integer, got '" + raw + "'");
      break;
    }
    case K::f64: {
      char* end = nullptr;
      double v = std::strtod(b, &end);
      if (end != e || raw.empty())
        throw ConfigError(where + " wants a number, got '" + raw + "'");
      *static_cast<double*>(f.p) = v;
      break;
    }
    case K::boolean: {
      if (raw == "true") *static_cast<bool*>(f.p) = true;
      else if (raw == "false") *static_cast<bool*>(f.p) = false;
      else throw ConfigError(where + " wants true or false, got '" + raw + "'");
      break;
    }
    case K::str:
      *static_cast<std::string*>(f.p) = raw;
      break;
  }
}

inline std::string format_field(const FieldRef& f) {
  using K = FieldRef::Kind;
  switch (f.kind) {
    case K::i64: return std::to_string(*static_cast<const int64_t*>(f.p));
    case K::u64: return std::to_string(*static_cast<const uint64_t*>(f.p));
    case K::f64: return format_f64(*static_cast<const double*>(f.p));
    case K::boolean: return *static_cast<const bool*>(f.p) ? "true" : "false";
    default: return *static_cast<const std::string*>(f.p);
  }
}

}  // namespace detail

// Parses config text over the defaults. Unknown sections and keys are errors
// that name the offending line.
inline RunConfig parse_config(const std::string& text) {
  RunConfig rc;
  auto fields = detail::config_fields(rc);
  std::string section;
  int line_no = 0;
  size_t pos = 0;
  while (pos <= text.size()) {
    size_t nl = text.find('\n', pos);
    std::string line = text.substr(pos, nl == std::string::npos ? nl : nl - pos);
    pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("config line " + std::to_string(line_no) + ": unterminated section");
      section = detail::trim(line.substr(1, line.size() - 2));
      bool known = false;
      for (const auto& f : fields) known = known || section == f.section;
      if (!known)
        throw ConfigError("config line " + std::to_string(line_no) + ": unknown section [" +
                          section + "]");
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value, got '" +
                        line + "'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    if (section.empty())
      throw ConfigError("config line " + std::to_string(line_no) + ": key '" + key +
                        "' appears before any [section]");
    const detail::FieldRef* hit = nullptr;
    for (const auto& f : fields)
      if (section == f.section && key == f.key) hit = &f;
    if (!hit)
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key +
                        "' in section [" + section + "]");
    detail::assign_field(*hit, val, line_no);
  }
  return rc;
}

// Canonical emission: every field, fixed order, shortest round-trip numerals.
inline std::string emit_config(const RunConfig& rc) {
  auto fields = detail::config_fields(const_cast<RunConfig&>(rc));
  std::string out;
  std::string section;
  for (const auto& f : fields) {
    if (section != f.section) {
      if (!out.empty()) out += "\n";
      section = f.section;
      out += "[" + section + "]\n";
    }
    const std::string v = detail::format_field(f);
    out += std::string(f.key) + (v.empty() ? " =" : " = " + v) + "\n";
  }
  return out;
}

inline std::string config_hash(const RunConfig& rc) {
  const uint64_t h = fnv1a(emit_config(rc));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Materialization

inline NetConfig to_net_config(const NetFileConfig& f, int64_t scale) {
  NetConfig cfg;
  cfg.n_groups = f.groups;
  cfg.n_blocks = f.blocks;
  cfg.n_feats = f.feats;
  cfg.n_taps = f.taps;
  cfg.use_channel_attention = f.attention;
  cfg.scale = scale;
  cfg.validate();
  return cfg;
}

inline KrConfig to_kr_config(const KrFileConfig& f, int64_t c_s, int64_t c_t) {
  int64_t grid = 1;
  while (grid * grid < f.c_o) ++grid;
  if (grid * grid != f.c_o)
    throw ConfigError("krnet c_o = " + std::to_string(f.c_o) +
                      " is not a perfect square (it is the kernel-grid cell count)");
  KrConfig kr;
  kr.c_s = c_s;
  kr.c_t = c_t;
  kr.c_mid = f.c_mid;
  kr.grid = grid;
  kr.k = f.k;
  kr.validate();
  return kr;
}

inline TrainPlan to_train_plan(const RunConfig& rc) {
  TrainPlan plan;
  plan.mode = kr_mode_from(rc.krnet.mode);
  plan.meta = rc.meta.enabled;
  plan.first_order = rc.meta.first_order;
  plan.rounds = rc.meta.rounds;
  plan.inner_steps = rc.meta.inner_steps;
  plan.train_steps = rc.meta.train_steps;
  plan.alpha = rc.meta.alpha;
  plan.lambda = rc.meta.lambda;
  plan.phi_lr = rc.meta.phi_lr;
  plan.lr0 = rc.optim.lr0;
  plan.lr_min = rc.optim.lr_min;
  plan.total_steps = rc.optim.total_steps;
  plan.val_every = rc.meta.val_every;
  plan.ckpt_every = rc.meta.ckpt_every;
  plan.validate();
  return plan;
}

// Full sanity pass before any compute.
inline void validate_run_config(const RunConfig& rc) {
  const NetConfig tcfg = to_net_config(rc.teacher, rc.data.scale);
  const NetConfig scfg = to_net_config(rc.student, rc.data.scale);
  const KrMode mode = kr_mode_from(rc.krnet.mode);
  if (mode == KrMode::krnet) to_kr_config(rc.krnet, scfg.n_feats, tcfg.n_feats);
  if (mode != KrMode::none && tcfg.n_taps != scfg.n_taps)
    throw ConfigError("teacher taps (" + std::to_string(tcfg.n_taps) + ") != student taps (" +
                      std::to_string(scfg.n_taps) + ")");
  to_train_plan(rc);
  if (rc.optim.batch < 1) throw ConfigError("batch must be >= 1");
  if (rc.optim.patch < rc.data.scale) throw ConfigError("patch must be >= the scale");
  if (rc.optim.beta1 < 0 || rc.optim.beta1 >= 1 || rc.optim.beta2 < 0 || rc.optim.beta2 >= 1)
    throw ConfigError("Adam betas must lie in [0,1)");
  if (rc.data.corpus.empty()) {
    if (rc.data.synthetic_count < 1 || rc.data.val_count < 1)
      throw ConfigError("synthetic corpus and validation sizes must be >= 1");
    if (rc.data.synthetic_size % rc.data.scale != 0)
      throw ConfigError("synthetic_size must be divisible by the scale");
    if (rc.optim.patch > rc.data.synthetic_size / rc.data.scale)
      throw ConfigError("patch " + std::to_string(rc.optim.patch) +
                        " exceeds the synthesized LR size " +
                        std::to_string(rc.data.synthetic_size / rc.data.scale));
  }
}

}  // namespace metasr
