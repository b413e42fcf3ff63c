// metasr: command-line workbench for the kernel-distillation SR stack.
//
// Subcommands: train-teacher, distill, eval, check-grad, ablate. Every run
// writes its artifacts (canonical config echo, metric log, checkpoints) under
// one directory named by config hash + timestamp unless --run-dir pins it.
// Exit codes: 0 success, 1 validation failure, 2 numeric failure, 3 I/O.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "metasr/experiment.hpp"

namespace ms = metasr;

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
  std::string run_dir;
  std::string runs_root = "runs";
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("-c,--config", o.config_path, "run configuration file (INI)");
  cmd->add_option("--set", o.sets, "override a config key, e.g. --set optim.batch=8");
  cmd->add_option("--run-dir", o.run_dir, "exact output directory (default <root>/<hash>-<time>)");
  cmd->add_option("--runs-root", o.runs_root, "parent for auto-named run directories");
}

// Frequent knobs as first-class flags; they reuse the --set path so the same
// validation and diagnostics apply.
struct DataFlags {
  CLI::Option* scale = nullptr;
  CLI::Option* patch = nullptr;
  CLI::Option* batch = nullptr;
  CLI::Option* seed = nullptr;
  CLI::Option* corpus = nullptr;
  CLI::Option* augment = nullptr;
  int64_t scale_v = 0, patch_v = 0, batch_v = 0;
  uint64_t seed_v = 0;
  std::string corpus_v;
  bool augment_v = false;
};

void add_data_flags(CLI::App* cmd, DataFlags& f) {
  f.scale = cmd->add_option("--scale", f.scale_v, "upscaling factor");
  f.patch = cmd->add_option("--patch", f.patch_v, "LR patch edge");
  f.batch = cmd->add_option("--batch", f.batch_v, "mini-batch size");
  f.seed = cmd->add_option("--seed", f.seed_v, "run seed");
  f.corpus = cmd->add_option("--corpus", f.corpus_v, "HR image folder (empty: synthetic)");
  f.augment = cmd->add_flag("--augment,!--no-augment", f.augment_v, "random flips/rotations");
}

void apply_data_flags(const DataFlags& f, CommonOpts& o) {
  if (*f.scale) o.sets.push_back("data.scale=" + std::to_string(f.scale_v));
  if (*f.patch) o.sets.push_back("optim.patch=" + std::to_string(f.patch_v));
  if (*f.batch) o.sets.push_back("optim.batch=" + std::to_string(f.batch_v));
  if (*f.seed) o.sets.push_back("data.seed=" + std::to_string(f.seed_v));
  if (*f.corpus) o.sets.push_back("data.corpus=" + f.corpus_v);
  if (*f.augment) o.sets.push_back(std::string("data.augment=") + (f.augment_v ? "true" : "false"));
}

ms::RunConfig load_run_config(const CommonOpts& o) {
  ms::RunConfig rc;
  if (!o.config_path.empty()) {
    std::ifstream f(o.config_path, std::ios::binary);
    if (!f) throw ms::IoError("cannot read config " + o.config_path);
    std::stringstream ss;
    ss << f.rdbuf();
    rc = ms::parse_config(ss.str());
  }
  if (!o.sets.empty()) {
    // Layer overrides through the parser (last key wins) so unknown keys and
    // malformed values get the same line-numbered diagnostics as a file.
    std::string text = ms::emit_config(rc);
    for (const auto& s : o.sets) {
      const auto dot = s.find('.');
      const auto eq = s.find('=');
      if (dot == std::string::npos || eq == std::string::npos || dot > eq)
        throw ms::ConfigError("--set expects section.key=value, got '" + s + "'");
      text += "\n[" + s.substr(0, dot) + "]\n" + s.substr(dot + 1, eq - dot - 1) + " = " +
              s.substr(eq + 1) + "\n";
    }
    rc = ms::parse_config(text);
  }
  ms::validate_run_config(rc);
  return rc;
}

std::string compact_tol(double tol) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.0e", tol);  // 1e-04
  std::string s(buf);
  const auto e = s.find('e');
  if (e != std::string::npos) {
    size_t i = e + 1;
    if (i < s.size() && s[i] == '+') s.erase(i, 1);
    if (i < s.size() && s[i] == '-') ++i;
    while (i + 1 < s.size() && s[i] == '0') s.erase(i, 1);
  }
  return s;
}

int cmd_train_teacher(const CommonOpts& o) {
  const ms::RunConfig rc = load_run_config(o);
  const std::string dir = ms::pick_run_dir(rc, o.runs_root, o.run_dir);
  const ms::DataBundle data = ms::build_data(rc);
  ms::RunWriter w(rc, dir);
  ms::TrainCallbacks hooks;
  hooks.log_line = [&w](const std::string& l) { w.log_line(l); };
  hooks.checkpoint = [&](const ms::ParamSet& th, const ms::ParamSet&, const std::string& tag) {
    ms::save_network(dir + "/teacher-" + tag + ".ckpt",
                     ms::Network{ms::to_net_config(rc.teacher, rc.data.scale), th});
  };
  const ms::FitResult r = ms::train_teacher(rc, data, &hooks);
  ms::save_network(dir + "/teacher-final.ckpt", r.net);
  std::printf("run dir: %s\n", dir.c_str());
  std::printf("teacher val PSNR %.4f dB over %zu images\n", r.val_psnr, data.val.size());
  return 0;
}

int cmd_distill(const CommonOpts& o, const std::string& teacher_path) {
  const ms::RunConfig rc = load_run_config(o);
  const std::string dir = ms::pick_run_dir(rc, o.runs_root, o.run_dir);
  const ms::LoadedNet teacher = ms::load_network(teacher_path);
  if (teacher.net.config.scale != rc.data.scale)
    throw ms::ConfigError("teacher checkpoint is x" + std::to_string(teacher.net.config.scale) +
                          " but data.scale is " + std::to_string(rc.data.scale));
  const ms::DataBundle data = ms::build_data(rc);
  const ms::FitResult r = ms::distill_run(rc, data, teacher.net, dir);
  std::printf("run dir: %s\n", dir.c_str());
  std::printf("student val PSNR %.4f dB over %zu images\n", r.val_psnr, data.val.size());
  return 0;
}

int cmd_eval(const CommonOpts& o, const std::string& ckpt, const std::string& folder) {
  const ms::LoadedNet ln = ms::load_network(ckpt);
  const ms::SrFn fn = ms::make_sr_fn(ln.net.params, ln.net.config);
  ms::EvalReport rep;
  if (!folder.empty()) {
    rep = ms::evaluate_benchmark(fn, folder, ln.net.config.scale);
  } else {
    const ms::RunConfig rc = load_run_config(o);
    if (rc.data.scale != ln.net.config.scale)
      throw ms::ConfigError("checkpoint is x" + std::to_string(ln.net.config.scale) +
                            " but data.scale is " + std::to_string(rc.data.scale));
    rep = ms::evaluate_pairs(fn, ms::build_data(rc).val, rc.data.scale);
  }
  nlohmann::ordered_json out;
  out["mean_psnr"] = rep.mean_psnr;
  out["mean_ssim"] = rep.mean_ssim;
  out["images"] = nlohmann::ordered_json::array();
  for (const auto& s : rep.per_image)
    out["images"].push_back({{"id", s.id}, {"psnr", s.psnr}, {"ssim", s.ssim}});
  out["skipped"] = rep.skipped;
  std::printf("%s\n", out.dump(2).c_str());
  return 0;
}

int cmd_check_grad(uint64_t seed, double tol) {
  const ms::GradCheckReport rep = ms::check_meta_gradient(seed, tol);
  for (const auto& l : rep.lines) std::printf("%s\n", l.c_str());
  if (rep.pass) {
    std::printf("PASS rel_err<%s\n", compact_tol(tol).c_str());
    return 0;
  }
  std::printf("FAIL worst rel_err %.3g >= %s\n", rep.worst, compact_tol(tol).c_str());
  return 2;
}

int cmd_ablate(const CommonOpts& o, const std::string& teacher_path, const std::string& axis,
               const std::vector<uint64_t>& seeds) {
  const ms::RunConfig rc = load_run_config(o);
  const std::string dir = ms::pick_run_dir(rc, o.runs_root, o.run_dir);
  const ms::DataBundle data = ms::build_data(rc);
  ms::RunWriter w(rc, dir);

  ms::Network teacher;
  if (!teacher_path.empty()) {
    teacher = ms::load_network(teacher_path).net;
    if (teacher.config.scale != rc.data.scale)
      throw ms::ConfigError("teacher checkpoint is x" + std::to_string(teacher.config.scale) +
                            " but data.scale is " + std::to_string(rc.data.scale));
  } else {
    std::printf("no teacher checkpoint given; pre-training one\n");
    teacher = ms::train_teacher(rc, data).net;
    ms::save_network(dir + "/teacher-final.ckpt", teacher);
  }

  auto progress = [](const std::string& l) {
    std::printf("%s\n", l.c_str());
    std::fflush(stdout);
  };
  std::vector<ms::AblationRow> rows;
  if (axis == "cases") {
    rows = ms::run_ablation(rc, data, teacher, seeds, progress);
  } else if (axis == "c0") {
    rows = ms::run_c0_sweep(rc, data, teacher, {4, 16, 64, 144}, seeds, progress);
  } else {
    throw ms::ConfigError("unknown ablation axis '" + axis + "' (expected cases or c0)");
  }

  nlohmann::ordered_json ja = nlohmann::ordered_json::array();
  std::printf("\n%-12s %10s  per-seed\n", "case", "mean dB");
  for (const auto& r : rows) {
    std::printf("%-12s %10.4f ", r.name.c_str(), r.mean);
    for (double v : r.per_seed) std::printf(" %.4f", v);
    std::printf("\n");
    ja.push_back({{"name", r.name}, {"mean_psnr", r.mean}, {"per_seed", r.per_seed}});
  }
  std::ofstream jf(dir + "/ablation.json", std::ios::binary | std::ios::trunc);
  jf << ja.dump(2) << "\n";
  if (!jf) throw ms::IoError("cannot write " + dir + "/ablation.json");
  std::printf("table written to %s/ablation.json\n", dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kernel-distillation super-resolution workbench"};
  app.require_subcommand(1);

  CommonOpts tt_o;
  DataFlags tt_f;
  auto* tt = app.add_subcommand("train-teacher", "pre-train a teacher network");
  add_common(tt, tt_o);
  add_data_flags(tt, tt_f);

  CommonOpts di_o;
  DataFlags di_f;
  std::string di_teacher;
  auto* di = app.add_subcommand("distill", "distill a student against a frozen teacher");
  add_common(di, di_o);
  add_data_flags(di, di_f);
  di->add_option("--teacher", di_teacher, "teacher checkpoint")->required();

  CommonOpts ev_o;
  std::string ev_ckpt, ev_folder;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint (Y-channel PSNR/SSIM)");
  add_common(ev, ev_o);
  ev->add_option("--ckpt", ev_ckpt, "network checkpoint")->required();
  ev->add_option("--folder", ev_folder, "benchmark image folder (default: config validation set)");

  uint64_t cg_seed = 7;
  double cg_tol = 1e-4;
  auto* cg = app.add_subcommand("check-grad", "finite-difference check of the meta-gradient");
  cg->add_option("--seed", cg_seed, "toy-problem seed");
  cg->add_option("--tol", cg_tol, "max relative error");

  CommonOpts ab_o;
  DataFlags ab_f;
  std::string ab_teacher, ab_axis = "cases";
  std::vector<uint64_t> ab_seeds = {1, 2, 3};
  auto* ab = app.add_subcommand("ablate", "comparison sweep at desk scale");
  add_common(ab, ab_o);
  add_data_flags(ab, ab_f);
  ab->add_option("--teacher", ab_teacher, "teacher checkpoint (default: pre-train one)");
  ab->add_option("--axis", ab_axis, "sweep axis: cases | c0");
  ab->add_option("--seeds", ab_seeds, "seeds to average over");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (tt->parsed()) {
      apply_data_flags(tt_f, tt_o);
      return cmd_train_teacher(tt_o);
    }
    if (di->parsed()) {
      apply_data_flags(di_f, di_o);
      return cmd_distill(di_o, di_teacher);
    }
    if (ev->parsed()) return cmd_eval(ev_o, ev_ckpt, ev_folder);
    if (cg->parsed()) return cmd_check_grad(cg_seed, cg_tol);
    if (ab->parsed()) {
      apply_data_flags(ab_f, ab_o);
      return cmd_ablate(ab_o, ab_teacher, ab_axis, ab_seeds);
    }
  } catch (const ms::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const ms::ShapeError& e) {
    std::fprintf(stderr, "shape error: %s\n", e.what());
    return 1;
  } catch (const ms::NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 2;
  } catch (const ms::IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return 3;
  }
  return 0;
}
