#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "gode/cli.hpp"
#include "gode/error.hpp"
#include "gode/gradcheck.hpp"
#include "gode/ops.hpp"
#include "json.hpp"

namespace gode::cli {

namespace {

using nlohmann::json;

// Flag values that were actually given; they override file and defaults.
struct Flags {
  std::string config;
  std::optional<std::string> family, bias_mode, solver, dataset, data_dir, precision, out, lr_drops;
  std::optional<int> width, layers, n, k, blocks, max_steps, epochs;
  std::optional<double> T, residual_scale, step, rtol, atol, lr, lr_drop_factor, momentum, weight_decay;
  std::optional<bool> time_channel;
  std::optional<std::size_t> subset, test_subset, synthetic_n, batch, eval_batch, crop_pad;
  std::optional<std::uint64_t> seed;
};

void add_config_flags(CLI::App& app, Flags& f) {
  app.add_option("--config", f.config, "JSON run configuration");
  app.add_option("--family", f.family, "resnet, node or gode");
  app.add_option("--dataset", f.dataset, "mnist, cifar10 or synthetic");
  app.add_option("--data-dir", f.data_dir, "directory holding the dataset files");
  app.add_option("--subset", f.subset, "keep this many training samples (seeded)");
  app.add_option("--test-subset", f.test_subset, "keep this many test samples (seeded)");
  app.add_option("--synthetic-n", f.synthetic_n, "synthetic training set size");
  app.add_option("--width", f.width, "channels C of the core stage");
  app.add_option("--layers", f.layers, "conv stages per block / dynamics function");
  app.add_option("--n", f.n, "spline control points");
  app.add_option("--k", f.k, "spline degree");
  app.add_option("--T", f.T, "integration horizon");
  app.add_option("--bias-mode", f.bias_mode, "constant or spline");
  app.add_option("--time-channel", f.time_channel, "node: append t as an input channel");
  app.add_option("--blocks", f.blocks, "resnet: residual blocks");
  app.add_option("--residual-scale", f.residual_scale, "resnet: h in z + h f(z)");
  app.add_option("--solver", f.solver, "euler or dopri5");
  app.add_option("--step", f.step, "Euler step size");
  app.add_option("--rtol", f.rtol, "dopri5 relative tolerance");
  app.add_option("--atol", f.atol, "dopri5 absolute tolerance");
  app.add_option("--max-steps", f.max_steps, "dopri5 accepted-step limit");
  app.add_option("--epochs", f.epochs, "training epochs");
  app.add_option("--batch", f.batch, "training batch size");
  app.add_option("--lr", f.lr, "initial learning rate");
  app.add_option("--lr-drops", f.lr_drops, "comma-separated epochs dividing the learning rate");
  app.add_option("--lr-drop-factor", f.lr_drop_factor, "divisor applied at each drop");
  app.add_option("--momentum", f.momentum, "SGD momentum");
  app.add_option("--weight-decay", f.weight_decay, "ridge penalty lambda");
  app.add_option("--seed", f.seed, "random seed");
  app.add_option("--eval-batch", f.eval_batch, "evaluation batch size");
  app.add_option("--crop-pad", f.crop_pad, "random-crop padding (0 disables)");
  app.add_option("--precision", f.precision, "f32 or f64");
  app.add_option("--out", f.out, "output root directory");
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("expected a comma-separated integer list, got '" + text + "'");
    }
  }
  return out;
}

RunConfig resolve(const Flags& f) {
  RunConfig cfg;
  if (!f.config.empty()) cfg.merge_json(read_text(f.config));
  json j = json::object();
  auto set = [&j](const char* key, const auto& opt) {
    if (opt) j[key] = *opt;
  };
  set("family", f.family);
  set("dataset", f.dataset);
  set("data_dir", f.data_dir);
  set("subset", f.subset);
  set("test_subset", f.test_subset);
  set("synthetic_n", f.synthetic_n);
  set("width", f.width);
  set("layers", f.layers);
  set("n", f.n);
  set("k", f.k);
  set("T", f.T);
  set("bias_mode", f.bias_mode);
  set("time_channel", f.time_channel);
  set("blocks", f.blocks);
  set("residual_scale", f.residual_scale);
  set("solver", f.solver);
  set("step", f.step);
  set("rtol", f.rtol);
  set("atol", f.atol);
  set("max_steps", f.max_steps);
  set("epochs", f.epochs);
  set("batch", f.batch);
  set("lr", f.lr);
  if (f.lr_drops) j["lr_drops"] = parse_int_list(*f.lr_drops);
  set("lr_drop_factor", f.lr_drop_factor);
  set("momentum", f.momentum);
  set("weight_decay", f.weight_decay);
  set("seed", f.seed);
  set("eval_batch", f.eval_batch);
  set("crop_pad", f.crop_pad);
  set("precision", f.precision);
  set("out", f.out);
  cfg.merge_json(j.dump());
  cfg = cfg.resolved();
  cfg.validate();
  return cfg;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  os << text;
  if (!os) throw FormatError("cannot write " + path.string());
}

template <typename Fn>
std::string render(Fn&& fn) {
  std::ostringstream ss;
  fn(ss);
  return ss.str();
}

std::string fmt_double(double v) {
  std::ostringstream ss;
  ss << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return ss.str();
}

struct RunResult {
  TrainReport report;
  std::size_t params = 0;
  double final_test_error = 0;
};

template <typename T>
RunResult train_run(const RunConfig& cfg, const std::filesystem::path& dir, std::ostream& out) {
  std::filesystem::create_directories(dir);
  write_file(dir / "config.json", cfg.to_json());
  const Dataset train_ds = load_dataset(cfg, Split::train);
  const Dataset test_ds = load_dataset(cfg, Split::test);
  Model<T> model = build<T>(cfg.model_spec(), cfg.seed);
  TrainConfig tc = cfg.train_config();
  tc.checkpoint = dir / "model.ckpt";
  RunResult result;
  result.params = model.num_params();
  result.report = train(model, train_ds, test_ds, tc, [&out](const EpochRecord& r) {
    out << "epoch " << r.epoch << "  lr " << r.lr << "  loss " << r.train_loss << "  train_acc "
        << r.train_acc << "%  test_error " << r.test_error_pct << "%  sec/iter " << r.sec_per_iter
        << '\n';
  });
  write_file(dir / "report.csv", render([&](std::ostream& os) { write_report_csv(os, result.report); }));
  write_file(dir / "timing.csv", render([&](std::ostream& os) { write_timing_csv(os, result.report); }));
  result.final_test_error = result.report.epochs.empty() ? evaluate(model, test_ds, tc.eval_batch_size)
                                                         : result.report.epochs.back().test_error_pct;
  return result;
}

RunResult train_dispatch(const RunConfig& cfg, const std::filesystem::path& dir, std::ostream& out) {
  return cfg.precision == "f64" ? train_run<double>(cfg, dir, out) : train_run<float>(cfg, dir, out);
}

int cmd_train(const Flags& f, std::ostream& out) {
  const RunConfig cfg = resolve(f);
  const auto dir = run_directory(cfg);
  out << "run directory " << dir.string() << '\n';
  const auto result = train_dispatch(cfg, dir, out);
  out << "params " << result.params << "  final test error " << result.final_test_error << "%\n";
  return kExitOk;
}

template <typename T>
int eval_run(const std::filesystem::path& checkpoint, const RunConfig& cfg,
             const std::optional<SolverConfig>& solver, std::ostream& out) {
  Model<T> model = load_model<T>(checkpoint);
  if (solver && model.spec.family() != Family::resnet) model.set_solver(*solver);
  const Dataset test_ds = load_dataset(cfg, Split::test);
  const double err = evaluate(model, test_ds, cfg.eval_batch);
  out << "test_error_pct " << fmt_double(err) << '\n';
  return kExitOk;
}

int cmd_eval(const Flags& f, const std::filesystem::path& checkpoint, std::ostream& out) {
  const RunConfig cfg = resolve(f);
  std::optional<SolverConfig> solver;
  if (f.solver || f.step || f.rtol || f.atol || f.max_steps) {
    const auto ck = read_checkpoint(checkpoint);
    if (ck.spec.family() != Family::resnet) {
      const auto& current = std::visit(
          [](const auto& core) -> const SolverConfig& {
            if constexpr (std::is_same_v<std::decay_t<decltype(core)>, ResNetCore>) {
              throw ConfigError("unreachable");
            } else {
              return core.solver;
            }
          },
          ck.spec.core);
      SolverConfig s = current;
      if (f.solver) s.method = parse_solver_method(*f.solver);
      if (f.step) s.step = *f.step;
      if (f.rtol) s.rtol = *f.rtol;
      if (f.atol) s.atol = *f.atol;
      if (f.max_steps) s.max_steps = *f.max_steps;
      solver = s;
    }
  }
  return cfg.precision == "f64" ? eval_run<double>(checkpoint, cfg, solver, out)
                                : eval_run<float>(checkpoint, cfg, solver, out);
}

int cmd_grid(const Flags& f, const std::string& axis, const std::string& values_text, std::ostream& out) {
  const RunConfig base = resolve(f);
  if (base.family != Family::gode) throw ConfigError("grid: axes n, k, T and layers need --family gode");
  if (axis != "n" && axis != "k" && axis != "T" && axis != "layers") {
    throw ConfigError("grid: unknown axis '" + axis + "' (expected n, k, T or layers)");
  }
  std::vector<std::string> values;
  {
    std::stringstream ss(values_text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) values.push_back(item);
    }
  }
  if (values.empty()) throw ConfigError("grid: --values is empty");

  std::vector<RunConfig> runs;
  for (const auto& v : values) {
    RunConfig c = base;
    try {
      if (axis == "n") c.n = std::stoi(v);
      if (axis == "k") c.k = std::stoi(v);
      if (axis == "layers") c.layers = std::stoi(v);
      if (axis == "T") c.T = std::stod(v);
    } catch (const std::exception&) {
      throw ConfigError("grid: bad value '" + v + "' for axis " + axis);
    }
    c.validate();
    runs.push_back(c);
  }

  const auto dir = run_directory(base, "grid-" + axis + "-");
  std::filesystem::create_directories(dir);
  write_file(dir / "config.json", base.to_json());
  std::ostringstream grid, timing;
  grid << axis << ",params,test_error_pct\n";
  timing << axis << ",sec_per_iter\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    out << "grid " << axis << " = " << values[i] << '\n';
    const auto result = train_dispatch(runs[i], dir / (axis + "=" + values[i]), out);
    double sec = 0;
    for (const auto& r : result.report.epochs) sec += r.sec_per_iter;
    if (!result.report.epochs.empty()) sec /= static_cast<double>(result.report.epochs.size());
    grid << values[i] << ',' << result.params << ',' << fmt_double(result.final_test_error) << '\n';
    timing << values[i] << ',' << fmt_double(sec) << '\n';
  }
  write_file(dir / "grid.csv", grid.str());
  write_file(dir / "grid_timing.csv", timing.str());
  out << grid.str();
  out << "grid directory " << dir.string() << '\n';
  return kExitOk;
}

ModelSpec tiny_spec(Family family) {
  ModelSpec spec;
  spec.width = 4;
  spec.in_channels = 1;
  spec.num_classes = 10;
  spec.layers = 2;
  SolverConfig s;
  s.method = SolverMethod::euler;
  s.t1 = 1.0;
  s.step = 0.25;
  switch (family) {
    case Family::resnet:
      spec.core = ResNetCore{2, 0.25};
      break;
    case Family::node:
      spec.core = NodeCore{s, true};
      break;
    case Family::gode:
      spec.core = GodeCore{s, 1, 3, BiasMode::constant};
      break;
  }
  return spec;
}

int cmd_gradcheck(const Flags& f, const std::string& fault_op, double fault_factor, double eps, std::ostream& out,
                  std::ostream& err) {
  const RunConfig cfg = resolve(f);
  const ModelSpec spec = tiny_spec(cfg.family);
  Model<double> model = build<double>(spec, cfg.seed);
  std::mt19937_64 rng(cfg.seed + 1);
  std::uniform_real_distribution<double> pixel(0.0, 1.0);
  const std::size_t batch = 2;
  std::vector<double> xs(batch * 8 * 8);
  for (auto& v : xs) v = pixel(rng);
  const Tensor<double> x({batch, 1, 8, 8}, xs);
  const std::vector<int> labels{3, 7};

  testing::set_backward_fault(fault_op, fault_factor);
  GradCheckReport report;
  try {
    report = check_gradients(
        [&] { return cross_entropy(model.forward(x), std::span<const int>(labels)); }, model.parameters(), eps);
  } catch (...) {
    testing::set_backward_fault("", 1.0);
    throw;
  }
  testing::set_backward_fault("", 1.0);

  out << "family " << to_string(cfg.family) << "  params " << model.num_params() << '\n';
  for (const auto& t : report.tensors) {
    out << "  " << std::left << std::setw(32) << t.name << std::right << std::setw(6) << t.size
        << "  rel_error " << std::scientific << std::setprecision(3) << t.rel_error << std::defaultfloat;
    if (t.refined > 0) out << "  (" << t.refined << " coordinates refined)";
    out << '\n';
  }
  out << "max_rel_error " << std::scientific << std::setprecision(3) << report.max_rel_error
      << std::defaultfloat << " (" << report.worst << ")\n";
  if (!(report.max_rel_error <= 1e-4)) {
    err << "gradcheck FAILED: worst tensor " << report.worst << " has relative error "
        << report.max_rel_error << " > 1e-4\n";
    return kExitFailure;
  }
  out << "gradcheck passed\n";
  return kExitOk;
}

int cmd_params(const Flags& f, std::ostream& out) {
  const RunConfig cfg = resolve(f);
  const auto spec = cfg.model_spec();
  const auto p = count_params_by_stage(spec);
  out << "family " << to_string(spec.family()) << '\n';
  out << "downsampling " << p.downsampling << '\n';
  out << "core " << p.core << '\n';
  out << "head " << p.head << '\n';
  out << "total " << p.total() << '\n';
  return kExitOk;
}

template <typename T>
int trajectory_run(const std::filesystem::path& checkpoint, std::size_t layer, std::size_t t_count,
                   std::size_t max_entries, const std::string& csv, std::ostream& out) {
  const Model<T> model = load_model<T>(checkpoint);
  WeightTrajectory traj;
  if (model.spec.family() == Family::resnet) {
    throw ConfigError("trajectory: needs a node or gode checkpoint, got resnet");
  }
  const auto grid = uniform_grid(model.solver().t1, t_count);
  traj = export_weight_trajectory(model, layer, grid, max_entries);
  if (csv.empty() || csv == "-") {
    write_trajectory_csv(out, traj);
  } else {
    std::ofstream os(csv);
    write_trajectory_csv(os, traj);
    if (!os) throw FormatError("cannot write " + csv);
  }
  return kExitOk;
}

int cmd_trajectory(const std::filesystem::path& checkpoint, std::size_t layer, std::size_t t_count,
                   std::size_t max_entries, const std::string& csv, std::ostream& out) {
  const auto ck = read_checkpoint(checkpoint);
  return ck.scalar_bytes == 8 ? trajectory_run<double>(checkpoint, layer, t_count, max_entries, csv, out)
                              : trajectory_run<float>(checkpoint, layer, t_count, max_entries, csv, out);
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Time-varying-parameter neural ODE classifiers"};
  app.require_subcommand(1);

  Flags train_f, eval_f, grid_f, grad_f, params_f;
  auto* train_cmd = app.add_subcommand("train", "train a model and write report, timing and checkpoint");
  add_config_flags(*train_cmd, train_f);

  auto* eval_cmd = app.add_subcommand("eval", "test error of a checkpoint");
  add_config_flags(*eval_cmd, eval_f);
  std::string eval_ckpt;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();

  auto* grid_cmd = app.add_subcommand("grid", "one training run per value of a gode hyperparameter");
  add_config_flags(*grid_cmd, grid_f);
  std::string axis, values;
  grid_cmd->add_option("--axis", axis, "n, k, T or layers")->required();
  grid_cmd->add_option("--values", values, "comma-separated values")->required();

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of a tiny 64-bit model");
  add_config_flags(*grad_cmd, grad_f);
  std::string fault_op;
  double fault_factor = 1.5;
  grad_cmd->add_option("--inject-fault", fault_op, "scale the backward rule of this op (testing)");
  grad_cmd->add_option("--fault-factor", fault_factor, "scale used by --inject-fault");
  double eps = 1e-4;
  grad_cmd->add_option("--eps", eps, "central-difference step");

  auto* params_cmd = app.add_subcommand("params", "exact trainable parameter count per stage");
  add_config_flags(*params_cmd, params_f);

  auto* traj_cmd = app.add_subcommand("trajectory", "kernel entries of a dynamics layer over t as CSV");
  std::string traj_ckpt, traj_csv;
  std::size_t layer = 0, t_count = 101, max_entries = 9;
  traj_cmd->add_option("--checkpoint", traj_ckpt, "node or gode checkpoint")->required();
  traj_cmd->add_option("--layer", layer, "dynamics layer index");
  traj_cmd->add_option("--t-count", t_count, "grid points on [0, T]");
  traj_cmd->add_option("--max-entries", max_entries, "leading kernel entries to export (0 = all)");
  traj_cmd->add_option("--csv", traj_csv, "output file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*train_cmd) return cmd_train(train_f, out);
    if (*eval_cmd) return cmd_eval(eval_f, eval_ckpt, out);
    if (*grid_cmd) return cmd_grid(grid_f, axis, values, out);
    if (*grad_cmd) return cmd_gradcheck(grad_f, fault_op, fault_factor, eps, out, err);
    if (*params_cmd) return cmd_params(params_f, out);
    if (*traj_cmd) return cmd_trajectory(traj_ckpt, layer, t_count, max_entries, traj_csv, out);
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const FormatError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const DivergenceError& e) {
    err << "diverged: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const DomainError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitConfig;
}

}  // namespace gode::cli
