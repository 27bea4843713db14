// Acceptance suite: one PASS/FAIL line per criterion. The exit status is the
// number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "gode/bspline.hpp"
#include "gode/cli.hpp"
#include "gode/data.hpp"
#include "gode/model.hpp"
#include "gode/odeint.hpp"
#include "gode/ops.hpp"
#include "gode/trainer.hpp"

namespace fs = std::filesystem;
using namespace gode;
using TD = Tensor<double>;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

SolverConfig euler(double h = 0.05) {
  SolverConfig s;
  s.step = h;
  return s;
}

ModelSpec mnist_spec(int width, std::variant<ResNetCore, NodeCore, GodeCore> core) {
  ModelSpec s;
  s.width = width;
  s.in_channels = 1;
  s.layers = 2;
  s.core = std::move(core);
  return s;
}

TD random_images(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(n * 28 * 28);
  for (auto& x : v) x = u(rng);
  return TD({n, 1, 28, 28}, std::move(v));
}

void copy_into(const TD& from, TD& to) {
  if (from.shape() != to.shape()) throw ShapeError("acceptance: copy between " + to_string(from.shape()) +
                                                   " and " + to_string(to.shape()));
  std::copy(from.values().begin(), from.values().end(), to.mutable_values().begin());
}

template <typename T>
double relative_l2(const Tensor<T>& a, const Tensor<T>& ref) {
  double diff = 0, norm = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(ref[i]);
    diff += d * d;
    norm += static_cast<double>(ref[i]) * static_cast<double>(ref[i]);
  }
  return std::sqrt(diff / norm);
}

Outcome bspline_suite() {
  const auto start = Clock::now();
  double worst_sum = 0, most_negative = 0;
  for (int k = 0; k <= 5; ++k) {
    for (int n = k + 1; n <= 12; ++n) {
      const auto basis = BSplineBasis::clamped_uniform(k, n, 1.0);
      for (int s = 0; s < 1000; ++s) {
        const double t = s / 999.0;
        const auto b = basis.eval(t);
        double sum = 0;
        for (double v : b) {
          sum += v;
          most_negative = std::min(most_negative, v);
        }
        worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
      }
    }
  }
  const double secs = seconds_since(start);
  return {worst_sum < 1e-12 && most_negative >= 0.0 && secs < 5.0,
          fmt("max |sum-1| %.2e, min basis %.2e, %.2f s", worst_sum, most_negative, secs)};
}

Outcome reduction_equivalence() {
  const auto start = Clock::now();
  const auto gode_model = build<double>(mnist_spec(64, GodeCore{euler(), 0, 1, BiasMode::constant}), 7);
  const auto node_model = build<double>(mnist_spec(64, NodeCore{euler(), false}), 7);
  std::mt19937_64 rng(7);
  double worst = 0;
  for (int chunk = 0; chunk < 5; ++chunk) {
    const auto x = random_images(rng, 10);
    const auto a = gode_model.forward(x), b = node_model.forward(x);
    for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  }
  const double secs = seconds_since(start);
  return {worst < 1e-12 && secs < 30.0, fmt("50 inputs, max |logit diff| %.2e, %.2f s", worst, secs)};
}

Outcome resnet_euler_equivalence() {
  const auto start = Clock::now();
  double worst = 0;
  for (int seed = 0; seed < 20; ++seed) {
    auto g = build<double>(mnist_spec(64, GodeCore{euler(0.05), 0, 20, BiasMode::constant}), seed);
    auto r = build<double>(mnist_spec(64, ResNetCore{20, 0.05}), seed + 1000);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> jitter(0.0, 0.05);
    for (std::size_t i = 0; i < 3; ++i) {
      copy_into(g.downsampling[i].conv.kernel, r.downsampling[i].conv.kernel);
      copy_into(g.downsampling[i].conv.bias, r.downsampling[i].conv.bias);
      copy_into(g.downsampling[i].norm.scale, r.downsampling[i].norm.scale);
      copy_into(g.downsampling[i].norm.shift, r.downsampling[i].norm.shift);
    }
    for (std::size_t l = 0; l < 2; ++l) {
      auto& stage = g.gode_dynamics[l];
      for (std::size_t b = 0; b < 20; ++b) {
        // distinct weights per step so the alignment matters
        for (auto& v : stage.conv.control_kernels[b].mutable_values()) v += jitter(rng);
        copy_into(stage.conv.control_kernels[b], r.blocks[b][l].conv.kernel);
        copy_into(stage.conv.biases[0], r.blocks[b][l].conv.bias);
        copy_into(stage.norm.scale, r.blocks[b][l].norm.scale);
        copy_into(stage.norm.shift, r.blocks[b][l].norm.shift);
      }
    }
    copy_into(g.head_norm.scale, r.head_norm.scale);
    copy_into(g.head_norm.shift, r.head_norm.shift);
    copy_into(g.classifier.weight, r.classifier.weight);
    copy_into(g.classifier.bias, r.classifier.bias);
    const auto x = random_images(rng, 2);
    worst = std::max(worst, relative_l2(g.forward(x), r.forward(x)));
  }
  const double secs = seconds_since(start);
  return {worst < 1e-10 && secs < 60.0, fmt("20 seeds, max rel diff %.2e, %.2f s", worst, secs)};
}

Outcome gradient_exactness() {
  const auto start = Clock::now();
  bool ok = true;
  std::string detail;
  for (const std::string family : {"resnet", "node", "gode"}) {
    std::ostringstream out, err;
    const char* argv[] = {"gode", "gradcheck", "--family", family.c_str()};
    const int code = cli::run(4, argv, out, err);
    std::string params = "?", max_err = "?";
    std::istringstream lines(out.str());
    for (std::string line; std::getline(lines, line);) {
      if (line.rfind("family ", 0) == 0) params = line.substr(line.find("params ") + 7);
      if (line.rfind("max_rel_error ", 0) == 0) max_err = line.substr(14, line.find(' ', 14) - 14);
    }
    ok = ok && code == 0 && params != "?" && std::stoul(params) <= 5000;
    detail += family + " " + max_err + " (" + params + " params); ";
  }
  const double secs = seconds_since(start);
  return {ok && secs < 300.0, detail + fmt("%.2f s", secs)};
}

Outcome solver_correctness() {
  const auto start = Clock::now();
  const Dynamics<double> f = [](const TD& z, double) { return z; };
  const TD z0({1}, {1.0});
  const double euler_val = euler_solve(f, z0, euler(0.05)).item();
  const double e = std::exp(1.0);
  std::vector<double> errs;
  for (double h : {0.1, 0.05, 0.025, 0.0125, 0.00625}) errs.push_back(std::abs(euler_solve(f, z0, euler(h)).item() - e));
  double lo = 1, hi = 0;
  for (std::size_t i = 1; i < errs.size(); ++i) {
    lo = std::min(lo, errs[i] / errs[i - 1]);
    hi = std::max(hi, errs[i] / errs[i - 1]);
  }
  SolverConfig d;
  d.method = SolverMethod::dopri5;
  d.rtol = 1e-6;
  d.atol = 1e-9;
  const double dopri_rel = std::abs(dopri5_solve(f, z0, d).item() - e) / e;
  const double secs = seconds_since(start);
  const bool ok = std::abs(euler_val - 2.65329770514) < 1e-9 && lo >= 0.45 && hi <= 0.55 && dopri_rel < 1e-5 &&
                  secs < 10.0;
  return {ok, fmt("euler %.12f, order ratios [%.4f, %.4f], dopri5 rel err %.2e, %.3f s", euler_val, lo, hi,
                  dopri_rel, secs)};
}

ModelSpec cifar_gode(int n, int k) {
  ModelSpec s;
  s.width = 64;
  s.in_channels = 3;
  s.layers = 2;
  s.core = GodeCore{euler(), k, n, BiasMode::constant};
  return s;
}

Outcome parameter_marginals() {
  const auto start = Clock::now();
  bool ok = true;
  std::string detail;
  for (int n : {2, 4, 6}) {
    const long diff = static_cast<long>(count_params(cifar_gode(n + 2, 1))) - static_cast<long>(count_params(cifar_gode(n, 1)));
    ok = ok && diff == 147456;
    detail += fmt("n %d->%d: +%ld; ", n, n + 2, diff);
  }
  const auto base = count_params(cifar_gode(8, 1));
  for (int k = 2; k <= 5; ++k) ok = ok && count_params(cifar_gode(8, k)) == base;
  const double secs = seconds_since(start);
  return {ok && secs < 1.0, detail + fmt("k=1..5 at n=8: %zu, %.3f s", base, secs)};
}

Outcome parameter_totals() {
  ModelSpec node;
  node.width = 64;
  node.in_channels = 3;
  node.core = NodeCore{euler(), true};
  const double node_count = static_cast<double>(count_params(node));
  const double gode_count = static_cast<double>(count_params(cifar_gode(8, 1)));
  const double node_dev = std::abs(node_count - 210000.0) / 210000.0;
  const double gode_dev = std::abs(gode_count - 724106.0) / 724106.0;
  return {node_dev <= 0.02 && gode_dev <= 0.02,
          fmt("node %.0f (%.2f%% from 0.21M), gode n=8 %.0f (%.3f%% from 724106)", node_count, 100 * node_dev,
              gode_count, 100 * gode_dev)};
}

struct DeskRun {
  fs::path checkpoint;
  Dataset test;
};

Outcome desk_mnist(const fs::path& data_dir, const fs::path& work, DeskRun& run) {
  const auto start = Clock::now();
  Dataset full_train, full_test;
  try {
    full_train = load_mnist(data_dir, Split::train);
    full_test = load_mnist(data_dir, Split::test);
  } catch (const Error& e) {
    return {false, std::string("no data: ") + e.what()};
  }
  const std::uint64_t seed = 0;
  const auto train_ds = subset(full_train, 5000, seed);
  run.test = subset(full_test, 1000, seed);
  auto model = build<float>(mnist_spec(16, GodeCore{euler(0.05), 1, 4, BiasMode::constant}), seed);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 128;
  cfg.lr0 = 0.1;
  cfg.momentum = 0.9;
  cfg.lr_drop_epochs = {};
  cfg.crop_pad = 4;
  cfg.seed = seed;
  cfg.checkpoint = work / "desk_mnist.ckpt";
  run.checkpoint = cfg.checkpoint;
  const auto report = train(model, train_ds, run.test, cfg, [](const EpochRecord& r) {
    std::cout << fmt("    epoch %d  loss %.4f  train acc %.2f%%  test acc %.2f%%  %.3f s/iter\n", r.epoch,
                     r.train_loss, r.train_acc, 100.0 - r.test_error_pct, r.sec_per_iter)
              << std::flush;
  });
  const double final_acc = 100.0 - report.epochs.back().test_error_pct;
  const double best_acc = 100.0 - report.best_test_error_pct;
  const double secs = seconds_since(start);
  return {final_acc >= 95.0 && secs < 1200.0,
          fmt("final test accuracy %.2f%% (best %.2f%% at epoch %d), target >= 95%%, %.0f s", final_acc, best_acc,
              report.best_epoch, secs)};
}

Outcome solver_agreement(const DeskRun& run) {
  if (run.checkpoint.empty() || !fs::exists(run.checkpoint)) return {false, "no checkpoint from criterion 8"};
  auto euler_model = load_model<float>(run.checkpoint);
  auto dopri_model = load_model<float>(run.checkpoint);
  SolverConfig d = dopri_model.solver();
  d.method = SolverMethod::dopri5;
  d.rtol = 1e-3;
  d.atol = 1e-6;
  dopri_model.set_solver(d);

  const std::size_t batch = 100;
  double diff = 0, norm = 0, euler_time = 0, dopri_time = 0;
  std::size_t euler_wrong = 0, dopri_wrong = 0, batches = 0;
  for (std::size_t startIdx = 0; startIdx < run.test.size(); startIdx += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = startIdx; i < std::min(run.test.size(), startIdx + batch); ++i) idx.push_back(i);
    const auto x = run.test.images<float>(idx);
    const auto labels = run.test.labels_of(idx);
    auto t0 = Clock::now();
    const auto a = euler_model.forward(x);
    euler_time += seconds_since(t0);
    t0 = Clock::now();
    const auto b = dopri_model.forward(x);
    dopri_time += seconds_since(t0);
    for (std::size_t i = 0; i < a.numel(); ++i) {
      const double dd = static_cast<double>(a[i]) - static_cast<double>(b[i]);
      diff += dd * dd;
      norm += static_cast<double>(a[i]) * static_cast<double>(a[i]);
    }
    const auto pa = argmax_rows(a), pb = argmax_rows(b);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      euler_wrong += pa[i] != labels[i] ? 1 : 0;
      dopri_wrong += pb[i] != labels[i] ? 1 : 0;
    }
    ++batches;
  }
  const double rel = std::sqrt(diff / norm);
  const double n = static_cast<double>(run.test.size());
  const double gap = std::abs(100.0 * static_cast<double>(euler_wrong) / n - 100.0 * static_cast<double>(dopri_wrong) / n);
  const double euler_batch = euler_time / static_cast<double>(batches);
  const double dopri_batch = dopri_time / static_cast<double>(batches);
  return {rel < 1e-2 && gap < 0.5 && dopri_batch > euler_batch,
          fmt("logit rel diff %.2e, test error gap %.2f pp, s/batch euler %.4f dopri5 %.4f", rel, gap, euler_batch,
              dopri_batch)};
}

// Second differences over grid triples that lie inside one knot span.
double max_interior_second_difference(const WeightTrajectory& traj, std::span<const double> knots) {
  double worst = 0;
  for (std::size_t i = 1; i + 1 < traj.t.size(); ++i) {
    const bool straddles = std::any_of(knots.begin(), knots.end(), [&](double kn) {
      return traj.t[i - 1] < kn && kn < traj.t[i + 1];
    });
    if (straddles) continue;
    for (std::size_t e = 0; e < traj.entries; ++e) {
      worst = std::max(worst, std::abs(traj.at(i - 1, e) - 2 * traj.at(i, e) + traj.at(i + 1, e)));
    }
  }
  return worst;
}

bool csv_round_trip(const WeightTrajectory& traj) {
  std::stringstream ss;
  write_trajectory_csv(ss, traj);
  const auto back = read_trajectory_csv(ss);
  return back.t == traj.t && back.entries == traj.entries && back.values == traj.values;
}

Outcome trajectory_export(const DeskRun& run) {
  const auto grid = uniform_grid(1.0, 101);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> jitter(0.0, 0.1);

  auto node = build<double>(mnist_spec(16, NodeCore{euler(), true}), 3);
  for (auto& v : node.node_dynamics[0].conv.kernel.mutable_values()) v += jitter(rng);
  const auto node_traj = export_weight_trajectory(node, 0, grid);
  double node_dev = 0;
  for (std::size_t r = 0; r < node_traj.t.size(); ++r) {
    for (std::size_t e = 0; e < node_traj.entries; ++e) {
      node_dev = std::max(node_dev, std::abs(node_traj.at(r, e) - node_traj.at(0, e)));
    }
  }

  std::vector<Model<double>> gode_models;
  gode_models.push_back(build<double>(mnist_spec(16, GodeCore{euler(), 1, 4, BiasMode::constant}), 3));
  for (auto& kernel : gode_models[0].gode_dynamics[0].conv.control_kernels) {
    for (auto& v : kernel.mutable_values()) v += jitter(rng);
  }
  if (!run.checkpoint.empty() && fs::exists(run.checkpoint)) gode_models.push_back(load_model<double>(run.checkpoint));

  double second_diff = 0, variation = 0;
  bool round_trip = csv_round_trip(node_traj);
  for (const auto& m : gode_models) {
    const auto& basis = m.gode_dynamics[0].conv.basis;
    const auto traj = export_weight_trajectory(m, 0, grid);
    second_diff = std::max(second_diff, max_interior_second_difference(traj, basis.knots()));
    for (std::size_t e = 0; e < traj.entries; ++e) {
      variation = std::max(variation, std::abs(traj.at(traj.t.size() - 1, e) - traj.at(0, e)));
    }
    round_trip = round_trip && csv_round_trip(traj);
  }
  return {node_dev == 0.0 && second_diff < 1e-10 && variation > 0 && round_trip,
          fmt("node max deviation %.1e, gode interior 2nd diff %.2e over %zu models (variation %.2e), CSV round trip %s",
              node_dev, second_diff, gode_models.size(), variation, round_trip ? "ok" : "broken")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria 1-10"};
  const char* src = std::getenv("GODE_SOURCE_DIR");
  fs::path data_dir = (src ? fs::path(src) : fs::current_path()) / "data" / "mnist-desk";
  fs::path work = fs::temp_directory_path() / "gode-acceptance";
  app.add_option("--data-dir", data_dir, "MNIST IDX directory for criteria 8 and 9");
  app.add_option("--work-dir", work, "where the criterion-8 checkpoint is written");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  DeskRun desk;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"B-spline partition of unity and nonnegativity", bspline_suite},
      {"gode(k=0, n=1) reduces to node", reduction_equivalence},
      {"ResNet-Euler equivalence", resnet_euler_equivalence},
      {"gradient exactness", gradient_exactness},
      {"solver correctness", solver_correctness},
      {"parameter marginals", parameter_marginals},
      {"absolute parameter totals", parameter_totals},
      {"desk-scale MNIST accuracy", [&] { return desk_mnist(data_dir, work, desk); }},
      {"Euler vs dopri5 agreement", [&] { return solver_agreement(desk); }},
      {"trajectory export", [&] { return trajectory_export(desk); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << (i + 1) << ". " << criteria[i].first << ": " << o.detail
              << '\n'
              << std::flush;
  }
  std::cout << "acceptance: " << criteria.size() << " criteria evaluated, " << (criteria.size() - failed)
            << " passed, " << failed << " failed\n";
  return failed;
}
