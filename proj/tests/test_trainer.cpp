#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "gode/error.hpp"
#include "gode/ops.hpp"
#include "gode/trainer.hpp"
#include "test_util.hpp"

using namespace gode;
using TD = Tensor<double>;
using gode::test::TempDir;

namespace {

ModelSpec small_gode(int width, double step = 0.25) {
  ModelSpec spec;
  spec.width = width;
  spec.in_channels = 1;
  spec.layers = 2;
  GodeCore core;
  core.degree = 1;
  core.n_control = 4;
  core.solver.step = step;
  spec.core = core;
  return spec;
}

TrainConfig quick_config(int epochs, std::size_t batch) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = batch;
  cfg.lr_drop_epochs = {};
  cfg.crop_pad = 0;
  cfg.eval_batch_size = 50;
  return cfg;
}

std::vector<double> values_of(const ParamList<float>& params) {
  std::vector<double> out;
  for (const auto& [name, p] : params) out.insert(out.end(), p.values().begin(), p.values().end());
  return out;
}

template <typename T>
double batch_loss(const Model<T>& model, const Tensor<T>& x, const std::vector<int>& labels) {
  return static_cast<double>(cross_entropy(model.forward(x), std::span<const int>(labels)).item());
}

}  // namespace

TEST_CASE("learning rate schedule") {
  TrainConfig cfg;
  CHECK(lr_at(0, cfg) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(lr_at(59, cfg) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(lr_at(60, cfg) == doctest::Approx(0.01).epsilon(1e-15));
  CHECK(lr_at(100, cfg) == doctest::Approx(0.001).epsilon(1e-15));
  CHECK(lr_at(159, cfg) == doctest::Approx(0.0001).epsilon(1e-15));
  for (int e = 1; e < cfg.epochs; ++e) CHECK(lr_at(e, cfg) <= lr_at(e - 1, cfg));
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.epochs = 100;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);  // drop at 140 >= epochs
  cfg = {};
  cfg.lr_drop_epochs = {60, 60};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.weight_decay = -1e-4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.momentum = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("sgd momentum examples") {
  std::vector<double> w{1.0, -2.0}, v{0.0, 0.0};
  const std::vector<double> g{0.5, 0.25};
  sgd_momentum_step<double>(w, g, v, 0.1, 0.0, 0.0);
  CHECK(w[0] == 1.0 - 0.1 * 0.5);
  CHECK(w[1] == -2.0 - 0.1 * 0.25);

  std::vector<double> still{3.0}, zero_v{0.0};
  const std::vector<double> zero_g{0.0};
  sgd_momentum_step<double>(still, zero_g, zero_v, 0.1, 0.9, 0.0);
  CHECK(still[0] == 3.0);

  std::vector<double> u{0.0}, vel{0.0};
  const std::vector<double> c{2.0};
  sgd_momentum_step<double>(u, c, vel, 0.1, 0.9, 0.0);
  sgd_momentum_step<double>(u, c, vel, 0.1, 0.9, 0.0);
  CHECK(std::abs(u[0] - (-0.1 * 2.0 * (1.0 + 1.9))) < 1e-15);

  std::vector<double> decay{2.0}, dv{0.0};
  sgd_momentum_step<double>(decay, zero_g, dv, 0.1, 0.0, 0.5);
  CHECK(std::abs(decay[0] - (2.0 - 0.1 * 0.5 * 2.0)) < 1e-15);

  std::vector<double> short_v{0.0};
  CHECK_THROWS_AS(sgd_momentum_step<double>(w, g, short_v, 0.1, 0.9, 0.0), ShapeError);
}

TEST_CASE("optimizer skips parameters without gradients") {
  auto a = TD::parameter({2}, {1.0, 2.0});
  auto b = TD::parameter({1}, {5.0});
  ParamList<double> params{{"a", a}, {"b", b}};
  Tape<double> tape;
  TD loss;
  {
    auto active = tape.activate();
    loss = reduce_sum(a);
  }
  tape.backward(loss);
  SgdMomentum<double> opt(0.9, 0.0);
  opt.step(params, 0.5);
  CHECK(a[0] == 0.5);
  CHECK(a[1] == 1.5);
  CHECK(b[0] == 5.0);
  CHECK(!a.has_grad());
  CHECK(opt.velocity().size() == 2);
}

TEST_CASE("cross entropy examples") {
  const std::vector<int> labels{3, 7};
  CHECK(std::abs(cross_entropy(TD::zeros({2, 10}), std::span<const int>(labels)).item() - std::log(10.0)) <
        1e-15);
  CHECK(std::abs(std::log(10.0) - 2.302585093) < 1e-9);

  double previous = 1e9;
  for (double margin : {1.0, 5.0, 20.0, 50.0}) {
    auto logits = TD::zeros({1, 10});
    logits.mutable_values()[4] = margin;
    const std::vector<int> four{4};
    const double loss = cross_entropy(logits, std::span<const int>(four)).item();
    CHECK(loss < previous);
    CHECK(loss >= 0.0);
    previous = loss;
  }
  CHECK(previous < 1e-20);

  const TD fixed({4, 5}, {0.0012301533574825742, 0.2987455375084699, -0.2741378553622176, -0.8905918387572742,
                          -0.45467078517172255, -0.9916465549964624, 0.060143602597438485, 1.3402152455545335,
                          -0.49220651855132963, -0.6204748998199404, 0.4898420501851982, 0.35688700816006075,
                          0.10541424899789856, -0.9304680447082047, -0.02925182246327349, 0.6953031944582878,
                          -1.344214547285082, -0.45761576104021817, -1.901222739800844, -1.289537739784976});
  const std::vector<int> fixed_labels{1, 0, 4, 2};
  CHECK(std::abs(cross_entropy(fixed, std::span<const int>(fixed_labels)).item() - 1.8432279797105564) < 1e-12);

  std::mt19937_64 rng(9);
  const auto big = gode::test::random_tensor(rng, {6, 10}, -30.0, 30.0);
  std::vector<int> big_labels{0, 1, 2, 7, 8, 9};
  double direct = 0;
  for (std::size_t n = 0; n < 6; ++n) {
    double sum = 0;
    for (std::size_t k = 0; k < 10; ++k) sum += std::exp(big[n * 10 + k]);
    direct += std::log(sum) - big[n * 10 + static_cast<std::size_t>(big_labels[n])];
  }
  CHECK(std::abs(cross_entropy(big, std::span<const int>(big_labels)).item() - direct / 6) < 1e-12);

  const std::vector<int> bad{3, 10};
  CHECK_THROWS_AS(cross_entropy(TD::zeros({2, 10}), std::span<const int>(bad)), DomainError);
  const std::vector<int> negative{-1, 0};
  CHECK_THROWS_AS(cross_entropy(TD::zeros({2, 10}), std::span<const int>(negative)), DomainError);
}

TEST_CASE("argmax breaks ties toward the lowest index") {
  const TD logits({2, 3}, {1.0, 1.0, 0.0, -1.0, 2.0, 2.0});
  CHECK(argmax_rows(logits) == std::vector<int>{0, 1});
}

TEST_CASE("evaluate examples") {
  const auto ds = make_synthetic(60, 4);
  auto model = build<double>(small_gode(4), 1);
  // A constant classifier: zero weights, bias favouring class 3.
  for (auto& w : model.classifier.weight.mutable_values()) w = 0.0;
  for (auto& b : model.classifier.bias.mutable_values()) b = 0.0;
  model.classifier.bias.mutable_values()[3] = 1.0;
  CHECK(std::abs(evaluate(model, ds, 16) - 90.0) < 1e-12);
  for (int p : predict(model, ds, 7)) CHECK(p == 3);

  const auto random_model = build<double>(small_gode(4), 2);
  const auto e1 = evaluate(random_model, ds, 1);
  CHECK(e1 == evaluate(random_model, ds, 1000));
  CHECK(e1 == evaluate(random_model, ds, 13));
  CHECK(e1 >= 0.0);
  CHECK(e1 <= 100.0);
  CHECK_THROWS_AS(evaluate(random_model, ds, 0), ConfigError);
}

TEST_CASE("zero-epoch run keeps the initialisation") {
  TempDir dir("zero_epoch");
  const auto ds = make_synthetic(20, 1);
  auto model = build<float>(small_gode(4), 3);
  const auto initial = values_of(model.parameters());
  auto cfg = quick_config(0, 10);
  cfg.checkpoint = dir.path / "model.ckpt";
  const auto report = train(model, ds, ds, cfg);
  CHECK(report.epochs.empty());
  CHECK(report.best_epoch == -1);
  const auto loaded = load_model<float>(cfg.checkpoint);
  CHECK(values_of(loaded.parameters()) == initial);
}

TEST_CASE("training is deterministic and checkpoints round-trip") {
  TempDir dir("determinism");
  const auto train_ds = make_synthetic(40, 1);
  const auto test_ds = make_synthetic(20, 2, Split::test);
  auto cfg = quick_config(2, 16);
  cfg.crop_pad = 2;
  std::vector<TrainReport> reports;
  std::vector<std::vector<double>> finals;
  for (int run = 0; run < 2; ++run) {
    auto model = build<float>(small_gode(4), 5);
    cfg.checkpoint = dir.path / ("run" + std::to_string(run) + ".ckpt");
    std::vector<int> seen_epochs;
    reports.push_back(train(model, train_ds, test_ds, cfg, [&](const EpochRecord& r) { seen_epochs.push_back(r.epoch); }));
    CHECK(seen_epochs == std::vector<int>{0, 1});
    finals.push_back(values_of(model.parameters()));
  }
  REQUIRE(reports[0].epochs.size() == 2);
  for (std::size_t e = 0; e < 2; ++e) {
    CHECK(reports[0].epochs[e].train_loss == reports[1].epochs[e].train_loss);
    CHECK(reports[0].epochs[e].train_acc == reports[1].epochs[e].train_acc);
    CHECK(reports[0].epochs[e].test_error_pct == reports[1].epochs[e].test_error_pct);
    CHECK(std::isfinite(reports[0].epochs[e].train_loss));
  }
  CHECK(finals[0] == finals[1]);
  std::ostringstream a, b;
  write_report_csv(a, reports[0]);
  write_report_csv(b, reports[1]);
  CHECK(a.str() == b.str());

  const auto best = load_model<float>(dir.path / "run0.ckpt");
  CHECK(std::abs(evaluate(best, test_ds, 7) - reports[0].best_test_error_pct) < 1e-12);
}

TEST_CASE("checkpoint round trip preserves test error") {
  TempDir dir("ckpt_eval");
  const auto ds = make_synthetic(30, 8, Split::test);
  const auto model = build<double>(small_gode(4), 11);
  save_checkpoint(model, dir.path / "m.ckpt");
  const auto back = load_model<double>(dir.path / "m.ckpt");
  CHECK(std::abs(evaluate(back, ds, 10) - evaluate(model, ds, 10)) < 1e-12);
  CHECK(predict(back, ds, 30) == predict(model, ds, 30));
}

TEST_CASE("a small plain gradient step decreases the batch loss") {
  const auto ds = make_synthetic(20, 3);
  std::vector<std::size_t> idx(20);
  for (std::size_t i = 0; i < 20; ++i) idx[i] = i;
  const auto x = ds.images<double>(idx);
  const auto labels = ds.labels_of(idx);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto model = build<double>(small_gode(4), seed);
    auto params = model.parameters();
    const double before = batch_loss(model, x, labels);
    Tape<double> tape;
    TD loss;
    {
      auto active = tape.activate();
      loss = cross_entropy(model.forward(x), std::span<const int>(labels));
    }
    tape.backward(loss);
    SgdMomentum<double> opt(0.0, 0.0);
    opt.step(params, 1e-4);
    const double after = batch_loss(model, x, labels);
    INFO("seed " << seed << " before " << before << " after " << after);
    CHECK(after < before);
  }
}

TEST_CASE("synthetic fixture is fitted within 30 epochs") {
  const auto ds = make_synthetic(100, 0);
  auto model = build<float>(small_gode(16, 0.05), 0);
  auto cfg = quick_config(30, 10);
  double best_train_error = 100.0;
  const auto report = train(model, ds, ds, cfg, [&](const EpochRecord&) {
    best_train_error = std::min(best_train_error, evaluate(model, ds, 100));
  });
  CHECK(report.epochs.size() == 30);
  CHECK(best_train_error == 0.0);

  // The trained block gives the same predictions under dopri5.
  TempDir tmp("fixture");
  save_checkpoint(model, tmp.path / "m.ckpt");
  const auto euler_model = load_model<double>(tmp.path / "m.ckpt");
  auto dopri_model = load_model<double>(tmp.path / "m.ckpt");
  auto solver = dopri_model.solver();
  solver.method = SolverMethod::dopri5;
  solver.rtol = 1e-3;
  solver.atol = 1e-6;
  dopri_model.set_solver(solver);
  const auto x = ds.images<double>();
  const auto a = euler_model.forward(x), b = dopri_model.forward(x);
  double diff = 0, norm = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    norm += a[i] * a[i];
  }
  INFO("relative difference " << std::sqrt(diff / norm));
  CHECK(std::sqrt(diff / norm) < 5e-2);
  CHECK(argmax_rows(a) == argmax_rows(b));
}

TEST_CASE("divergence is reported with epoch and iteration") {
  const auto ds = make_synthetic(20, 1);
  auto model = build<float>(small_gode(4), 0);
  auto cfg = quick_config(3, 10);
  cfg.lr0 = 1e30;
  cfg.momentum = 0.0;
  try {
    (void)train(model, ds, ds, cfg);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    const std::string msg = e.what();
    INFO(msg);
    CHECK(msg.find("epoch") != std::string::npos);
    CHECK(msg.find("iteration") != std::string::npos);
  }
}

TEST_CASE("channel mismatch is a configuration error") {
  const auto ds = make_synthetic(20, 1);
  auto spec = small_gode(4);
  spec.in_channels = 3;
  auto model = build<float>(spec, 0);
  CHECK_THROWS_AS(train(model, ds, ds, quick_config(1, 10)), ConfigError);
}

TEST_CASE("report CSV layout") {
  TrainReport report;
  report.epochs.push_back({0, 0.1, 2.5, 12.5, 80.0, 0.25});
  report.epochs.push_back({1, 0.01, 1.25, 50.0, 40.5, 0.5});
  std::ostringstream csv, timing;
  write_report_csv(csv, report);
  write_timing_csv(timing, report);
  CHECK(csv.str() ==
        "epoch,lr,train_loss,train_acc,test_error_pct\n"
        "0,0.10000000000000001,2.5,12.5,80\n"
        "1,0.01,1.25,50,40.5\n");
  CHECK(timing.str() == "epoch,sec_per_iter\n0,0.25\n1,0.5\n");
}
