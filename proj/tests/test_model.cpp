#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"
#include "gode/error.hpp"
#include "gode/gradcheck.hpp"
#include "gode/model.hpp"
#include "test_util.hpp"

using namespace gode;
using gode::test::max_abs_diff;
using gode::test::random_tensor;
using TD = Tensor<double>;

namespace {

std::vector<double> vals(const TD& t) { return {t.values().begin(), t.values().end()}; }

SolverConfig euler_cfg(double h = 0.05, double t1 = 1.0) {
  SolverConfig s;
  s.t1 = t1;
  s.step = h;
  return s;
}

ModelSpec gode_spec(int width, int in_channels, int n, int k, int layers = 2, SolverConfig solver = euler_cfg()) {
  ModelSpec s;
  s.width = width;
  s.in_channels = in_channels;
  s.layers = layers;
  s.core = GodeCore{solver, k, n, BiasMode::constant};
  return s;
}

ModelSpec node_spec(int width, int in_channels, bool time_channel, SolverConfig solver = euler_cfg()) {
  ModelSpec s;
  s.width = width;
  s.in_channels = in_channels;
  s.core = NodeCore{solver, time_channel};
  return s;
}

ModelSpec resnet_spec(int width, int in_channels, int blocks, double h = 1.0) {
  ModelSpec s;
  s.width = width;
  s.in_channels = in_channels;
  s.core = ResNetCore{blocks, h};
  return s;
}

ModelSpec cifar_gode(int n, int k = 1, int layers = 2) {
  auto s = gode_spec(64, 3, n, k, layers);
  return s;
}

void copy_values(const TD& from, TD& to) {
  REQUIRE(from.shape() == to.shape());
  std::copy(from.values().begin(), from.values().end(), to.mutable_values().begin());
}

}  // namespace

TEST_CASE("family and bias mode names") {
  CHECK(parse_family("gode") == Family::gode);
  CHECK(parse_family("node") == Family::node);
  CHECK(parse_family("resnet") == Family::resnet);
  CHECK_THROWS_AS(parse_family("vgg"), ConfigError);
  CHECK(parse_bias_mode("spline") == BiasMode::spline);
  CHECK(to_string(BiasMode::constant) == "constant");
  CHECK_THROWS_AS(parse_bias_mode("linear"), ConfigError);
}

TEST_CASE("spec validation") {
  CHECK_NOTHROW(default_spec(Family::gode, 1).validate());
  CHECK_NOTHROW(default_spec(Family::resnet, 3).validate());
  CHECK(std::get<ResNetCore>(default_spec(Family::resnet, 3).core).num_blocks == 20);
  CHECK(std::get<ResNetCore>(default_spec(Family::resnet, 1).core).num_blocks == 6);
  CHECK(std::get<GodeCore>(default_spec(Family::gode, 3).core).n_control == 8);
  CHECK_THROWS_AS(gode_spec(16, 1, 1, 1).validate(), InvalidBasisError);
  CHECK_THROWS_AS(gode_spec(48, 1, 4, 1).validate(), ConfigError);
  auto shifted = euler_cfg();
  shifted.t0 = 0.5;
  CHECK_THROWS_AS(gode_spec(16, 1, 4, 1, 2, shifted).validate(), ConfigError);
  CHECK_THROWS_AS(resnet_spec(16, 1, 0).validate(), ConfigError);
  CHECK_THROWS_AS(node_spec(16, 1, true, euler_cfg(0.3)).validate(), ConfigError);
  auto bad = gode_spec(16, 1, 4, 1);
  bad.layers = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("spec JSON round trip and strictness") {
  for (const auto& spec : {gode_spec(16, 1, 5, 2), node_spec(32, 3, false), resnet_spec(8, 1, 3, 0.25)}) {
    CHECK(ModelSpec::from_json(spec.to_json()).to_json() == spec.to_json());
  }
  CHECK_THROWS_AS(ModelSpec::from_json(R"({"family":"gode","colour":1})"), ConfigError);
  CHECK_THROWS_AS(ModelSpec::from_json(R"({"family":"gode","resnet":{}})"), ConfigError);
  CHECK_THROWS_AS(ModelSpec::from_json(R"({"family":"gode","gode":{"knots":3}})"), ConfigError);
  CHECK_THROWS_AS(ModelSpec::from_json("{not json"), ConfigError);
  CHECK_THROWS_AS(ModelSpec::from_json(R"({"family":"gode","width":"wide"})"), ConfigError);
}

TEST_CASE("build structure and determinism") {
  const auto r = build<double>(resnet_spec(8, 1, 6), 1);
  CHECK(r.blocks.size() == 6);
  for (const auto& b : r.blocks) CHECK(b.size() == 2);
  CHECK(r.downsampling.size() == 3);

  for (const auto& spec : {gode_spec(8, 1, 3, 1), node_spec(8, 1, true), resnet_spec(8, 3, 2)}) {
    const auto a = build<double>(spec, 5), b = build<double>(spec, 5), c = build<double>(spec, 6);
    const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
    REQUIRE(pa.size() == pb.size());
    bool any_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i].first == pb[i].first);
      CHECK(vals(pa[i].second) == vals(pb[i].second));
      any_diff = any_diff || vals(pa[i].second) != vals(pc[i].second);
    }
    CHECK(any_diff);
    CHECK(a.num_params() == count_params(spec));
  }
}

TEST_CASE("parameter names") {
  const auto m = build<double>(gode_spec(4, 1, 2, 1, 1), 0);
  std::vector<std::string> names;
  for (const auto& [n, p] : m.parameters()) names.push_back(n);
  CHECK(names == std::vector<std::string>{
                     "down.0.conv.weight", "down.0.conv.bias", "down.0.norm.scale", "down.0.norm.shift",
                     "down.1.conv.weight", "down.1.conv.bias", "down.1.norm.scale", "down.1.norm.shift",
                     "down.2.conv.weight", "down.2.conv.bias", "down.2.norm.scale", "down.2.norm.shift",
                     "core.layer0.convt.control0", "core.layer0.convt.control1", "core.layer0.convt.bias",
                     "core.layer0.norm.scale", "core.layer0.norm.shift", "head.norm.scale", "head.norm.shift",
                     "head.linear.weight", "head.linear.bias"});
}

TEST_CASE("forward shapes and probabilities") {
  std::mt19937_64 rng(0);
  const auto x = random_tensor(rng, {3, 1, 28, 28}, 0, 1);
  for (const auto& spec : {gode_spec(8, 1, 3, 1), node_spec(8, 1, true), resnet_spec(8, 1, 2)}) {
    const auto m = build<double>(spec, 2);
    const auto logits = m.forward(x);
    CHECK(logits.shape() == Shape{3, 10});
    const auto p = softmax(logits);
    for (std::size_t n = 0; n < 3; ++n) {
      double s = 0;
      for (std::size_t k = 0; k < 10; ++k) s += p[n * 10 + k];
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
  const auto m = build<double>(gode_spec(8, 1, 3, 1), 2);
  CHECK_THROWS_AS(m.forward(random_tensor(rng, {1, 3, 28, 28})), ShapeError);
}

TEST_CASE("logits are permutation equivariant over the batch") {
  std::mt19937_64 rng(1);
  const auto m = build<double>(gode_spec(8, 1, 3, 2), 4);
  const auto x = random_tensor(rng, {4, 1, 16, 16}, 0, 1);
  const std::size_t img = 256;
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  std::vector<double> px(x.numel());
  for (std::size_t i = 0; i < 4; ++i)
    std::copy_n(x.values().begin() + perm[i] * img, img, px.begin() + i * img);
  const auto a = m.forward(x), b = m.forward(TD(x.shape(), px));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 0; k < 10; ++k) CHECK(b[i * 10 + k] == a[perm[i] * 10 + k]);
}

TEST_CASE("zero dynamics make the ODE block the identity") {
  std::mt19937_64 rng(2);
  auto m = build<double>(gode_spec(8, 1, 4, 1), 3);
  for (auto& stage : m.gode_dynamics) {
    for (auto& k : stage.conv.control_kernels) std::fill(k.mutable_values().begin(), k.mutable_values().end(), 0.0);
    for (auto& b : stage.conv.biases) std::fill(b.mutable_values().begin(), b.mutable_values().end(), 0.0);
    // with zero input the norm output equals its shift; zero it so relu(0) = 0
    std::fill(stage.norm.shift.mutable_values().begin(), stage.norm.shift.mutable_values().end(), 0.0);
  }
  const auto x = random_tensor(rng, {2, 1, 28, 28}, 0, 1);
  CHECK(vals(m.forward(x)) == vals(m.head(m.downsample(x))));
}

TEST_CASE("gode with a constant basis reduces to node without a time channel") {
  for (int seed = 0; seed < 3; ++seed) {
    const auto g = build<double>(gode_spec(8, 1, 1, 0), seed);
    const auto n = build<double>(node_spec(8, 1, false), seed);
    const auto pg = g.parameters(), pn = n.parameters();
    REQUIRE(pg.size() == pn.size());
    for (std::size_t i = 0; i < pg.size(); ++i) CHECK(vals(pg[i].second) == vals(pn[i].second));
    std::mt19937_64 rng(seed);
    for (int i = 0; i < 5; ++i) {
      const auto x = random_tensor(rng, {2, 1, 28, 28}, 0, 1);
      CHECK(max_abs_diff(g.forward(x).values(), n.forward(x).values()) < 1e-12);
    }
  }
}

TEST_CASE("degree-0 gode with Euler-aligned knots equals a scaled residual network") {
  for (int seed = 0; seed < 3; ++seed) {
    const auto g = build<double>(gode_spec(8, 1, 20, 0), seed);
    auto r = build<double>(resnet_spec(8, 1, 20, 0.05), seed + 100);
    for (std::size_t i = 0; i < 3; ++i) {
      copy_values(g.downsampling[i].conv.kernel, r.downsampling[i].conv.kernel);
      copy_values(g.downsampling[i].conv.bias, r.downsampling[i].conv.bias);
      copy_values(g.downsampling[i].norm.scale, r.downsampling[i].norm.scale);
      copy_values(g.downsampling[i].norm.shift, r.downsampling[i].norm.shift);
    }
    for (std::size_t b = 0; b < 20; ++b) {
      for (std::size_t l = 0; l < 2; ++l) {
        copy_values(g.gode_dynamics[l].conv.control_kernels[b], r.blocks[b][l].conv.kernel);
        copy_values(g.gode_dynamics[l].conv.biases[0], r.blocks[b][l].conv.bias);
        copy_values(g.gode_dynamics[l].norm.scale, r.blocks[b][l].norm.scale);
        copy_values(g.gode_dynamics[l].norm.shift, r.blocks[b][l].norm.shift);
      }
    }
    copy_values(g.head_norm.scale, r.head_norm.scale);
    copy_values(g.head_norm.shift, r.head_norm.shift);
    copy_values(g.classifier.weight, r.classifier.weight);
    copy_values(g.classifier.bias, r.classifier.bias);
    // control kernels start identical; make each step distinct
    std::mt19937_64 rng(seed);
    auto gm = g;
    for (std::size_t l = 0; l < 2; ++l) {
      for (std::size_t b = 0; b < 20; ++b) {
        auto& k = gm.gode_dynamics[l].conv.control_kernels[b];
        for (auto& v : k.mutable_values()) v += std::normal_distribution<double>(0, 0.1)(rng);
        copy_values(k, r.blocks[b][l].conv.kernel);
      }
    }
    const auto x = random_tensor(rng, {2, 1, 28, 28}, 0, 1);
    const auto a = gm.forward(x), b = r.forward(x);
    double scale = 0;
    for (double v : b.values()) scale = std::max(scale, std::abs(v));
    CHECK(max_abs_diff(a.values(), b.values()) / scale < 1e-10);
  }
}

TEST_CASE("parameter counts") {
  CHECK(count_params(cifar_gode(4)) - count_params(cifar_gode(2)) == 147456);
  CHECK(count_params(cifar_gode(6)) - count_params(cifar_gode(4)) == 147456);
  CHECK(count_params(cifar_gode(8)) - count_params(cifar_gode(6)) == 147456);
  for (int k = 2; k <= 5; ++k) CHECK(count_params(cifar_gode(8, k)) == count_params(cifar_gode(8, 1)));
  // per control point per convt layer
  CHECK(count_params(gode_spec(64, 3, 5, 1, 1)) - count_params(gode_spec(64, 3, 4, 1, 1)) == 36864);

  const auto g8 = count_params_by_stage(cifar_gode(8));
  CHECK(g8.downsampling == 133376);
  CHECK(g8.core == 590208);
  CHECK(g8.head == 778);
  CHECK(g8.total() == 724362);
  CHECK(std::abs(static_cast<double>(g8.total()) - 724106) / 724106 < 0.02);

  const auto node = count_params(node_spec(64, 3, true));
  CHECK(node == 209418);
  CHECK(std::abs(static_cast<double>(node) - 210000) / 210000 < 0.02);

  const auto l1 = count_params(cifar_gode(8, 1, 1)), l2 = count_params(cifar_gode(8, 1, 2));
  CHECK(l2 - l1 == 8 * 36864 + 64 + 128);  // control kernels, bias and norm of the extra layer

  for (const auto& spec : {gode_spec(16, 1, 4, 1), gode_spec(8, 3, 3, 2, 3), node_spec(16, 1, true),
                           node_spec(8, 3, false), resnet_spec(8, 1, 6), resnet_spec(16, 3, 2)}) {
    CHECK(build<float>(spec, 0).num_params() == count_params(spec));
  }
  auto spline_bias = gode_spec(8, 1, 4, 1);
  std::get<GodeCore>(spline_bias.core).bias_mode = BiasMode::spline;
  CHECK(count_params(spline_bias) - count_params(gode_spec(8, 1, 4, 1)) == 2 * 3 * 8);
  CHECK(build<float>(spline_bias, 0).num_params() == count_params(spline_bias));
}

TEST_CASE("solver swap") {
  auto m = build<double>(gode_spec(8, 1, 4, 1), 0);
  SolverConfig d;
  d.method = SolverMethod::dopri5;
  d.rtol = 1e-3;
  m.set_solver(d);
  CHECK(m.solver().method == SolverMethod::dopri5);
  SolverConfig longer = d;
  longer.t1 = 2.0;
  CHECK_THROWS_AS(m.set_solver(longer), ConfigError);
  auto r = build<double>(resnet_spec(8, 1, 2), 0);
  CHECK_THROWS_AS(r.set_solver(d), ConfigError);
}

TEST_CASE("euler converges to the dopri5 solution of a gode block") {
  std::mt19937_64 rng(3);
  auto m = build<double>(gode_spec(8, 1, 4, 1), 7);
  const auto z0 = m.downsample(random_tensor(rng, {2, 1, 28, 28}, 0, 1));
  SolverConfig d;
  d.method = SolverMethod::dopri5;
  d.rtol = 1e-8;
  d.atol = 1e-10;
  m.set_solver(d);
  SolveStats stats;
  const auto ref = m.core(z0, &stats);
  CHECK(stats.accepted > 0);
  auto rel = [&](const TD& z) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < z.numel(); ++i) {
      num += (z[i] - ref[i]) * (z[i] - ref[i]);
      den += ref[i] * ref[i];
    }
    return std::sqrt(num / den);
  };
  std::vector<double> errs;
  for (double h : {0.05, 0.025, 0.0125}) {
    m.set_solver(euler_cfg(h));
    errs.push_back(rel(m.core(z0)));
  }
  for (std::size_t i = 1; i < errs.size(); ++i) {
    CHECK(errs[i] / errs[i - 1] > 0.4);
    CHECK(errs[i] / errs[i - 1] < 0.6);
  }
  SolverConfig loose = d;
  loose.rtol = 1e-3;
  loose.atol = 1e-6;
  m.set_solver(loose);
  CHECK(rel(m.core(z0)) < 1e-3);
}

TEST_CASE("end-to-end gradients of tiny models") {
  std::mt19937_64 rng(0);
  const auto x = random_tensor(rng, {2, 1, 8, 8}, 0, 1);
  const std::vector<int> labels{3, 7};
  auto tiny_gode = gode_spec(4, 1, 3, 1, 2, euler_cfg(0.25));
  auto tiny_node = node_spec(4, 1, true, euler_cfg(0.25));
  auto tiny_resnet = resnet_spec(4, 1, 2, 0.25);
  for (const auto& spec : {tiny_gode, tiny_node, tiny_resnet}) {
    const auto m = build<double>(spec, 1);
    CHECK(m.num_params() <= 5000);
    const auto report = check_gradients(
        [&] { return cross_entropy(m.forward(x), std::span<const int>(labels)); }, m.parameters(), 1e-4);
    INFO(to_string(spec.family()) << " worst " << report.worst << " " << report.max_rel_error);
    CHECK(report.max_rel_error < 1e-4);
    CHECK(report.tensors.size() == m.parameters().size());
  }
}

TEST_CASE("weight trajectories") {
  const auto node = build<double>(node_spec(4, 1, true), 0);
  const auto grid = uniform_grid(1.0, 11);
  CHECK(grid.front() == 0.0);
  CHECK(grid.back() == 1.0);
  CHECK(uniform_grid(1.0, 1) == std::vector<double>{0.0});
  const auto tn = export_weight_trajectory(node, 0, grid);
  CHECK(tn.entries == 4 * 5 * 9);
  for (std::size_t r = 1; r < grid.size(); ++r)
    for (std::size_t e = 0; e < tn.entries; ++e) CHECK(tn.at(r, e) == tn.at(0, e));

  std::mt19937_64 rng(5);
  auto g = build<double>(gode_spec(4, 1, 4, 1), 0);
  for (auto& k : g.gode_dynamics[1].conv.control_kernels)
    for (auto& v : k.mutable_values()) v = std::normal_distribution<double>(0, 1)(rng);
  const auto knots = g.gode_dynamics[1].conv.basis.knots();
  std::vector<double> ts;
  for (std::size_t i = 1; i + 2 < knots.size(); ++i) {
    if (knots[i + 1] > knots[i]) {
      ts.push_back(knots[i]);
      ts.push_back(knots[i + 1]);
      ts.push_back(0.5 * (knots[i] + knots[i + 1]));
    }
  }
  const auto tg = export_weight_trajectory(g, 1, ts, 9);
  CHECK(tg.entries == 9);
  for (std::size_t s = 0; s < ts.size(); s += 3)
    for (std::size_t e = 0; e < 9; ++e) CHECK(std::abs(tg.at(s + 2, e) - 0.5 * (tg.at(s, e) + tg.at(s + 1, e))) < 1e-12);

  const auto c = build<double>(gode_spec(4, 1, 1, 0), 0);
  const auto tc = export_weight_trajectory(c, 0, grid);
  for (std::size_t r = 1; r < grid.size(); ++r)
    for (std::size_t e = 0; e < tc.entries; ++e) CHECK(tc.at(r, e) == tc.at(0, e));

  const auto res = build<double>(resnet_spec(4, 1, 3), 0);
  CHECK_THROWS_AS(export_weight_trajectory(res, 0, grid), ConfigError);
  CHECK_THROWS_AS(export_weight_trajectory(g, 2, grid), DomainError);
  const auto tb = export_block_trajectory(res, 1, 5);
  CHECK(tb.t.size() == 3);
  CHECK(tb.entries == 5);
  CHECK_THROWS_AS(export_block_trajectory(g, 0), ConfigError);
}

TEST_CASE("trajectory CSV round trip") {
  std::mt19937_64 rng(8);
  auto g = build<double>(gode_spec(4, 1, 3, 2), 0);
  for (auto& k : g.gode_dynamics[0].conv.control_kernels)
    for (auto& v : k.mutable_values()) v = std::normal_distribution<double>(0, 1)(rng);
  const auto tr = export_weight_trajectory(g, 0, uniform_grid(1.0, 7), 5);
  std::stringstream ss;
  write_trajectory_csv(ss, tr);
  CHECK(ss.str().rfind("t,entry,value\n", 0) == 0);
  const auto back = read_trajectory_csv(ss);
  CHECK(back.t == tr.t);
  CHECK(back.entries == tr.entries);
  CHECK(back.values == tr.values);

  std::stringstream ragged("t,entry,value\n0,0,1\n0,1,2\n0.5,0,3\n");
  CHECK_THROWS_AS(read_trajectory_csv(ragged), FormatError);
  std::stringstream bad_header("time,entry,value\n");
  CHECK_THROWS_AS(read_trajectory_csv(bad_header), FormatError);
  std::stringstream garbage("t,entry,value\n0,zero,1\n");
  CHECK_THROWS_AS(read_trajectory_csv(garbage), FormatError);
}

TEST_CASE("checkpoint round trip") {
  gode::test::TempDir dir("ckpt");
  std::mt19937_64 rng(4);
  const auto x = random_tensor(rng, {3, 1, 28, 28}, 0, 1);
  for (const auto& spec : {gode_spec(8, 1, 3, 1), node_spec(8, 1, true), resnet_spec(8, 1, 2, 0.5)}) {
    const auto m = build<double>(spec, 9);
    const auto path = dir.path / "m.ckpt";
    save_checkpoint(m, path);
    const auto ck = read_checkpoint(path);
    CHECK(ck.scalar_bytes == 8);
    CHECK(ck.spec.to_json() == spec.to_json());
    CHECK(ck.tensors.size() == m.parameters().size());
    const auto back = load_model<double>(path);
    CHECK(vals(back.forward(x)) == vals(m.forward(x)));
  }
  const auto mf = build<float>(gode_spec(8, 1, 3, 1), 2);
  save_checkpoint(mf, dir.path / "f.ckpt");
  CHECK(read_checkpoint(dir.path / "f.ckpt").scalar_bytes == 4);
  const auto mf2 = load_model<float>(dir.path / "f.ckpt");
  const auto xf = Tensor<float>(x.shape(), std::vector<float>(x.values().begin(), x.values().end()));
  const auto a = mf.forward(xf), b = mf2.forward(xf);
  CHECK(std::vector<float>(a.values().begin(), a.values().end()) == std::vector<float>(b.values().begin(), b.values().end()));
}

TEST_CASE("malformed checkpoints") {
  gode::test::TempDir dir("badckpt");
  const auto m = build<double>(gode_spec(4, 1, 2, 1), 0);
  const auto good = dir.path / "good.ckpt";
  save_checkpoint(m, good);
  std::ifstream in(good, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), {});

  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream(dir.path / name, std::ios::binary) << content;
    return dir.path / name;
  };
  CHECK_THROWS_AS(read_checkpoint(write("magic.ckpt", "NOT-A-CKPT" + bytes.substr(10))), FormatError);
  try {
    (void)read_checkpoint(write("short.ckpt", bytes.substr(0, bytes.size() - 5)));
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("offset") != std::string::npos);
  }
  CHECK_THROWS_AS(read_checkpoint(dir.path / "missing.ckpt"), FormatError);
  CHECK_THROWS_AS(read_checkpoint(write("trailing.ckpt", bytes + "x")), FormatError);
}
