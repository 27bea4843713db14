#include "gode/model.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>

#include "gode/error.hpp"
#include "gode/ops.hpp"
#include "json.hpp"

namespace gode {

using nlohmann::json;

Family parse_family(std::string_view name) {
  if (name == "resnet") return Family::resnet;
  if (name == "node") return Family::node;
  if (name == "gode") return Family::gode;
  throw ConfigError("unknown model family '" + std::string(name) + "' (expected resnet, node or gode)");
}

std::string_view to_string(Family family) {
  switch (family) {
    case Family::resnet:
      return "resnet";
    case Family::node:
      return "node";
    case Family::gode:
      return "gode";
  }
  return "unknown";
}

BiasMode parse_bias_mode(std::string_view name) {
  if (name == "constant") return BiasMode::constant;
  if (name == "spline") return BiasMode::spline;
  throw ConfigError("unknown bias mode '" + std::string(name) + "' (expected constant or spline)");
}

std::string_view to_string(BiasMode mode) {
  return mode == BiasMode::constant ? "constant" : "spline";
}

void ModelSpec::validate() const {
  if (width < 1) throw ConfigError("model: width must be >= 1");
  if (in_channels < 1) throw ConfigError("model: in_channels must be >= 1");
  if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
  if (layers < 1) throw ConfigError("model: layers must be >= 1");
  const auto c = static_cast<std::size_t>(width);
  if (c % default_groups(c) != 0) {
    throw ConfigError("model: width " + std::to_string(width) +
                      " not divisible into min(32, width) norm groups");
  }
  if (const auto* r = std::get_if<ResNetCore>(&core)) {
    if (r->num_blocks < 1) throw ConfigError("model: resnet needs num_blocks >= 1");
    if (!std::isfinite(r->residual_scale)) throw ConfigError("model: residual_scale must be finite");
  } else if (const auto* n = std::get_if<NodeCore>(&core)) {
    n->solver.validate();
  } else {
    const auto& g = std::get<GodeCore>(core);
    g.solver.validate();
    if (g.solver.t0 != 0.0) throw ConfigError("model: gode solver must start at t0 = 0");
    BSplineBasis::clamped_uniform(g.degree, g.n_control, g.solver.t1);
  }
}

namespace {

void check_keys(const json& obj, std::initializer_list<std::string_view> allowed,
                std::string_view context) {
  if (!obj.is_object()) throw ConfigError(std::string(context) + ": expected an object");
  for (const auto& [key, value] : obj.items()) {
    bool known = false;
    for (auto a : allowed) known = known || key == a;
    if (!known) throw ConfigError(std::string(context) + ": unknown key '" + key + "'");
  }
}

template <typename V>
void read_opt(const json& obj, const char* key, V& into) {
  if (obj.contains(key)) into = obj.at(key).get<V>();
}

json solver_json(const SolverConfig& s) {
  return {{"method", std::string(to_string(s.method))},
          {"t0", s.t0},
          {"t1", s.t1},
          {"step", s.step},
          {"rtol", s.rtol},
          {"atol", s.atol},
          {"max_steps", s.max_steps}};
}

SolverConfig solver_from(const json& j) {
  check_keys(j, {"method", "t0", "t1", "step", "rtol", "atol", "max_steps"}, "solver");
  SolverConfig s;
  if (j.contains("method")) s.method = parse_solver_method(j.at("method").get<std::string>());
  read_opt(j, "t0", s.t0);
  read_opt(j, "t1", s.t1);
  read_opt(j, "step", s.step);
  read_opt(j, "rtol", s.rtol);
  read_opt(j, "atol", s.atol);
  read_opt(j, "max_steps", s.max_steps);
  return s;
}

}  // namespace

std::string ModelSpec::to_json() const {
  json j{{"family", std::string(to_string(family()))},
         {"width", width},
         {"in_channels", in_channels},
         {"num_classes", num_classes},
         {"layers", layers}};
  if (const auto* r = std::get_if<ResNetCore>(&core)) {
    j["resnet"] = {{"num_blocks", r->num_blocks}, {"residual_scale", r->residual_scale}};
  } else if (const auto* n = std::get_if<NodeCore>(&core)) {
    j["node"] = {{"solver", solver_json(n->solver)}, {"time_channel", n->time_channel}};
  } else {
    const auto& g = std::get<GodeCore>(core);
    j["gode"] = {{"solver", solver_json(g.solver)},
                 {"degree", g.degree},
                 {"n_control", g.n_control},
                 {"bias_mode", std::string(to_string(g.bias_mode))}};
  }
  return j.dump();
}

ModelSpec ModelSpec::from_json(std::string_view text) {
  try {
    const json j = json::parse(text);
    check_keys(j, {"family", "width", "in_channels", "num_classes", "layers", "resnet", "node", "gode"},
               "model spec");
    ModelSpec spec;
    read_opt(j, "width", spec.width);
    read_opt(j, "in_channels", spec.in_channels);
    read_opt(j, "num_classes", spec.num_classes);
    read_opt(j, "layers", spec.layers);
    const auto family = parse_family(j.at("family").get<std::string>());
    const std::string family_key(to_string(family));
    for (const char* other : {"resnet", "node", "gode"}) {
      if (other != family_key && j.contains(other)) {
        throw ConfigError(std::string("model spec: '") + other + "' section given for family " + family_key);
      }
    }
    const json sub = j.value(family_key, json::object());
    switch (family) {
      case Family::resnet: {
        check_keys(sub, {"num_blocks", "residual_scale"}, "model spec.resnet");
        ResNetCore r;
        read_opt(sub, "num_blocks", r.num_blocks);
        read_opt(sub, "residual_scale", r.residual_scale);
        spec.core = r;
        break;
      }
      case Family::node: {
        check_keys(sub, {"solver", "time_channel"}, "model spec.node");
        NodeCore n;
        if (sub.contains("solver")) n.solver = solver_from(sub.at("solver"));
        read_opt(sub, "time_channel", n.time_channel);
        spec.core = n;
        break;
      }
      case Family::gode: {
        check_keys(sub, {"solver", "degree", "n_control", "bias_mode"}, "model spec.gode");
        GodeCore g;
        if (sub.contains("solver")) g.solver = solver_from(sub.at("solver"));
        read_opt(sub, "degree", g.degree);
        read_opt(sub, "n_control", g.n_control);
        if (sub.contains("bias_mode")) g.bias_mode = parse_bias_mode(sub.at("bias_mode").get<std::string>());
        spec.core = g;
        break;
      }
    }
    return spec;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model spec: ") + e.what());
  }
}

ModelSpec default_spec(Family family, int in_channels) {
  ModelSpec spec;
  spec.in_channels = in_channels;
  const bool cifar = in_channels == 3;
  switch (family) {
    case Family::resnet:
      spec.core = ResNetCore{cifar ? 20 : 6, 1.0};
      break;
    case Family::node:
      spec.core = NodeCore{};
      break;
    case Family::gode: {
      GodeCore g;
      g.n_control = cifar ? 8 : 4;
      spec.core = g;
      break;
    }
  }
  return spec;
}

template <typename T>
Model<T> build(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  const auto C = static_cast<std::size_t>(spec.width);
  const auto L = static_cast<std::size_t>(spec.layers);
  Model<T> m;
  m.spec = spec;
  // The downsampling stack uses the uniform scheme; every other conv is He-normal.
  const auto c_in = static_cast<std::size_t>(spec.in_channels);
  m.downsampling.push_back(
      {Conv2d<T>::init(rng, c_in, C, 3, {1, 1}, ConvInit::fan_in_uniform), GroupNorm<T>::init(C)});
  for (int i = 0; i < 2; ++i) {
    m.downsampling.push_back(
        {Conv2d<T>::init(rng, C, C, 4, {2, 1}, ConvInit::fan_in_uniform), GroupNorm<T>::init(C)});
  }
  if (const auto* r = std::get_if<ResNetCore>(&spec.core)) {
    for (int b = 0; b < r->num_blocks; ++b) {
      std::vector<typename Model<T>::Stage> block;
      for (std::size_t l = 0; l < L; ++l) {
        block.push_back({Conv2d<T>::init(rng, C, C, 3, {1, 1}), GroupNorm<T>::init(C)});
      }
      m.blocks.push_back(std::move(block));
    }
  } else if (const auto* n = std::get_if<NodeCore>(&spec.core)) {
    const std::size_t c_dyn = C + (n->time_channel ? 1 : 0);
    for (std::size_t l = 0; l < L; ++l) {
      m.node_dynamics.push_back({Conv2d<T>::init(rng, c_dyn, C, 3, {1, 1}), GroupNorm<T>::init(C)});
    }
  } else {
    const auto& g = std::get<GodeCore>(spec.core);
    const auto basis = BSplineBasis::clamped_uniform(g.degree, g.n_control, g.solver.t1);
    for (std::size_t l = 0; l < L; ++l) {
      m.gode_dynamics.push_back(
          {TimeVaryingConv<T>::init(rng, basis, C, C, g.bias_mode), GroupNorm<T>::init(C)});
    }
  }
  m.head_norm = GroupNorm<T>::init(C);
  m.classifier = Linear<T>::init(rng, C, static_cast<std::size_t>(spec.num_classes));
  return m;
}

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& x, SolveStats* stats) const {
  return head(core(downsample(x), stats));
}

template <typename T>
Tensor<T> Model<T>::downsample(const Tensor<T>& x) const {
  if (x.rank() != 4 || x.dim(1) != static_cast<std::size_t>(spec.in_channels)) {
    throw ShapeError("model: expected input [N, " + std::to_string(spec.in_channels) +
                     ", H, W], got " + to_string(x.shape()));
  }
  Tensor<T> h = x;
  for (const auto& s : downsampling) h = relu(s.norm.forward(s.conv.forward(h)));
  return h;
}

template <typename T>
Tensor<T> Model<T>::residual_block(std::size_t index, const Tensor<T>& z) const {
  Tensor<T> h = z;
  for (const auto& s : blocks.at(index)) h = relu(s.norm.forward(s.conv.forward(h)));
  return h;
}

template <typename T>
Tensor<T> Model<T>::dynamics(const Tensor<T>& z, double t) const {
  Tensor<T> h = z;
  if (const auto* n = std::get_if<NodeCore>(&spec.core)) {
    for (const auto& s : node_dynamics) {
      Tensor<T> in = h;
      if (n->time_channel) {
        in = concat<T>({h, Tensor<T>::full({h.dim(0), 1, h.dim(2), h.dim(3)}, static_cast<T>(t))}, 1);
      }
      h = relu(s.norm.forward(s.conv.forward(in)));
    }
    return h;
  }
  if (std::holds_alternative<GodeCore>(spec.core)) {
    for (const auto& s : gode_dynamics) h = relu(s.norm.forward(s.conv.forward(h, t)));
    return h;
  }
  throw ConfigError("model: resnet has no ODE dynamics");
}

template <typename T>
Tensor<T> Model<T>::core(const Tensor<T>& z, SolveStats* stats) const {
  if (const auto* r = std::get_if<ResNetCore>(&spec.core)) {
    const std::array<double, 1> h{r->residual_scale};
    Tensor<T> out = z;
    for (std::size_t b = 0; b < blocks.size(); ++b) out = lincomb(out, {residual_block(b, out)}, h);
    return out;
  }
  const Dynamics<T> f = [this](const Tensor<T>& state, double t) { return dynamics(state, t); };
  return solve(f, z, solver(), stats);
}

template <typename T>
Tensor<T> Model<T>::head(const Tensor<T>& z) const {
  return classifier.forward(avgpool_global(relu(head_norm.forward(z))));
}

template <typename T>
const SolverConfig& Model<T>::solver() const {
  if (const auto* n = std::get_if<NodeCore>(&spec.core)) return n->solver;
  if (const auto* g = std::get_if<GodeCore>(&spec.core)) return g->solver;
  throw ConfigError("model: resnet has no ODE solver");
}

template <typename T>
void Model<T>::set_solver(const SolverConfig& solver) {
  solver.validate();
  if (auto* n = std::get_if<NodeCore>(&spec.core)) {
    n->solver = solver;
    return;
  }
  if (auto* g = std::get_if<GodeCore>(&spec.core)) {
    if (solver.t0 != g->solver.t0 || solver.t1 != g->solver.t1) {
      throw ConfigError("model: a gode solver must keep the spline's integration interval");
    }
    g->solver = solver;
    return;
  }
  throw ConfigError("model: resnet has no ODE solver");
}

template <typename T>
ParamList<T> Model<T>::parameters() const {
  ParamList<T> out;
  for (std::size_t i = 0; i < downsampling.size(); ++i) {
    const auto prefix = "down." + std::to_string(i);
    downsampling[i].conv.collect(prefix + ".conv", out);
    downsampling[i].norm.collect(prefix + ".norm", out);
  }
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (std::size_t l = 0; l < blocks[b].size(); ++l) {
      const auto prefix = "core.block" + std::to_string(b) + ".layer" + std::to_string(l);
      blocks[b][l].conv.collect(prefix + ".conv", out);
      blocks[b][l].norm.collect(prefix + ".norm", out);
    }
  }
  for (std::size_t l = 0; l < node_dynamics.size(); ++l) {
    const auto prefix = "core.layer" + std::to_string(l);
    node_dynamics[l].conv.collect(prefix + ".conv", out);
    node_dynamics[l].norm.collect(prefix + ".norm", out);
  }
  for (std::size_t l = 0; l < gode_dynamics.size(); ++l) {
    const auto prefix = "core.layer" + std::to_string(l);
    gode_dynamics[l].conv.collect(prefix + ".convt", out);
    gode_dynamics[l].norm.collect(prefix + ".norm", out);
  }
  head_norm.collect("head.norm", out);
  classifier.collect("head.linear", out);
  return out;
}

template <typename T>
std::size_t Model<T>::num_params() const {
  std::size_t n = 0;
  for (const auto& [name, p] : parameters()) n += p.numel();
  return n;
}

ParamBreakdown count_params_by_stage(const ModelSpec& spec) {
  spec.validate();
  const std::size_t C = static_cast<std::size_t>(spec.width);
  const std::size_t in = static_cast<std::size_t>(spec.in_channels);
  const std::size_t K = static_cast<std::size_t>(spec.num_classes);
  const std::size_t L = static_cast<std::size_t>(spec.layers);
  const std::size_t norm = 2 * C;
  ParamBreakdown p;
  p.downsampling = (in * C * 9 + C + norm) + 2 * (C * C * 16 + C + norm);
  p.head = norm + C * K + K;
  if (const auto* r = std::get_if<ResNetCore>(&spec.core)) {
    p.core = static_cast<std::size_t>(r->num_blocks) * L * (C * C * 9 + C + norm);
  } else if (const auto* n = std::get_if<NodeCore>(&spec.core)) {
    const std::size_t c_in = C + (n->time_channel ? 1 : 0);
    p.core = L * (C * c_in * 9 + C + norm);
  } else {
    const auto& g = std::get<GodeCore>(spec.core);
    const auto ctrl = static_cast<std::size_t>(g.n_control);
    const std::size_t bias = g.bias_mode == BiasMode::constant ? C : ctrl * C;
    p.core = L * (ctrl * C * C * 9 + bias + norm);
  }
  return p;
}

std::size_t count_params(const ModelSpec& spec) { return count_params_by_stage(spec).total(); }

std::vector<double> uniform_grid(double end, std::size_t count) {
  if (count == 0) throw DomainError("uniform_grid: need at least one point");
  std::vector<double> t(count, 0.0);
  for (std::size_t i = 1; i < count; ++i) {
    t[i] = (static_cast<double>(i) * end) / static_cast<double>(count - 1);
  }
  return t;
}

namespace {

std::size_t clip_entries(std::size_t available, std::size_t max_entries) {
  return max_entries == 0 ? available : std::min(available, max_entries);
}

}  // namespace

template <typename T>
WeightTrajectory export_weight_trajectory(const Model<T>& model, std::size_t layer,
                                          std::span<const double> t_grid, std::size_t max_entries) {
  WeightTrajectory traj;
  traj.t.assign(t_grid.begin(), t_grid.end());
  switch (model.spec.family()) {
    case Family::resnet:
      throw ConfigError("trajectory: resnet models are indexed by block; use the block export");
    case Family::node: {
      if (layer >= model.node_dynamics.size()) {
        throw DomainError("trajectory: layer " + std::to_string(layer) + " out of range (have " +
                          std::to_string(model.node_dynamics.size()) + ")");
      }
      const auto kernel = model.node_dynamics[layer].conv.kernel.values();
      traj.entries = clip_entries(kernel.size(), max_entries);
      for (std::size_t r = 0; r < traj.t.size(); ++r) {
        traj.values.insert(traj.values.end(), kernel.begin(),
                           kernel.begin() + static_cast<std::ptrdiff_t>(traj.entries));
      }
      return traj;
    }
    case Family::gode: {
      if (layer >= model.gode_dynamics.size()) {
        throw DomainError("trajectory: layer " + std::to_string(layer) + " out of range (have " +
                          std::to_string(model.gode_dynamics.size()) + ")");
      }
      const auto& conv = model.gode_dynamics[layer].conv;
      traj.entries = clip_entries(conv.control_kernels.front().numel(), max_entries);
      for (double t : traj.t) {
        const auto w = conv.basis.eval(t);
        for (std::size_t e = 0; e < traj.entries; ++e) {
          double v = 0;
          for (std::size_t i = 0; i < w.size(); ++i) {
            if (w[i] != 0.0) v += w[i] * static_cast<double>(conv.control_kernels[i][e]);
          }
          traj.values.push_back(v);
        }
      }
      return traj;
    }
  }
  throw ConfigError("trajectory: unknown family");
}

template <typename T>
WeightTrajectory export_block_trajectory(const Model<T>& model, std::size_t layer,
                                         std::size_t max_entries) {
  if (model.spec.family() != Family::resnet) {
    throw ConfigError("trajectory: block export needs a resnet model");
  }
  if (layer >= static_cast<std::size_t>(model.spec.layers)) {
    throw DomainError("trajectory: layer " + std::to_string(layer) + " out of range");
  }
  WeightTrajectory traj;
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const auto kernel = model.blocks[b][layer].conv.kernel.values();
    traj.entries = clip_entries(kernel.size(), max_entries);
    traj.t.push_back(static_cast<double>(b));
    for (std::size_t e = 0; e < traj.entries; ++e) traj.values.push_back(kernel[e]);
  }
  return traj;
}

void write_trajectory_csv(std::ostream& os, const WeightTrajectory& trajectory) {
  os << "t,entry,value\n";
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t r = 0; r < trajectory.t.size(); ++r) {
    for (std::size_t e = 0; e < trajectory.entries; ++e) {
      os << trajectory.t[r] << ',' << e << ',' << trajectory.at(r, e) << '\n';
    }
  }
}

WeightTrajectory read_trajectory_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "t,entry,value") {
    throw FormatError("trajectory csv: missing header 't,entry,value'");
  }
  WeightTrajectory traj;
  std::size_t expected = 0;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    double t = 0, value = 0;
    std::size_t entry = 0;
    char c1 = 0, c2 = 0;
    if (!(ls >> t >> c1 >> entry >> c2 >> value) || c1 != ',' || c2 != ',') {
      throw FormatError("trajectory csv: malformed line " + std::to_string(line_no));
    }
    if (entry == 0) {
      if (traj.t.size() == 1) traj.entries = expected;
      if (!traj.t.empty() && expected != traj.entries) {
        throw FormatError("trajectory csv: ragged row before line " + std::to_string(line_no));
      }
      traj.t.push_back(t);
      expected = 0;
    }
    if (traj.t.empty() || entry != expected) {
      throw FormatError("trajectory csv: unexpected entry index on line " + std::to_string(line_no));
    }
    ++expected;
    traj.values.push_back(value);
  }
  if (traj.t.empty()) throw FormatError("trajectory csv: no rows");
  if (traj.t.size() == 1) traj.entries = expected;
  if (expected != traj.entries) throw FormatError("trajectory csv: ragged final row");
  return traj;
}

namespace {

template <typename U>
void put(std::ostream& os, U value) {
  static_assert(std::is_trivially_copyable_v<U>);
  std::array<char, sizeof(U)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  os.write(bytes.data(), sizeof(U));
}

template <typename U>
U get(std::istream& is, const std::filesystem::path& path) {
  std::array<char, sizeof(U)> bytes;
  const auto offset = static_cast<long long>(is.tellg());
  if (!is.read(bytes.data(), sizeof(U))) {
    throw FormatError("checkpoint " + path.string() + ": truncated at offset " + std::to_string(offset));
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  U value;
  std::memcpy(&value, bytes.data(), sizeof(U));
  return value;
}

std::string get_string(std::istream& is, std::size_t length, const std::filesystem::path& path) {
  std::string s(length, '\0');
  const auto offset = static_cast<long long>(is.tellg());
  if (!is.read(s.data(), static_cast<std::streamsize>(length))) {
    throw FormatError("checkpoint " + path.string() + ": truncated at offset " + std::to_string(offset));
  }
  return s;
}

}  // namespace

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("checkpoint: cannot open " + path.string() + " for writing");
  os.write(kCheckpointMagic.data(), static_cast<std::streamsize>(kCheckpointMagic.size()));
  put<std::uint32_t>(os, sizeof(T));
  const auto spec = model.spec.to_json();
  put<std::uint64_t>(os, spec.size());
  os.write(spec.data(), static_cast<std::streamsize>(spec.size()));
  const auto params = model.parameters();
  put<std::uint64_t>(os, params.size());
  for (const auto& [name, p] : params) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.rank()));
    for (auto d : p.shape()) put<std::uint64_t>(os, d);
    for (auto v : p.values()) put<T>(os, v);
  }
  if (!os) throw FormatError("checkpoint: write to " + path.string() + " failed");
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open " + path.string());
  const auto magic = get_string(is, kCheckpointMagic.size(), path);
  if (magic != kCheckpointMagic) {
    throw FormatError("checkpoint " + path.string() + ": bad header at offset 0 (expected GODE-CKPT-v1)");
  }
  Checkpoint ck;
  ck.scalar_bytes = get<std::uint32_t>(is, path);
  if (ck.scalar_bytes != 4 && ck.scalar_bytes != 8) {
    throw FormatError("checkpoint " + path.string() + ": unsupported scalar width " +
                      std::to_string(ck.scalar_bytes));
  }
  const auto spec_len = get<std::uint64_t>(is, path);
  if (spec_len > (std::uint64_t{1} << 24)) throw FormatError("checkpoint " + path.string() + ": spec too large");
  ck.spec = ModelSpec::from_json(get_string(is, spec_len, path));
  const auto count = get<std::uint64_t>(is, path);
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    const auto name_len = get<std::uint32_t>(is, path);
    t.name = get_string(is, name_len, path);
    const auto rank = get<std::uint32_t>(is, path);
    if (rank > 8) throw FormatError("checkpoint " + path.string() + ": implausible rank for " + t.name);
    for (std::uint32_t d = 0; d < rank; ++d) t.shape.push_back(get<std::uint64_t>(is, path));
    const auto n = numel(t.shape);
    t.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      t.values[k] = ck.scalar_bytes == 4 ? static_cast<double>(get<float>(is, path)) : get<double>(is, path);
    }
    ck.tensors.push_back(std::move(t));
  }
  const auto end = static_cast<long long>(is.tellg());
  if (is.peek() != std::char_traits<char>::eof()) {
    throw FormatError("checkpoint " + path.string() + ": trailing data at offset " + std::to_string(end));
  }
  return ck;
}

template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& checkpoint) {
  Model<T> model = build<T>(checkpoint.spec, 0);
  std::map<std::string, const CheckpointTensor*> by_name;
  for (const auto& t : checkpoint.tensors) by_name[t.name] = &t;
  auto params = model.parameters();
  if (params.size() != checkpoint.tensors.size()) {
    throw FormatError("checkpoint: holds " + std::to_string(checkpoint.tensors.size()) +
                      " tensors, model expects " + std::to_string(params.size()));
  }
  for (auto& [name, p] : params) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint: missing tensor " + name);
    if (it->second->shape != p.shape()) {
      throw FormatError("checkpoint: tensor " + name + " has shape " + to_string(it->second->shape) +
                        ", expected " + to_string(p.shape()));
    }
    auto dst = p.mutable_values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(it->second->values[k]);
  }
  return model;
}

template <typename T>
Model<T> load_model(const std::filesystem::path& path) {
  return model_from_checkpoint<T>(read_checkpoint(path));
}

#define GODE_INSTANTIATE_MODEL(T)                                                                 \
  template struct Model<T>;                                                                       \
  template Model<T> build<T>(const ModelSpec&, std::uint64_t);                                    \
  template WeightTrajectory export_weight_trajectory<T>(const Model<T>&, std::size_t,             \
                                                        std::span<const double>, std::size_t);    \
  template WeightTrajectory export_block_trajectory<T>(const Model<T>&, std::size_t, std::size_t); \
  template void save_checkpoint<T>(const Model<T>&, const std::filesystem::path&);                \
  template Model<T> model_from_checkpoint<T>(const Checkpoint&);                                  \
  template Model<T> load_model<T>(const std::filesystem::path&);

GODE_INSTANTIATE_MODEL(float)
GODE_INSTANTIATE_MODEL(double)

}  // namespace gode
