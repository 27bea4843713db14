#include <cstdio>

#include "gode/cli.hpp"
#include "gode/error.hpp"
#include "json.hpp"

namespace gode::cli {

using nlohmann::json;

DatasetKind parse_dataset(std::string_view name) {
  if (name == "mnist") return DatasetKind::mnist;
  if (name == "cifar10") return DatasetKind::cifar10;
  if (name == "synthetic") return DatasetKind::synthetic;
  throw ConfigError("unknown dataset '" + std::string(name) + "' (expected mnist, cifar10 or synthetic)");
}

std::string_view to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::mnist:
      return "mnist";
    case DatasetKind::cifar10:
      return "cifar10";
    case DatasetKind::synthetic:
      return "synthetic";
  }
  return "unknown";
}

RunConfig RunConfig::resolved() const {
  RunConfig r = *this;
  if (!r.blocks) r.blocks = in_channels() == 3 ? 20 : 6;
  if (!r.residual_scale) r.residual_scale = 1.0;
  if (!r.lr_drops) {
    std::vector<int> drops;
    for (int e : {60, 100, 140}) {
      if (e < epochs) drops.push_back(e);
    }
    r.lr_drops = drops;
  }
  return r;
}

ModelSpec RunConfig::model_spec() const {
  const RunConfig r = resolved();
  ModelSpec spec;
  spec.width = r.width;
  spec.in_channels = r.in_channels();
  spec.num_classes = 10;
  spec.layers = r.layers;
  SolverConfig solver_cfg;
  solver_cfg.method = r.solver;
  solver_cfg.t0 = 0.0;
  solver_cfg.t1 = r.T;
  solver_cfg.step = r.step;
  solver_cfg.rtol = r.rtol;
  solver_cfg.atol = r.atol;
  solver_cfg.max_steps = r.max_steps;
  switch (r.family) {
    case Family::resnet:
      spec.core = ResNetCore{*r.blocks, *r.residual_scale};
      break;
    case Family::node:
      spec.core = NodeCore{solver_cfg, r.time_channel};
      break;
    case Family::gode:
      spec.core = GodeCore{solver_cfg, r.k, r.n, r.bias_mode};
      break;
  }
  return spec;
}

TrainConfig RunConfig::train_config() const {
  const RunConfig r = resolved();
  TrainConfig t;
  t.epochs = r.epochs;
  t.batch_size = r.batch;
  t.lr0 = r.lr;
  t.lr_drop_epochs = *r.lr_drops;
  t.lr_drop_factor = r.lr_drop_factor;
  t.momentum = r.momentum;
  t.weight_decay = r.weight_decay;
  t.seed = r.seed;
  t.eval_batch_size = r.eval_batch;
  t.crop_pad = r.crop_pad;
  return t;
}

void RunConfig::validate() const {
  if (precision != "f32" && precision != "f64") {
    throw ConfigError("precision must be f32 or f64, got '" + precision + "'");
  }
  if (dataset == DatasetKind::synthetic && synthetic_n < 10) {
    throw ConfigError("synthetic_n must be >= 10");
  }
  model_spec().validate();
  train_config().validate();
}

namespace {

json to_json_value(const RunConfig& c) {
  json j;
  j["family"] = std::string(to_string(c.family));
  j["width"] = c.width;
  j["layers"] = c.layers;
  j["n"] = c.n;
  j["k"] = c.k;
  j["T"] = c.T;
  j["bias_mode"] = std::string(to_string(c.bias_mode));
  j["time_channel"] = c.time_channel;
  j["blocks"] = c.blocks ? json(*c.blocks) : json(nullptr);
  j["residual_scale"] = c.residual_scale ? json(*c.residual_scale) : json(nullptr);
  j["solver"] = std::string(to_string(c.solver));
  j["step"] = c.step;
  j["rtol"] = c.rtol;
  j["atol"] = c.atol;
  j["max_steps"] = c.max_steps;
  j["dataset"] = std::string(to_string(c.dataset));
  j["data_dir"] = c.data_dir.string();
  j["subset"] = c.subset;
  j["test_subset"] = c.test_subset;
  j["synthetic_n"] = c.synthetic_n;
  j["epochs"] = c.epochs;
  j["batch"] = c.batch;
  j["lr"] = c.lr;
  j["lr_drops"] = c.lr_drops ? json(*c.lr_drops) : json(nullptr);
  j["lr_drop_factor"] = c.lr_drop_factor;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["seed"] = c.seed;
  j["eval_batch"] = c.eval_batch;
  j["crop_pad"] = c.crop_pad;
  j["precision"] = c.precision;
  j["out"] = c.out.string();
  return j;
}

template <typename V>
void take(const json& j, const char* key, V& into) {
  if (j.contains(key)) into = j.at(key).get<V>();
}

template <typename V>
void take_optional(const json& j, const char* key, std::optional<V>& into) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) {
    into.reset();
  } else {
    into = j.at(key).get<V>();
  }
}

void apply_keys(const json& j, RunConfig& c) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  const json known = to_json_value(RunConfig{});
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("config: unknown key '" + key + "'");
  }
  try {
    if (j.contains("family")) c.family = parse_family(j.at("family").get<std::string>());
    take(j, "width", c.width);
    take(j, "layers", c.layers);
    take(j, "n", c.n);
    take(j, "k", c.k);
    take(j, "T", c.T);
    if (j.contains("bias_mode")) c.bias_mode = parse_bias_mode(j.at("bias_mode").get<std::string>());
    take(j, "time_channel", c.time_channel);
    take_optional(j, "blocks", c.blocks);
    take_optional(j, "residual_scale", c.residual_scale);
    if (j.contains("solver")) c.solver = parse_solver_method(j.at("solver").get<std::string>());
    take(j, "step", c.step);
    take(j, "rtol", c.rtol);
    take(j, "atol", c.atol);
    take(j, "max_steps", c.max_steps);
    if (j.contains("dataset")) c.dataset = parse_dataset(j.at("dataset").get<std::string>());
    if (j.contains("data_dir")) c.data_dir = j.at("data_dir").get<std::string>();
    take(j, "subset", c.subset);
    take(j, "test_subset", c.test_subset);
    take(j, "synthetic_n", c.synthetic_n);
    take(j, "epochs", c.epochs);
    take(j, "batch", c.batch);
    take(j, "lr", c.lr);
    take_optional(j, "lr_drops", c.lr_drops);
    take(j, "lr_drop_factor", c.lr_drop_factor);
    take(j, "momentum", c.momentum);
    take(j, "weight_decay", c.weight_decay);
    take(j, "seed", c.seed);
    take(j, "eval_batch", c.eval_batch);
    take(j, "crop_pad", c.crop_pad);
    take(j, "precision", c.precision);
    if (j.contains("out")) c.out = j.at("out").get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

}  // namespace

std::string RunConfig::to_json() const { return to_json_value(*this).dump(2) + "\n"; }

RunConfig RunConfig::from_json(std::string_view text) {
  RunConfig c;
  c.merge_json(text);
  return c;
}

void RunConfig::merge_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  apply_keys(j, *this);
}

std::string config_hash(const RunConfig& cfg) {
  json j = to_json_value(cfg.resolved());
  j.erase("seed");
  j.erase("out");
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::filesystem::path run_directory(const RunConfig& cfg, std::string_view prefix) {
  return cfg.out / (std::string(prefix) + config_hash(cfg) + "-seed" + std::to_string(cfg.seed));
}

Dataset load_dataset(const RunConfig& cfg, Split split) {
  Dataset ds;
  switch (cfg.dataset) {
    case DatasetKind::mnist:
      ds = load_mnist(cfg.data_dir, split);
      break;
    case DatasetKind::cifar10:
      ds = load_cifar10(cfg.data_dir, split);
      break;
    case DatasetKind::synthetic: {
      const std::size_t n = split == Split::train ? cfg.synthetic_n : std::max<std::size_t>(10, cfg.synthetic_n / 5);
      ds = make_synthetic(n, cfg.seed + (split == Split::train ? 0 : 1), split);
      break;
    }
  }
  const std::size_t keep = split == Split::train ? cfg.subset : cfg.test_subset;
  if (keep > 0) ds = subset(ds, keep, cfg.seed);
  return ds;
}

}  // namespace gode::cli
