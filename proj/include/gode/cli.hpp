#pragma once

// Command-line front end. Configuration is resolved as built-in defaults,
// then a JSON file (--config), then individual flags; unknown JSON keys are
// rejected.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gode/data.hpp"
#include "gode/model.hpp"
#include "gode/trainer.hpp"

namespace gode::cli {

enum class DatasetKind { mnist, cifar10, synthetic };

DatasetKind parse_dataset(std::string_view name);
std::string_view to_string(DatasetKind kind);

struct RunConfig {
  // model
  Family family = Family::gode;
  int width = 64;
  int layers = 2;
  int n = 4;            // control points (gode)
  int k = 1;            // spline degree (gode)
  double T = 1.0;       // integration horizon
  BiasMode bias_mode = BiasMode::constant;
  bool time_channel = true;  // node
  std::optional<int> blocks;  // resnet; unset: 6 (1 channel) or 20 (3 channels)
  std::optional<double> residual_scale;  // resnet; unset: 1
  // solver
  SolverMethod solver = SolverMethod::euler;
  double step = 0.05;
  double rtol = 1e-3;
  double atol = 1e-6;
  int max_steps = 10000;
  // data
  DatasetKind dataset = DatasetKind::mnist;
  std::filesystem::path data_dir = "data/mnist";
  std::size_t subset = 0;       // train samples kept; 0 keeps all
  std::size_t test_subset = 0;  // test samples kept; 0 keeps all
  std::size_t synthetic_n = 1000;
  // training
  int epochs = 160;
  std::size_t batch = 128;
  double lr = 0.1;
  std::optional<std::vector<int>> lr_drops;  // unset: {60, 100, 140} below epochs
  double lr_drop_factor = 10.0;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  std::size_t eval_batch = 1000;
  std::size_t crop_pad = 4;
  std::string precision = "f32";
  std::filesystem::path out = "runs";

  int in_channels() const { return dataset == DatasetKind::cifar10 ? 3 : 1; }
  /// Fills every optional field with its effective value.
  RunConfig resolved() const;
  ModelSpec model_spec() const;
  TrainConfig train_config() const;
  /// Throws ConfigError (InvalidBasisError for spline constraints).
  void validate() const;

  /// Pretty-printed JSON of every field.
  std::string to_json() const;
  /// Fields absent from `text` keep their defaults; unknown keys throw.
  static RunConfig from_json(std::string_view text);
  /// Overlays the keys present in `text` onto this config.
  void merge_json(std::string_view text);

  bool operator==(const RunConfig&) const = default;
};

/// 16 hex digits identifying the resolved config, ignoring `seed` and `out`.
std::string config_hash(const RunConfig& cfg);
/// out / "<hash>-seed<seed>"
std::filesystem::path run_directory(const RunConfig& cfg, std::string_view prefix = "");

/// Loads the configured split, then applies subset selection.
Dataset load_dataset(const RunConfig& cfg, Split split);

/// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;   // e.g. gradient check above tolerance
inline constexpr int kExitConfig = 2;    // invalid configuration or usage
inline constexpr int kExitData = 3;      // unreadable data or checkpoint
inline constexpr int kExitDiverged = 4;  // training produced non-finite values

/// Full command-line entry point (argv[0] is the program name).
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace gode::cli
