#pragma once

// The three architectures compared in this project. All share a
// downsampling stack (3x3 conv, then two 4x4 stride-2 convs, each followed
// by group norm and ReLU) and a head (group norm, ReLU, global average pool,
// linear). They differ in the core stage:
//
//   resnet  z <- z + h * block(z), block = L x (conv -> norm -> relu)
//   node    dz/dt = f(z, t), f = L x (conv([z, t]) -> norm -> relu)
//   gode    dz/dt = f(z, t), f = L x (convt(z; t) -> norm -> relu)
//
// where convt is a TimeVaryingConv whose kernel is a B-spline in t.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "gode/layers.hpp"
#include "gode/odeint.hpp"
#include "gode/tensor.hpp"

namespace gode {

enum class Family { resnet, node, gode };

Family parse_family(std::string_view name);
std::string_view to_string(Family family);
BiasMode parse_bias_mode(std::string_view name);
std::string_view to_string(BiasMode mode);

struct ResNetCore {
  int num_blocks = 6;
  double residual_scale = 1.0;
};

struct NodeCore {
  SolverConfig solver;
  /// Concatenate a constant-t feature map to the input of every dynamics conv.
  bool time_channel = true;
};

struct GodeCore {
  SolverConfig solver;  // the spline basis spans [0, solver.t1]
  int degree = 1;
  int n_control = 4;
  BiasMode bias_mode = BiasMode::constant;
};

struct ModelSpec {
  int width = 64;
  int in_channels = 1;
  int num_classes = 10;
  int layers = 2;  // conv stages per residual block / per dynamics function
  std::variant<ResNetCore, NodeCore, GodeCore> core = GodeCore{};

  Family family() const { return static_cast<Family>(core.index()); }
  /// Throws ConfigError (InvalidBasisError for spline problems).
  void validate() const;

  std::string to_json() const;
  /// Throws ConfigError on malformed text or unknown keys.
  static ModelSpec from_json(std::string_view text);
};

/// Preset matching the MNIST (in_channels 1) or CIFAR-10 (3) setup.
ModelSpec default_spec(Family family, int in_channels);

template <typename T>
struct Model {
  struct Stage {
    Conv2d<T> conv;
    GroupNorm<T> norm;
  };
  struct SplineStage {
    TimeVaryingConv<T> conv;
    GroupNorm<T> norm;
  };

  ModelSpec spec;
  std::vector<Stage> downsampling;          // 3 stages
  std::vector<std::vector<Stage>> blocks;  // resnet: num_blocks x L
  std::vector<Stage> node_dynamics;        // node: L
  std::vector<SplineStage> gode_dynamics;  // gode: L
  GroupNorm<T> head_norm;
  Linear<T> classifier;

  Tensor<T> forward(const Tensor<T>& x, SolveStats* stats = nullptr) const;
  Tensor<T> downsample(const Tensor<T>& x) const;
  Tensor<T> core(const Tensor<T>& z, SolveStats* stats = nullptr) const;
  Tensor<T> head(const Tensor<T>& z) const;

  /// ODE right-hand side (node and gode only).
  Tensor<T> dynamics(const Tensor<T>& z, double t) const;
  Tensor<T> residual_block(std::size_t index, const Tensor<T>& z) const;

  const SolverConfig& solver() const;
  /// Swap the ODE solver of a node/gode model (e.g. Euler -> dopri5).
  void set_solver(const SolverConfig& solver);

  /// Named trainable tensors in a fixed order.
  ParamList<T> parameters() const;
  std::size_t num_params() const;
};

/// Deterministic in `seed`.
template <typename T>
Model<T> build(const ModelSpec& spec, std::uint64_t seed);

struct ParamBreakdown {
  std::size_t downsampling = 0;
  std::size_t core = 0;
  std::size_t head = 0;
  std::size_t total() const { return downsampling + core + head; }
};

/// Exact trainable scalar counts computed from a ModelSpec alone.
ParamBreakdown count_params_by_stage(const ModelSpec& spec);
std::size_t count_params(const ModelSpec& spec);

/// Rows of kernel entries sampled along a time (or block) axis.
struct WeightTrajectory {
  std::vector<double> t;
  std::size_t entries = 0;
  std::vector<double> values;  // row-major [t.size()][entries]

  double at(std::size_t row, std::size_t entry) const { return values[row * entries + entry]; }
};

/// count >= 1 points uniformly covering [0, end]; a single point is t = 0.
std::vector<double> uniform_grid(double end, std::size_t count);

/// Materialised kernel of dynamics layer `layer` at each t (node/gode). At
/// most `max_entries` leading kernel entries are kept (0 keeps all).
template <typename T>
WeightTrajectory export_weight_trajectory(const Model<T>& model, std::size_t layer,
                                          std::span<const double> t_grid,
                                          std::size_t max_entries = 0);

/// ResNet analogue: row b holds the kernel of conv `layer` in block b.
template <typename T>
WeightTrajectory export_block_trajectory(const Model<T>& model, std::size_t layer,
                                         std::size_t max_entries = 0);

/// Long format: header "t,entry,value", values printed round-trip exact.
void write_trajectory_csv(std::ostream& os, const WeightTrajectory& trajectory);
WeightTrajectory read_trajectory_csv(std::istream& is);

// Checkpoints: "GODE-CKPT-v1\n", u32 scalar byte width (4 or 8), u64 spec
// length + spec JSON, u64 tensor count, then per tensor: u32 name length,
// name, u32 rank, u64 extents, raw values. Integers and values little-endian.
inline constexpr std::string_view kCheckpointMagic = "GODE-CKPT-v1\n";

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  ModelSpec spec;
  std::uint32_t scalar_bytes = 8;
  std::vector<CheckpointTensor> tensors;
};

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path);
/// Throws FormatError on a bad header, truncation or unknown layout.
Checkpoint read_checkpoint(const std::filesystem::path& path);
/// Rebuilds the model from the stored spec and copies every tensor in.
template <typename T>
Model<T> load_model(const std::filesystem::path& path);
template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& checkpoint);

}  // namespace gode
