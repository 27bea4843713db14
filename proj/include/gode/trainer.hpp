#pragma once

// Minibatch SGD with momentum and a step learning-rate schedule.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "gode/data.hpp"
#include "gode/model.hpp"

namespace gode {

struct TrainConfig {
  int epochs = 160;
  std::size_t batch_size = 128;
  double lr0 = 0.1;
  std::vector<int> lr_drop_epochs{60, 100, 140};
  double lr_drop_factor = 10.0;
  double momentum = 0.9;
  double weight_decay = 0.0;  // ridge penalty strength
  std::uint64_t seed = 0;
  std::size_t eval_batch_size = 1000;
  std::size_t crop_pad = 4;
  /// Best-test-accuracy checkpoint; empty disables checkpointing.
  std::filesystem::path checkpoint;

  /// Throws ConfigError.
  void validate() const;
};

/// lr0 / factor^(number of drop epochs <= epoch).
double lr_at(int epoch, const TrainConfig& cfg);

/// v <- momentum v + g + lambda w;  w <- w - lr v.
template <typename T>
void sgd_momentum_step(std::span<T> w, std::span<const T> g, std::span<T> v, double lr,
                       double momentum, double weight_decay);

/// Momentum buffers for a fixed parameter list.
template <typename T>
class SgdMomentum {
 public:
  SgdMomentum(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  /// Updates every parameter that holds a gradient, then clears the gradients.
  void step(ParamList<T>& params, double lr);
  const std::vector<std::vector<T>>& velocity() const { return velocity_; }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<std::vector<T>> velocity_;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double train_acc = 0;  // percent
  double test_error_pct = 0;
  double sec_per_iter = 0;  // median over the epoch
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  double best_test_error_pct = 100.0;
  int best_epoch = -1;
};

/// Called after each epoch's evaluation.
using EpochCallback = std::function<void(const EpochRecord&)>;

/// Throws DivergenceError (with epoch and iteration) when the loss or any
/// intermediate value stops being finite.
template <typename T>
TrainReport train(Model<T>& model, const Dataset& train_ds, const Dataset& test_ds,
                  const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Predicted class per sample; ties go to the lowest index.
template <typename T>
std::vector<int> predict(const Model<T>& model, const Dataset& ds, std::size_t batch_size);

/// 100 (1 - correct / N).
template <typename T>
double evaluate(const Model<T>& model, const Dataset& ds, std::size_t batch_size);

/// Row-wise argmax of [N, K] logits with lowest-index ties.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits);

/// "epoch,lr,train_loss,train_acc,test_error_pct"; timing goes to the
/// separate "epoch,sec_per_iter" table so reruns compare byte for byte.
void write_report_csv(std::ostream& os, const TrainReport& report);
void write_timing_csv(std::ostream& os, const TrainReport& report);

}  // namespace gode
