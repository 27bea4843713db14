#include "gode/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>

#include "gode/error.hpp"
#include "gode/ops.hpp"

namespace gode {

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (eval_batch_size < 1) throw ConfigError("train: eval_batch_size must be >= 1");
  if (!(lr0 > 0) || !std::isfinite(lr0)) throw ConfigError("train: lr0 must be positive");
  if (!(lr_drop_factor > 0) || !std::isfinite(lr_drop_factor)) {
    throw ConfigError("train: lr_drop_factor must be positive");
  }
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("train: momentum must lie in [0, 1)");
  if (!(weight_decay >= 0) || !std::isfinite(weight_decay)) {
    throw ConfigError("train: weight_decay (lambda) must be >= 0");
  }
  for (std::size_t i = 0; i < lr_drop_epochs.size(); ++i) {
    if (lr_drop_epochs[i] < 0 || lr_drop_epochs[i] >= epochs) {
      throw ConfigError("train: lr drop epoch " + std::to_string(lr_drop_epochs[i]) +
                        " must lie in [0, epochs = " + std::to_string(epochs) + ")");
    }
    if (i > 0 && lr_drop_epochs[i] <= lr_drop_epochs[i - 1]) {
      throw ConfigError("train: lr_drop_epochs must be strictly increasing");
    }
  }
}

double lr_at(int epoch, const TrainConfig& cfg) {
  int drops = 0;
  for (int e : cfg.lr_drop_epochs) drops += e <= epoch ? 1 : 0;
  return cfg.lr0 / std::pow(cfg.lr_drop_factor, drops);
}

template <typename T>
void sgd_momentum_step(std::span<T> w, std::span<const T> g, std::span<T> v, double lr,
                       double momentum, double weight_decay) {
  if (w.size() != g.size() || w.size() != v.size()) {
    throw ShapeError("sgd: parameter, gradient and velocity sizes differ");
  }
  const T m = static_cast<T>(momentum);
  const T lam = static_cast<T>(weight_decay);
  const T step = static_cast<T>(lr);
  for (std::size_t i = 0; i < w.size(); ++i) {
    v[i] = m * v[i] + g[i] + lam * w[i];
    w[i] -= step * v[i];
  }
}

template <typename T>
void SgdMomentum<T>::step(ParamList<T>& params, double lr) {
  if (velocity_.empty()) {
    for (const auto& [name, p] : params) velocity_.emplace_back(p.numel(), T(0));
  }
  if (velocity_.size() != params.size()) throw ShapeError("sgd: parameter list changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].second;
    if (!p.has_grad()) continue;
    sgd_momentum_step<T>(p.mutable_values(), p.grad(), velocity_[i], lr, momentum_, weight_decay_);
    p.clear_grad();
  }
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax: expected [N, K], got " + to_string(logits.shape()));
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  const auto v = logits.values();
  std::vector<int> out(N);
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (v[n * K + k] > v[n * K + best]) best = k;
    }
    out[n] = static_cast<int>(best);
  }
  return out;
}

template <typename T>
std::vector<int> predict(const Model<T>& model, const Dataset& ds, std::size_t batch_size) {
  if (ds.size() == 0) throw DomainError("evaluate: empty dataset");
  if (batch_size < 1) throw ConfigError("evaluate: batch_size must be >= 1");
  std::vector<int> out;
  out.reserve(ds.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(ds.size(), start + batch_size); ++i) idx.push_back(i);
    const auto pred = argmax_rows(model.forward(ds.images<T>(idx)));
    out.insert(out.end(), pred.begin(), pred.end());
  }
  return out;
}

template <typename T>
double evaluate(const Model<T>& model, const Dataset& ds, std::size_t batch_size) {
  const auto pred = predict(model, ds, batch_size);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == ds.labels[i] ? 1 : 0;
  return 100.0 * (1.0 - static_cast<double>(correct) / static_cast<double>(ds.size()));
}

namespace {

double median(std::vector<double> xs) {
  if (xs.empty()) return 0.0;
  const auto mid = xs.begin() + static_cast<std::ptrdiff_t>(xs.size() / 2);
  std::nth_element(xs.begin(), mid, xs.end());
  if (xs.size() % 2 == 1) return *mid;
  const double upper = *mid;
  const double lower = *std::max_element(xs.begin(), mid);
  return 0.5 * (lower + upper);
}

}  // namespace

template <typename T>
TrainReport train(Model<T>& model, const Dataset& train_ds, const Dataset& test_ds,
                  const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  for (const Dataset* ds : {&train_ds, &test_ds}) {
    if (ds->channels != static_cast<std::size_t>(model.spec.in_channels)) {
      throw ConfigError("train: dataset has " + std::to_string(ds->channels) +
                        " channels, model expects " + std::to_string(model.spec.in_channels));
    }
  }
  if (train_ds.size() == 0 || test_ds.size() == 0) throw DomainError("train: empty dataset");

  TrainReport report;
  if (!cfg.checkpoint.empty()) save_checkpoint(model, cfg.checkpoint);

  BatchPlan plan;
  plan.batch_size = cfg.batch_size;
  plan.seed = cfg.seed;
  plan.crop_pad = cfg.crop_pad;

  auto params = model.parameters();
  SgdMomentum<T> opt(cfg.momentum, cfg.weight_decay);
  Tape<T> tape;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    const auto plan_batches = batch_indices(train_ds.size(), plan, static_cast<std::uint64_t>(epoch));
    double loss_sum = 0;
    std::size_t correct = 0, seen = 0;
    std::vector<double> times;
    times.reserve(plan_batches.size());

    for (std::size_t it = 0; it < plan_batches.size(); ++it) {
      const auto batch = make_batch<T>(train_ds, plan_batches[it], plan, static_cast<std::uint64_t>(epoch), it);
      const auto t_start = std::chrono::steady_clock::now();
      double loss_value = 0;
      try {
        tape.reset();
        Tensor<T> logits, loss;
        {
          auto active = tape.activate();
          logits = model.forward(batch.images);
          loss = cross_entropy(logits, std::span<const int>(batch.labels));
        }
        loss_value = static_cast<double>(loss.item());
        tape.backward(loss);
        const auto pred = argmax_rows(logits);
        for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch.labels[i] ? 1 : 0;
      } catch (const OverflowError& e) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", iteration " +
                              std::to_string(it) + ": " + e.what());
      } catch (const DivergenceError& e) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", iteration " +
                              std::to_string(it) + ": " + e.what());
      }
      if (!std::isfinite(loss_value)) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", iteration " +
                              std::to_string(it) + ": non-finite loss");
      }
      opt.step(params, lr);
      tape.reset();
      times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count());
      loss_sum += loss_value * static_cast<double>(batch.labels.size());
      seen += batch.labels.size();
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    rec.train_acc = seen ? 100.0 * static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    rec.test_error_pct = evaluate(model, test_ds, cfg.eval_batch_size);
    rec.sec_per_iter = median(std::move(times));
    report.epochs.push_back(rec);
    if (rec.test_error_pct < report.best_test_error_pct || report.best_epoch < 0) {
      report.best_test_error_pct = rec.test_error_pct;
      report.best_epoch = epoch;
      if (!cfg.checkpoint.empty()) save_checkpoint(model, cfg.checkpoint);
    }
    if (on_epoch) on_epoch(rec);
  }
  return report;
}

void write_report_csv(std::ostream& os, const TrainReport& report) {
  os << "epoch,lr,train_loss,train_acc,test_error_pct\n";
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& r : report.epochs) {
    os << r.epoch << ',' << r.lr << ',' << r.train_loss << ',' << r.train_acc << ',' << r.test_error_pct
       << '\n';
  }
}

void write_timing_csv(std::ostream& os, const TrainReport& report) {
  os << "epoch,sec_per_iter\n";
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& r : report.epochs) os << r.epoch << ',' << r.sec_per_iter << '\n';
}

#define GODE_INSTANTIATE_TRAINER(T)                                                                  \
  template void sgd_momentum_step<T>(std::span<T>, std::span<const T>, std::span<T>, double, double, \
                                     double);                                                        \
  template class SgdMomentum<T>;                                                                     \
  template std::vector<int> argmax_rows<T>(const Tensor<T>&);                                        \
  template std::vector<int> predict<T>(const Model<T>&, const Dataset&, std::size_t);                \
  template double evaluate<T>(const Model<T>&, const Dataset&, std::size_t);                         \
  template TrainReport train<T>(Model<T>&, const Dataset&, const Dataset&, const TrainConfig&,       \
                                const EpochCallback&);

GODE_INSTANTIATE_TRAINER(float)
GODE_INSTANTIATE_TRAINER(double)

}  // namespace gode
