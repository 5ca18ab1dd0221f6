#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "mhss/errors.hpp"
#include "mhss/hsi.hpp"
#include "mhss/model.hpp"
#include "mhss/rng.hpp"
#include "mhss/tensor.hpp"

namespace mhss {

// ---------------------------------------------------------------------------
// Training configuration.
// ---------------------------------------------------------------------------
struct TrainConfig {
  double learning_rate = 0.001;
  std::size_t epochs = 50;
  std::size_t batch_size = 256;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 1;
  bool shuffle = true;

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
      throw ConfigError("adam betas must lie in [0, 1)");
    }
    if (!(eps > 0)) throw ConfigError("adam eps must be > 0");
  }
};

// ---------------------------------------------------------------------------
// Adam.
// ---------------------------------------------------------------------------
struct AdamState {
  std::vector<std::vector<double>> m;  // first moments, one slab per tensor
  std::vector<std::vector<double>> v;  // second moments
  std::uint64_t t = 0;

  explicit AdamState(const ModelParams& params) {
    params.for_each([&](const std::string&, const Tensor& p) {
      m.emplace_back(p.size(), 0.0);
      v.emplace_back(p.size(), 0.0);
    });
  }
};

/// One standard Adam update over every parameter tensor, reading the grads
/// accumulated by backward(). A parameter with no populated grad counts as
/// zero gradient; a non-finite gradient aborts with the parameter's name.
inline void adam_step(ModelParams& params, AdamState& state, const TrainConfig& cfg) {
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  std::size_t slot = 0;
  params.for_each([&](const std::string& name, Tensor& p) {
    std::vector<double>& m = state.m.at(slot);
    std::vector<double>& v = state.v.at(slot);
    ++slot;
    const bool has_grad = p.has_grad();
    std::vector<double>& theta = p.data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double g = has_grad ? p.grad()[i] : 0.0;
      if (!std::isfinite(g)) {
        throw NumericError("adam_step: non-finite gradient in " + name + " at element " +
                           std::to_string(i));
      }
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      theta[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  });
}

// ---------------------------------------------------------------------------
// Metrics.
// ---------------------------------------------------------------------------
struct Metrics {
  std::size_t num_classes = 0;
  std::vector<std::uint64_t> confusion;  // K*K, rows = truth, cols = prediction
  double oa = 0.0;
  double aa = 0.0;
  double kappa = 0.0;

  std::uint64_t at(std::size_t truth, std::size_t pred) const {
    return confusion[truth * num_classes + pred];
  }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (std::uint64_t c : confusion) t += c;
    return t;
  }

  /// Recall of one class, or -1 when the class has no true samples.
  double recall(std::size_t k) const {
    std::uint64_t row = 0;
    for (std::size_t j = 0; j < num_classes; ++j) row += at(k, j);
    if (row == 0) return -1.0;
    return static_cast<double>(at(k, k)) / static_cast<double>(row);
  }
};

/// OA = trace/total; AA = mean recall over classes that actually occur;
/// kappa = (p_o - p_e) / (1 - p_e) with p_e from the row/column marginals.
/// A perfectly concentrated p_e = 1 only happens for diagonal matrices, so
/// that edge maps to kappa = 1.
inline Metrics compute_metrics(const std::vector<std::uint64_t>& confusion,
                               std::size_t num_classes) {
  if (confusion.size() != num_classes * num_classes) {
    throw ContractError("compute_metrics: confusion size does not match class count");
  }
  Metrics m;
  m.num_classes = num_classes;
  m.confusion = confusion;
  const std::uint64_t total = m.total();
  if (total == 0) throw ContractError("compute_metrics: empty confusion matrix");

  std::uint64_t trace = 0;
  std::vector<std::uint64_t> row_sum(num_classes, 0), col_sum(num_classes, 0);
  for (std::size_t i = 0; i < num_classes; ++i) {
    trace += m.at(i, i);
    for (std::size_t j = 0; j < num_classes; ++j) {
      row_sum[i] += m.at(i, j);
      col_sum[j] += m.at(i, j);
    }
  }
  const double dt = static_cast<double>(total);
  m.oa = static_cast<double>(trace) / dt;

  double recall_sum = 0.0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < num_classes; ++k) {
    const double r = m.recall(k);
    if (r >= 0.0) {
      recall_sum += r;
      ++present;
    }
  }
  m.aa = present ? recall_sum / static_cast<double>(present) : 0.0;

  double pe = 0.0;
  for (std::size_t k = 0; k < num_classes; ++k) {
    pe += static_cast<double>(row_sum[k]) * static_cast<double>(col_sum[k]) / (dt * dt);
  }
  m.kappa = 1.0 - pe < 1e-15 ? 1.0 : (m.oa - pe) / (1.0 - pe);
  return m;
}

/// Runs the model over the listed samples (no gradients) and scores the
/// predictions against the center labels.
inline Metrics evaluate(const ModelParams& params, const PatchSet& set,
                        const std::vector<std::size_t>& indices, std::size_t batch_size = 256) {
  if (indices.empty()) throw ContractError("evaluate: empty index list");
  const std::size_t k = params.hp.num_classes;
  std::vector<std::uint64_t> confusion(k * k, 0);
  NoGradGuard no_grad;
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const std::size_t end = std::min(indices.size(), start + batch_size);
    const std::vector<std::size_t> batch(indices.begin() + start, indices.begin() + end);
    const std::vector<std::size_t> pred = predict(forward(set, batch, params));
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const std::uint16_t label = set.center_labels[batch[i]];
      if (label == 0 || label > k) {
        throw ContractError("evaluate: sample " + std::to_string(batch[i]) + " has label " +
                            std::to_string(label) + ", outside 1.." + std::to_string(k));
      }
      confusion[(label - 1) * k + pred[i]] += 1;
    }
  }
  return compute_metrics(confusion, k);
}

/// Plain-text table: one recall row per class, then OA/AA/kappa.
inline std::string format_metrics(const Metrics& m) {
  std::string out = "class  samples  recall   (per-class values are recall)\n";
  char buf[128];
  for (std::size_t k = 0; k < m.num_classes; ++k) {
    std::uint64_t row = 0;
    for (std::size_t j = 0; j < m.num_classes; ++j) row += m.at(k, j);
    const double r = m.recall(k);
    if (r < 0.0) {
      std::snprintf(buf, sizeof(buf), "%5zu  %7llu  %s\n", k + 1,
                    static_cast<unsigned long long>(row), "   -  ");
    } else {
      std::snprintf(buf, sizeof(buf), "%5zu  %7llu  %.4f\n", k + 1,
                    static_cast<unsigned long long>(row), r);
    }
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "OA     %.4f\nAA     %.4f\nkappa  %.4f\n", m.oa, m.aa, m.kappa);
  out += buf;
  return out;
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------
struct EpochRow {
  std::size_t epoch = 0;      // 1-based
  double train_loss = 0.0;    // mean cross-entropy over the epoch's samples
  double val_oa = 0.0;        // 0 when there is no validation split
  double seconds = 0.0;       // wall time, the one non-deterministic column
};

struct TrainLog {
  std::vector<EpochRow> rows;

  std::string to_csv() const {
    std::string out = "epoch,train_loss,val_oa,seconds\n";
    char buf[160];
    for (const EpochRow& r : rows) {
      std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f,%.3f\n", r.epoch, r.train_loss, r.val_oa,
                    r.seconds);
      out += buf;
    }
    return out;
  }
};

/// Epochs of shuffled mini-batches with Adam. Shuffle order comes from a
/// dedicated per-epoch RNG stream, so it is independent of how many draws
/// initialization used. The last short batch is kept. Writes a checkpoint
/// to `checkpoint_path` when non-empty; streams one progress line per epoch
/// to `progress` when non-null.
inline TrainLog train(const PatchSet& set, const SplitIndices& splits, ModelParams& params,
                      const TrainConfig& cfg, const std::string& checkpoint_path = "",
                      std::ostream* progress = nullptr) {
  cfg.validate();
  if (splits.train.empty()) throw ContractError("train: empty training split");

  AdamState state(params);
  TrainLog log;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order = splits.train;
    if (cfg.shuffle) {
      Rng epoch_rng = Rng::stream(cfg.seed, epoch);
      shuffle(order, epoch_rng);
    }
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::vector<std::size_t> batch(order.begin() + start, order.begin() + end);
      std::vector<std::size_t> labels(batch.size());
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const std::uint16_t l = set.center_labels[batch[i]];
        if (l == 0 || l > params.hp.num_classes) {
          throw ContractError("train: sample " + std::to_string(batch[i]) + " has label " +
                              std::to_string(l) + ", outside 1.." +
                              std::to_string(params.hp.num_classes));
        }
        labels[i] = l - 1;
      }
      Tensor logits = forward(set, batch, params);
      Tensor loss = cross_entropy(logits, labels);
      params.for_each([](const std::string&, Tensor& p) { p.zero_grad(); });
      backward(loss);
      adam_step(params, state, cfg);
      loss_sum += loss.value() * static_cast<double>(batch.size());
    }

    EpochRow row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(order.size());
    row.val_oa = splits.val.empty() ? 0.0 : evaluate(params, set, splits.val, cfg.batch_size).oa;
    row.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.rows.push_back(row);
    if (progress) {
      char buf[160];
      std::snprintf(buf, sizeof(buf), "epoch %zu/%zu  train_loss %.6f  val_oa %.6f  (%.2fs)\n",
                    epoch, cfg.epochs, row.train_loss, row.val_oa, row.seconds);
      *progress << buf << std::flush;
    }
  }
  if (!checkpoint_path.empty()) save_params(params, checkpoint_path);
  return log;
}

}  // namespace mhss
