#pragma once

#include <cstdio>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "covidfact/capsule.hpp"
#include "covidfact/models.hpp"
#include "covidfact/pipeline.hpp"

namespace covidfact {

struct TrainingConfig {
  int epochs = 100;
  std::size_t batch_size = 16;
  double learning_rate = 1e-4;
  std::uint64_t seed = 42;
  MarginLossParams margin;
};

struct LabeledSlice {
  Tensor pixels;  // [H,W]
  bool positive = false;
  std::string patient_id;
  std::size_t slice_index = 0;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  long n_pos = 0, n_neg = 0;
};

inline std::string loss_log_csv(const std::vector<EpochLog>& log) {
  std::string out = "epoch,train_loss,val_loss,val_accuracy\n";
  char line[160];
  for (const auto& e : log) {
    std::snprintf(line, sizeof(line), "%d,%.17g,%.17g,%.17g\n", e.epoch, e.train_loss, e.val_loss, e.val_accuracy);
    out += line;
  }
  return out;
}

namespace detail {

inline Tensor batch_of(const std::vector<LabeledSlice>& data, std::span<const std::size_t> idx) {
  const std::size_t H = data[idx[0]].pixels.dim(0), W = data[idx[0]].pixels.dim(1);
  Tensor x({idx.size(), 1, H, W});
  for (std::size_t k = 0; k < idx.size(); ++k)
    std::copy(data[idx[k]].pixels.data().begin(), data[idx[k]].pixels.data().end(), x.data().begin() + k * H * W);
  return x;
}

inline Tensor onehot_of(const std::vector<LabeledSlice>& data, std::span<const std::size_t> idx) {
  Tensor t({idx.size(), 2});
  for (std::size_t k = 0; k < idx.size(); ++k) t[k * 2 + (data[idx[k]].positive ? kPositiveClass : kNegativeClass)] = 1.0;
  return t;
}

// Weighted margin loss of a batch, divided by the batch size. Class counts
// are those of the whole training set.
inline Var batch_loss(Graph& g, ModelBundle& m, const std::vector<LabeledSlice>& data, std::span<const std::size_t> idx,
                      long n_pos, long n_neg, const MarginLossParams& margin) {
  const auto f = m.forward(g, g.constant(batch_of(data, idx)));
  Var per_sample = margin_loss_per_sample(f.lengths, onehot_of(data, idx), margin);
  Tensor pos_mask({idx.size()}), neg_mask({idx.size()});
  for (std::size_t k = 0; k < idx.size(); ++k) (data[idx[k]].positive ? pos_mask : neg_mask)[k] = 1.0;
  Var loss_pos = reduce_sum(mul(per_sample, g.constant(std::move(pos_mask))));
  Var loss_neg = reduce_sum(mul(per_sample, g.constant(std::move(neg_mask))));
  return scale(weighted_loss(loss_pos, loss_neg, n_pos, n_neg), 1.0 / static_cast<double>(idx.size()));
}

struct Snapshot {
  std::vector<Tensor> params, buffers;
};

inline Snapshot snapshot(ModelBundle& m) {
  Snapshot s;
  for (auto* p : m.parameters()) s.params.push_back(p->value);
  for (auto& [_, t] : m.buffers()) s.buffers.push_back(*t);
  return s;
}

inline void restore(ModelBundle& m, const Snapshot& s) {
  auto ps = m.parameters();
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->value = s.params[i];
  auto bs = m.buffers();
  for (std::size_t i = 0; i < bs.size(); ++i) *bs[i].second = s.buffers[i];
}

}  // namespace detail

// Mean weighted loss and argmax accuracy over a data set, infer mode.
inline std::pair<double, double> evaluate_loss(ModelBundle& m, const std::vector<LabeledSlice>& data, long n_pos, long n_neg,
                                               const MarginLossParams& margin, std::size_t chunk = 64) {
  const Mode saved = m.mode;
  m.mode = Mode::infer;
  double loss = 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t b = 0; b < data.size(); b += chunk) {
    idx.clear();
    for (std::size_t k = b; k < std::min(data.size(), b + chunk); ++k) idx.push_back(k);
    Graph g(false);
    Var l = detail::batch_loss(g, m, data, idx, n_pos, n_neg, margin);
    loss += l.value()[0] * static_cast<double>(idx.size());
    // recompute lengths cheaply from the same graph would need the forward
    // handle; a second pass keeps batch_loss simple
    const Tensor lens = m.predict(detail::batch_of(data, idx));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const bool pred = lens[k * 2 + kPositiveClass] > lens[k * 2 + kNegativeClass];
      correct += pred == data[idx[k]].positive ? 1 : 0;
    }
  }
  m.mode = saved;
  return {loss / static_cast<double>(data.size()), static_cast<double>(correct) / static_cast<double>(data.size())};
}

// Adam on the weighted margin loss; after every epoch the validation loss is
// measured and the parameters with the lowest one are kept (restored into
// `m` on return). With an empty validation set the training loss decides.
inline TrainResult train_model(ModelBundle& m, const std::vector<LabeledSlice>& train, const std::vector<LabeledSlice>& val,
                               const TrainingConfig& cfg, const std::function<void(const EpochLog&)>& on_epoch = {}) {
  if (cfg.epochs < 1) throw ConfigError("training needs at least one epoch (epochs=" + std::to_string(cfg.epochs) + ")");
  if (cfg.batch_size < 2) throw ConfigError("batch_size must be at least 2 (batch normalisation)");
  if (train.size() < 2) throw DataError("training set has fewer than 2 slices");
  TrainResult res;
  for (const auto& s : train) (s.positive ? res.n_pos : res.n_neg)++;
  Rng rng(cfg.seed);
  AdamState adam;
  adam.lr = cfg.learning_rate;
  const auto params = m.parameters();
  for (auto* p : params) p->zero_grad();
  detail::Snapshot best;
  std::vector<std::size_t> order(train.size());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    std::vector<std::span<const std::size_t>> batches;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size)
      batches.emplace_back(order.data() + b, std::min(cfg.batch_size, order.size() - b));
    if (batches.size() > 1 && batches.back().size() == 1) {
      const auto last = batches.back();
      batches.pop_back();
      batches.back() = std::span<const std::size_t>(batches.back().data(), batches.back().size() + last.size());
    }
    m.mode = Mode::train;
    double epoch_loss = 0.0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      try {
        Graph g;
        Var loss = detail::batch_loss(g, m, train, batches[bi], res.n_pos, res.n_neg, cfg.margin);
        g.backward(loss);
        adam_step(params, adam);
        epoch_loss += loss.value()[0];
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(bi + 1) + ": " + e.what());
      }
    }
    m.mode = Mode::infer;
    EpochLog log{epoch, epoch_loss / static_cast<double>(batches.size()), 0.0, 0.0};
    std::tie(log.val_loss, log.val_accuracy) =
        evaluate_loss(m, val.empty() ? train : val, res.n_pos, res.n_neg, cfg.margin);
    res.log.push_back(log);
    if (on_epoch) on_epoch(log);
    if (epoch == 1 || log.val_loss < res.best_val_loss) {
      res.best_val_loss = log.val_loss;
      res.best_epoch = epoch;
      best = detail::snapshot(m);
    }
  }
  detail::restore(m, best);
  m.mode = Mode::infer;
  return res;
}

// Stage-one samples: every preprocessed slice that carries an infection label.
inline std::vector<LabeledSlice> stage1_samples(const std::vector<Volume>& volumes) {
  std::vector<LabeledSlice> out;
  for (const auto& v : volumes)
    for (const auto& s : v.slices)
      if (s.infection_label) out.push_back({s.pixels, *s.infection_label, v.patient_id, s.source_index});
  return out;
}

// Stage-two samples: the slices stage one selects, labelled by whether the
// patient is a COVID case. Patients with unknown labels are skipped.
inline std::vector<LabeledSlice> stage2_samples(const std::vector<Volume>& volumes, const SliceScorer& stage1,
                                                const PipelineConfig& cfg) {
  std::vector<LabeledSlice> out;
  for (const auto& v : volumes) {
    if (v.label == Label::unknown) continue;
    const auto r = stage1_filter(v, stage1, cfg);
    for (std::size_t k : r.selected)
      out.push_back({v.slices[k].pixels, v.label == Label::covid, v.patient_id, v.slices[k].source_index});
  }
  return out;
}

}  // namespace covidfact
