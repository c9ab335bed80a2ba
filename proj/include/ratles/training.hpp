#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ratles/model.hpp"
#include "ratles/volume.hpp"

namespace ratles {

struct TrainConfig {
  double learning_rate = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int64_t epochs = 700;
  int64_t batch_size = 1;
  uint64_t seed = 0;

  void validate() const;
};

// `prob` is the rank-5 softmax output (channel 1 = lesion probability q);
// `target` is rank-5 single-channel with values in {0,1}.

// -(1/N) sum[p log q + (1-p) log(1-q)], q clamped to [1e-12, 1-1e-12].
Tensor bce_loss(const Tensor& prob, const Tensor& target);

// 1 - 2 sum(p q) / (sum p^2 + sum q^2 + 1e-12).
Tensor dice_loss(const Tensor& prob, const Tensor& target);

// bce_loss + dice_loss, unweighted.
Tensor total_loss(const Tensor& prob, const Tensor& target);

struct AdamState {
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
  int64_t t = 0;
};

// One bias-corrected Adam update over the named parameters, consuming their
// gradients (a missing gradient counts as zero). Throws NumericalError on a
// non-finite gradient, naming the parameter.
void adam_step(std::vector<NamedParam>& params, AdamState& state, const TrainConfig& cfg);

struct TrainSample {
  std::string id;
  Volume image;
  Mask label;
};

struct EpochMetrics {
  int64_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  std::optional<double> val_loss;
  std::optional<double> val_dice;
};

// Optimizer and progress state carried inside checkpoints so an interrupted
// run resumes bit-exactly.
struct TrainState {
  AdamState adam;
  int64_t epochs_done = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  std::string last_checkpoint;  // serialized checkpoint container bytes
  std::string best_checkpoint;  // lowest validation loss (last epoch when no val set)
  double final_train_loss = 0.0;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

// Runs cfg.epochs passes over the training set in seeded shuffled order
// (reshuffled per epoch; samples are normalized and zero-padded up front).
// After each epoch the validation set is scored in eval mode.
TrainResult train(Model& model, const std::vector<TrainSample>& train_set,
                  const std::vector<TrainSample>& val_set, const TrainConfig& cfg,
                  const TrainState* resume = nullptr, const EpochCallback& on_epoch = {});

// CSV with header epoch,train_loss,val_loss,val_dice.
std::string metrics_csv(const std::vector<EpochMetrics>& history);

// Voxelwise 2-of-3 vote; exactly three masks of identical geometry.
Mask majority_vote(const std::vector<Mask>& masks);

}  // namespace ratles
