#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "changedet/dataset.hpp"
#include "changedet/metrics.hpp"
#include "changedet/model.hpp"
#include "changedet/pseudochange.hpp"

namespace changedet {

// Sum of the two branch binary cross-entropies, each averaged over pixels.
ag::Var change_loss(const ag::Var& semantic, const ag::Var& difference, const ag::Tensor& truth);

// change_loss plus lambda times the two single-temporal segmentation
// cross-entropies. seg targets: (N,H,W) class ids stored as floats.
ag::Var pretrain_loss(const ag::Var& semantic, const ag::Var& difference, const ag::Var& seg_a,
                      const ag::Var& seg_b, const ag::Tensor& change_truth,
                      const ag::Tensor& seg_truth_a, const ag::Tensor& seg_truth_b, float lambda);

// Sum of three binary cross-entropies: both branches plus the fused map.
ag::Var finetune_loss(const ag::Var& semantic, const ag::Var& difference, const ag::Var& fused,
                      const ag::Tensor& truth);

// Exponential schedule lr0 * gamma^epoch.
double lr_at(int epoch, double lr0, double gamma);

struct SgdConfig {
  float momentum = 0.9f;
  float weight_decay = 0.0005f;
};

// Stochastic gradient descent with momentum and weight decay:
// v <- momentum * v + grad + weight_decay * theta;  theta <- theta - lr * v.
class Sgd {
 public:
  Sgd(std::vector<std::pair<std::string, ag::Var>> params, SgdConfig cfg);

  void step(float lr);
  void zero_grad();

  const std::vector<std::pair<std::string, ag::Var>>& params() const { return params_; }
  std::vector<std::pair<std::string, ag::Tensor>> state() const;  // velocity per parameter
  void load_state(const std::vector<std::pair<std::string, ag::Tensor>>& state);

 private:
  SgdConfig cfg_;
  std::vector<std::pair<std::string, ag::Var>> params_;
  std::vector<ag::Tensor> velocity_;
};

struct TrainConfig {
  TrainPhase phase = TrainPhase::finetune;
  double lr0 = 0.01;
  int epochs = 50;
  int batch_size = 4;
  double gamma = 0.97;
  float lambda_seg = 1.0f;
  float momentum = 0.9f;
  float weight_decay = 0.0005f;
  int samples_per_epoch = 9000;  // pre-training stream budget
  double threshold = 0.5;
  std::uint64_t seed = 0;
};

struct CheckpointMeta {
  int epoch = 0;
  std::string phase;
  std::uint64_t config_hash = 0;
};

// Snapshots every model parameter and buffer (never the frozen encoder,
// which is not part of the module tree) plus optimizer velocities when
// given. Float bits round-trip exactly.
void save_checkpoint(const std::filesystem::path& path, nn::Module& model, const Sgd* optimizer,
                     const CheckpointMeta& meta);
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);
CheckpointMeta load_checkpoint(const std::filesystem::path& path, nn::Module& model,
                               Sgd* optimizer);

struct PretrainBatch {
  ag::Tensor images_a;  // (N,3,H,W), normalized
  ag::Tensor images_b;
  ag::Tensor change;  // (N,1,H,W) 0/1
  ag::Tensor seg_a;   // (N,H,W) class ids
  ag::Tensor seg_b;
};

struct ChangeBatch {
  ag::Tensor images_a;
  ag::Tensor images_b;
  ag::Tensor change;
};

PretrainBatch make_pretrain_batch(const std::vector<PseudoChangeSample>& samples,
                                  const Normalizer& normalizer);
ChangeBatch make_change_batch(const std::vector<const ChangePair*>& pairs,
                              const Normalizer& normalizer);

struct StepStats {
  double total = 0.0;
  double change_semantic = 0.0;
  double change_difference = 0.0;
  double seg = 0.0;    // pretrain only
  double fused = 0.0;  // finetune only
};

StepStats pretrain_step(ChangeDetNet& model, Sgd& optimizer, const PretrainBatch& batch, float lr,
                        float lambda);
StepStats finetune_step(ChangeDetNet& model, Sgd& optimizer, const ChangeBatch& batch, float lr);

// Micro-averaged metrics of one branch over labeled pairs (evaluation mode,
// batch of one pair at a time).
MetricsReport evaluate_pairs(ChangeDetNet& model, const std::vector<ChangePair>& pairs,
                             double threshold, PredictBranch branch, const Normalizer& normalizer);
MetricsReport evaluate_dataset(ChangeDetNet& model, const ChangePairDataset& dataset,
                               double threshold, PredictBranch branch,
                               const Normalizer& normalizer);

// Full pre-training loop over the online pseudo-change stream: per-epoch
// checkpoints `epoch_<n>.ckpt` and a train_log.txt under run_dir. Throws
// NumericError with epoch/step/loss-history diagnostics if the loss leaves
// the finite range.
void run_pretrain(ChangeDetNet& model, const TrainConfig& cfg, const DatasetManifest& manifest,
                  const std::vector<SourceDataset>& sources, const AugmentConfig& augment_cfg,
                  const Normalizer& normalizer, const std::filesystem::path& run_dir,
                  std::uint64_t config_hash);

// Fine-tuning loop over a labeled bi-temporal dataset, optionally starting
// from a pre-training checkpoint (validated against config_hash).
void run_finetune(ChangeDetNet& model, const TrainConfig& cfg, const ChangePairDataset& train,
                  const ChangePairDataset* val, const Normalizer& normalizer,
                  const std::filesystem::path& run_dir, std::uint64_t config_hash,
                  const std::optional<std::filesystem::path>& init_checkpoint);

}  // namespace changedet
