#include "changedet/training.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "changedet/errors.hpp"
#include "changedet/serialize.hpp"

namespace changedet {

namespace {

using json = nlohmann::json;

std::string format_loss_history(const std::deque<double>& history) {
  std::ostringstream out;
  for (std::size_t i = 0; i < history.size(); ++i) {
    if (i) out << " ";
    out << history[i];
  }
  return out.str();
}

void append_log_line(std::ofstream& log, TrainPhase phase, int epoch, double lr,
                     const StepStats& mean_stats, const MetricsReport* val) {
  log << epoch << " " << lr << " " << mean_stats.total << " " << mean_stats.change_semantic << " "
      << mean_stats.change_difference << " ";
  if (phase == TrainPhase::pretrain) log << mean_stats.seg << " -";
  else log << "- " << mean_stats.fused;
  if (val) {
    log << " " << val->precision << " " << val->recall << " " << val->f1 << " " << val->iou;
  } else {
    log << " - - - -";
  }
  log << "\n";
  log.flush();
}

}  // namespace

ag::Var change_loss(const ag::Var& semantic, const ag::Var& difference, const ag::Tensor& truth) {
  return ag::add(ag::bce_mean(semantic, truth), ag::bce_mean(difference, truth));
}

ag::Var pretrain_loss(const ag::Var& semantic, const ag::Var& difference, const ag::Var& seg_a,
                      const ag::Var& seg_b, const ag::Tensor& change_truth,
                      const ag::Tensor& seg_truth_a, const ag::Tensor& seg_truth_b, float lambda) {
  if (lambda < 0.0f) throw DomainError("segmentation loss weight must be non-negative");
  const ag::Var change = change_loss(semantic, difference, change_truth);
  const ag::Var seg =
      ag::add(ag::ce_mean(seg_a, seg_truth_a), ag::ce_mean(seg_b, seg_truth_b));
  return ag::add(change, ag::scale(seg, lambda));
}

ag::Var finetune_loss(const ag::Var& semantic, const ag::Var& difference, const ag::Var& fused,
                      const ag::Tensor& truth) {
  return ag::add(change_loss(semantic, difference, truth), ag::bce_mean(fused, truth));
}

double lr_at(int epoch, double lr0, double gamma) {
  if (lr0 <= 0.0) throw DomainError("learning rate must be positive");
  return lr0 * std::pow(gamma, epoch);
}

Sgd::Sgd(std::vector<std::pair<std::string, ag::Var>> params, SgdConfig cfg)
    : cfg_(cfg), params_(std::move(params)) {
  velocity_.reserve(params_.size());
  for (const auto& [name, p] : params_) {
    velocity_.emplace_back(p.value().shape());
  }
}

void Sgd::step(float lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ag::Tensor& theta = params_[i].second.value();
    const ag::Tensor& grad = params_[i].second.grad();
    ag::Tensor& v = velocity_[i];
    for (std::int64_t j = 0; j < theta.numel(); ++j) {
      v[j] = cfg_.momentum * v[j] + grad[j] + cfg_.weight_decay * theta[j];
      theta[j] -= lr * v[j];
    }
  }
}

void Sgd::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

std::vector<std::pair<std::string, ag::Tensor>> Sgd::state() const {
  std::vector<std::pair<std::string, ag::Tensor>> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.emplace_back(params_[i].first, velocity_[i]);
  }
  return out;
}

void Sgd::load_state(const std::vector<std::pair<std::string, ag::Tensor>>& state) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    for (const auto& [name, v] : state) {
      if (name == params_[i].first) {
        if (!v.same_shape(velocity_[i])) {
          throw ShapeError("optimizer state for '" + name + "' has shape " + v.shape_str() +
                           ", parameter is " + velocity_[i].shape_str());
        }
        velocity_[i] = v;
        break;
      }
    }
  }
}

void save_checkpoint(const std::filesystem::path& path, nn::Module& model, const Sgd* optimizer,
                     const CheckpointMeta& meta) {
  TensorArchive archive;
  json meta_json;
  meta_json["kind"] = "checkpoint";
  meta_json["epoch"] = meta.epoch;
  meta_json["phase"] = meta.phase;
  meta_json["config_hash"] = meta.config_hash;
  archive.meta_json = meta_json.dump();

  std::map<std::string, ag::Tensor> state;
  model.collect_state("", state);
  for (const auto& [name, tensor] : state) {
    archive.tensors.emplace_back("model/" + name, tensor);
  }
  if (optimizer) {
    for (const auto& [name, tensor] : optimizer->state()) {
      archive.tensors.emplace_back("opt/" + name, tensor);
    }
  }
  save_archive(path, archive);
}

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path) {
  const TensorArchive archive = load_archive(path);
  const json meta_json = json::parse(archive.meta_json);
  CheckpointMeta meta;
  meta.epoch = meta_json.value("epoch", 0);
  meta.phase = meta_json.value("phase", std::string());
  meta.config_hash = meta_json.value("config_hash", std::uint64_t{0});
  return meta;
}

CheckpointMeta load_checkpoint(const std::filesystem::path& path, nn::Module& model,
                               Sgd* optimizer) {
  const TensorArchive archive = load_archive(path);
  const json meta_json = json::parse(archive.meta_json);
  if (meta_json.value("kind", std::string()) != "checkpoint") {
    throw IoError("not a checkpoint file: " + path.string());
  }

  std::map<std::string, ag::Tensor> model_state;
  std::vector<std::pair<std::string, ag::Tensor>> opt_state;
  for (const auto& [name, tensor] : archive.tensors) {
    if (name.rfind("model/", 0) == 0) model_state.emplace(name.substr(6), tensor);
    else if (name.rfind("opt/", 0) == 0) opt_state.emplace_back(name.substr(4), tensor);
  }
  model.load_state("", model_state);
  if (optimizer) optimizer->load_state(opt_state);

  CheckpointMeta meta;
  meta.epoch = meta_json.value("epoch", 0);
  meta.phase = meta_json.value("phase", std::string());
  meta.config_hash = meta_json.value("config_hash", std::uint64_t{0});
  return meta;
}

PretrainBatch make_pretrain_batch(const std::vector<PseudoChangeSample>& samples,
                                  const Normalizer& normalizer) {
  std::vector<ag::Tensor> images_a, images_b;
  std::vector<const Mask*> change, seg_a, seg_b;
  for (const auto& s : samples) {
    images_a.push_back(normalizer(s.image_a));
    images_b.push_back(normalizer(s.image_b));
    change.push_back(&s.change);
    seg_a.push_back(&s.seg_a);
    seg_b.push_back(&s.seg_b);
  }
  PretrainBatch batch;
  batch.images_a = stack_images(images_a);
  batch.images_b = stack_images(images_b);
  batch.change = stack_masks(change);
  batch.seg_a = stack_class_masks(seg_a);
  batch.seg_b = stack_class_masks(seg_b);
  return batch;
}

ChangeBatch make_change_batch(const std::vector<const ChangePair*>& pairs,
                              const Normalizer& normalizer) {
  std::vector<ag::Tensor> images_a, images_b;
  std::vector<const Mask*> change;
  for (const ChangePair* p : pairs) {
    images_a.push_back(normalizer(p->image_a));
    images_b.push_back(normalizer(p->image_b));
    change.push_back(&p->label);
  }
  ChangeBatch batch;
  batch.images_a = stack_images(images_a);
  batch.images_b = stack_images(images_b);
  batch.change = stack_masks(change);
  return batch;
}

StepStats pretrain_step(ChangeDetNet& model, Sgd& optimizer, const PretrainBatch& batch, float lr,
                        float lambda) {
  ModelOutput out = model.forward(batch.images_a, batch.images_b, TrainPhase::pretrain);
  const ag::Var bce_s = ag::bce_mean(out.semantic, batch.change);
  const ag::Var bce_c = ag::bce_mean(out.difference, batch.change);
  const ag::Var seg = ag::add(ag::ce_mean(out.seg_a, batch.seg_a), ag::ce_mean(out.seg_b, batch.seg_b));
  const ag::Var total = ag::add(ag::add(bce_s, bce_c), ag::scale(seg, lambda));

  StepStats stats;
  stats.change_semantic = bce_s.value()[0];
  stats.change_difference = bce_c.value()[0];
  stats.seg = seg.value()[0];
  stats.total = total.value()[0];
  if (std::isfinite(stats.total)) {
    optimizer.zero_grad();
    ag::backward(total);
    optimizer.step(lr);
  }
  return stats;
}

StepStats finetune_step(ChangeDetNet& model, Sgd& optimizer, const ChangeBatch& batch, float lr) {
  ModelOutput out = model.forward(batch.images_a, batch.images_b, TrainPhase::finetune);
  const ag::Var bce_s = ag::bce_mean(out.semantic, batch.change);
  const ag::Var bce_c = ag::bce_mean(out.difference, batch.change);
  const ag::Var bce_f = ag::bce_mean(out.fused, batch.change);
  const ag::Var total = ag::add(ag::add(bce_s, bce_c), bce_f);

  StepStats stats;
  stats.change_semantic = bce_s.value()[0];
  stats.change_difference = bce_c.value()[0];
  stats.fused = bce_f.value()[0];
  stats.total = total.value()[0];
  if (std::isfinite(stats.total)) {
    optimizer.zero_grad();
    ag::backward(total);
    optimizer.step(lr);
  }
  return stats;
}

MetricsReport evaluate_pairs(ChangeDetNet& model, const std::vector<ChangePair>& pairs,
                             double threshold, PredictBranch branch,
                             const Normalizer& normalizer) {
  const bool was_training = model.training();
  model.set_training(false);
  std::vector<ConfusionCounts> counts;
  for (const auto& pair : pairs) {
    const ChangeBatch batch = make_change_batch({&pair}, normalizer);
    ModelOutput out = model.forward(batch.images_a, batch.images_b, TrainPhase::finetune);
    const ag::Var& probs = branch == PredictBranch::semantic    ? out.semantic
                           : branch == PredictBranch::difference ? out.difference
                                                                 : out.fused;
    counts.push_back(confusion(probs.value(), batch.change, threshold));
  }
  model.set_training(was_training);
  return report(accumulate(counts));
}

MetricsReport evaluate_dataset(ChangeDetNet& model, const ChangePairDataset& dataset,
                               double threshold, PredictBranch branch,
                               const Normalizer& normalizer) {
  const bool was_training = model.training();
  model.set_training(false);
  std::vector<ConfusionCounts> counts;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const ChangePair pair = dataset.load(i);
    const ChangeBatch batch = make_change_batch({&pair}, normalizer);
    ModelOutput out = model.forward(batch.images_a, batch.images_b, TrainPhase::finetune);
    const ag::Var& probs = branch == PredictBranch::semantic    ? out.semantic
                           : branch == PredictBranch::difference ? out.difference
                                                                 : out.fused;
    counts.push_back(confusion(probs.value(), batch.change, threshold));
  }
  model.set_training(was_training);
  return report(accumulate(counts));
}

void run_pretrain(ChangeDetNet& model, const TrainConfig& cfg, const DatasetManifest& manifest,
                  const std::vector<SourceDataset>& sources, const AugmentConfig& augment_cfg,
                  const Normalizer& normalizer, const std::filesystem::path& run_dir,
                  std::uint64_t config_hash) {
  std::filesystem::create_directories(run_dir);
  std::ofstream log(run_dir / "train_log.txt", std::ios::trunc);
  if (!log) throw IoError("cannot write " + (run_dir / "train_log.txt").string());
  log << "# epoch lr loss change_s change_c seg fused val_p val_r val_f1 val_iou\n";

  model.set_training(true);
  Sgd optimizer(model.trainable_parameters(TrainPhase::pretrain),
                {cfg.momentum, cfg.weight_decay});
  Rng data_rng(cfg.seed);
  const int steps = std::max(1, cfg.samples_per_epoch / std::max(1, cfg.batch_size));
  std::deque<double> history;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg.lr0, cfg.gamma);
    StepStats mean;
    for (int step = 0; step < steps; ++step) {
      std::vector<PseudoChangeSample> samples;
      samples.reserve(cfg.batch_size);
      for (int b = 0; b < cfg.batch_size; ++b) {
        samples.push_back(augment(sample_pair(manifest, sources, data_rng), augment_cfg, data_rng));
      }
      const PretrainBatch batch = make_pretrain_batch(samples, normalizer);
      const StepStats stats =
          pretrain_step(model, optimizer, batch, static_cast<float>(lr), cfg.lambda_seg);
      if (!std::isfinite(stats.total)) {
        throw NumericError("pre-training loss diverged at epoch " + std::to_string(epoch) +
                           ", step " + std::to_string(step) +
                           "; recent losses: " + format_loss_history(history));
      }
      history.push_back(stats.total);
      if (history.size() > 10) history.pop_front();
      mean.total += stats.total;
      mean.change_semantic += stats.change_semantic;
      mean.change_difference += stats.change_difference;
      mean.seg += stats.seg;
    }
    mean.total /= steps;
    mean.change_semantic /= steps;
    mean.change_difference /= steps;
    mean.seg /= steps;

    save_checkpoint(run_dir / ("epoch_" + std::to_string(epoch) + ".ckpt"), model, &optimizer,
                    {epoch, "pretrain", config_hash});
    append_log_line(log, TrainPhase::pretrain, epoch, lr, mean, nullptr);
  }
}

void run_finetune(ChangeDetNet& model, const TrainConfig& cfg, const ChangePairDataset& train,
                  const ChangePairDataset* val, const Normalizer& normalizer,
                  const std::filesystem::path& run_dir, std::uint64_t config_hash,
                  const std::optional<std::filesystem::path>& init_checkpoint) {
  std::filesystem::create_directories(run_dir);

  if (init_checkpoint) {
    const CheckpointMeta meta = read_checkpoint_meta(*init_checkpoint);
    if (meta.config_hash != config_hash) {
      throw ConfigError("checkpoint " + init_checkpoint->string() +
                        " was produced under a different architecture configuration (hash " +
                        std::to_string(meta.config_hash) + ", current " +
                        std::to_string(config_hash) + ")");
    }
    load_checkpoint(*init_checkpoint, model, nullptr);
  }

  std::ofstream log(run_dir / "train_log.txt", std::ios::trunc);
  if (!log) throw IoError("cannot write " + (run_dir / "train_log.txt").string());
  log << "# epoch lr loss change_s change_c seg fused val_p val_r val_f1 val_iou\n";

  model.set_training(true);
  Sgd optimizer(model.trainable_parameters(TrainPhase::finetune),
                {cfg.momentum, cfg.weight_decay});
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::deque<double> history;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg.lr0, cfg.gamma);
    std::shuffle(order.begin(), order.end(), rng.engine());

    StepStats mean;
    int steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<ChangePair> pairs;
      std::vector<const ChangePair*> refs;
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      pairs.reserve(end - start);
      for (std::size_t k = start; k < end; ++k) pairs.push_back(train.load(order[k]));
      for (const auto& p : pairs) refs.push_back(&p);

      const ChangeBatch batch = make_change_batch(refs, normalizer);
      const StepStats stats = finetune_step(model, optimizer, batch, static_cast<float>(lr));
      if (!std::isfinite(stats.total)) {
        throw NumericError("fine-tuning loss diverged at epoch " + std::to_string(epoch) +
                           ", step " + std::to_string(steps) +
                           "; recent losses: " + format_loss_history(history));
      }
      history.push_back(stats.total);
      if (history.size() > 10) history.pop_front();
      mean.total += stats.total;
      mean.change_semantic += stats.change_semantic;
      mean.change_difference += stats.change_difference;
      mean.fused += stats.fused;
      ++steps;
    }
    if (steps > 0) {
      mean.total /= steps;
      mean.change_semantic /= steps;
      mean.change_difference /= steps;
      mean.fused /= steps;
    }

    save_checkpoint(run_dir / ("epoch_" + std::to_string(epoch) + ".ckpt"), model, &optimizer,
                    {epoch, "finetune", config_hash});
    if (val) {
      const MetricsReport val_report =
          evaluate_dataset(model, *val, cfg.threshold, PredictBranch::fused, normalizer);
      append_log_line(log, TrainPhase::finetune, epoch, lr, mean, &val_report);
    } else {
      append_log_line(log, TrainPhase::finetune, epoch, lr, mean, nullptr);
    }
  }
}

}  // namespace changedet
