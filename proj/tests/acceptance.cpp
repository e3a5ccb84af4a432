// Acceptance driver: each criterion prints exactly one PASS/FAIL line.
// Run with --only N to execute a single criterion.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "changedet/config.hpp"
#include "changedet/dataset.hpp"
#include "changedet/decoder.hpp"
#include "changedet/fusion.hpp"
#include "changedet/image_io.hpp"
#include "changedet/metrics.hpp"
#include "changedet/model.hpp"
#include "changedet/ops.hpp"
#include "changedet/pseudochange.hpp"
#include "changedet/serialize.hpp"
#include "changedet/training.hpp"
#include "test_support.hpp"

using namespace changedet;

namespace {

int failures = 0;

void expect(bool ok, const std::string& what) {
  if (!ok) {
    ++failures;
    std::cout << "  check failed: " << what << "\n";
  }
}

bool near(double got, double want, double tol) { return std::abs(got - want) <= tol; }

// ---------------------------------------------------------------- criterion 1

bool metric_identity() {
  // Counts chosen so precision and recall are exact four-digit decimals.
  ConfusionCounts c;
  c.tp = 43174426ULL;
  c.fp = 2435574ULL;
  c.fn = 4155574ULL;
  c.tn = 206234426ULL;
  const MetricsReport r = report(c);
  expect(near(100.0 * r.precision, 94.66, 0.01), "precision reproduces 94.66");
  expect(near(100.0 * r.recall, 91.22, 0.01), "recall reproduces 91.22");
  expect(near(100.0 * r.f1, 92.91, 0.01), "f1 reproduces 92.91");
  expect(near(100.0 * r.iou, 86.76, 0.01), "iou reproduces 86.76");

  Rng rng(101);
  for (int i = 0; i < 1000; ++i) {
    ConfusionCounts t;
    t.tp = 1 + static_cast<std::uint64_t>(rng.uniform_int(1000000));
    t.fp = static_cast<std::uint64_t>(rng.uniform_int(1000000));
    t.fn = static_cast<std::uint64_t>(rng.uniform_int(1000000));
    t.tn = static_cast<std::uint64_t>(rng.uniform_int(1000000));
    const MetricsReport m = report(t);
    if (!near(m.iou, m.f1 / (2.0 - m.f1), 1e-9)) {
      expect(false, "iou == f1 / (2 - f1) for random counts");
      return failures == 0;
    }
  }
  return failures == 0;
}

// ---------------------------------------------------------------- criterion 2

bool xor_matches_brute_force(const Mask& a, const Mask& b, const Mask& c) {
  if (!a.same_shape(b) || !a.same_shape(c)) return false;
  for (std::size_t i = 0; i < c.v.size(); ++i) {
    if (c.v[i] != (a.v[i] ^ b.v[i])) return false;
  }
  return true;
}

bool xor_labels() {
  Rng rng(202);
  for (int trial = 0; trial < 1000; ++trial) {
    const int h = 1 + static_cast<int>(rng.uniform_int(64));
    const int w = 1 + static_cast<int>(rng.uniform_int(64));
    PseudoChangeSample s;
    s.seg_a = testsup::random_mask(h, w, rng);
    s.seg_b = testsup::random_mask(h, w, rng);
    s.change = xor_label(s.seg_a, s.seg_b);
    s.image_a = testsup::random_tensor({3, h, w}, rng, 0.0f, 1.0f);
    s.image_b = testsup::random_tensor({3, h, w}, rng, 0.0f, 1.0f);
    if (!xor_matches_brute_force(s.seg_a, s.seg_b, s.change)) {
      expect(false, "raw label equals the brute-force XOR");
      return false;
    }

    // Cycle through every on/off combination of the augmentations.
    const int combo = trial % 32;
    AugmentConfig cfg;
    cfg.p_hflip = (combo & 1) ? 1.0 : 0.0;
    cfg.p_vflip = (combo & 2) ? 1.0 : 0.0;
    cfg.p_rot90 = (combo & 4) ? 1.0 : 0.0;
    cfg.arbitrary_rotation = (combo & 8) != 0;
    cfg.p_rotate_any = (combo & 8) ? 1.0 : 0.0;
    cfg.p_noise = (combo & 16) ? 1.0 : 0.0;
    cfg.noise_std = 0.05;
    const PseudoChangeSample aug = augment(s, cfg, rng);
    if (!xor_matches_brute_force(aug.seg_a, aug.seg_b, aug.change)) {
      expect(false, "augmented label equals the brute-force XOR (combo " +
                        std::to_string(combo) + ")");
      return false;
    }
    const Mask recomputed = xor_label(aug.seg_a, aug.seg_b);
    if (recomputed.v != aug.change.v) {
      expect(false, "augmented label matches a recomputed XOR");
      return false;
    }
  }
  return failures == 0;
}

// ---------------------------------------------------------------- criterion 3

bool shape_law() {
  ModelConfig mc;
  mc.adapter_channels = 16;
  mc.base_channels = 16;
  mc.attention_reduction = 4;
  Rng rng(303);
  ChangeDetNet model(mc, rng);
  model.set_training(false);

  const std::array<int, 4> widths = model.encoder().pyramid_channels();
  const std::array<int64_t, 4> strides{4, 8, 16, 32};

  for (const int64_t size : {int64_t{256}, int64_t{512}}) {
    Rng data(static_cast<std::uint64_t>(size));
    const ag::Tensor a = testsup::random_tensor({1, 3, size, size}, data, -1.0f, 1.0f);
    const ag::Tensor b = testsup::random_tensor({1, 3, size, size}, data, -1.0f, 1.0f);

    const FeaturePyramid pyr = model.encoder().extract(a);
    for (int k = 0; k < 4; ++k) {
      const std::vector<int64_t> want{1, widths[static_cast<std::size_t>(k)],
                                      size / strides[static_cast<std::size_t>(k)],
                                      size / strides[static_cast<std::size_t>(k)]};
      expect(pyr.levels[static_cast<std::size_t>(k)].value().shape() == want,
             "pyramid level " + std::to_string(k + 1) + " shape at " + std::to_string(size));
    }

    ModelOutput out = model.forward(a, b, TrainPhase::finetune);
    const std::vector<int64_t> map_shape{1, 1, size, size};
    expect(out.semantic.value().shape() == map_shape, "semantic map shape");
    expect(out.difference.value().shape() == map_shape, "difference map shape");
    expect(out.fused.value().shape() == map_shape, "fused map shape");

    const auto& plan = model.difference_decoder().plan();
    const auto& grid = model.difference_decoder().last_grid_shapes();
    expect(plan.size() == 10, "dense grid holds ten units over four scales");
    expect(grid.size() == plan.size(), "every planned unit ran");
    for (std::size_t k = 0; k < plan.size(); ++k) {
      const int64_t stride = strides[static_cast<std::size_t>(plan[k].scale - 1)];
      const std::vector<int64_t> want{1, mc.base_channels, size / stride, size / stride};
      expect(grid[k] == want, "grid unit (" + std::to_string(plan[k].scale) + "," +
                                  std::to_string(plan[k].depth) + ") shape at " +
                                  std::to_string(size));
    }
  }
  return failures == 0;
}

// ---------------------------------------------------------------- criterion 4

ModelConfig small_config() {
  ModelConfig mc;
  mc.adapter_channels = 8;
  mc.base_channels = 8;
  mc.attention_reduction = 4;
  return mc;
}

struct GradTally {
  int64_t finite = 0, nonzero = 0, total = 0;
};

GradTally tally_grads(const std::vector<std::pair<std::string, ag::Var>>& params) {
  GradTally t;
  for (const auto& [name, p] : params) {
    const ag::Tensor& g = p.grad();
    for (int64_t i = 0; i < g.numel(); ++i) {
      t.finite += std::isfinite(g[i]) ? 1 : 0;
      t.nonzero += g[i] != 0.0f ? 1 : 0;
      ++t.total;
    }
  }
  return t;
}

bool prefixes_cover(const std::vector<std::pair<std::string, ag::Var>>& params,
                    const std::vector<std::string>& wanted,
                    const std::vector<std::string>& banned) {
  for (const auto& prefix : wanted) {
    bool found = false;
    for (const auto& [name, p] : params) found = found || name.rfind(prefix, 0) == 0;
    if (!found) return false;
  }
  for (const auto& [name, p] : params) {
    for (const auto& prefix : banned) {
      if (name.rfind(prefix, 0) == 0) return false;
    }
  }
  return true;
}

bool gradient_partition() {
  Rng data_rng(404);
  std::vector<PseudoChangeSample> samples(2);
  for (auto& s : samples) {
    s.image_a = testsup::random_tensor({3, 64, 64}, data_rng, 0.0f, 1.0f);
    s.image_b = testsup::random_tensor({3, 64, 64}, data_rng, 0.0f, 1.0f);
    s.seg_a = testsup::random_mask(64, 64, data_rng);
    s.seg_b = testsup::random_mask(64, 64, data_rng);
    s.change = xor_label(s.seg_a, s.seg_b);
  }
  const PretrainBatch pre_batch = make_pretrain_batch(samples, Normalizer{});

  {
    Rng rng(405);
    ChangeDetNet model(small_config(), rng);
    const auto params = model.trainable_parameters(TrainPhase::pretrain);
    expect(prefixes_cover(params, {"adapter.", "semantic.", "difference.", "seg_head."},
                          {"fusion."}),
           "pre-training updates adapter, decoders, and seg head only");
    const auto frozen = model.encoder().snapshot();
    const float omega = model.fusion().omega().value()[0];

    Sgd opt(params, SgdConfig{});
    pretrain_step(model, opt, pre_batch, 0.05f, 1.0f);

    // The encoder is reachable by no gradient: its features carry no graph
    // and its weights are bit-identical after the step.
    const FeaturePyramid pyr = model.encoder().extract(pre_batch.images_a);
    for (const auto& level : pyr.levels) {
      expect(!level.requires_grad(), "encoder features carry no gradient graph");
    }
    const auto after = model.encoder().snapshot();
    for (std::size_t i = 0; i < frozen.size(); ++i) {
      expect(frozen[i].second.shape() == after[i].second.shape() &&
                 std::memcmp(frozen[i].second.data(), after[i].second.data(),
                             sizeof(float) * frozen[i].second.numel()) == 0,
             "encoder weights bit-unchanged by a pre-training step");
    }
    expect(model.fusion().omega().value()[0] == omega,
           "fusion weight untouched by a pre-training step");

    const GradTally t = tally_grads(params);
    expect(t.finite == t.total, "pre-training gradients are finite");
    expect(static_cast<double>(t.nonzero) > 0.95 * static_cast<double>(t.total),
           "pre-training gradients are predominantly nonzero");
  }

  {
    Rng rng(406);
    ChangeDetNet model(small_config(), rng);
    const auto params = model.trainable_parameters(TrainPhase::finetune);
    expect(prefixes_cover(params, {"adapter.", "semantic.", "difference.", "fusion."},
                          {"seg_head."}),
           "fine-tuning updates adapter, decoders, and fusion only");
    const auto frozen = model.encoder().snapshot();
    std::map<std::string, ag::Tensor> before;
    model.collect_state("", before);

    std::vector<ChangePair> pairs(2);
    for (auto& p : pairs) {
      p.image_a = testsup::random_tensor({3, 64, 64}, data_rng, 0.0f, 1.0f);
      p.image_b = testsup::random_tensor({3, 64, 64}, data_rng, 0.0f, 1.0f);
      p.label = testsup::random_mask(64, 64, data_rng);
    }
    const ChangeBatch batch = make_change_batch({&pairs[0], &pairs[1]}, Normalizer{});

    Sgd opt(params, SgdConfig{});
    finetune_step(model, opt, batch, 0.05f);

    const auto after = model.encoder().snapshot();
    for (std::size_t i = 0; i < frozen.size(); ++i) {
      expect(std::memcmp(frozen[i].second.data(), after[i].second.data(),
                         sizeof(float) * frozen[i].second.numel()) == 0,
             "encoder weights bit-unchanged by a fine-tuning step");
    }
    for (const auto& [name, p] : model.named_parameters()) {
      if (name.rfind("seg_head.", 0) == 0) {
        const ag::Tensor& b = before.at(name);
        expect(std::memcmp(b.data(), p.value().data(), sizeof(float) * b.numel()) == 0,
               "seg head bit-unchanged by a fine-tuning step");
      }
    }

    const GradTally t = tally_grads(params);
    expect(t.finite == t.total, "fine-tuning gradients are finite");
    expect(static_cast<double>(t.nonzero) > 0.95 * static_cast<double>(t.total),
           "fine-tuning gradients are predominantly nonzero");
  }
  return failures == 0;
}

// ---------------------------------------------------------------- criterion 5

double bce_oracle(const ag::Tensor& p, const ag::Tensor& t) {
  double sum = 0.0;
  for (int64_t i = 0; i < p.numel(); ++i) {
    const double pi = std::min(std::max(static_cast<double>(p[i]), 1e-7), 1.0 - 1e-7);
    sum += -(t[i] * std::log(pi) + (1.0 - t[i]) * std::log(1.0 - pi));
  }
  return sum / static_cast<double>(p.numel());
}

double ce_oracle(const ag::Tensor& probs, const ag::Tensor& target) {
  const int64_t n = target.dim(0), h = target.dim(1), w = target.dim(2);
  double sum = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        const auto cls = static_cast<int64_t>(target[(i * h + y) * w + x]);
        const double p =
            std::min(std::max(static_cast<double>(probs.at(i, cls, y, x)), 1e-7), 1.0 - 1e-7);
        sum += -std::log(p);
      }
    }
  }
  return sum / static_cast<double>(n * h * w);
}

ag::Tensor random_seg_probs(int64_t classes, Rng& rng) {
  ag::Tensor t({1, classes, 8, 8});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.uniform(0.1, 1.0));
  for (int64_t y = 0; y < 8; ++y) {
    for (int64_t x = 0; x < 8; ++x) {
      float sum = 0.0f;
      for (int64_t c = 0; c < classes; ++c) sum += t.at(0, c, y, x);
      for (int64_t c = 0; c < classes; ++c) t.at(0, c, y, x) /= sum;
    }
  }
  return t;
}

bool loss_oracles() {
  Rng rng(505);
  for (int trial = 0; trial < 5; ++trial) {
    const ag::Tensor sem = testsup::random_probs({1, 1, 8, 8}, rng);
    const ag::Tensor dif = testsup::random_probs({1, 1, 8, 8}, rng);
    const ag::Tensor fus = testsup::random_probs({1, 1, 8, 8}, rng);
    const ag::Tensor truth = testsup::random_binary({1, 1, 8, 8}, rng);
    const ag::Tensor seg_a = random_seg_probs(2, rng);
    const ag::Tensor seg_b = random_seg_probs(2, rng);
    ag::Tensor target_a({1, 8, 8});
    ag::Tensor target_b({1, 8, 8});
    for (int64_t i = 0; i < 64; ++i) {
      target_a[i] = static_cast<float>(rng.uniform_int(2));
      target_b[i] = static_cast<float>(rng.uniform_int(2));
    }

    const ag::Var sem_v = ag::Var::leaf(sem, false);
    const ag::Var dif_v = ag::Var::leaf(dif, false);
    const ag::Var fus_v = ag::Var::leaf(fus, false);
    const ag::Var seg_a_v = ag::Var::leaf(seg_a, false);
    const ag::Var seg_b_v = ag::Var::leaf(seg_b, false);

    const double change_want = bce_oracle(sem, truth) + bce_oracle(dif, truth);
    expect(near(change_loss(sem_v, dif_v, truth).value()[0], change_want, 1e-6),
           "two-branch change loss matches its per-pixel oracle");

    const double seg_part = ce_oracle(seg_a, target_a) + ce_oracle(seg_b, target_b);
    for (const float lambda : {0.0f, 0.5f, 1.0f}) {
      const double want = change_want + static_cast<double>(lambda) * seg_part;
      const double got = pretrain_loss(sem_v, dif_v, seg_a_v, seg_b_v, truth, target_a, target_b,
                                       lambda)
                             .value()[0];
      expect(near(got, want, 1e-6),
             "pre-training loss matches its oracle at lambda " + std::to_string(lambda));
    }

    const double fine_want = change_want + bce_oracle(fus, truth);
    expect(near(finetune_loss(sem_v, dif_v, fus_v, truth).value()[0], fine_want, 1e-6),
           "fine-tuning loss matches its oracle");
  }

  // Uniform 0.5 probabilities land exactly on the analytic values.
  const ag::Tensor half({1, 1, 8, 8}, 0.5f);
  Rng rng2(506);
  const ag::Tensor truth = testsup::random_binary({1, 1, 8, 8}, rng2);
  const ag::Var half_v = ag::Var::leaf(half, false);
  expect(near(change_loss(half_v, half_v, truth).value()[0], 2.0 * std::log(2.0), 1e-6),
         "uniform half probabilities give 2 ln 2");
  expect(near(finetune_loss(half_v, half_v, half_v, truth).value()[0], 3.0 * std::log(2.0), 1e-6),
         "uniform half probabilities give 3 ln 2");
  return failures == 0;
}

// ---------------------------------------------------------------- criterion 6

bool fusion_contracts() {
  Rng rng(606);

  // Zero mixing logit reproduces the fixed mean strategy bit for bit.
  {
    Fusion learnable(FusionStrategy::learnable);
    Fusion mean(FusionStrategy::mean);
    const ag::Var s = ag::Var::leaf(testsup::random_probs({2, 1, 6, 6}, rng), false);
    const ag::Var d = ag::Var::leaf(testsup::random_probs({2, 1, 6, 6}, rng), false);
    const ag::Tensor a = learnable.forward(s, d).value();
    const ag::Tensor b = mean.forward(s, d).value();
    expect(std::memcmp(a.data(), b.data(), sizeof(float) * a.numel()) == 0,
           "zero logit fuses exactly like the mean");
  }

  // The fused value stays inside the branch envelope.
  {
    Fusion fusion(FusionStrategy::learnable);
    for (int trial = 0; trial < 1000; ++trial) {
      fusion.omega().value()[0] = static_cast<float>(rng.uniform(-6.0, 6.0));
      const ag::Var s = ag::Var::leaf(testsup::random_probs({1, 1, 4, 4}, rng), false);
      const ag::Var d = ag::Var::leaf(testsup::random_probs({1, 1, 4, 4}, rng), false);
      const ag::Tensor f = fusion.forward(s, d).value();
      for (int64_t i = 0; i < f.numel(); ++i) {
        const float lo = std::min(s.value()[i], d.value()[i]);
        const float hi = std::max(s.value()[i], d.value()[i]);
        if (f[i] < lo - 1e-6f || f[i] > hi + 1e-6f) {
          expect(false, "fused map stays within the branch envelope");
          return false;
        }
      }
    }
  }

  // The mixing-logit gradient matches a double-precision finite difference.
  for (const double omega0 : {-1.5, 0.0, 0.8}) {
    Fusion fusion(FusionStrategy::learnable);
    fusion.omega().value()[0] = static_cast<float>(omega0);
    const ag::Tensor s = testsup::random_probs({1, 1, 8, 8}, rng);
    const ag::Tensor d = testsup::random_probs({1, 1, 8, 8}, rng);
    const ag::Tensor w = testsup::random_tensor({1, 1, 8, 8}, rng, -1.0f, 1.0f);

    fusion.omega().zero_grad();
    ag::Var loss =
        ag::sum_all(ag::mul(fusion.forward(ag::Var::leaf(s, false), ag::Var::leaf(d, false)),
                            ag::Var::leaf(w, false)));
    ag::backward(loss);
    const double analytic = fusion.omega().grad()[0];

    const auto eval = [&](double omega) {
      const double sig = 1.0 / (1.0 + std::exp(-omega));
      double total = 0.0;
      for (int64_t i = 0; i < s.numel(); ++i) {
        total += (sig * s[i] + (1.0 - sig) * d[i]) * w[i];
      }
      return total;
    };
    const double h = 1e-4;
    const double numeric = (eval(omega0 + h) - eval(omega0 - h)) / (2.0 * h);
    expect(std::abs(analytic - numeric) <= 1e-4 * std::max(1.0, std::abs(numeric)),
           "mixing-logit gradient matches the finite difference at " + std::to_string(omega0));
  }
  return failures == 0;
}

// ---------------------------------------------------------------- criterion 7

ModelConfig toy_config() {
  ModelConfig mc;
  mc.adapter_channels = 16;
  mc.base_channels = 16;
  mc.attention_reduction = 4;
  return mc;
}

constexpr int kToyImageSize = 96;

void paint_gradient_scene(ImageU8& img) {
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const auto g = static_cast<std::uint8_t>(40 + (x * 13 + y * 7) % 120);
      for (int c = 0; c < 3; ++c) {
        img.data[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] = g;
      }
    }
  }
}

// Paints one solid rectangle whose edges sit on multiples of four, the
// stride of the finest prediction grid, and marks it in the optional mask.
void paint_aligned_rectangle(ImageU8& img, ImageU8* mask, Rng& rng, int min_cells,
                             int max_cells) {
  const int size = img.width;
  const int wx = 4 * (min_cells + static_cast<int>(rng.uniform_int(max_cells - min_cells + 1)));
  const int wy = 4 * (min_cells + static_cast<int>(rng.uniform_int(max_cells - min_cells + 1)));
  const int x0 = 4 * (1 + static_cast<int>(rng.uniform_int((size - wx) / 4 - 1)));
  const int y0 = 4 * (1 + static_cast<int>(rng.uniform_int((size - wy) / 4 - 1)));
  const std::uint8_t tone[3] = {210, 170, 80};
  for (int y = y0; y < y0 + wy; ++y) {
    for (int x = x0; x < x0 + wx; ++x) {
      for (int c = 0; c < 3; ++c) {
        img.data[(static_cast<std::size_t>(y) * size + x) * 3 + c] = tone[c];
      }
      if (mask != nullptr) mask->data[static_cast<std::size_t>(y) * size + x] = 255;
    }
  }
}

// Labeled bi-temporal pairs: image B adds one rectangle to the shared
// gradient scene and the label marks exactly that rectangle.
void write_rectangle_pairs(const std::filesystem::path& root, int count, std::uint64_t seed) {
  std::filesystem::create_directories(root / "A");
  std::filesystem::create_directories(root / "B");
  std::filesystem::create_directories(root / "label");
  Rng rng(seed);
  for (int i = 0; i < count; ++i) {
    ImageU8 a(kToyImageSize, kToyImageSize, 3);
    ImageU8 label(kToyImageSize, kToyImageSize, 1);
    paint_gradient_scene(a);
    ImageU8 b = a;
    paint_aligned_rectangle(b, &label, rng, 12, 15);
    const std::string name = "pair_" + std::to_string(i) + ".png";
    write_png(root / "A" / name, a);
    write_png(root / "B" / name, b);
    write_png(root / "label" / name, label);
  }
}

// Single-image segmentation source of the same scene family.
void write_rectangle_seg_source(const std::filesystem::path& dir, int count, std::uint64_t seed) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  Rng rng(seed);
  for (int i = 0; i < count; ++i) {
    ImageU8 img(kToyImageSize, kToyImageSize, 3);
    ImageU8 mask(kToyImageSize, kToyImageSize, 1);
    paint_gradient_scene(img);
    paint_aligned_rectangle(img, &mask, rng, 8, 15);
    char name[16];
    std::snprintf(name, sizeof(name), "%03d.png", i);
    write_png(dir / "images" / name, img);
    write_png(dir / "masks" / name, mask);
  }
}

// Fine-tunes on the given pairs and returns the first step whose training F1
// exceeds 0.95, or max_steps + 1 when the target is never reached.
int steps_to_f1(ChangeDetNet& model, const std::vector<ChangePair>& pairs, int max_steps,
                float lr) {
  model.set_training(true);
  Sgd opt(model.trainable_parameters(TrainPhase::finetune), SgdConfig{});
  const Normalizer norm;
  for (int step = 1; step <= max_steps; ++step) {
    std::vector<const ChangePair*> batch;
    for (int k = 0; k < 4; ++k) {
      batch.push_back(&pairs[static_cast<std::size_t>((step * 4 + k) % pairs.size())]);
    }
    finetune_step(model, opt, make_change_batch(batch, norm), lr);
    const MetricsReport r = evaluate_pairs(model, pairs, 0.5, PredictBranch::fused, norm);
    if (r.f1 > 0.95) return step;
  }
  return max_steps + 1;
}

bool toy_convergence() {
  testsup::TempDir tmp;
  write_rectangle_pairs(tmp.path() / "pairs", 8, 21);
  const ChangePairDataset dataset(tmp.path() / "pairs");
  std::vector<ChangePair> pairs;
  for (std::size_t i = 0; i < dataset.size(); ++i) pairs.push_back(dataset.load(i));

  // From-scratch fine-tuning must reach the target inside the step budget.
  Rng init_a(707);
  ChangeDetNet scratch(toy_config(), init_a);
  const int scratch_steps = steps_to_f1(scratch, pairs, 200, 0.2f);
  std::cout << "  scratch steps to F1 > 0.95: " << scratch_steps << "\n";
  expect(scratch_steps <= 200, "from-scratch fine-tuning reaches F1 > 0.95 within 200 steps");

  // Pre-train an identically initialized model on single-image segmentation
  // of the same scene family, then fine-tune it the same way.
  write_rectangle_seg_source(tmp.path() / "seg", 50, 22);
  const SourceDataset source =
      load_seg_source(tmp.path() / "seg", "rectangles", -1, 2, kToyImageSize);
  DatasetManifest manifest;
  manifest.source_names = {"rectangles"};
  manifest.proportions = {1.0};
  manifest.tile_size = kToyImageSize;
  manifest.samples_per_epoch = 64;
  manifest.seed = 23;

  Rng init_b(707);
  ChangeDetNet pretrained(toy_config(), init_b);
  pretrained.set_training(true);
  {
    Sgd opt(pretrained.trainable_parameters(TrainPhase::pretrain), SgdConfig{});
    Rng stream(24);
    const AugmentConfig augment_cfg;
    for (int step = 0; step < 60; ++step) {
      std::vector<PseudoChangeSample> samples;
      for (int k = 0; k < 4; ++k) {
        samples.push_back(augment(sample_pair(manifest, {source}, stream), augment_cfg, stream));
      }
      pretrain_step(pretrained, opt, make_pretrain_batch(samples, Normalizer{}), 0.05f, 1.0f);
    }
  }
  const int pretrained_steps = steps_to_f1(pretrained, pairs, 200, 0.2f);
  std::cout << "  pre-trained steps to F1 > 0.95: " << pretrained_steps << "\n";
  expect(pretrained_steps < scratch_steps,
         "pre-training reaches the target in fewer fine-tuning steps");
  return failures == 0;
}

// ---------------------------------------------------------------- criterion 8

const std::string kCli = CLI_BINARY_PATH;

bool artifact_round_trips() {
  testsup::TempDir tmp;

  // Exporting the pseudo-change dataset twice produces identical bytes.
  {
    testsup::write_seg_source(tmp.path() / "src", 3, 96, 31);
    const auto config_path = tmp.path() / "pseudo.json";
    std::ofstream config(config_path);
    config << R"({"pseudo": {"tile_size": 32, "seed": 13, "sources": [
                   {"name": "src", "dir": ")"
           << (tmp.path() / "src").string() << R"("}]}})";
    config.close();
    const std::string base =
        kCli + " build-pseudo --config " + config_path.string() + " --count 6 --out ";
    expect(testsup::run_cmd(base + (tmp.path() / "e1").string()) == 0, "first export succeeds");
    expect(testsup::run_cmd(base + (tmp.path() / "e2").string()) == 0, "second export succeeds");
    expect(testsup::same_tree(tmp.path() / "e1", tmp.path() / "e2"),
           "two exports are byte-identical");
  }

  // A checkpoint round-trip reproduces the forward pass bit for bit.
  const std::vector<std::string> sets = {"encoder.adapter_channels=8", "decoder.base_channels=8",
                                         "decoder.attention_reduction=4"};
  const AppConfig config = AppConfig::load(std::nullopt, sets, std::nullopt);
  const auto ckpt = tmp.path() / "model.ckpt";
  {
    Rng rng(808);
    ChangeDetNet model(config.model(), rng);
    CheckpointMeta meta;
    meta.phase = "finetune";
    meta.config_hash = config.arch_hash();
    save_checkpoint(ckpt, model, nullptr, meta);

    Rng other(809);
    ChangeDetNet reload(config.model(), other);
    load_checkpoint(ckpt, reload, nullptr);
    model.set_training(false);
    reload.set_training(false);
    Rng data(810);
    const ag::Tensor a = testsup::random_tensor({1, 3, 64, 64}, data, -1.0f, 1.0f);
    const ag::Tensor b = testsup::random_tensor({1, 3, 64, 64}, data, -1.0f, 1.0f);
    const ag::Tensor out1 = model.forward(a, b, TrainPhase::finetune).fused.value();
    const ag::Tensor out2 = reload.forward(a, b, TrainPhase::finetune).fused.value();
    expect(std::memcmp(out1.data(), out2.data(), sizeof(float) * out1.numel()) == 0,
           "checkpoint round-trip reproduces the forward pass bit-exactly");
  }

  // Exported maps re-imported through PNG agree with the in-memory forward
  // within the 8-bit quantization step.
  {
    const auto data_dir = tmp.path() / "pairs";
    testsup::write_change_dataset(data_dir, 2, 64, 33);
    const auto pred_dir = tmp.path() / "pred";
    std::string set_flags;
    for (const auto& s : sets) set_flags += " --set " + s;
    std::string out;
    expect(testsup::run_cmd(kCli + " predict --dataset " + data_dir.string() + " --checkpoint " +
                                ckpt.string() + " --out " + pred_dir.string() + " --float-maps" +
                                set_flags,
                            &out) == 0,
           "prediction export succeeds");

    Rng rng(811);
    ChangeDetNet model(config.model(), rng);
    load_checkpoint(ckpt, model, nullptr);
    model.set_training(false);
    const Normalizer norm = config.normalizer();
    const ChangePairDataset dataset(data_dir);
    std::vector<ConfusionCounts> binary_counts;
    std::vector<ConfusionCounts> memory_counts;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      const ChangePair pair = dataset.load(i);
      const ChangeBatch batch = make_change_batch({&pair}, norm);
      const ag::Tensor probs =
          model.forward(batch.images_a, batch.images_b, TrainPhase::finetune).fused.value();

      const ag::Tensor png =
          gray_to_prob(read_png(pred_dir / "prob" / (dataset.names()[i] + ".png")));
      float max_gap = 0.0f;
      for (int64_t k = 0; k < probs.numel(); ++k) {
        max_gap = std::max(max_gap, std::abs(png[k] - probs[k]));
      }
      expect(max_gap <= 1.0f / 255.0f,
             "probability map survives PNG quantization within 1/255");

      const TensorArchive archive =
          load_archive(pred_dir / "float" / (dataset.names()[i] + ".cdt"));
      expect(std::memcmp(archive.tensors[0].second.data(), probs.data(),
                         sizeof(float) * probs.numel()) == 0,
             "lossless float export matches the in-memory map bit for bit");

      const ag::Tensor binary =
          gray_to_prob(read_png(pred_dir / "binary" / (dataset.names()[i] + ".png")));
      binary_counts.push_back(confusion_binary(binary, batch.change));
      memory_counts.push_back(confusion(probs, batch.change, 0.5));
    }
    const ConfusionCounts from_png = accumulate(binary_counts);
    const ConfusionCounts from_memory = accumulate(memory_counts);
    expect(from_png.tp == from_memory.tp && from_png.fp == from_memory.fp &&
               from_png.fn == from_memory.fn && from_png.tn == from_memory.tn,
           "binary export scores identically to the in-memory forward");

    expect(testsup::run_cmd(kCli + " evaluate --dataset " + data_dir.string() + " --pred-dir " +
                                pred_dir.string(),
                            &out) == 0,
           "scoring the export succeeds");
    expect(out.find(metrics_to_text(report(from_png))) != std::string::npos,
           "scoring the export prints the same metrics line");
  }
  return failures == 0;
}

// --------------------------------------------------------------------- driver

struct Criterion {
  std::string label;
  std::function<bool()> run;
};

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    if (std::string(argv[i]) == "--only" && i + 1 < argc) only = std::atoi(argv[i + 1]);
  }

  const std::vector<Criterion> criteria = {
      {"metric identity", metric_identity},
      {"xor labels", xor_labels},
      {"shape law", shape_law},
      {"gradient partition", gradient_partition},
      {"loss oracles", loss_oracles},
      {"fusion contracts", fusion_contracts},
      {"toy convergence", toy_convergence},
      {"artifact round trips", artifact_round_trips},
  };

  bool all_ok = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int number = static_cast<int>(i) + 1;
    if (only != 0 && only != number) continue;
    failures = 0;
    bool ok = false;
    const auto start = std::chrono::steady_clock::now();
    try {
      ok = criteria[i].run();
    } catch (const std::exception& e) {
      std::cout << "  unexpected exception: " << e.what() << "\n";
      ok = false;
    }
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cout << "criterion " << number << " (" << criteria[i].label
              << "): " << (ok ? "PASS" : "FAIL") << "  [" << std::fixed << std::setprecision(1)
              << seconds << "s]\n";
    std::cout.unsetf(std::ios::fixed);
    all_ok = all_ok && ok;
  }
  return all_ok ? 0 : 1;
}
