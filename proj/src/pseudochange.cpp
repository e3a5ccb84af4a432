#include "changedet/pseudochange.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

#include "changedet/dataset.hpp"
#include "changedet/errors.hpp"
#include "changedet/image_io.hpp"

namespace changedet {

namespace {

using json = nlohmann::json;

void check_binary(const Mask& m, const char* who) {
  for (std::uint8_t value : m.v) {
    if (value > 1) {
      throw DomainError(std::string(who) + " mask must be binary, found value " +
                        std::to_string(value));
    }
  }
}

int image_h(const ag::Tensor& img) { return static_cast<int>(img.dim(1)); }
int image_w(const ag::Tensor& img) { return static_cast<int>(img.dim(2)); }

float image_at(const ag::Tensor& img, int c, int y, int x) {
  return img[(static_cast<std::int64_t>(c) * img.dim(1) + y) * img.dim(2) + x];
}

// Remaps pixels of an image and a set of masks through one lattice bijection.
template <typename MapFn>
ag::Tensor remap_image(const ag::Tensor& img, int out_h, int out_w, MapFn&& src_of) {
  ag::Tensor out({3, out_h, out_w});
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < out_h; ++y) {
      for (int x = 0; x < out_w; ++x) {
        const auto [sy, sx] = src_of(y, x);
        out[(static_cast<std::int64_t>(c) * out_h + y) * out_w + x] = image_at(img, c, sy, sx);
      }
    }
  }
  return out;
}

template <typename MapFn>
Mask remap_mask(const Mask& m, int out_h, int out_w, MapFn&& src_of) {
  Mask out(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      const auto [sy, sx] = src_of(y, x);
      out.at(y, x) = m.at(sy, sx);
    }
  }
  return out;
}

struct Geometry {
  bool hflip = false;
  bool vflip = false;
  int quarter_turns = 0;
  bool rotate_any = false;
  double angle_rad = 0.0;
};

template <typename Grid, typename RemapFn>
Grid apply_geometry_grid(const Grid& grid, int h, int w, const Geometry& g, RemapFn&& remap) {
  Grid out = grid;
  int cur_h = h, cur_w = w;
  if (g.hflip) {
    out = remap(out, cur_h, cur_w, [cur_w](int y, int x) { return std::pair{y, cur_w - 1 - x}; });
  }
  if (g.vflip) {
    out = remap(out, cur_h, cur_w, [cur_h](int y, int x) { return std::pair{cur_h - 1 - y, x}; });
  }
  for (int k = 0; k < g.quarter_turns % 4; ++k) {
    // One clockwise quarter turn: output row y comes from input column y.
    const int in_h = cur_h;
    out = remap(out, cur_w, cur_h, [in_h](int y, int x) { return std::pair{in_h - 1 - x, y}; });
    std::swap(cur_h, cur_w);
  }
  return out;
}

ag::Tensor rotate_image_any(const ag::Tensor& img, double angle_rad) {
  const int h = image_h(img), w = image_w(img);
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  const double cos_a = std::cos(angle_rad), sin_a = std::sin(angle_rad);
  ag::Tensor out({3, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      // Inverse rotation of the output lattice point into source coordinates.
      const double dy = y - cy, dx = x - cx;
      const double sy = cy + cos_a * dy + sin_a * dx;
      const double sx = cx - sin_a * dy + cos_a * dx;
      const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
      const double fy = sy - y0, fx = sx - x0;
      for (int c = 0; c < 3; ++c) {
        auto sample = [&](int yy, int xx) -> double {
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
          return image_at(img, c, yy, xx);
        };
        const double value = (1 - fy) * ((1 - fx) * sample(y0, x0) + fx * sample(y0, x0 + 1)) +
                             fy * ((1 - fx) * sample(y0 + 1, x0) + fx * sample(y0 + 1, x0 + 1));
        out[(static_cast<std::int64_t>(c) * h + y) * w + x] = static_cast<float>(value);
      }
    }
  }
  return out;
}

Mask rotate_mask_any(const Mask& m, double angle_rad) {
  const double cy = (m.h - 1) / 2.0, cx = (m.w - 1) / 2.0;
  const double cos_a = std::cos(angle_rad), sin_a = std::sin(angle_rad);
  Mask out(m.h, m.w);
  for (int y = 0; y < m.h; ++y) {
    for (int x = 0; x < m.w; ++x) {
      const double dy = y - cy, dx = x - cx;
      const int sy = static_cast<int>(std::lround(cy + cos_a * dy + sin_a * dx));
      const int sx = static_cast<int>(std::lround(cx - sin_a * dy + cos_a * dx));
      out.at(y, x) = (sy >= 0 && sy < m.h && sx >= 0 && sx < m.w) ? m.at(sy, sx) : 0;
    }
  }
  return out;
}

}  // namespace

void DatasetManifest::validate() const {
  if (source_names.empty() || source_names.size() != proportions.size()) {
    throw ConfigError("manifest needs one mixing proportion per source dataset");
  }
  double sum = 0.0;
  for (double p : proportions) {
    if (p < 0.0) throw ConfigError("mixing proportions must be non-negative");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ConfigError("mixing proportions must sum to 1, got " + std::to_string(sum));
  }
  if (tile_size <= 0 || tile_size % 32 != 0) {
    throw ConfigError("tile size must be a positive multiple of 32, got " +
                      std::to_string(tile_size));
  }
  if (samples_per_epoch <= 0) throw ConfigError("sample count must be positive");
}

std::string DatasetManifest::to_json() const {
  json j;
  j["sources"] = source_names;
  j["proportions"] = proportions;
  j["tile_size"] = tile_size;
  j["samples_per_epoch"] = samples_per_epoch;
  j["seed"] = seed;
  return j.dump(2);
}

DatasetManifest DatasetManifest::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad manifest JSON: ") + e.what());
  }
  DatasetManifest m;
  m.source_names = j.at("sources").get<std::vector<std::string>>();
  m.proportions = j.at("proportions").get<std::vector<double>>();
  m.tile_size = j.value("tile_size", 512);
  m.samples_per_epoch = j.value("samples_per_epoch", 9000);
  m.seed = j.value("seed", std::uint64_t{0});
  m.validate();
  return m;
}

Mask xor_label(const Mask& a, const Mask& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("xor_label mask shapes disagree: " + std::to_string(a.h) + "x" +
                     std::to_string(a.w) + " vs " + std::to_string(b.h) + "x" + std::to_string(b.w));
  }
  check_binary(a, "first");
  check_binary(b, "second");
  Mask out(a.h, a.w);
  for (std::size_t i = 0; i < a.v.size(); ++i) out.v[i] = a.v[i] ^ b.v[i];
  return out;
}

Mask filter_category(const Mask& classes, int keep_class, int num_classes) {
  if (keep_class < 0 || keep_class >= num_classes) {
    throw DomainError("class id " + std::to_string(keep_class) + " outside the declared " +
                      std::to_string(num_classes) + " classes");
  }
  Mask out(classes.h, classes.w);
  for (std::size_t i = 0; i < classes.v.size(); ++i) {
    if (classes.v[i] >= num_classes) {
      throw DomainError("mask value " + std::to_string(classes.v[i]) + " outside the declared " +
                        std::to_string(num_classes) + " classes");
    }
    out.v[i] = classes.v[i] == keep_class ? 1 : 0;
  }
  return out;
}

std::vector<SegSample> tile(const SegSample& sample, int size) {
  if (size <= 0 || size % 32 != 0) {
    throw ConfigError("tile size must be a positive multiple of 32, got " + std::to_string(size));
  }
  const int h = image_h(sample.image), w = image_w(sample.image);
  if (h != sample.mask.h || w != sample.mask.w) {
    throw ShapeError("segmentation image and mask sizes disagree");
  }
  const int rows = (h + size - 1) / size;
  const int cols = (w + size - 1) / size;
  std::vector<SegSample> tiles;
  tiles.reserve(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      SegSample t;
      t.image = ag::Tensor({3, size, size});
      t.mask = Mask(size, size);
      for (int y = 0; y < size; ++y) {
        const int sy = r * size + y;
        if (sy >= h) break;
        for (int x = 0; x < size; ++x) {
          const int sx = c * size + x;
          if (sx >= w) break;
          for (int ch = 0; ch < 3; ++ch) {
            t.image[(static_cast<std::int64_t>(ch) * size + y) * size + x] =
                image_at(sample.image, ch, sy, sx);
          }
          t.mask.at(y, x) = sample.mask.at(sy, sx);
        }
      }
      tiles.push_back(std::move(t));
    }
  }
  return tiles;
}

PseudoChangeSample sample_pair(const DatasetManifest& manifest,
                               const std::vector<SourceDataset>& sources, Rng& rng) {
  manifest.validate();
  if (sources.size() != manifest.source_names.size()) {
    throw ConfigError("manifest names " + std::to_string(manifest.source_names.size()) +
                      " sources but " + std::to_string(sources.size()) + " were loaded");
  }

  const double draw = rng.uniform();
  std::size_t pick = sources.size() - 1;
  double cumulative = 0.0;
  for (std::size_t s = 0; s < sources.size(); ++s) {
    cumulative += manifest.proportions[s];
    if (draw < cumulative) {
      pick = s;
      break;
    }
  }

  const auto& source = sources[pick];
  const auto n = static_cast<std::int64_t>(source.samples.size());
  if (n < 2) {
    throw CapacityError("source dataset '" + source.name + "' has " + std::to_string(n) +
                        " samples; pair sampling needs at least 2");
  }
  const std::int64_t i = rng.uniform_int(n);
  std::int64_t j = rng.uniform_int(n - 1);
  if (j >= i) ++j;

  PseudoChangeSample out;
  out.image_a = source.samples[i].image;
  out.image_b = source.samples[j].image;
  out.seg_a = source.samples[i].mask;
  out.seg_b = source.samples[j].mask;
  out.change = xor_label(out.seg_a, out.seg_b);
  return out;
}

PseudoChangeSample augment(const PseudoChangeSample& sample, const AugmentConfig& cfg, Rng& rng) {
  Geometry g;
  g.hflip = rng.bernoulli(cfg.p_hflip);
  g.vflip = rng.bernoulli(cfg.p_vflip);
  if (rng.bernoulli(cfg.p_rot90)) g.quarter_turns = static_cast<int>(rng.uniform_int(4));
  if (cfg.arbitrary_rotation && rng.bernoulli(cfg.p_rotate_any)) {
    g.rotate_any = true;
    g.angle_rad = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }
  const bool add_noise = rng.bernoulli(cfg.p_noise);

  const int h = sample.seg_a.h, w = sample.seg_a.w;
  auto map_image = [&](const ag::Tensor& img) {
    ag::Tensor out = apply_geometry_grid(img, h, w, g, [](const ag::Tensor& t, int th, int tw, auto fn) {
      return remap_image(t, th, tw, fn);
    });
    if (g.rotate_any) out = rotate_image_any(out, g.angle_rad);
    return out;
  };
  auto map_mask = [&](const Mask& m) {
    Mask out = apply_geometry_grid(m, h, w, g, [](const Mask& t, int th, int tw, auto fn) {
      return remap_mask(t, th, tw, fn);
    });
    if (g.rotate_any) out = rotate_mask_any(out, g.angle_rad);
    return out;
  };

  PseudoChangeSample out;
  out.image_a = map_image(sample.image_a);
  out.image_b = map_image(sample.image_b);
  out.seg_a = map_mask(sample.seg_a);
  out.seg_b = map_mask(sample.seg_b);
  out.change = map_mask(sample.change);

  if (add_noise) {
    for (ag::Tensor* img : {&out.image_a, &out.image_b}) {
      for (std::int64_t i = 0; i < img->numel(); ++i) {
        const double noisy = (*img)[i] + rng.normal(0.0, cfg.noise_std);
        (*img)[i] = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
      }
    }
  }
  return out;
}

void export_dataset(const DatasetManifest& manifest, const std::vector<SourceDataset>& sources,
                    const std::filesystem::path& out_dir) {
  manifest.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  for (const char* sub : {"A", "B", "label", "segA", "segB"}) {
    fs::create_directories(out_dir / sub, ec);
    if (ec) throw IoError("cannot create " + (out_dir / sub).string() + ": " + ec.message());
  }

  Rng rng(manifest.seed);
  for (int k = 0; k < manifest.samples_per_epoch; ++k) {
    const PseudoChangeSample sample = sample_pair(manifest, sources, rng);
    char name[16];
    std::snprintf(name, sizeof(name), "%05d.png", k);
    write_png(out_dir / "A" / name, image_to_u8(sample.image_a));
    write_png(out_dir / "B" / name, image_to_u8(sample.image_b));
    write_png(out_dir / "label" / name, mask_to_u8(sample.change));
    write_png(out_dir / "segA" / name, mask_to_u8(sample.seg_a));
    write_png(out_dir / "segB" / name, mask_to_u8(sample.seg_b));
  }

  std::ofstream manifest_file(out_dir / "manifest.json", std::ios::trunc);
  if (!manifest_file) throw IoError("cannot write " + (out_dir / "manifest.json").string());
  manifest_file << manifest.to_json() << "\n";
}

}  // namespace changedet
