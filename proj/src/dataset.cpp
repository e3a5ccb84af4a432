#include "changedet/dataset.hpp"

#include <algorithm>
#include <cmath>

#include "changedet/errors.hpp"

namespace changedet {

namespace fs = std::filesystem;

ag::Tensor Normalizer::operator()(const ag::Tensor& image01) const {
  if (image01.rank() != 3 || image01.dim(0) != 3) {
    throw ShapeError("normalizer expects a (3, H, W) image, got " + image01.shape_str());
  }
  ag::Tensor out(image01.shape());
  const std::int64_t plane = image01.dim(1) * image01.dim(2);
  for (int c = 0; c < 3; ++c) {
    for (std::int64_t i = 0; i < plane; ++i) {
      out[c * plane + i] = (image01[c * plane + i] - mean[c]) / std[c];
    }
  }
  return out;
}

ag::Tensor to_image_tensor(const ImageU8& image) {
  ag::Tensor out({3, image.height, image.width});
  const std::int64_t plane = static_cast<std::int64_t>(image.height) * image.width;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const std::int64_t p = static_cast<std::int64_t>(y) * image.width + x;
      for (int c = 0; c < 3; ++c) {
        const int src_c = image.channels == 3 ? c : 0;
        out[c * plane + p] = static_cast<float>(image.at(y, x, src_c)) / 255.0f;
      }
    }
  }
  return out;
}

ImageU8 image_to_u8(const ag::Tensor& image01) {
  if (image01.rank() != 3 || image01.dim(0) != 3) {
    throw ShapeError("expected a (3, H, W) image, got " + image01.shape_str());
  }
  const int h = static_cast<int>(image01.dim(1));
  const int w = static_cast<int>(image01.dim(2));
  ImageU8 out(h, w, 3);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::int64_t p = static_cast<std::int64_t>(y) * w + x;
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(image01[c * plane + p], 0.0f, 1.0f);
        out.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
    }
  }
  return out;
}

Mask to_binary_mask(const ImageU8& image) {
  if (image.channels != 1) {
    throw DomainError("binary masks must be single-channel, got " +
                      std::to_string(image.channels) + " channels");
  }
  Mask out(image.height, image.width);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const std::uint8_t v = image.at(y, x, 0);
      if (v != 0 && v != 1 && v != 255) {
        throw DomainError("binary mask pixel must be 0, 1, or 255, found " + std::to_string(v));
      }
      out.at(y, x) = v ? 1 : 0;
    }
  }
  return out;
}

Mask to_class_mask(const ImageU8& image) {
  if (image.channels != 1) {
    throw DomainError("class masks must be single-channel, got " +
                      std::to_string(image.channels) + " channels");
  }
  Mask out(image.height, image.width);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) out.at(y, x) = image.at(y, x, 0);
  }
  return out;
}

ImageU8 mask_to_u8(const Mask& mask) {
  ImageU8 out(mask.h, mask.w, 1);
  for (int y = 0; y < mask.h; ++y) {
    for (int x = 0; x < mask.w; ++x) out.at(y, x, 0) = mask.at(y, x) ? 255 : 0;
  }
  return out;
}

ag::Tensor gray_to_prob(const ImageU8& image) {
  if (image.channels != 1) {
    throw DomainError("probability maps must be single-channel PNGs");
  }
  ag::Tensor out({1, 1, image.height, image.width});
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      out[static_cast<std::int64_t>(y) * image.width + x] =
          static_cast<float>(image.at(y, x, 0)) / 255.0f;
    }
  }
  return out;
}

ag::Tensor stack_images(const std::vector<ag::Tensor>& images) {
  if (images.empty()) throw ShapeError("cannot stack an empty image batch");
  const auto& first = images.front().shape();
  ag::Tensor out({static_cast<std::int64_t>(images.size()), first[0], first[1], first[2]});
  const std::int64_t stride = images.front().numel();
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (images[n].shape() != first) {
      throw ShapeError("batch images must share one shape; image " + std::to_string(n) + " is " +
                       images[n].shape_str());
    }
    std::copy(images[n].data(), images[n].data() + stride, out.data() + n * stride);
  }
  return out;
}

ag::Tensor stack_masks(const std::vector<const Mask*>& masks) {
  if (masks.empty()) throw ShapeError("cannot stack an empty mask batch");
  const int h = masks.front()->h, w = masks.front()->w;
  ag::Tensor out({static_cast<std::int64_t>(masks.size()), 1, h, w});
  for (std::size_t n = 0; n < masks.size(); ++n) {
    if (masks[n]->h != h || masks[n]->w != w) throw ShapeError("batch masks must share one shape");
    for (std::size_t i = 0; i < masks[n]->v.size(); ++i) {
      out[static_cast<std::int64_t>(n) * h * w + static_cast<std::int64_t>(i)] =
          static_cast<float>(masks[n]->v[i]);
    }
  }
  return out;
}

ag::Tensor stack_class_masks(const std::vector<const Mask*>& masks) {
  ag::Tensor stacked = stack_masks(masks);
  return ag::Tensor({stacked.dim(0), stacked.dim(2), stacked.dim(3)}, stacked.vec());
}

ChangePairDataset::ChangePairDataset(const fs::path& dir, bool require_labels) : dir_(dir) {
  const fs::path a_dir = dir_ / "A";
  if (!fs::is_directory(a_dir)) {
    throw IoError("change dataset is missing directory " + a_dir.string());
  }
  for (const auto& entry : fs::directory_iterator(a_dir)) {
    if (entry.path().extension() == ".png") names_.push_back(entry.path().stem().string());
  }
  std::sort(names_.begin(), names_.end());
  if (names_.empty()) throw IoError("no PNG pairs found under " + a_dir.string());

  has_labels_ = fs::is_directory(dir_ / "label");
  check_listing(require_labels);
}

ChangePairDataset::ChangePairDataset(const fs::path& dir, std::vector<std::string> names,
                                     bool require_labels)
    : dir_(dir), names_(std::move(names)) {
  if (names_.empty()) throw IoError("empty name subset for dataset " + dir_.string());
  for (const auto& name : names_) {
    if (!fs::exists(dir_ / "A" / (name + ".png"))) {
      throw IoError("pair '" + name + "' has no first image under " + (dir_ / "A").string());
    }
  }
  has_labels_ = fs::is_directory(dir_ / "label");
  check_listing(require_labels);
}

void ChangePairDataset::check_listing(bool require_labels) const {
  if (require_labels && !has_labels_) {
    throw IoError("change dataset is missing directory " + (dir_ / "label").string());
  }
  for (const auto& name : names_) {
    if (!fs::exists(dir_ / "B" / (name + ".png"))) {
      throw IoError("pair '" + name + "' has no second image under " + (dir_ / "B").string());
    }
    if (has_labels_ && !fs::exists(dir_ / "label" / (name + ".png"))) {
      throw IoError("pair '" + name + "' has no label under " + (dir_ / "label").string());
    }
  }
}

ChangePair ChangePairDataset::load(std::size_t index) const {
  const std::string& name = names_.at(index);
  ChangePair pair;
  pair.name = name;
  pair.image_a = to_image_tensor(read_png(dir_ / "A" / (name + ".png")));
  pair.image_b = to_image_tensor(read_png(dir_ / "B" / (name + ".png")));
  if (has_labels_) {
    pair.label = to_binary_mask(read_png(dir_ / "label" / (name + ".png")));
  }
  return pair;
}

SourceDataset load_seg_source(const fs::path& dir, const std::string& name, int keep_class,
                              int num_classes, int tile_size) {
  const fs::path images_dir = dir / "images";
  const fs::path masks_dir = dir / "masks";
  if (!fs::is_directory(images_dir) || !fs::is_directory(masks_dir)) {
    throw IoError("segmentation source " + dir.string() + " needs images/ and masks/");
  }

  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(images_dir)) {
    if (entry.path().extension() == ".png") names.push_back(entry.path().stem().string());
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw IoError("no PNG images under " + images_dir.string());

  SourceDataset source;
  source.name = name;
  for (const auto& stem : names) {
    const fs::path mask_path = masks_dir / (stem + ".png");
    if (!fs::exists(mask_path)) {
      throw IoError("segmentation sample '" + stem + "' has no mask under " + masks_dir.string());
    }
    SegSample sample;
    sample.image = to_image_tensor(read_png(images_dir / (stem + ".png")));
    const ImageU8 mask_png = read_png(mask_path);
    sample.mask = keep_class >= 0 ? filter_category(to_class_mask(mask_png), keep_class, num_classes)
                                  : to_binary_mask(mask_png);
    for (auto& piece : tile(sample, tile_size)) {
      source.samples.push_back(std::move(piece));
    }
  }
  return source;
}

}  // namespace changedet
