#include <doctest.h>

#include "changedet/dataset.hpp"
#include "changedet/errors.hpp"
#include "test_support.hpp"

using namespace changedet;

TEST_SUITE("dataset") {
  TEST_CASE("image tensors decode to [0,1] and grayscale replicates channels") {
    ImageU8 rgb(2, 2, 3);
    rgb.at(0, 0, 0) = 255;
    rgb.at(1, 1, 2) = 51;
    const ag::Tensor t = to_image_tensor(rgb);
    REQUIRE(t.shape() == std::vector<int64_t>{3, 2, 2});
    CHECK(t[0] == doctest::Approx(1.0f));
    CHECK(t.vec()[2 * 4 + 3] == doctest::Approx(51.0f / 255.0f));

    ImageU8 gray(2, 2, 1);
    gray.at(0, 1, 0) = 102;
    const ag::Tensor g = to_image_tensor(gray);
    REQUIRE(g.shape() == std::vector<int64_t>{3, 2, 2});
    for (int c = 0; c < 3; ++c) {
      CHECK(g.vec()[static_cast<std::size_t>(c) * 4 + 1] == doctest::Approx(102.0f / 255.0f));
    }

    // Encoding back recovers the original bytes.
    const ImageU8 rgb_back = image_to_u8(t);
    CHECK(rgb_back.data == rgb.data);
  }

  TEST_CASE("binary masks accept 0/255 and 0/1 codings, nothing else") {
    ImageU8 coded(2, 2, 1);
    coded.at(0, 0, 0) = 255;
    coded.at(1, 0, 0) = 0;
    const Mask m = to_binary_mask(coded);
    CHECK(m.at(0, 0) == 1);
    CHECK(m.at(1, 0) == 0);

    ImageU8 unit(1, 2, 1);
    unit.at(0, 1, 0) = 1;
    const Mask u = to_binary_mask(unit);
    CHECK(u.at(0, 1) == 1);

    ImageU8 bad(1, 1, 1);
    bad.at(0, 0, 0) = 7;
    CHECK_THROWS_AS(to_binary_mask(bad), DomainError);

    Mask round(1, 2, 1);
    round.at(0, 0) = 0;
    const ImageU8 png = mask_to_u8(round);
    CHECK(png.at(0, 0, 0) == 0);
    CHECK(png.at(0, 1, 0) == 255);
  }

  TEST_CASE("gray_to_prob maps intensities to (1,1,H,W) fractions") {
    ImageU8 gray(1, 3, 1);
    gray.at(0, 0, 0) = 0;
    gray.at(0, 1, 0) = 255;
    gray.at(0, 2, 0) = 128;
    const ag::Tensor p = gray_to_prob(gray);
    REQUIRE(p.shape() == std::vector<int64_t>{1, 1, 1, 3});
    CHECK(p[0] == 0.0f);
    CHECK(p[1] == 1.0f);
    CHECK(p[2] == doctest::Approx(128.0f / 255.0f));
  }

  TEST_CASE("the normalizer standardizes per channel") {
    Normalizer norm;
    norm.mean = {0.5f, 0.25f, 0.0f};
    norm.std = {0.5f, 0.5f, 1.0f};
    ag::Tensor image({3, 1, 1}, std::vector<float>{1.0f, 0.25f, 0.3f});
    const ag::Tensor out = norm(image);
    CHECK(out[0] == doctest::Approx(1.0f));
    CHECK(out[1] == doctest::Approx(0.0f));
    CHECK(out[2] == doctest::Approx(0.3f));
  }

  TEST_CASE("stacking builds NCHW batches") {
    Rng rng(111);
    ag::Tensor a = testsup::random_tensor({3, 4, 4}, rng);
    ag::Tensor b = testsup::random_tensor({3, 4, 4}, rng);
    const ag::Tensor batch = stack_images({a, b});
    REQUIRE(batch.shape() == std::vector<int64_t>{2, 3, 4, 4});
    CHECK(batch.at(1, 2, 3, 3) == b.vec()[2 * 16 + 15]);

    Mask m = testsup::random_mask(4, 4, rng);
    const ag::Tensor masks = stack_masks({&m});
    REQUIRE(masks.shape() == std::vector<int64_t>{1, 1, 4, 4});
    CHECK(masks.at(0, 0, 1, 2) == static_cast<float>(m.at(1, 2)));

    const ag::Tensor classes = stack_class_masks({&m, &m});
    REQUIRE(classes.shape() == std::vector<int64_t>{2, 4, 4});
  }

  TEST_CASE("change pair datasets list, load, and validate their directories") {
    testsup::TempDir tmp;
    const auto dir = tmp.path() / "data";
    testsup::write_change_dataset(dir, 4, 64, 9);

    ChangePairDataset ds(dir);
    REQUIRE(ds.size() == 4);
    CHECK(ds.has_labels());
    CHECK(ds.names() == std::vector<std::string>{"000", "001", "002", "003"});

    const ChangePair pair = ds.load(1);
    CHECK(pair.name == "001");
    REQUIRE(pair.image_a.shape() == std::vector<int64_t>{3, 64, 64});
    CHECK(pair.label.h == 64);

    // A subset restricts the listing.
    ChangePairDataset tail(dir, {"002", "003"}, true);
    REQUIRE(tail.size() == 2);
    CHECK(tail.load(0).name == "002");

    // Unlabeled datasets work only when labels are not required.
    const auto unlabeled = tmp.path() / "unlabeled";
    std::filesystem::create_directories(unlabeled / "A");
    std::filesystem::create_directories(unlabeled / "B");
    for (const auto& name : ds.names()) {
      std::filesystem::copy_file(dir / "A" / (name + ".png"), unlabeled / "A" / (name + ".png"));
      std::filesystem::copy_file(dir / "B" / (name + ".png"), unlabeled / "B" / (name + ".png"));
    }
    CHECK_THROWS_AS(ChangePairDataset{unlabeled}, IoError);
    ChangePairDataset no_labels(unlabeled, false);
    CHECK(no_labels.size() == 4);
    CHECK_FALSE(no_labels.has_labels());
    CHECK(no_labels.load(0).label.v.empty());

    // A missing temporal-B file is an input error.
    std::filesystem::remove(unlabeled / "B" / "002.png");
    CHECK_THROWS_AS(ChangePairDataset(unlabeled, false), IoError);
  }

  TEST_CASE("segmentation sources load with filtering and tiling") {
    testsup::TempDir tmp;
    const auto dir = tmp.path() / "seg";
    testsup::write_seg_source(dir, 3, 96, 13);

    const SourceDataset src = load_seg_source(dir, "toy", -1, 2, 64);
    CHECK(src.name == "toy");
    // 96x96 inputs tile to 4 pieces of 64 each.
    REQUIRE(src.samples.size() == 12);
    for (const auto& s : src.samples) {
      CHECK(s.mask.h == 64);
      CHECK(s.mask.w == 64);
      REQUIRE(s.image.shape() == std::vector<int64_t>{3, 64, 64});
      for (const auto v : s.mask.v) CHECK(v <= 1);
    }
  }
}
