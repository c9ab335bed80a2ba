#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "ratles/error.hpp"
#include "ratles/metrics.hpp"
#include "ratles/phantom.hpp"

using namespace ratles;

TEST_CASE("phantom: no blobs means an empty mask (sham analogue)") {
  PhantomSpec spec;
  spec.lesion_blobs = 0;
  spec.seed = 5;
  auto [vol, mask] = generate_phantom(spec);
  CHECK(mask.foreground_count() == 0);
  CHECK(vol.voxels() == 16 * 32 * 32);
}

TEST_CASE("phantom: same seed gives bit-identical volume and mask") {
  PhantomSpec spec;
  spec.seed = 77;
  auto [v1, m1] = generate_phantom(spec);
  auto [v2, m2] = generate_phantom(spec);
  CHECK(v1.data == v2.data);
  CHECK(m1.data == m2.data);
}

TEST_CASE("phantom: noiseless intensities take exactly the three analytic levels") {
  PhantomSpec spec;
  spec.noise_sigma = 0.0;
  spec.seed = 3;
  auto [vol, mask] = generate_phantom(spec);
  std::set<double> levels(vol.data.begin(), vol.data.end());
  CHECK(levels == std::set<double>{0.0, 1.0, 1.5});

  SUBCASE("threshold 1.25 separates the lesion with Dice 1.0") {
    Mask thresholded = mask;
    for (size_t i = 0; i < vol.data.size(); ++i)
      thresholded.data[i] = vol.data[i] > 1.25 ? 1 : 0;
    CHECK(dice(thresholded, mask) == 1.0);
  }
}

TEST_CASE("phantom: lesion stays inside the brain and one hemisphere") {
  for (uint64_t seed : {1ull, 9ull, 123ull}) {
    PhantomSpec spec;
    spec.noise_sigma = 0.0;
    spec.seed = seed;
    auto [vol, mask] = generate_phantom(spec);
    REQUIRE(mask.foreground_count() > 0);
    const auto [D, H, W] = mask.dims;
    for (int64_t z = 0; z < D; ++z)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
          if (!mask.data[static_cast<size_t>((z * H + y) * W + x)]) continue;
          CHECK(vol.data[static_cast<size_t>((z * H + y) * W + x)] == 1.5);  // inside brain
          CHECK(x >= (W + 1) / 2);  // lesion hemisphere
        }
  }
}

TEST_CASE("phantom: mask voxels are nonzero iff blobs were requested") {
  PhantomSpec spec;
  spec.seed = 11;
  for (int64_t blobs : {0, 1, 3, 5}) {
    spec.lesion_blobs = blobs;
    auto [vol, mask] = generate_phantom(spec);
    CHECK((mask.foreground_count() > 0) == (blobs > 0));
  }
}

TEST_CASE("cohort: mirrors the training-set size and stays reproducible") {
  PhantomSpec tmpl;
  auto items = generate_cohort(48, tmpl, 99, 0.25);
  CHECK(items.size() == 48);

  auto again = generate_cohort(48, tmpl, 99, 0.25);
  for (size_t i = 0; i < items.size(); ++i) {
    CHECK(items[i].image.data == again[i].image.data);
    CHECK(items[i].seed == again[i].seed);
  }

  SUBCASE("pairwise distinct items for distinct derived seeds") {
    std::set<std::vector<double>> unique;
    for (const auto& item : items) unique.insert(item.image.data);
    CHECK(unique.size() == items.size());
  }
  SUBCASE("sham fraction is honored and spread") {
    int64_t shams = 0;
    for (const auto& item : items) {
      shams += item.sham;
      CHECK((item.sham == (item.label.foreground_count() == 0)));
    }
    CHECK(shams == 12);
  }
}

TEST_CASE("cohort: sham fraction 0 gives non-empty masks everywhere") {
  PhantomSpec tmpl;
  for (const auto& item : generate_cohort(6, tmpl, 7, 0.0))
    CHECK(item.label.foreground_count() > 0);
}

TEST_CASE("cohort: manifest lists id, seed, sham flag, lesion voxels") {
  PhantomSpec tmpl;
  auto items = generate_cohort(3, tmpl, 1, 1.0);
  const std::string csv = cohort_manifest_csv(items);
  CHECK(csv.rfind("id,seed,sham_flag,lesion_voxels\n", 0) == 0);
  CHECK(csv.find("0001,") != std::string::npos);
  CHECK(csv.find(",1,0\n") != std::string::npos);  // sham rows carry zero lesion voxels
}

TEST_CASE("phantom: invalid specs are rejected") {
  PhantomSpec spec;
  spec.lesion_blobs = -1;
  CHECK_THROWS_AS(generate_phantom(spec), ContractViolation);
  spec.lesion_blobs = 1;
  spec.dims = {2, 2, 2};
  CHECK_THROWS_AS(generate_phantom(spec), ContractViolation);
}
