#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <set>

#include "kdmri/data.hpp"
#include "kdmri/png.hpp"

using namespace kdmri;
namespace fs = std::filesystem;

TEST(Phantoms, DeterministicPerSeed) {
  auto a = generate_phantom(32, 0);
  auto b = generate_phantom(32, 0);
  EXPECT_EQ(a.v, b.v);
  auto c = generate_phantom(32, 1);
  EXPECT_NE(a.v, c.v);
}

TEST(Phantoms, IntensitiesNormalized) {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    auto p = generate_phantom(24, seed);
    float lo = 1e9f, hi = -1e9f;
    for (float x : p.v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
    EXPECT_GE(lo, 0.0f);
    EXPECT_LE(hi, 1.0f);
  }
}

TEST(Phantoms, GenerationIsFast) {
  const auto t0 = std::chrono::steady_clock::now();
  DatasetManifest m;
  auto records = generate_phantoms(200, 64, 5, &m);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_EQ(records.size(), 200u);
  EXPECT_EQ(m.train_count + m.val_count, 200);
  EXPECT_LT(secs, 10.0);
}

TEST(Phantoms, SplitsAreDisjointById) {
  auto records = generate_phantoms(25, 16, 3);
  std::set<std::string> ids;
  for (const auto& r : records) EXPECT_TRUE(ids.insert(r.id).second) << r.id;
}

TEST(SliceFile, RoundTripIsBitExact) {
  const auto dir = fs::temp_directory_path() / "kdmri_data_test";
  fs::create_directories(dir);
  auto g = generate_phantom(24, 9);
  const std::string path = (dir / "s.kdmr").string();
  save_slice(path, g);
  auto g2 = load_slice(path);
  EXPECT_EQ(g.v, g2.v);
  EXPECT_EQ(fs::file_size(path), 16u + g.size() * 4u);
}

TEST(SliceFile, BadMagicThrows) {
  const auto dir = fs::temp_directory_path() / "kdmri_data_test";
  fs::create_directories(dir);
  const std::string path = (dir / "bad.kdmr").string();
  std::ofstream(path) << "XXXXjunk";
  EXPECT_THROW(load_slice(path), DataError);
}

TEST(Dataset, SaveLoadRoundTrip) {
  const auto dir = fs::temp_directory_path() / "kdmri_dataset_test";
  fs::remove_all(dir);
  DatasetManifest m;
  auto records = generate_phantoms(10, 16, 11, &m);
  save_dataset(dir.string(), m, records);
  auto d = load_dataset(dir.string());
  EXPECT_EQ(d.manifest.train_count, m.train_count);
  EXPECT_EQ(d.records.size(), records.size());
  for (size_t i = 0; i < records.size(); ++i)
    EXPECT_EQ(d.records[i].target.v, records[i].target.v);
}

TEST(ReconPairs, FullSamplingGivesTargetBack) {
  auto records = generate_phantoms(5, 16, 2);
  std::vector<const SliceRecord*> ptrs;
  for (const auto& r : records) ptrs.push_back(&r);
  auto mask = generate_cartesian_mask(16, 1.0, 2, 0.15, 0);
  auto pairs = make_recon_pairs<double>(ptrs, mask);
  for (const auto& s : pairs)
    EXPECT_LT(num::max_abs_diff(real_part(s.zero_filled), s.target), 1e-10);
}

TEST(ReconPairs, FixedMaskSharedAcrossSlices) {
  auto mask1 = generate_cartesian_mask(16, 2.0, 2, 0.15, 4);
  auto mask2 = generate_cartesian_mask(16, 2.0, 2, 0.15, 4);
  EXPECT_EQ(mask1.hash(), mask2.hash());
}

TEST(ReconPairs, UndersamplingLosesInformation) {
  auto records = generate_phantoms(6, 32, 7);
  std::vector<const SliceRecord*> ptrs;
  for (const auto& r : records) ptrs.push_back(&r);
  auto mask = generate_cartesian_mask(32, 4.0, 4, 0.15, 1);
  auto pairs = make_recon_pairs<double>(ptrs, mask);
  // PSNR of the zero-filled image against the target must be below the
  // identical-image ceiling.
  for (const auto& s : pairs) {
    auto zf = real_part(s.zero_filled);
    double mse = num::mse(zf, s.target);
    EXPECT_GT(mse, 0.0);
  }
}

TEST(ReconPairs, MaskWidthMismatchThrows) {
  auto records = generate_phantoms(2, 16, 1);
  std::vector<const SliceRecord*> ptrs{&records[0]};
  auto mask = generate_cartesian_mask(32, 2.0, 2, 0.15, 0);
  EXPECT_THROW(make_recon_pairs<double>(ptrs, mask), InvalidInputError);
}

TEST(SrPairs, FactorOneIsIdentity) {
  auto records = generate_phantoms(3, 16, 8);
  std::vector<const SliceRecord*> ptrs;
  for (const auto& r : records) ptrs.push_back(&r);
  auto pairs = make_sr_pairs<double>(ptrs, 1);
  for (const auto& s : pairs)
    EXPECT_LT(num::max_abs_diff(real_part(s.interpolated_lr), s.target), 1e-10);
}

TEST(SrPairs, NoEnergyOutsideCentralBlock) {
  auto records = generate_phantoms(2, 32, 9);
  std::vector<const SliceRecord*> ptrs{&records[0]};
  auto pairs = make_sr_pairs<double>(ptrs, 4);
  auto k = fft2c(pairs[0].interpolated_lr);
  const int H = 32, bh = 8, r0 = (H - bh) / 2;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < H; ++x) {
      const bool inside = y >= r0 && y < r0 + bh && x >= r0 && x < r0 + bh;
      if (!inside) EXPECT_LT(std::abs(k(y, x)), 1e-10);
    }
}

TEST(SrPairs, SpectralTruncationIsNonExpansive) {
  auto records = generate_phantoms(4, 32, 10);
  std::vector<const SliceRecord*> ptrs;
  for (const auto& r : records) ptrs.push_back(&r);
  auto pairs = make_sr_pairs<double>(ptrs, 2);
  for (const auto& s : pairs)
    EXPECT_LE(num::l2_norm(s.interpolated_lr), num::l2_norm(s.target) * (1 + 1e-12));
}

TEST(SrPairs, NonDivisibleFactorThrows) {
  auto records = generate_phantoms(2, 18, 1);
  std::vector<const SliceRecord*> ptrs{&records[0]};
  EXPECT_THROW(make_sr_pairs<double>(ptrs, 4), ConfigError);
}

TEST(Png, WritesValidSignatureAndSize) {
  const auto dir = fs::temp_directory_path() / "kdmri_png_test";
  fs::create_directories(dir);
  auto g = generate_phantom(24, 3);
  const std::string path = (dir / "p.png").string();
  write_png_gray8(path, to_gray8(g));
  std::ifstream f(path, std::ios::binary);
  uint8_t sig[8];
  f.read(reinterpret_cast<char*>(sig), 8);
  EXPECT_EQ(sig[1], 'P');
  EXPECT_EQ(sig[2], 'N');
  EXPECT_EQ(sig[3], 'G');
  EXPECT_GT(fs::file_size(path), 50u);
}

TEST(Png, MontageConcatenatesTiles) {
  auto a = to_gray8(generate_phantom(16, 1));
  auto b = to_gray8(generate_phantom(16, 2));
  auto m = montage_row({a, b});
  EXPECT_EQ(m.h, 16);
  EXPECT_EQ(m.w, 16 + 2 + 16);
}
