#include "nodule_align/preprocessing.hpp"
#include "nodule_align/rng.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace nodule_align;

namespace {

float ramp(int z, int y, int x) { return static_cast<float>(z * 10000 + y * 100 + x); }

Volume ramp_volume(int nz, int ny, int nx, Spacing s = {}) {
  Volume v(nz, ny, nx, 0.0f, s);
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) v.at(z, y, x) = ramp(z, y, x);
  return v;
}

std::filesystem::path scratch(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("na_pre_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace

TEST(Crop, SideIsTwiceTheDiameterPerAxis) {
  const Volume ct = ramp_volume(40, 60, 60, {2.0, 0.5, 0.5});
  const Volume c = crop_nodule(ct, {20, 30, 30}, 5.0);
  EXPECT_EQ(c.nz, 5);
  EXPECT_EQ(c.ny, 20);
  EXPECT_EQ(c.nx, 20);
}

TEST(Crop, CopiesVoxelsAndPadsOutside) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Volume ct = ramp_volume(20, 24, 28);
    const VoxelIndex c{static_cast<int>(rng.below(20)), static_cast<int>(rng.below(24)), static_cast<int>(rng.below(28))};
    const double d = 1.0 + rng.uniform() * 9.0;
    const Volume out = crop_nodule(ct, c, d, -7.0f);
    const int side = static_cast<int>(std::lround(2.0 * d));
    ASSERT_EQ(out.nz, side);
    for (int z = 0; z < side; ++z)
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
          const int sz = c.z - side / 2 + z, sy = c.y - side / 2 + y, sx = c.x - side / 2 + x;
          const bool inside = sz >= 0 && sz < 20 && sy >= 0 && sy < 24 && sx >= 0 && sx < 28;
          ASSERT_EQ(out.at(z, y, x), inside ? ramp(sz, sy, sx) : -7.0f);
        }
  }
}

TEST(Crop, RejectsBadInput) {
  const Volume ct = ramp_volume(8, 8, 8);
  EXPECT_THROW(crop_nodule(ct, {8, 0, 0}, 3.0), ValidationError);
  EXPECT_THROW(crop_nodule(ct, {1, 1, 1}, 0.0), ValidationError);
  EXPECT_THROW(crop_nodule(ct, {1, 1, 1}, -2.0), ValidationError);
}

TEST(Trilinear, ReproducesAffineFieldsExactly) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int nz = 2 + static_cast<int>(rng.below(40)), ny = 2 + static_cast<int>(rng.below(40)),
              nx = 2 + static_cast<int>(rng.below(40));
    const double a = rng.normal(), b = rng.normal(), c = rng.normal(), d = rng.normal();
    Volume v(nz, ny, nx);
    for (int z = 0; z < nz; ++z)
      for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x) v.at(z, y, x) = static_cast<float>(a * z + b * y + c * x + d);
    const Volume r = resample_trilinear(v, 32);
    ASSERT_EQ(r.nz, 32);
    for (int z = 0; z < 32; ++z)
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
          const double sz = z * (nz - 1) / 31.0, sy = y * (ny - 1) / 31.0, sx = x * (nx - 1) / 31.0;
          ASSERT_NEAR(r.at(z, y, x), a * sz + b * sy + c * sx + d, 1e-4 * (1 + std::abs(a * nz) + std::abs(b * ny) + std::abs(c * nx)));
        }
  }
}

TEST(Trilinear, CornersCoincideAndIdentityOnSameGrid) {
  Rng rng(3);
  Volume v(32, 32, 32);
  for (float& x : v.data) x = static_cast<float>(rng.normal());
  const Volume r = resample_trilinear(v, 32);
  for (std::size_t i = 0; i < v.data.size(); ++i) ASSERT_FLOAT_EQ(r.data[i], v.data[i]);

  Volume small(3, 5, 7);
  for (float& x : small.data) x = static_cast<float>(rng.normal());
  const Volume up = resample_trilinear(small, 32);
  EXPECT_FLOAT_EQ(up.at(0, 0, 0), small.at(0, 0, 0));
  EXPECT_FLOAT_EQ(up.at(31, 31, 31), small.at(2, 4, 6));
  EXPECT_FLOAT_EQ(up.at(0, 31, 0), small.at(0, 4, 0));
  EXPECT_THROW(resample_trilinear(Volume(1, 5, 5)), ValidationError);
}

TEST(Window, MapsLinearlyAndClamps) {
  Volume v(1, 1, 5);
  v.data = {-2000.0f, -1000.0f, -300.0f, 400.0f, 3000.0f};
  apply_window(v, kLungWindow);
  EXPECT_FLOAT_EQ(v.data[0], 0.0f);
  EXPECT_FLOAT_EQ(v.data[1], 0.0f);
  EXPECT_FLOAT_EQ(v.data[2], 0.5f);
  EXPECT_FLOAT_EQ(v.data[3], 1.0f);
  EXPECT_FLOAT_EQ(v.data[4], 1.0f);
  EXPECT_THROW(apply_window(v, {1.0, 1.0}), ValidationError);
}

TEST(Resize, OutputInUnitRange) {
  Rng rng(8);
  Volume v(10, 17, 23);
  for (float& x : v.data) x = static_cast<float>(rng.normal(-300.0, 900.0));
  const NoduleVolume n = resize_to_cube32(v);
  for (float x : n.voxels()) {
    ASSERT_GE(x, 0.0f);
    ASSERT_LE(x, 1.0f);
  }
}

TEST(ChannelLayout, SliceIsChannelAndRoundTrips) {
  Rng rng(2);
  std::vector<float> vox(kPatchVoxels);
  for (float& x : vox) x = static_cast<float>(rng.uniform());
  const NoduleVolume vol(vox);
  const ChannelImage img = to_channel_layout(vol);
  for (int z = 0; z < 32; z += 7)
    for (int y = 0; y < 32; y += 5)
      for (int x = 0; x < 32; x += 3) ASSERT_EQ(img.at(z, y, x), vol.at(z, y, x));
  const NoduleVolume back = from_channel_layout(img);
  EXPECT_TRUE(std::equal(back.voxels().begin(), back.voxels().end(), vol.voxels().begin()));
}

TEST(ChannelLayout, FlipsAreInvolutions) {
  Rng rng(4);
  ChannelImage img;
  for (float& x : img.pixels()) x = static_cast<float>(rng.uniform());
  for (int fy = 0; fy < 2; ++fy)
    for (int fx = 0; fx < 2; ++fx) {
      const ChannelImage f = flip_axial(img, fy, fx);
      EXPECT_EQ(f.at(3, fy ? 31 - 4 : 4, fx ? 31 - 9 : 9), img.at(3, 4, 9));
      const ChannelImage ff = flip_axial(f, fy, fx);
      EXPECT_TRUE(std::equal(ff.pixels().begin(), ff.pixels().end(), img.pixels().begin()));
    }
}

TEST(NoduleVolumeContract, RejectsWrongSizeOrRange) {
  EXPECT_THROW(NoduleVolume(std::vector<float>(100, 0.5f)), ValidationError);
  std::vector<float> v(kPatchVoxels, 0.5f);
  v[17] = 1.5f;
  EXPECT_THROW(NoduleVolume(std::move(v)), ValidationError);
}

TEST(PatchFiles, RoundTripBitExact) {
  const auto dir = scratch("patch");
  Rng rng(6);
  std::vector<float> vox(kPatchVoxels);
  for (float& x : vox) x = static_cast<float>(rng.uniform());
  const NoduleVolume vol(vox);
  const auto path = patch_path(dir, "N-1");
  write_patch(path, vol, {"N-1", kLungWindow, {1.25, 0.7, 0.7}, {10, 20, 20}});
  EXPECT_EQ(std::filesystem::file_size(path), kPatchVoxels * 4);
  const NoduleVolume back = read_patch(path);
  EXPECT_TRUE(std::equal(back.voxels().begin(), back.voxels().end(), vol.voxels().begin()));
  const auto meta = read_patch_metadata(path);
  EXPECT_EQ(meta.nodule_id, "N-1");
  EXPECT_EQ(meta.crop_voxels, (std::array<int, 3>{10, 20, 20}));
  EXPECT_DOUBLE_EQ(meta.source_spacing.z, 1.25);

  std::ofstream(path, std::ios::binary | std::ios::app) << 'x';
  EXPECT_THROW(read_patch(path), ValidationError);
}

TEST(PatchFiles, PrepareFromMetaImage) {
  const auto dir = scratch("prepare");
  Volume ct(30, 40, 40, -1000.0f, {1.5, 0.75, 0.75});
  for (int z = 10; z < 20; ++z)
    for (int y = 15; y < 25; ++y)
      for (int x = 15; x < 25; ++x) ct.at(z, y, x) = 40.0f;
  std::filesystem::create_directories(dir / "volumes");
  write_metaimage_short(dir / "volumes" / "s.mhd", ct);
  const Volume back = read_metaimage(dir / "volumes" / "s.mhd");
  ASSERT_EQ(back.nz, 30);
  EXPECT_FLOAT_EQ(back.at(15, 20, 20), 40.0f);
  EXPECT_DOUBLE_EQ(back.spacing.z, 1.5);

  NoduleRecord r;
  r.nodule_id = "S-N1";
  r.patient_id = "S";
  r.volume_path = dir / "volumes" / "s.mhd";
  r.center_voxel = {15, 20, 20};
  r.equiv_diameter_mm = 7.5;
  r.malignancy_score = 3;
  r.attribute_values = {1, 1, 6, 3, 3, 1, 1, 5};
  const auto meta = prepare_patch(r, dir);
  EXPECT_EQ(meta.crop_voxels, (std::array<int, 3>{10, 20, 20}));
  const NoduleVolume p = read_patch(patch_path(dir, "S-N1"));
  EXPECT_NEAR(p.at(16, 16, 16), (40.0 + 1000.0) / 1400.0, 1e-6);
  EXPECT_NEAR(p.at(0, 0, 0), 0.0, 1e-6);
}
