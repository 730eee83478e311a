#pragma once

#include "nodule_align/annotations.hpp"
#include "nodule_align/volume.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <string>

namespace nodule_align {

inline constexpr int kPatchSide = 32;
inline constexpr std::size_t kPatchVoxels = static_cast<std::size_t>(kPatchSide) * kPatchSide * kPatchSide;

/// Intensity window mapped linearly onto [0,1].
struct IntensityWindow {
  double lo = -1000.0;
  double hi = 400.0;
};

inline constexpr IntensityWindow kLungWindow{-1000.0, 400.0};

/// A normalized 32x32x32 nodule patch, values in [0,1].
class NoduleVolume {
public:
  NoduleVolume() : voxels_(kPatchVoxels, 0.0f) {}

  explicit NoduleVolume(std::vector<float> voxels) : voxels_(std::move(voxels)) {
    if (voxels_.size() != kPatchVoxels)
      throw ValidationError("nodule volume must hold 32^3 voxels, got " + std::to_string(voxels_.size()));
    for (float v : voxels_)
      if (!std::isfinite(v) || v < 0.0f || v > 1.0f) throw ValidationError("nodule volume value outside [0,1]");
  }

  float at(int z, int y, int x) const { return voxels_[index(z, y, x)]; }
  std::span<const float> voxels() const { return voxels_; }

  static std::size_t index(int z, int y, int x) {
    return (static_cast<std::size_t>(z) * kPatchSide + static_cast<std::size_t>(y)) * kPatchSide +
           static_cast<std::size_t>(x);
  }

private:
  std::vector<float> voxels_;
};

/// 32-channel 32x32 image: channel c is axial slice z = c.
class ChannelImage {
public:
  static constexpr int kChannels = kPatchSide;
  static constexpr int kHeight = kPatchSide;
  static constexpr int kWidth = kPatchSide;

  ChannelImage() : pixels_(kPatchVoxels, 0.0f) {}
  explicit ChannelImage(std::vector<float> pixels) : pixels_(std::move(pixels)) {
    if (pixels_.size() != kPatchVoxels) throw ValidationError("channel image must hold 32x32x32 values");
  }

  float& at(int c, int y, int x) { return pixels_[NoduleVolume::index(c, y, x)]; }
  float at(int c, int y, int x) const { return pixels_[NoduleVolume::index(c, y, x)]; }
  std::span<const float> pixels() const { return pixels_; }
  std::span<float> pixels() { return pixels_; }

private:
  std::vector<float> pixels_;
};

/// Cube of side 2 x diameter (per axis, in voxels) centred on `center`; voxels outside
/// the scan are filled with `pad_value`.
inline Volume crop_nodule(const Volume& ct, VoxelIndex center, double equiv_diameter_mm, float pad_value = 0.0f) {
  if (!(equiv_diameter_mm > 0.0) || !std::isfinite(equiv_diameter_mm))
    throw ValidationError("equivalent diameter must be positive, got " + std::to_string(equiv_diameter_mm));
  if (!ct.contains(center.z, center.y, center.x))
    throw ValidationError("nodule centre (" + std::to_string(center.z) + "," + std::to_string(center.y) + "," +
                          std::to_string(center.x) + ") lies outside the volume");
  std::array<int, 3> side{};
  for (int a = 0; a < 3; ++a)
    side[static_cast<std::size_t>(a)] =
        std::max(1, static_cast<int>(std::lround(2.0 * equiv_diameter_mm / ct.spacing[a])));
  const std::array<int, 3> start = {center.z - side[0] / 2, center.y - side[1] / 2, center.x - side[2] / 2};
  Volume out(side[0], side[1], side[2], pad_value, ct.spacing);
  for (int z = 0; z < side[0]; ++z) {
    const int sz = start[0] + z;
    if (sz < 0 || sz >= ct.nz) continue;
    for (int y = 0; y < side[1]; ++y) {
      const int sy = start[1] + y;
      if (sy < 0 || sy >= ct.ny) continue;
      for (int x = 0; x < side[2]; ++x) {
        const int sx = start[2] + x;
        if (sx >= 0 && sx < ct.nx) out.at(z, y, x) = ct.at(sz, sy, sx);
      }
    }
  }
  return out;
}

/// Trilinear resampling onto an n^3 grid with corner alignment (the first and last
/// samples of each axis coincide with the input's first and last voxels).
inline Volume resample_trilinear(const Volume& in, int n = kPatchSide) {
  if (in.nz < 2 || in.ny < 2 || in.nx < 2)
    throw ValidationError("cannot resample a degenerate volume (" + std::to_string(in.nz) + "x" +
                          std::to_string(in.ny) + "x" + std::to_string(in.nx) + ")");
  Volume out(n, n, n, 0.0f,
             {in.spacing.z * (in.nz - 1) / (n - 1), in.spacing.y * (in.ny - 1) / (n - 1),
              in.spacing.x * (in.nx - 1) / (n - 1)});
  struct Tap {
    int i0, i1;
    double f;
  };
  auto taps = [n](int extent) {
    std::vector<Tap> t(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const double s = static_cast<double>(i) * (extent - 1) / (n - 1);
      const int i0 = std::min(static_cast<int>(std::floor(s)), extent - 2);
      t[static_cast<std::size_t>(i)] = {i0, i0 + 1, s - i0};
    }
    return t;
  };
  const auto tz = taps(in.nz), ty = taps(in.ny), tx = taps(in.nx);
  for (int z = 0; z < n; ++z) {
    const auto& a = tz[static_cast<std::size_t>(z)];
    for (int y = 0; y < n; ++y) {
      const auto& b = ty[static_cast<std::size_t>(y)];
      for (int x = 0; x < n; ++x) {
        const auto& c = tx[static_cast<std::size_t>(x)];
        auto lerp_x = [&](int zz, int yy) {
          return (1.0 - c.f) * in.at(zz, yy, c.i0) + c.f * in.at(zz, yy, c.i1);
        };
        auto lerp_y = [&](int zz) { return (1.0 - b.f) * lerp_x(zz, b.i0) + b.f * lerp_x(zz, b.i1); };
        out.at(z, y, x) = static_cast<float>((1.0 - a.f) * lerp_y(a.i0) + a.f * lerp_y(a.i1));
      }
    }
  }
  return out;
}

inline void apply_window(Volume& v, IntensityWindow window) {
  if (!(window.hi > window.lo)) throw ValidationError("intensity window must satisfy hi > lo");
  const double scale = 1.0 / (window.hi - window.lo);
  for (float& x : v.data) {
    const double c = std::clamp(static_cast<double>(x), window.lo, window.hi);
    x = static_cast<float>(std::clamp((c - window.lo) * scale, 0.0, 1.0));
  }
}

/// Resamples to 32^3 and maps intensities through `window` onto [0,1].
inline NoduleVolume resize_to_cube32(const Volume& cube, IntensityWindow window = kLungWindow) {
  if (cube.size() == 0) throw ValidationError("cannot resize an empty cube");
  Volume r = resample_trilinear(cube, kPatchSide);
  apply_window(r, window);
  return NoduleVolume(std::move(r.data));
}

inline ChannelImage to_channel_layout(const NoduleVolume& vol) {
  return ChannelImage(std::vector<float>(vol.voxels().begin(), vol.voxels().end()));
}

inline NoduleVolume from_channel_layout(const ChannelImage& img) {
  return NoduleVolume(std::vector<float>(img.pixels().begin(), img.pixels().end()));
}

/// In-plane flips of every slice.
inline ChannelImage flip_axial(const ChannelImage& img, bool flip_y, bool flip_x) {
  ChannelImage out;
  for (int c = 0; c < ChannelImage::kChannels; ++c)
    for (int y = 0; y < kPatchSide; ++y)
      for (int x = 0; x < kPatchSide; ++x)
        out.at(c, y, x) = img.at(c, flip_y ? kPatchSide - 1 - y : y, flip_x ? kPatchSide - 1 - x : x);
  return out;
}

// ---------------------------------------------------------------------------
// Patch files: 32768 little-endian float32 (z, y, x) plus a JSON sidecar.

struct PatchMetadata {
  std::string nodule_id;
  IntensityWindow window = kLungWindow;
  Spacing source_spacing;
  std::array<int, 3> crop_voxels{};
};

inline std::filesystem::path patch_path(const std::filesystem::path& data_dir, const std::string& nodule_id) {
  return data_dir / "patches" / (nodule_id + ".f32");
}

inline std::filesystem::path sidecar_path(std::filesystem::path patch) {
  return patch.replace_extension(".json");
}

inline void write_patch(const std::filesystem::path& path, const NoduleVolume& vol, const PatchMetadata& meta) {
  io::write_atomic(path, [&](std::ostream& os) { io::write_floats_le(os, vol.voxels()); });
  nlohmann::json j{{"nodule_id", meta.nodule_id},
                   {"layout", "float32-le z,y,x 32x32x32"},
                   {"normalization", {{"method", "window"}, {"lo", meta.window.lo}, {"hi", meta.window.hi}}},
                   {"source_spacing_zyx", {meta.source_spacing.z, meta.source_spacing.y, meta.source_spacing.x}},
                   {"crop_voxels_zyx", meta.crop_voxels}};
  io::write_text_atomic(sidecar_path(path), j.dump(2) + "\n");
}

inline NoduleVolume read_patch(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open patch: " + path.string());
  std::vector<float> v(kPatchVoxels);
  io::read_floats_le(is, v);
  if (is.peek() != std::char_traits<char>::eof())
    throw ValidationError("patch " + path.string() + " is larger than 32^3 float32 values");
  return NoduleVolume(std::move(v));
}

inline PatchMetadata read_patch_metadata(const std::filesystem::path& patch) {
  try {
    auto j = nlohmann::json::parse(io::read_text(sidecar_path(patch)));
    PatchMetadata m;
    m.nodule_id = j.at("nodule_id").get<std::string>();
    m.window = {j.at("normalization").at("lo").get<double>(), j.at("normalization").at("hi").get<double>()};
    auto sp = j.at("source_spacing_zyx").get<std::array<double, 3>>();
    m.source_spacing = {sp[0], sp[1], sp[2]};
    m.crop_voxels = j.at("crop_voxels_zyx").get<std::array<int, 3>>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed patch sidecar for " + patch.string() + ": " + e.what());
  }
}

/// Full path from a record's source scan to a stored patch.
inline PatchMetadata prepare_patch(const NoduleRecord& record, const std::filesystem::path& data_dir,
                                   IntensityWindow window = kLungWindow) {
  const Volume ct = read_metaimage(record.volume_path);
  const Volume cube = crop_nodule(ct, record.center_voxel, record.equiv_diameter_mm);
  const NoduleVolume patch = resize_to_cube32(cube, window);
  PatchMetadata meta{record.nodule_id, window, ct.spacing, {cube.nz, cube.ny, cube.nx}};
  write_patch(patch_path(data_dir, record.nodule_id), patch, meta);
  return meta;
}

}  // namespace nodule_align
