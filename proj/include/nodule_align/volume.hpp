#pragma once

#include "nodule_align/common.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace nodule_align {

/// Voxel size in millimetres, in (z, y, x) order.
struct Spacing {
  double z = 1.0;
  double y = 1.0;
  double x = 1.0;
  double operator[](int axis) const { return axis == 0 ? z : axis == 1 ? y : x; }
};

/// Dense 3-D array stored z-major, then y, then x.
struct Volume {
  int nz = 0;
  int ny = 0;
  int nx = 0;
  Spacing spacing;
  std::vector<float> data;

  Volume() = default;
  Volume(int z, int y, int x, float fill = 0.0f, Spacing s = {})
      : nz(z), ny(y), nx(x), spacing(s), data(static_cast<std::size_t>(z) * y * x, fill) {}

  int extent(int axis) const { return axis == 0 ? nz : axis == 1 ? ny : nx; }
  std::size_t size() const { return data.size(); }
  std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * ny + static_cast<std::size_t>(y)) * nx + static_cast<std::size_t>(x);
  }
  float& at(int z, int y, int x) { return data[index(z, y, x)]; }
  float at(int z, int y, int x) const { return data[index(z, y, x)]; }
  bool contains(int z, int y, int x) const { return z >= 0 && y >= 0 && x >= 0 && z < nz && y < ny && x < nx; }
};

// ---------------------------------------------------------------------------
// MetaImage (.mhd + raw) for source CT volumes

/// Reads a 3-D MetaImage with MET_SHORT, MET_UCHAR or MET_FLOAT little-endian data.
inline Volume read_metaimage(const std::filesystem::path& header_path) {
  std::ifstream is(header_path);
  if (!is) throw ValidationError("cannot open volume header: " + header_path.string());
  std::map<std::string, std::string> keys;
  std::string line;
  while (std::getline(is, line)) {
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t\r"));
      s.erase(s.find_last_not_of(" \t\r") + 1);
      return s;
    };
    keys[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  auto need = [&](const std::string& k) -> const std::string& {
    auto it = keys.find(k);
    if (it == keys.end()) throw ValidationError(header_path.string() + ": missing MetaImage key " + k);
    return it->second;
  };
  if (need("NDims") != "3") throw ValidationError(header_path.string() + ": only 3-D volumes are supported");
  for (const char* k : {"ElementByteOrderMSB", "BinaryDataByteOrderMSB"}) {
    auto it = keys.find(k);
    if (it != keys.end() && (it->second == "True" || it->second == "true"))
      throw ValidationError(header_path.string() + ": big-endian data is not supported");
  }
  std::istringstream dims(need("DimSize"));
  int nx = 0, ny = 0, nz = 0;
  dims >> nx >> ny >> nz;
  if (!dims || nx <= 0 || ny <= 0 || nz <= 0) throw ValidationError(header_path.string() + ": bad DimSize");
  Spacing sp;
  if (auto it = keys.find("ElementSpacing"); it != keys.end()) {
    std::istringstream ss(it->second);
    ss >> sp.x >> sp.y >> sp.z;
    if (!ss || sp.x <= 0 || sp.y <= 0 || sp.z <= 0)
      throw ValidationError(header_path.string() + ": bad ElementSpacing");
  }
  const auto& type = need("ElementType");
  auto raw_path = std::filesystem::path(need("ElementDataFile"));
  if (raw_path.is_relative()) raw_path = header_path.parent_path() / raw_path;
  std::ifstream raw(raw_path, std::ios::binary);
  if (!raw) throw ValidationError("cannot open volume data: " + raw_path.string());

  Volume v(nz, ny, nx, 0.0f, sp);
  if (type == "MET_SHORT") {
    for (auto& x : v.data) x = static_cast<float>(io::read_le<std::int16_t>(raw));
  } else if (type == "MET_UCHAR") {
    for (auto& x : v.data) x = static_cast<float>(io::read_le<std::uint8_t>(raw));
  } else if (type == "MET_FLOAT") {
    io::read_floats_le(raw, v.data);
  } else {
    throw ValidationError(header_path.string() + ": unsupported ElementType " + type);
  }
  return v;
}

/// Writes `vol` as MET_SHORT (values rounded and clamped to int16) next to `header_path`.
inline void write_metaimage_short(const std::filesystem::path& header_path, const Volume& vol) {
  auto raw_path = header_path;
  raw_path.replace_extension(".raw");
  io::write_atomic(raw_path, [&](std::ostream& os) {
    for (float x : vol.data) {
      const float c = std::clamp(std::round(x), -32768.0f, 32767.0f);
      io::write_le(os, static_cast<std::int16_t>(c));
    }
  });
  std::ostringstream h;
  h << "ObjectType = Image\nNDims = 3\nBinaryData = True\nElementByteOrderMSB = False\n"
    << "DimSize = " << vol.nx << ' ' << vol.ny << ' ' << vol.nz << '\n'
    << "ElementSpacing = " << vol.spacing.x << ' ' << vol.spacing.y << ' ' << vol.spacing.z << '\n'
    << "ElementType = MET_SHORT\nElementDataFile = " << raw_path.filename().string() << '\n';
  io::write_text_atomic(header_path, h.str());
}

}  // namespace nodule_align
