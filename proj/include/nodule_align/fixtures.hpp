#pragma once

#include "nodule_align/annotations.hpp"
#include "nodule_align/preprocessing.hpp"
#include "nodule_align/rng.hpp"
#include "nodule_align/volume.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace nodule_align {

enum class FixtureLayout {
  centered,  ///< lesion centred on the annotated point
  quadrant,  ///< lesion shifted so it fills one in-plane quadrant of the crop
};

inline FixtureLayout parse_fixture_layout(std::string_view s) {
  if (s == "centered") return FixtureLayout::centered;
  if (s == "quadrant") return FixtureLayout::quadrant;
  throw ValidationError("layout must be centered or quadrant, got '" + std::string(s) + "'");
}

/// Generator-side facts about one synthetic nodule.
struct FixtureTruth {
  std::string nodule_id;
  ClassLabel label = ClassLabel::benign;
  int quadrant = -1;  ///< lesion quadrant of the crop (0 TL, 1 TR, 2 BL, 3 BR), -1 when centred
  int spikes = 0;
};

struct FixtureOptions {
  int n = 200;
  std::uint64_t seed = 0;
  FixtureLayout layout = FixtureLayout::centered;
};

struct Fixture {
  std::vector<NoduleRecord> records;
  std::vector<FixtureTruth> truth;
};

/// Synthetic scan geometry.
inline constexpr int kFixtureDepth = 32;
inline constexpr int kFixtureSide = 48;
inline constexpr Spacing kFixtureSpacing{1.25, 0.8, 0.8};

namespace detail {

inline double quantize_quarter(double v, ValueRange r) { return std::clamp(std::round(v * 4.0) / 4.0, r.lo, r.hi); }

/// Scores on the quarter grid inside each class band.
inline double draw_score(ClassLabel c, Rng& rng) {
  switch (c) {
    case ClassLabel::benign: return 1.0 + 0.25 * static_cast<double>(rng.below(6));      // 1.00 .. 2.25
    case ClassLabel::unsure: return 2.5 + 0.25 * static_cast<double>(rng.below(5));      // 2.50 .. 3.50
    case ClassLabel::malignant: return 3.75 + 0.25 * static_cast<double>(rng.below(6));  // 3.75 .. 5.00
  }
  return 1.0;
}

/// Attribute values as averaged ratings, correlated with the severity s in [0,1].
inline AttributeValues draw_attributes(ClassLabel c, double s, Rng& rng) {
  AttributeValues v{};
  auto put = [&](int m, double x) { v[static_cast<std::size_t>(m)] = quantize_quarter(x, attribute_range(m)); };
  put(0, 2.5 + 2.0 * s + rng.normal(0.0, 0.6));             // subtlety
  put(1, rng.bernoulli(0.05) ? 2.0 : 1.0);                   // internal structure
  const bool calcified = c == ClassLabel::benign && rng.bernoulli(0.3);
  put(2, calcified ? 1.0 + static_cast<double>(rng.below(5)) : 6.0);  // calcification, 6 = absent
  put(3, 4.2 - 1.6 * s + rng.normal(0.0, 0.5));              // sphericity
  put(4, 4.6 - 2.4 * s + rng.normal(0.0, 0.5));              // margin
  put(5, 1.2 + 2.6 * s + rng.normal(0.0, 0.5));              // lobulation
  put(6, 1.0 + 3.0 * s + rng.normal(0.0, 0.5));              // spiculation
  const bool ground_glass = c == ClassLabel::benign && rng.bernoulli(0.15);
  put(7, ground_glass ? rng.uniform(1.5, 2.5) : 4.0 + 0.8 * s + rng.normal(0.0, 0.5));  // texture
  return v;
}

struct Spike {
  double dz, dy, dx;  // unit direction
  double length;
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double segment_distance(double pz, double py, double px, const Spike& s, double start, double& along) {
  along = pz * s.dz + py * s.dy + px * s.dx;
  const double t = std::clamp(along, start, start + s.length);
  const double qz = pz - t * s.dz, qy = py - t * s.dy, qx = px - t * s.dx;
  return std::sqrt(qz * qz + qy * qy + qx * qx);
}

}  // namespace detail

/// Renders one scan in Hounsfield units. The lesion centre is `lesion` (voxel coordinates,
/// may be fractional); shape parameters come from the attribute values.
inline Volume render_nodule_scan(const NoduleRecord& r, double lz, double ly, double lx, Rng& rng, int& spike_count) {
  const auto& a = r.attribute_values;
  const double radius = r.equiv_diameter_mm / 2.0;
  const double elong = 1.0 + 0.12 * (5.0 - a[3]);
  const double edge = radius * (0.06 + 0.07 * (5.0 - a[4]));
  const double lob_amp = 0.07 * (a[5] - 1.0);
  const int lob_k = 3 + static_cast<int>(rng.below(3));
  const double lob_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double peak = -850.0 + 890.0 * (0.3 + 0.7 * (a[7] - 1.0) / 4.0) * (0.85 + 0.03 * a[0]);
  const bool calcified = a[2] < 6.0;
  const double calc_radius = radius * (a[2] == 3.0 ? 0.5 : 0.3);

  spike_count = static_cast<int>(std::lround(2.0 * (a[6] - 1.0)));
  std::vector<detail::Spike> spikes;
  for (int s = 0; s < spike_count; ++s) {
    const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double dz = rng.uniform(-0.35, 0.35);
    const double planar = std::sqrt(1.0 - dz * dz);
    spikes.push_back({dz, planar * std::sin(phi), planar * std::cos(phi), radius * rng.uniform(0.6, 1.0)});
  }
  const double axis_phi = rng.uniform(0.0, std::numbers::pi);
  const double ca = std::cos(axis_phi), sa = std::sin(axis_phi);

  Volume vol(kFixtureDepth, kFixtureSide, kFixtureSide, 0.0f, kFixtureSpacing);
  for (int z = 0; z < vol.nz; ++z)
    for (int y = 0; y < vol.ny; ++y)
      for (int x = 0; x < vol.nx; ++x) {
        const double pz = (z - lz) * kFixtureSpacing.z, py = (y - ly) * kFixtureSpacing.y,
                     px = (x - lx) * kFixtureSpacing.x;
        const double u = ca * px + sa * py, w = -sa * px + ca * py;
        const double dist = std::sqrt(pz * pz + (u * u) / (elong * elong) + w * w);
        const double theta = std::atan2(py, px);
        const double r_eff = radius * (1.0 + lob_amp * std::cos(lob_k * theta + lob_phase));
        double body = detail::sigmoid((r_eff - dist) / edge);
        for (const auto& s : spikes) {
          double along = 0.0;
          const double d = detail::segment_distance(pz, py, px, s, 0.8 * radius, along);
          if (along < 0.8 * radius) continue;
          const double fade = 1.0 - 0.6 * std::clamp((along - 0.8 * radius) / (s.length + 0.2 * radius), 0.0, 1.0);
          body = std::max(body, 0.85 * fade * std::exp(-d * d / (2.0 * 0.45 * 0.45)));
        }
        double hu = -850.0 + (peak + 850.0) * body;
        if (calcified) {
          const double rr = std::sqrt(pz * pz + py * py + px * px);
          hu += 650.0 * detail::sigmoid((calc_radius - rr) / 0.4);
        }
        hu += rng.normal(0.0, 25.0);
        vol.at(z, y, x) = static_cast<float>(hu);
      }
  return vol;
}

/// Generates records and truth without touching the file system. Volume paths are
/// `volumes/<nodule_id>.mhd` relative to the fixture directory.
inline Fixture make_fixture(const FixtureOptions& opt) {
  if (opt.n < 30) throw ValidationError("fixture needs n >= 30, got " + std::to_string(opt.n));
  Rng rng(derive_seed(opt.seed, 0xf1c7));
  const int n_benign = static_cast<int>(std::lround(0.4 * opt.n));
  const int n_unsure = static_cast<int>(std::lround(0.3 * opt.n));
  std::vector<ClassLabel> classes;
  for (int i = 0; i < opt.n; ++i)
    classes.push_back(i < n_benign ? ClassLabel::benign
                                   : i < n_benign + n_unsure ? ClassLabel::unsure : ClassLabel::malignant);
  detail::seeded_shuffle(classes, derive_seed(opt.seed, 0xc1a5));

  Fixture fx;
  int patient = 0, left_in_patient = 0, nodule_in_patient = 0;
  char buf[32];
  for (int i = 0; i < opt.n; ++i) {
    if (left_in_patient == 0) {
      ++patient;
      left_in_patient = 1 + static_cast<int>(rng.below(3));
      nodule_in_patient = 0;
    }
    --left_in_patient;
    ++nodule_in_patient;
    NoduleRecord r;
    std::snprintf(buf, sizeof buf, "FX-%04d", patient);
    r.patient_id = buf;
    std::snprintf(buf, sizeof buf, "FX-%04d-N%d", patient, nodule_in_patient);
    r.nodule_id = buf;
    r.volume_path = std::filesystem::path("volumes") / (r.nodule_id + ".mhd");
    const ClassLabel c = classes[static_cast<std::size_t>(i)];
    r.malignancy_score = detail::draw_score(c, rng);
    const double s = (r.malignancy_score - 1.0) / 4.0;
    r.equiv_diameter_mm = std::round(4.0 * std::clamp(6.0 + 5.0 * s + rng.normal(0.0, 1.0), 5.0, 12.0)) / 4.0;
    r.attribute_values = detail::draw_attributes(c, s, rng);
    r.center_voxel = {kFixtureDepth / 2 + static_cast<int>(rng.below(3)) - 1,
                      kFixtureSide / 2 + static_cast<int>(rng.below(3)) - 1,
                      kFixtureSide / 2 + static_cast<int>(rng.below(3)) - 1};
    FixtureTruth t;
    t.nodule_id = r.nodule_id;
    t.label = c;
    t.quadrant = opt.layout == FixtureLayout::quadrant ? static_cast<int>(rng.below(4)) : -1;
    fx.records.push_back(std::move(r));
    fx.truth.push_back(t);
  }
  return fx;
}

inline void write_fixture_truth(const std::filesystem::path& path, std::span<const FixtureTruth> truth) {
  io::write_atomic(path, [&](std::ostream& os) {
    os << "nodule_id,class,quadrant,spikes\n";
    for (const auto& t : truth) os << t.nodule_id << ',' << to_string(t.label) << ',' << t.quadrant << ',' << t.spikes << '\n';
  });
}

inline std::vector<FixtureTruth> read_fixture_truth(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open fixture truth: " + path.string());
  std::string line;
  std::getline(is, line);
  std::vector<FixtureTruth> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 4) throw ValidationError("malformed fixture truth line: " + line);
    FixtureTruth t;
    t.nodule_id = f[0];
    t.label = f[1] == "benign" ? ClassLabel::benign : f[1] == "unsure" ? ClassLabel::unsure : ClassLabel::malignant;
    t.quadrant = std::stoi(f[2]);
    t.spikes = std::stoi(f[3]);
    out.push_back(t);
  }
  return out;
}

/// Writes scans, the annotation table, 32^3 patches and the truth table under `dir`.
inline Fixture write_fixture(const std::filesystem::path& dir, const FixtureOptions& opt) {
  Fixture fx = make_fixture(opt);
  std::filesystem::create_directories(dir / "volumes");
  for (std::size_t i = 0; i < fx.records.size(); ++i) {
    auto& r = fx.records[i];
    auto& t = fx.truth[i];
    Rng rng(derive_seed(opt.seed, fnv1a(r.nodule_id)));
    double lz = r.center_voxel.z, ly = r.center_voxel.y, lx = r.center_voxel.x;
    if (t.quadrant >= 0) {
      const double half_y = r.equiv_diameter_mm / 2.0 / kFixtureSpacing.y;
      const double half_x = r.equiv_diameter_mm / 2.0 / kFixtureSpacing.x;
      ly += (t.quadrant >= 2 ? 1.0 : -1.0) * half_y;
      lx += (t.quadrant % 2 == 1 ? 1.0 : -1.0) * half_x;
    }
    const Volume scan = render_nodule_scan(r, lz, ly, lx, rng, t.spikes);
    r.volume_path = dir / "volumes" / (r.nodule_id + ".mhd");
    write_metaimage_short(r.volume_path, scan);
  }
  write_annotation_table(dir / "annotations.csv", fx.records);
  for (const auto& r : fx.records) prepare_patch(r, dir);
  write_fixture_truth(dir / "fixture_truth.csv", fx.truth);
  return fx;
}

}  // namespace nodule_align
