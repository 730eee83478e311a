#pragma once

#include "nodule_align/common.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace nodule_align {

inline constexpr int kAttributeCount = 8;
inline constexpr int kFoldCount = 5;

/// Canonical attribute order. Every attribute vector in the project uses it.
inline constexpr std::array<std::string_view, kAttributeCount> kAttributeNames = {
    "subtlety", "internal structure", "calcification", "sphericity",
    "margin",   "lobulation",         "spiculation",   "texture"};

/// Column names of the annotation table for the attributes (same order).
inline constexpr std::array<std::string_view, kAttributeCount> kAttributeColumns = {
    "subtlety", "internal_structure", "calcification", "sphericity",
    "margin",   "lobulation",         "spiculation",   "texture"};

inline constexpr int kCalcificationIndex = 2;

struct ValueRange {
  double lo;
  double hi;
  bool contains(double v) const { return v >= lo && v <= hi; }
};

inline ValueRange attribute_range(int m) {
  return m == kCalcificationIndex ? ValueRange{1.0, 6.0} : ValueRange{1.0, 5.0};
}

inline constexpr ValueRange kMalignancyRange{1.0, 5.0};

enum class ClassLabel : int { benign = 0, unsure = 1, malignant = 2 };

inline std::string_view to_string(ClassLabel c) {
  switch (c) {
    case ClassLabel::benign: return "benign";
    case ClassLabel::unsure: return "unsure";
    case ClassLabel::malignant: return "malignant";
  }
  return "?";
}

struct VoxelIndex {
  int z = 0;
  int y = 0;
  int x = 0;
  friend bool operator==(const VoxelIndex&, const VoxelIndex&) = default;
};

using AttributeValues = std::array<double, kAttributeCount>;

struct NoduleRecord {
  std::string nodule_id;
  std::string patient_id;
  std::filesystem::path volume_path;
  VoxelIndex center_voxel;
  double equiv_diameter_mm = 0.0;
  double malignancy_score = 0.0;
  AttributeValues attribute_values{};

  void validate() const {
    auto fail = [&](const std::string& what) {
      throw ValidationError("record '" + nodule_id + "': " + what);
    };
    if (nodule_id.empty()) throw ValidationError("record with empty nodule_id");
    if (patient_id.empty()) fail("empty patient_id");
    if (!(equiv_diameter_mm > 0.0) || !std::isfinite(equiv_diameter_mm))
      fail("equiv_diameter_mm must be positive");
    if (!kMalignancyRange.contains(malignancy_score))
      fail("malignancy score " + std::to_string(malignancy_score) + " outside [1,5]");
    for (int m = 0; m < kAttributeCount; ++m) {
      const auto r = attribute_range(m);
      const double v = attribute_values[static_cast<std::size_t>(m)];
      if (!std::isfinite(v) || !r.contains(v))
        fail(std::string(kAttributeColumns[static_cast<std::size_t>(m)]) + " value " + std::to_string(v) +
             " outside [" + std::to_string(r.lo) + "," + std::to_string(r.hi) + "]");
    }
  }
};

/// Benign below 2.5, malignant above 3.5, unsure in between (both boundaries inclusive).
inline ClassLabel derive_class(double score, std::string_view record_id = {}) {
  if (!std::isfinite(score) || !kMalignancyRange.contains(score)) {
    std::string who = record_id.empty() ? std::string("<unnamed>") : std::string(record_id);
    throw ValidationError("record '" + who + "': malignancy score " + std::to_string(score) +
                          " outside [1,5]");
  }
  if (score < 2.5) return ClassLabel::benign;
  if (score > 3.5) return ClassLabel::malignant;
  return ClassLabel::unsure;
}

inline ClassLabel derive_class(const NoduleRecord& r) { return derive_class(r.malignancy_score, r.nodule_id); }

/// Per-instance simplex over the eight attributes.
struct AttributeWeights {
  std::array<double, kAttributeCount> w{};

  double operator[](int m) const { return w[static_cast<std::size_t>(m)]; }
};

/// Softmax of the raw annotated values. No per-attribute rescaling, so calcification
/// (range [1,6]) enters as written.
inline AttributeWeights attribute_weights(std::span<const double> values) {
  if (values.size() != static_cast<std::size_t>(kAttributeCount))
    throw ValidationError("attribute vector has " + std::to_string(values.size()) + " values, expected 8");
  for (int m = 0; m < kAttributeCount; ++m) {
    const double v = values[static_cast<std::size_t>(m)];
    const auto r = attribute_range(m);
    if (!std::isfinite(v) || !r.contains(v))
      throw ValidationError(std::string("attribute ") + std::string(kAttributeColumns[static_cast<std::size_t>(m)]) +
                            " value " + std::to_string(v) + " out of range");
  }
  const double top = *std::max_element(values.begin(), values.end());
  AttributeWeights out;
  double total = 0.0;
  for (std::size_t m = 0; m < out.w.size(); ++m) {
    out.w[m] = std::exp(values[m] - top);
    total += out.w[m];
  }
  for (double& x : out.w) x /= total;
  return out;
}

inline AttributeWeights attribute_weights(const NoduleRecord& r) {
  try {
    return attribute_weights(std::span<const double>(r.attribute_values));
  } catch (const ValidationError& e) {
    throw ValidationError("record '" + r.nodule_id + "': " + e.what());
  }
}

/// Collapses several readers' ratings of one nodule into the per-attribute mean.
inline AttributeValues average_readings(std::span<const AttributeValues> readings) {
  if (readings.empty()) throw ValidationError("no annotator readings to average");
  AttributeValues mean{};
  for (const auto& r : readings)
    for (std::size_t m = 0; m < mean.size(); ++m) mean[m] += r[m];
  for (double& v : mean) v /= static_cast<double>(readings.size());
  return mean;
}

// ---------------------------------------------------------------------------
// Annotation table

inline std::vector<std::string> annotation_columns() {
  std::vector<std::string> cols = {"nodule_id",         "patient_id", "volume_path", "center_z", "center_y",
                                   "center_x",          "equiv_diameter_mm", "malignancy"};
  for (auto c : kAttributeColumns) cols.emplace_back(c);
  return cols;
}

namespace detail {

inline std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(',', start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline double parse_real(const std::string& text, const std::string& column, std::size_t line_no) {
  try {
    std::size_t used = 0;
    double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ValidationError("line " + std::to_string(line_no) + ": column '" + column + "' is not a number: '" +
                          text + "'");
  }
}

inline int parse_int(const std::string& text, const std::string& column, std::size_t line_no) {
  const double v = parse_real(text, column, line_no);
  if (v != std::floor(v) || std::abs(v) > 1e9)
    throw ValidationError("line " + std::to_string(line_no) + ": column '" + column + "' is not an integer");
  return static_cast<int>(v);
}

inline std::string format_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

/// Reads and strictly validates an annotation table. Relative volume paths are resolved
/// against the table's directory.
inline std::vector<NoduleRecord> parse_annotation_table(std::istream& is,
                                                        const std::filesystem::path& base_dir = {}) {
  std::string line;
  if (!std::getline(is, line)) throw ValidationError("annotation table is empty");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // UTF-8 BOM
  const auto header = detail::split_csv_line(line);
  const auto expected = annotation_columns();
  if (header != expected) {
    std::string want;
    for (const auto& c : expected) want += (want.empty() ? "" : ",") + c;
    throw ValidationError("annotation table header mismatch; expected: " + want);
  }
  std::vector<NoduleRecord> records;
  std::set<std::string> seen;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != expected.size())
      throw ValidationError("line " + std::to_string(line_no) + ": expected " + std::to_string(expected.size()) +
                            " columns, found " + std::to_string(f.size()));
    for (std::size_t c = 0; c < f.size(); ++c)
      if (f[c].empty())
        throw ValidationError("line " + std::to_string(line_no) + ": missing value for '" + expected[c] + "'");
    NoduleRecord r;
    r.nodule_id = f[0];
    r.patient_id = f[1];
    r.volume_path = f[2];
    if (r.volume_path.is_relative() && !base_dir.empty()) r.volume_path = base_dir / r.volume_path;
    r.center_voxel = {detail::parse_int(f[3], expected[3], line_no), detail::parse_int(f[4], expected[4], line_no),
                      detail::parse_int(f[5], expected[5], line_no)};
    r.equiv_diameter_mm = detail::parse_real(f[6], expected[6], line_no);
    r.malignancy_score = detail::parse_real(f[7], expected[7], line_no);
    for (int m = 0; m < kAttributeCount; ++m)
      r.attribute_values[static_cast<std::size_t>(m)] =
          detail::parse_real(f[8 + static_cast<std::size_t>(m)], expected[8 + static_cast<std::size_t>(m)], line_no);
    r.validate();
    if (!seen.insert(r.nodule_id).second) throw ValidationError("duplicate nodule_id '" + r.nodule_id + "'");
    records.push_back(std::move(r));
  }
  return records;
}

inline std::vector<NoduleRecord> read_annotation_table(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open annotation table: " + path.string());
  return parse_annotation_table(is, path.parent_path());
}

/// Writes records; volume paths are written relative to `base_dir` when they live under it.
inline void write_annotation_table(std::ostream& os, std::span<const NoduleRecord> records,
                                   const std::filesystem::path& base_dir = {}) {
  const auto cols = annotation_columns();
  for (std::size_t c = 0; c < cols.size(); ++c) os << (c ? "," : "") << cols[c];
  os << '\n';
  for (const auto& r : records) {
    auto vp = r.volume_path;
    if (!base_dir.empty() && !vp.empty()) {
      auto rel = vp.lexically_relative(base_dir);
      if (!rel.empty() && *rel.begin() != "..") vp = rel;
    }
    os << r.nodule_id << ',' << r.patient_id << ',' << vp.generic_string() << ',' << r.center_voxel.z << ','
       << r.center_voxel.y << ',' << r.center_voxel.x << ',' << detail::format_real(r.equiv_diameter_mm) << ','
       << detail::format_real(r.malignancy_score);
    for (double v : r.attribute_values) os << ',' << detail::format_real(v);
    os << '\n';
  }
}

inline void write_annotation_table(const std::filesystem::path& path, std::span<const NoduleRecord> records) {
  io::write_atomic(path, [&](std::ostream& os) { write_annotation_table(os, records, path.parent_path()); });
}

// ---------------------------------------------------------------------------
// Dataset variants and folds

enum class Variant { A, B, C };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::A: return "LIDC-A";
    case Variant::B: return "LIDC-B";
    case Variant::C: return "LIDC-C";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  if (s == "A" || s == "LIDC-A") return Variant::A;
  if (s == "B" || s == "LIDC-B") return Variant::B;
  if (s == "C" || s == "LIDC-C") return Variant::C;
  throw ValidationError("unknown dataset variant '" + std::string(s) + "' (expected A, B or C)");
}

/// Classes the model is trained on; a class's model index is its position here.
inline std::vector<ClassLabel> train_classes(Variant v) {
  if (v == Variant::C) return {ClassLabel::benign, ClassLabel::malignant};
  return {ClassLabel::benign, ClassLabel::unsure, ClassLabel::malignant};
}

/// Classes that appear in the test set; a class's metric index is its position here.
inline std::vector<ClassLabel> test_classes(Variant v) {
  if (v == Variant::A) return {ClassLabel::benign, ClassLabel::unsure, ClassLabel::malignant};
  return {ClassLabel::benign, ClassLabel::malignant};
}

inline int index_of(std::span<const ClassLabel> classes, ClassLabel c) {
  auto it = std::find(classes.begin(), classes.end(), c);
  return it == classes.end() ? -1 : static_cast<int>(it - classes.begin());
}

struct DatasetSplit {
  Variant variant = Variant::A;
  int fold_index = 0;
  std::vector<NoduleRecord> train;
  std::vector<NoduleRecord> test;
};

namespace detail {

/// Fisher-Yates with a fixed index draw so the permutation does not depend on the
/// standard library's distribution implementation.
template <class T>
void seeded_shuffle(std::vector<T>& items, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace detail

/// Patient ids assigned to each of the five folds.
inline std::array<std::set<std::string>, kFoldCount> patient_folds(std::span<const NoduleRecord> records,
                                                                   std::uint64_t seed) {
  std::set<std::string> unique;
  for (const auto& r : records) unique.insert(r.patient_id);
  std::vector<std::string> patients(unique.begin(), unique.end());
  detail::seeded_shuffle(patients, seed);
  std::array<std::set<std::string>, kFoldCount> folds;
  for (std::size_t i = 0; i < patients.size(); ++i) folds[i % kFoldCount].insert(patients[i]);
  return folds;
}

/// Patient-disjoint train/test split for one fold of one variant. Fold membership is
/// decided over all records, so the same patients form fold f in every variant.
inline DatasetSplit build_split(std::span<const NoduleRecord> records, Variant variant, int fold_index,
                                std::uint64_t seed) {
  if (records.empty()) throw ValidationError("cannot split an empty record list");
  if (fold_index < 0 || fold_index >= kFoldCount)
    throw ValidationError("fold index " + std::to_string(fold_index) + " outside 0..4");
  const auto folds = patient_folds(records, seed);
  const auto& test_patients = folds[static_cast<std::size_t>(fold_index)];
  const auto train_cls = train_classes(variant);
  const auto test_cls = test_classes(variant);

  DatasetSplit split;
  split.variant = variant;
  split.fold_index = fold_index;
  for (const auto& r : records) {
    const ClassLabel c = derive_class(r);
    if (test_patients.count(r.patient_id)) {
      if (index_of(test_cls, c) >= 0) split.test.push_back(r);
    } else if (index_of(train_cls, c) >= 0) {
      split.train.push_back(r);
    }
  }
  for (ClassLabel c : train_cls) {
    const bool present = std::any_of(split.train.begin(), split.train.end(),
                                     [&](const NoduleRecord& r) { return derive_class(r) == c; });
    if (!present)
      throw ValidationError(to_string(variant) + " fold " + std::to_string(fold_index) + ": class '" +
                            std::string(to_string(c)) + "' is absent from the training set");
  }
  return split;
}

// ---------------------------------------------------------------------------
// Split manifest

struct FoldManifest {
  int fold = 0;
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;
};

struct SplitManifest {
  Variant variant = Variant::A;
  std::uint64_t seed = 0;
  std::string data_dir;
  std::vector<FoldManifest> folds;

  const FoldManifest& fold(int index) const {
    for (const auto& f : folds)
      if (f.fold == index) return f;
    throw ValidationError("split manifest has no fold " + std::to_string(index));
  }
};

inline std::vector<std::string> ids_of(std::span<const NoduleRecord> records) {
  std::vector<std::string> ids;
  ids.reserve(records.size());
  for (const auto& r : records) ids.push_back(r.nodule_id);
  return ids;
}

inline nlohmann::json to_json(const SplitManifest& m) {
  nlohmann::json j;
  j["format"] = "nodule_align.split/1";
  j["variant"] = to_string(m.variant);
  j["seed"] = m.seed;
  j["data_dir"] = m.data_dir;
  auto names = [](const std::vector<ClassLabel>& cls) {
    std::vector<std::string> out;
    for (auto c : cls) out.emplace_back(to_string(c));
    return out;
  };
  j["train_classes"] = names(train_classes(m.variant));
  j["test_classes"] = names(test_classes(m.variant));
  j["folds"] = nlohmann::json::array();
  for (const auto& f : m.folds) {
    nlohmann::json jf{{"fold", f.fold}, {"train", f.train}, {"test", f.test}};
    if (!f.validation.empty()) jf["validation"] = f.validation;
    j["folds"].push_back(std::move(jf));
  }
  return j;
}

inline SplitManifest split_manifest_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "nodule_align.split/1")
      throw ValidationError("unsupported split manifest format");
    SplitManifest m;
    m.variant = parse_variant(j.at("variant").get<std::string>());
    m.seed = j.at("seed").get<std::uint64_t>();
    m.data_dir = j.value("data_dir", std::string{});
    for (const auto& jf : j.at("folds")) {
      FoldManifest f;
      f.fold = jf.at("fold").get<int>();
      f.train = jf.at("train").get<std::vector<std::string>>();
      f.test = jf.at("test").get<std::vector<std::string>>();
      if (jf.contains("validation")) f.validation = jf.at("validation").get<std::vector<std::string>>();
      m.folds.push_back(std::move(f));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed split manifest: ") + e.what());
  }
}

inline void write_split_manifest(const std::filesystem::path& path, const SplitManifest& m) {
  io::write_text_atomic(path, to_json(m).dump(2) + "\n");
}

inline SplitManifest read_split_manifest(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("cannot parse split manifest " + path.string() + ": " + e.what());
  }
  return split_manifest_from_json(j);
}

/// All five folds of one variant.
inline SplitManifest build_split_manifest(std::span<const NoduleRecord> records, Variant variant,
                                          std::uint64_t seed, std::string data_dir) {
  SplitManifest m;
  m.variant = variant;
  m.seed = seed;
  m.data_dir = std::move(data_dir);
  for (int f = 0; f < kFoldCount; ++f) {
    auto split = build_split(records, variant, f, seed);
    m.folds.push_back({f, ids_of(split.train), {}, ids_of(split.test)});
  }
  return m;
}

}  // namespace nodule_align
