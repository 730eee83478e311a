#pragma once

#include "nodule_align/config.hpp"
#include "nodule_align/model.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace nodule_align {

inline constexpr char kCheckpointMagic[8] = {'N', 'A', 'L', 'G', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Raised when a checkpoint does not match what the caller expects.
class CheckpointMismatch : public ValidationError {
public:
  CheckpointMismatch(const std::string& field, const std::string& found, const std::string& expected)
      : ValidationError("checkpoint mismatch on " + field + ": checkpoint has " + found + ", expected " + expected),
        field_(field), found_(found), expected_(expected) {}
  const std::string& field() const { return field_; }
  const std::string& found() const { return found_; }
  const std::string& expected() const { return expected_; }

private:
  std::string field_, found_, expected_;
};

struct StoredTensor {
  std::vector<int> shape;
  /// Element width on disk: 4 (float32) or 8 (float64).
  std::uint8_t width = 4;
  std::vector<double> values;
};

/// Manifest plus named tensors. Tensor order on disk follows the model's parameter order.
struct CheckpointFile {
  nlohmann::json manifest;
  std::vector<std::string> order;
  std::map<std::string, StoredTensor> tensors;

  bool has_text_branch() const { return manifest.value("has_text_branch", false); }
  int T() const { return manifest.at("T").get<int>(); }
  int fold() const { return manifest.at("fold").get<int>(); }
  Variant variant() const { return parse_variant(manifest.at("variant").get<std::string>()); }
  std::uint64_t seed() const { return manifest.at("seed").get<std::uint64_t>(); }
  TrainConfig config() const { return TrainConfig::from_json(manifest.at("config")); }
};

/// Manifest for a model trained with `cfg`.
inline nlohmann::json checkpoint_manifest(const TrainConfig& cfg, bool has_text_branch,
                                          const std::string& encoder_identity, std::uint64_t encoder_checksum) {
  nlohmann::json j;
  j["format"] = "nodule_align.checkpoint/1";
  j["config"] = cfg.to_json();
  j["config_hash"] = cfg.hash();
  j["seed"] = cfg.seed;
  j["variant"] = to_string(cfg.variant);
  j["fold"] = cfg.fold;
  j["T"] = cfg.T;
  j["num_classes"] = cfg.num_classes();
  j["width"] = cfg.width;
  j["alpha"] = cfg.alpha;
  j["beta"] = cfg.beta;
  std::vector<std::string> labels;
  for (auto c : train_classes(cfg.variant)) labels.emplace_back(to_string(c));
  j["class_labels"] = labels;
  j["class_names"] = cfg.class_names();
  j["has_text_branch"] = has_text_branch;
  j["text_encoder"] = {{"identity", encoder_identity}, {"checksum", hex64(encoder_checksum)}};
  return j;
}

template <class S>
void save_checkpoint(const std::filesystem::path& path, NoduleAlignModel<S>& model, const nlohmann::json& manifest) {
  auto params = model.parameters();
  const std::string text = manifest.dump();
  io::write_atomic(path, [&](std::ostream& os) {
    os.write(kCheckpointMagic, sizeof kCheckpointMagic);
    io::write_le(os, kCheckpointVersion);
    io::write_le(os, static_cast<std::uint64_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    io::write_le(os, static_cast<std::uint32_t>(params.size()));
    for (const auto* p : params) {
      io::write_le(os, static_cast<std::uint32_t>(p->name.size()));
      os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
      io::write_le(os, static_cast<std::uint32_t>(p->shape.size()));
      for (int d : p->shape) io::write_le(os, static_cast<std::uint32_t>(d));
      io::write_le(os, static_cast<std::uint8_t>(sizeof(S)));
      for (S v : p->value) io::write_le(os, v);
    }
  });
}

inline void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& file) {
  const std::string text = file.manifest.dump();
  io::write_atomic(path, [&](std::ostream& os) {
    os.write(kCheckpointMagic, sizeof kCheckpointMagic);
    io::write_le(os, kCheckpointVersion);
    io::write_le(os, static_cast<std::uint64_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    io::write_le(os, static_cast<std::uint32_t>(file.order.size()));
    for (const auto& name : file.order) {
      const auto& t = file.tensors.at(name);
      io::write_le(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      io::write_le(os, static_cast<std::uint32_t>(t.shape.size()));
      for (int d : t.shape) io::write_le(os, static_cast<std::uint32_t>(d));
      io::write_le(os, t.width);
      for (double v : t.values) {
        if (t.width == 4) io::write_le(os, static_cast<float>(v));
        else io::write_le(os, v);
      }
    }
  });
}

inline CheckpointFile read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open checkpoint: " + path.string());
  try {
    char magic[8];
    is.read(magic, sizeof magic);
    if (!is || !std::equal(magic, magic + 8, kCheckpointMagic))
      throw ValidationError(path.string() + " is not a checkpoint file");
    const auto version = io::read_le<std::uint32_t>(is);
    if (version != kCheckpointVersion)
      throw ValidationError("unsupported checkpoint version " + std::to_string(version));
    const auto len = io::read_le<std::uint64_t>(is);
    if (len > (1ull << 30)) throw ValidationError("checkpoint manifest too large");
    std::string text(len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(len));
    CheckpointFile file;
    file.manifest = nlohmann::json::parse(text);
    const auto count = io::read_le<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto name_len = io::read_le<std::uint32_t>(is);
      std::string name(name_len, '\0');
      is.read(name.data(), name_len);
      StoredTensor t;
      const auto rank = io::read_le<std::uint32_t>(is);
      if (rank > 8) throw ValidationError("tensor " + name + " has implausible rank");
      std::size_t n = 1;
      for (std::uint32_t r = 0; r < rank; ++r) {
        t.shape.push_back(static_cast<int>(io::read_le<std::uint32_t>(is)));
        n *= static_cast<std::size_t>(t.shape.back());
      }
      t.width = io::read_le<std::uint8_t>(is);
      if (t.width != 4 && t.width != 8) throw ValidationError("tensor " + name + " has unknown element width");
      t.values.resize(n);
      for (auto& v : t.values) v = t.width == 4 ? static_cast<double>(io::read_le<float>(is)) : io::read_le<double>(is);
      file.order.push_back(name);
      file.tensors.emplace(std::move(name), std::move(t));
    }
    if (is.peek() != std::char_traits<char>::eof()) throw ValidationError("trailing bytes after checkpoint tensors");
    return file;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed checkpoint manifest in " + path.string() + ": " + e.what());
  } catch (const RuntimeFailure& e) {
    throw ValidationError("truncated checkpoint " + path.string() + ": " + e.what());
  }
}

/// Copy holding only the image encoder and classifier head.
inline CheckpointFile strip_text_branch(const CheckpointFile& in) {
  CheckpointFile out;
  out.manifest = in.manifest;
  out.manifest["has_text_branch"] = false;
  for (const auto& name : in.order) {
    if (name.rfind("image.", 0) != 0 && name.rfind("head.", 0) != 0) continue;
    out.order.push_back(name);
    out.tensors.emplace(name, in.tensors.at(name));
  }
  return out;
}

/// What a caller requires of a checkpoint.
struct CheckpointExpectations {
  std::optional<int> T = std::nullopt;
  std::optional<std::string> config_hash = std::nullopt;
  std::optional<Variant> variant = std::nullopt;
  bool force = false;
};

/// Verifies the stored hash against the stored config and against the caller's
/// expectations. A hash mismatch is fatal unless `force` is set; a T mismatch always is.
inline void check_checkpoint(const CheckpointFile& file, const CheckpointExpectations& want = {}) {
  const std::string stored = file.manifest.at("config_hash").get<std::string>();
  const std::string recomputed = file.config().hash();
  if (stored != recomputed && !want.force) throw CheckpointMismatch("config_hash", stored, recomputed + " (recomputed)");
  if (want.T && file.T() != *want.T) throw CheckpointMismatch("T", std::to_string(file.T()), std::to_string(*want.T));
  if (want.variant && file.variant() != *want.variant)
    throw CheckpointMismatch("variant", to_string(file.variant()), to_string(*want.variant));
  if (want.config_hash && stored != *want.config_hash && !want.force)
    throw CheckpointMismatch("config_hash", stored, *want.config_hash);
}

/// Copies stored tensors into every parameter of `model`.
template <class S>
void load_parameters(NoduleAlignModel<S>& model, const CheckpointFile& file) {
  for (auto* p : model.parameters()) {
    auto it = file.tensors.find(p->name);
    if (it == file.tensors.end()) throw ValidationError("checkpoint lacks tensor " + p->name);
    if (it->second.shape != p->shape) throw CheckpointMismatch(p->name + " shape", "other", "model shape");
    for (std::size_t k = 0; k < p->size(); ++k) p->value[k] = static_cast<S>(it->second.values[k]);
  }
}

/// Image-only model from a checkpoint; enough for prediction and Grad-CAM.
template <class S>
NoduleAlignModel<S> image_model_from_checkpoint(const CheckpointFile& file) {
  typename NoduleAlignModel<S>::Shape shape;
  shape.num_classes = file.manifest.at("num_classes").get<int>();
  shape.width = file.manifest.at("width").get<int>();
  shape.T = file.T();
  shape.class_names = file.manifest.at("class_names").get<std::vector<std::string>>();
  NoduleAlignModel<S> model(shape);
  load_parameters(model, file);
  return model;
}

}  // namespace nodule_align
