#pragma once

#include "nodule_align/annotations.hpp"
#include "nodule_align/ccp.hpp"
#include "nodule_align/encoders.hpp"
#include "nodule_align/losses.hpp"

#include <nlohmann/json.hpp>

#include <charconv>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>

namespace nodule_align {

/// Flat `key = value` configuration. Later assignments replace earlier ones; the origin
/// of each value is kept for run manifests.
class FlatConfig {
public:
  void set(const std::string& key, const std::string& value, const std::string& source) {
    values_[key] = value;
    sources_[key] = source;
  }

  static FlatConfig parse(std::istream& is, const std::string& source) {
    FlatConfig c;
    c.merge(is, source);
    return c;
  }

  static FlatConfig load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path.string());
    return parse(is, "file:" + path.string());
  }

  void merge(std::istream& is, const std::string& source) {
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string t = detail::trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos)
        throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
      const std::string key = detail::trim(t.substr(0, eq));
      if (key.empty()) throw ConfigError(source + ":" + std::to_string(line_no) + ": empty key");
      set(key, detail::trim(t.substr(eq + 1)), source);
    }
  }

  /// Applies a `key=value` override.
  void apply_override(const std::string& assignment, const std::string& source = "cli") {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
    set(detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)), source);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::string& get(const std::string& key) const { return values_.at(key); }
  const std::map<std::string, std::string>& values() const { return values_; }
  const std::map<std::string, std::string>& sources() const { return sources_; }

private:
  std::map<std::string, std::string> values_;
  std::map<std::string, std::string> sources_;
};

struct LossSwitches {
  bool ic = true;
  bool ia = true;
  bool ca = true;
  friend bool operator==(const LossSwitches&, const LossSwitches&) = default;
};

inline std::string to_string(TextEncoderChoice c) { return c == TextEncoderChoice::stub ? "stub" : "pretrained"; }
inline std::string to_string(ConditionMode m) { return m == ConditionMode::channel_groups ? "channel_groups" : "shared"; }

struct TrainConfig {
  std::string data_dir;
  std::string out_dir;
  Variant variant = Variant::A;
  int fold = 0;
  std::uint64_t seed = 0;
  int T = 8;
  double alpha = 1.0;
  double beta = 0.5;
  double lr0 = 0.001;
  double momentum = 0.9;
  double weight_decay = 0.00005;
  double tau_init = 0.07;
  int epochs = 100;
  int batch_size = 32;
  LossSwitches losses;
  AttributeWeighting attribute_weighting = AttributeWeighting::log_weight;
  TextEncoderChoice encoder = TextEncoderChoice::stub;
  std::uint64_t encoder_seed = 0;
  ConditionMode condition = ConditionMode::channel_groups;
  int width = 64;
  double val_fraction = 0.1;
  bool augment_flip = true;
  std::string class_name_benign = "benign nodule";
  std::string class_name_unsure = "unsure nodule";
  std::string class_name_malignant = "malignant nodule";

  static inline const std::set<std::string> kRequired = {"data_dir", "out_dir"};
  /// Keys that do not change what is trained.
  static inline const std::set<std::string> kUnhashed = {"data_dir", "out_dir"};

  std::vector<std::string> class_names() const {
    std::vector<std::string> out;
    for (auto c : train_classes(variant)) {
      if (c == ClassLabel::benign) out.push_back(class_name_benign);
      if (c == ClassLabel::unsure) out.push_back(class_name_unsure);
      if (c == ClassLabel::malignant) out.push_back(class_name_malignant);
    }
    return out;
  }

  int num_classes() const { return static_cast<int>(train_classes(variant).size()); }

  void validate() const {
    auto positive = [](double v, const char* key) {
      if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(key) + " must be positive");
    };
    positive(lr0, "lr0");
    auto non_negative = [](double v, const char* key) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(std::string(key) + " must be non-negative");
    };
    non_negative(momentum, "momentum");
    non_negative(weight_decay, "weight_decay");
    positive(tau_init, "tau_init");
    if (alpha < 0 || beta < 0) throw ConfigError("alpha and beta must be non-negative");
    if (fold < 0 || fold >= kFoldCount) throw ConfigError("fold must be in 0..4");
    if (epochs <= 0) throw ConfigError("epochs must be positive");
    if (batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (T <= 0) throw ConfigError("T must be positive");
    if (width <= 0) throw ConfigError("width must be positive");
    if (condition == ConditionMode::channel_groups && (width * 8) % T != 0)
      throw ConfigError("T = " + std::to_string(T) + " must divide the feature channel count " + std::to_string(width * 8));
    if (val_fraction < 0 || val_fraction >= 1) throw ConfigError("val_fraction must be in [0,1)");
  }

  std::map<std::string, std::string> to_flat() const {
    auto real = [](double v) { return detail::format_real(v); };
    auto flag = [](bool b) { return std::string(b ? "true" : "false"); };
    return {{"data_dir", data_dir},
            {"out_dir", out_dir},
            {"variant", to_string(variant)},
            {"fold", std::to_string(fold)},
            {"seed", std::to_string(seed)},
            {"T", std::to_string(T)},
            {"alpha", real(alpha)},
            {"beta", real(beta)},
            {"lr0", real(lr0)},
            {"momentum", real(momentum)},
            {"weight_decay", real(weight_decay)},
            {"tau_init", real(tau_init)},
            {"epochs", std::to_string(epochs)},
            {"batch_size", std::to_string(batch_size)},
            {"loss_ic", flag(losses.ic)},
            {"loss_ia", flag(losses.ia)},
            {"loss_ca", flag(losses.ca)},
            {"attribute_weighting", to_string(attribute_weighting)},
            {"encoder", to_string(encoder)},
            {"encoder_seed", std::to_string(encoder_seed)},
            {"condition", to_string(condition)},
            {"width", std::to_string(width)},
            {"val_fraction", real(val_fraction)},
            {"augment_flip", flag(augment_flip)},
            {"class_name_benign", class_name_benign},
            {"class_name_unsure", class_name_unsure},
            {"class_name_malignant", class_name_malignant}};
  }

  std::string canonical_text() const {
    std::string s;
    for (const auto& [k, v] : to_flat())
      if (!kUnhashed.count(k)) s += k + "=" + v + "\n";
    return s;
  }

  std::string hash() const { return hex64(fnv1a(canonical_text())); }

  static TrainConfig from_flat(const FlatConfig& flat) {
    TrainConfig c;
    const auto known = c.to_flat();
    for (const auto& [k, v] : flat.values())
      if (!known.count(k)) throw ConfigError("unknown config key: " + k);
    for (const auto& k : kRequired)
      if (!flat.has(k) || flat.get(k).empty()) throw ConfigError("missing required config key: " + k);

    auto str = [&](const char* k, std::string& out) {
      if (flat.has(k)) out = flat.get(k);
    };
    auto real = [&](const char* k, double& out) {
      if (!flat.has(k)) return;
      const auto& v = flat.get(k);
      try {
        std::size_t used = 0;
        out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
      } catch (const std::exception&) {
        throw ConfigError("config key " + std::string(k) + ": not a number: '" + v + "'");
      }
    };
    auto integer = [&](const char* k, auto& out) {
      if (!flat.has(k)) return;
      const auto& v = flat.get(k);
      auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
      if (ec != std::errc() || p != v.data() + v.size())
        throw ConfigError("config key " + std::string(k) + ": not an integer: '" + v + "'");
    };
    auto boolean = [&](const char* k, bool& out) {
      if (!flat.has(k)) return;
      const auto& v = flat.get(k);
      if (v == "true" || v == "1" || v == "yes") out = true;
      else if (v == "false" || v == "0" || v == "no") out = false;
      else throw ConfigError("config key " + std::string(k) + ": not a boolean: '" + v + "'");
    };

    str("data_dir", c.data_dir);
    str("out_dir", c.out_dir);
    try {
      if (flat.has("variant")) c.variant = parse_variant(flat.get("variant"));
    } catch (const ValidationError& e) {
      throw ConfigError(e.what());
    }
    integer("fold", c.fold);
    integer("seed", c.seed);
    integer("T", c.T);
    real("alpha", c.alpha);
    real("beta", c.beta);
    real("lr0", c.lr0);
    real("momentum", c.momentum);
    real("weight_decay", c.weight_decay);
    real("tau_init", c.tau_init);
    integer("epochs", c.epochs);
    integer("batch_size", c.batch_size);
    boolean("loss_ic", c.losses.ic);
    boolean("loss_ia", c.losses.ia);
    boolean("loss_ca", c.losses.ca);
    if (flat.has("attribute_weighting")) c.attribute_weighting = parse_attribute_weighting(flat.get("attribute_weighting"));
    if (flat.has("encoder")) {
      const auto& v = flat.get("encoder");
      if (v == "stub") c.encoder = TextEncoderChoice::stub;
      else if (v == "pretrained") c.encoder = TextEncoderChoice::pretrained;
      else throw ConfigError("encoder must be stub or pretrained, got '" + v + "'");
    }
    integer("encoder_seed", c.encoder_seed);
    if (flat.has("condition")) {
      const auto& v = flat.get("condition");
      if (v == "channel_groups") c.condition = ConditionMode::channel_groups;
      else if (v == "shared") c.condition = ConditionMode::shared;
      else throw ConfigError("condition must be channel_groups or shared, got '" + v + "'");
    }
    integer("width", c.width);
    real("val_fraction", c.val_fraction);
    boolean("augment_flip", c.augment_flip);
    str("class_name_benign", c.class_name_benign);
    str("class_name_unsure", c.class_name_unsure);
    str("class_name_malignant", c.class_name_malignant);
    c.validate();
    return c;
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    FlatConfig flat;
    for (const auto& [k, v] : j.items()) flat.set(k, v.get<std::string>(), "checkpoint");
    return from_flat(flat);
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : to_flat()) j[k] = v;
    return j;
  }
};

}  // namespace nodule_align
