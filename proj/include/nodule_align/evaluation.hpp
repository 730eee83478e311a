#pragma once

#include "nodule_align/checkpoint.hpp"
#include "nodule_align/training.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace nodule_align {

/// counts(i, j) = number of samples with label i predicted as j.
class ConfusionMatrix {
public:
  explicit ConfusionMatrix(int k) : k_(k), counts_(static_cast<std::size_t>(k) * k, 0) {}

  int classes() const { return k_; }
  long at(int label, int pred) const { return counts_[static_cast<std::size_t>(label) * k_ + pred]; }
  long& at(int label, int pred) { return counts_[static_cast<std::size_t>(label) * k_ + pred]; }
  long row_sum(int label) const {
    long s = 0;
    for (int j = 0; j < k_; ++j) s += at(label, j);
    return s;
  }
  long col_sum(int pred) const {
    long s = 0;
    for (int i = 0; i < k_; ++i) s += at(i, pred);
    return s;
  }
  long total() const { return std::accumulate(counts_.begin(), counts_.end(), 0L); }
  long trace() const {
    long s = 0;
    for (int i = 0; i < k_; ++i) s += at(i, i);
    return s;
  }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

private:
  int k_;
  std::vector<long> counts_;
};

inline ConfusionMatrix confusion_matrix(std::span<const int> preds, std::span<const int> labels, int k) {
  if (preds.empty()) throw ValidationError("confusion matrix of an empty prediction set");
  if (preds.size() != labels.size()) throw ValidationError("prediction and label counts differ");
  if (k <= 0) throw ValidationError("class count must be positive");
  ConfusionMatrix cm(k);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= k || preds[i] < 0 || preds[i] >= k)
      throw ValidationError("class index outside 0.." + std::to_string(k - 1) + " at sample " + std::to_string(i));
    ++cm.at(labels[i], preds[i]);
  }
  return cm;
}

/// Percentages; an empty row or column leaves the affected metrics undefined.
struct ClassMetrics {
  std::optional<double> recall;
  std::optional<double> precision;
  std::optional<double> f1;
  long support = 0;
};

struct FoldMetrics {
  int fold = 0;
  double accuracy = 0.0;
  std::vector<ClassMetrics> per_class;

  bool has_undefined() const {
    return std::any_of(per_class.begin(), per_class.end(),
                       [](const ClassMetrics& c) { return !c.recall || !c.f1; });
  }
};

inline FoldMetrics per_class_metrics(const ConfusionMatrix& cm, int fold = 0) {
  if (cm.total() == 0) throw ValidationError("metrics of an empty confusion matrix");
  FoldMetrics m;
  m.fold = fold;
  m.accuracy = 100.0 * static_cast<double>(cm.trace()) / static_cast<double>(cm.total());
  for (int k = 0; k < cm.classes(); ++k) {
    ClassMetrics c;
    c.support = cm.row_sum(k);
    const double tp = static_cast<double>(cm.at(k, k));
    if (cm.row_sum(k) > 0) c.recall = 100.0 * tp / static_cast<double>(cm.row_sum(k));
    if (cm.col_sum(k) > 0) c.precision = 100.0 * tp / static_cast<double>(cm.col_sum(k));
    if (c.recall && c.precision) c.f1 = (*c.recall + *c.precision > 0.0)
                                            ? 2.0 * *c.recall * *c.precision / (*c.recall + *c.precision)
                                            : 0.0;
    m.per_class.push_back(c);
  }
  return m;
}

/// Mean and population standard deviation over the folds where the value is defined.
struct Aggregate {
  double mean = 0.0;
  double std = 0.0;
  int defined = 0;
  int undefined = 0;
};

inline Aggregate aggregate(std::span<const std::optional<double>> values) {
  Aggregate a;
  double sum = 0.0;
  for (const auto& v : values) {
    if (!v) {
      ++a.undefined;
      continue;
    }
    sum += *v;
    ++a.defined;
  }
  if (a.defined == 0) return a;
  a.mean = sum / a.defined;
  double ss = 0.0;
  for (const auto& v : values)
    if (v) ss += (*v - a.mean) * (*v - a.mean);
  a.std = std::sqrt(ss / a.defined);
  return a;
}

/// "60.9±0.4"; "n/a" when nothing is defined.
inline std::string format_pm(const Aggregate& a) {
  if (a.defined == 0) return "n/a";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f±%.1f", a.mean, a.std);
  std::string s(buf);
  if (a.undefined > 0) s += "*";
  return s;
}

inline std::string format_percent(std::optional<double> v) {
  if (!v) return "undef";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", *v);
  return buf;
}

struct MetricsReport {
  Variant variant = Variant::A;
  std::vector<std::string> class_names;
  std::vector<FoldMetrics> folds;
  Aggregate accuracy;
  std::vector<Aggregate> recall;
  std::vector<Aggregate> f1;
  bool partial = false;
};

inline MetricsReport aggregate_folds(Variant variant, std::vector<std::string> class_names,
                                     std::vector<FoldMetrics> folds, bool allow_partial = false) {
  if (folds.empty()) throw ValidationError("no fold reports to aggregate");
  if (folds.size() != static_cast<std::size_t>(kFoldCount) && !allow_partial)
    throw ValidationError("expected " + std::to_string(kFoldCount) + " fold reports, got " +
                          std::to_string(folds.size()) + " (use --allow-partial to aggregate fewer)");
  if (folds.size() > static_cast<std::size_t>(kFoldCount)) throw ValidationError("more than five fold reports");
  std::set<int> seen;
  for (const auto& f : folds) {
    if (!seen.insert(f.fold).second) throw ValidationError("fold " + std::to_string(f.fold) + " reported twice");
    if (f.per_class.size() != class_names.size()) throw ValidationError("fold reports differ in class count");
  }
  std::sort(folds.begin(), folds.end(), [](const auto& a, const auto& b) { return a.fold < b.fold; });

  MetricsReport r;
  r.variant = variant;
  r.class_names = std::move(class_names);
  r.partial = folds.size() != static_cast<std::size_t>(kFoldCount);
  std::vector<std::optional<double>> acc;
  for (const auto& f : folds) acc.emplace_back(f.accuracy);
  r.accuracy = aggregate(acc);
  for (std::size_t k = 0; k < r.class_names.size(); ++k) {
    std::vector<std::optional<double>> rec, f1;
    for (const auto& f : folds) {
      rec.push_back(f.per_class[k].recall);
      f1.push_back(f.per_class[k].f1);
    }
    r.recall.push_back(aggregate(rec));
    r.f1.push_back(aggregate(f1));
  }
  r.folds = std::move(folds);
  return r;
}

inline std::string format_report(const MetricsReport& r) {
  std::ostringstream os;
  os << to_string(r.variant) << (r.partial ? " (partial: " + std::to_string(r.folds.size()) + " folds)" : "") << "\n";
  os << "  Accuracy: " << format_pm(r.accuracy) << "\n";
  for (std::size_t k = 0; k < r.class_names.size(); ++k)
    os << "  " << r.class_names[k] << "  Recall: " << format_pm(r.recall[k]) << "  F1: " << format_pm(r.f1[k]) << "\n";
  os << "  per fold:\n";
  for (const auto& f : r.folds) {
    os << "    fold " << f.fold << "  acc " << format_percent(f.accuracy);
    for (std::size_t k = 0; k < f.per_class.size(); ++k)
      os << "  " << r.class_names[k] << " R " << format_percent(f.per_class[k].recall) << " F1 "
         << format_percent(f.per_class[k].f1);
    os << "\n";
  }
  bool undefined = std::any_of(r.folds.begin(), r.folds.end(), [](const auto& f) { return f.has_undefined(); });
  if (undefined) os << "  * some folds have undefined recall or F1 (no samples or no predictions for a class)\n";
  return os.str();
}

namespace detail {

inline nlohmann::json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline std::optional<double> opt_from(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

inline nlohmann::json agg_json(const Aggregate& a) {
  return {{"mean", a.mean}, {"std", a.std}, {"defined", a.defined}, {"undefined", a.undefined}};
}

inline Aggregate agg_from(const nlohmann::json& j) {
  return {j.at("mean").get<double>(), j.at("std").get<double>(), j.at("defined").get<int>(),
          j.at("undefined").get<int>()};
}

}  // namespace detail

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["format"] = "nodule_align.metrics/1";
  j["variant"] = to_string(r.variant);
  j["class_names"] = r.class_names;
  j["partial"] = r.partial;
  j["accuracy"] = detail::agg_json(r.accuracy);
  j["accuracy_text"] = format_pm(r.accuracy);
  for (std::size_t k = 0; k < r.class_names.size(); ++k) {
    j["recall"].push_back(detail::agg_json(r.recall[k]));
    j["f1"].push_back(detail::agg_json(r.f1[k]));
  }
  j["folds"] = nlohmann::json::array();
  for (const auto& f : r.folds) {
    nlohmann::json jf{{"fold", f.fold}, {"accuracy", f.accuracy}};
    for (const auto& c : f.per_class)
      jf["per_class"].push_back({{"recall", detail::opt_json(c.recall)},
                                 {"precision", detail::opt_json(c.precision)},
                                 {"f1", detail::opt_json(c.f1)},
                                 {"support", c.support}});
    j["folds"].push_back(std::move(jf));
  }
  return j;
}

inline MetricsReport metrics_report_from_json(const nlohmann::json& j) {
  try {
    MetricsReport r;
    r.variant = parse_variant(j.at("variant").get<std::string>());
    r.class_names = j.at("class_names").get<std::vector<std::string>>();
    r.partial = j.at("partial").get<bool>();
    r.accuracy = detail::agg_from(j.at("accuracy"));
    for (const auto& a : j.at("recall")) r.recall.push_back(detail::agg_from(a));
    for (const auto& a : j.at("f1")) r.f1.push_back(detail::agg_from(a));
    for (const auto& jf : j.at("folds")) {
      FoldMetrics f;
      f.fold = jf.at("fold").get<int>();
      f.accuracy = jf.at("accuracy").get<double>();
      for (const auto& c : jf.at("per_class"))
        f.per_class.push_back({detail::opt_from(c.at("recall")), detail::opt_from(c.at("precision")),
                               detail::opt_from(c.at("f1")), c.at("support").get<long>()});
      r.folds.push_back(std::move(f));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed metrics report: ") + e.what());
  }
}

/// Test-set predictions of one checkpoint, in the variant's test label space.
struct FoldEvaluation {
  int fold = 0;
  std::vector<std::string> nodule_ids;
  std::vector<int> labels;
  std::vector<int> preds;
  FoldMetrics metrics;
};

/// Classes absent from the test space (the unsure class for LIDC-B) are excluded from
/// the arg-max.
template <class S>
FoldEvaluation evaluate_model(NoduleAlignModel<S>& model, Variant variant, const LabeledSet& test, int fold) {
  const auto train_cls = train_classes(variant);
  const auto test_cls = test_classes(variant);
  std::vector<int> allowed;
  for (auto c : test_cls) allowed.push_back(index_of(train_cls, c));
  FoldEvaluation ev;
  ev.fold = fold;
  const Mat<S> logits = model.predict_logits(all_images<S>(test));
  const auto pred_train_space = restricted_argmax(logits, allowed);
  for (std::size_t i = 0; i < test.size(); ++i) {
    ev.nodule_ids.push_back(test.records[i].nodule_id);
    ev.labels.push_back(index_of(test_cls, derive_class(test.records[i])));
    ev.preds.push_back(index_of(test_cls, train_cls[static_cast<std::size_t>(pred_train_space[i])]));
  }
  ev.metrics = per_class_metrics(confusion_matrix(ev.preds, ev.labels, static_cast<int>(test_cls.size())), fold);
  return ev;
}

inline std::vector<std::string> class_label_names(std::span<const ClassLabel> classes) {
  std::vector<std::string> out;
  for (auto c : classes) out.emplace_back(to_string(c));
  return out;
}

/// Loads the test fold named by the checkpoint from the split manifest and evaluates the
/// image branch.
inline FoldEvaluation evaluate_checkpoint(const CheckpointFile& ckpt, const SplitManifest& split,
                                          const std::filesystem::path& data_dir, bool force = false) {
  check_checkpoint(ckpt, {.variant = split.variant, .force = force});
  auto model = image_model_from_checkpoint<float>(ckpt);
  const auto& fold = split.fold(ckpt.fold());
  const auto by_id = record_index(data_dir);
  const auto test_records = select_records(by_id, fold.test);
  const auto test = load_labeled_set(test_records, data_dir, test_classes(split.variant));
  if (test.size() == 0) throw ValidationError("fold " + std::to_string(ckpt.fold()) + " has an empty test set");
  return evaluate_model(model, split.variant, test, ckpt.fold());
}

// ---------------------------------------------------------------------------
// Loss-ablation grid

struct AblationRow {
  std::string name;
  LossSwitches switches;
};

/// The loss combinations of the ablation table; cross-entropy is always on.
inline std::vector<AblationRow> ablation_rows() {
  return {{"IC", {true, false, false}},
          {"IC+IA", {true, true, false}},
          {"IA+CA", {false, true, true}},
          {"IC+CA", {true, false, true}},
          {"IC+IA+CA", {true, true, true}}};
}

struct AblationResult {
  AblationRow row;
  MetricsReport report;
};

inline std::string format_ablation(std::span<const AblationResult> results) {
  std::ostringstream os;
  os << "L_IC  L_IA  L_CA  Accuracy\n";
  for (const auto& r : results) {
    auto mark = [](bool b) { return b ? "  x   " : "      "; };
    os << mark(r.row.switches.ic) << mark(r.row.switches.ia) << mark(r.row.switches.ca) << format_pm(r.report.accuracy)
       << "\n";
  }
  return os.str();
}

}  // namespace nodule_align
