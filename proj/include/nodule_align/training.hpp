#pragma once

#include "nodule_align/checkpoint.hpp"
#include "nodule_align/config.hpp"
#include "nodule_align/model.hpp"
#include "nodule_align/optim.hpp"
#include "nodule_align/preprocessing.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <string>
#include <vector>

namespace nodule_align {

/// Images with their labels (indices into the variant's training classes) and attribute
/// weights.
struct LabeledSet {
  std::vector<NoduleRecord> records;
  std::vector<ChannelImage> images;
  std::vector<Instance> instances;

  std::size_t size() const { return records.size(); }
};

/// Loads the stored patches of `records`. Every record's class must be one of `classes`.
inline LabeledSet load_labeled_set(std::span<const NoduleRecord> records, const std::filesystem::path& data_dir,
                                   std::span<const ClassLabel> classes) {
  LabeledSet set;
  for (const auto& r : records) {
    const int label = index_of(classes, derive_class(r));
    if (label < 0) throw ValidationError("record '" + r.nodule_id + "' has a class outside the label space");
    set.records.push_back(r);
    set.images.push_back(to_channel_layout(read_patch(patch_path(data_dir, r.nodule_id))));
    set.instances.push_back({label, attribute_weights(r)});
  }
  return set;
}

/// Moves a patient-level fraction of `train` into a validation set.
inline std::pair<std::vector<NoduleRecord>, std::vector<NoduleRecord>> carve_validation(
    std::span<const NoduleRecord> train, double fraction, std::uint64_t seed) {
  std::set<std::string> unique;
  for (const auto& r : train) unique.insert(r.patient_id);
  std::vector<std::string> patients(unique.begin(), unique.end());
  detail::seeded_shuffle(patients, derive_seed(seed, 0x7a1));
  const auto n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(patients.size())));
  const std::set<std::string> val(patients.begin(), patients.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::pair<std::vector<NoduleRecord>, std::vector<NoduleRecord>> out;
  for (const auto& r : train) (val.count(r.patient_id) ? out.second : out.first).push_back(r);
  return out;
}

inline ObjectiveSettings objective(const TrainConfig& c) {
  return {c.losses, c.alpha, c.beta, c.attribute_weighting};
}

/// A full model together with the frozen text encoder it refers to.
template <class S>
struct ModelBundle {
  std::shared_ptr<const TextEncoder<S>> encoder;
  std::unique_ptr<NoduleAlignModel<S>> model;
};

template <class S>
ModelBundle<S> make_model(const TrainConfig& cfg, AttributeCache& cache) {
  ModelBundle<S> b;
  b.encoder = make_text_encoder<S>(cfg.encoder, cfg.encoder_seed);
  Mat<S> A = encode_attributes(*b.encoder, cache);
  b.model = std::make_unique<NoduleAlignModel<S>>(model_shape<S>(cfg), b.encoder, std::move(A), cfg.tau_init);
  b.model->init(cfg.seed);
  return b;
}

template <class S>
nn::Tensor4<S> gather_batch(const LabeledSet& set, std::span<const std::size_t> idx, Rng* flips) {
  nn::Tensor4<S> x(static_cast<int>(idx.size()), ChannelImage::kChannels, ChannelImage::kHeight, ChannelImage::kWidth);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const ChannelImage* img = &set.images[idx[i]];
    ChannelImage flipped;
    if (flips) {
      const bool fy = flips->bernoulli(0.5), fx = flips->bernoulli(0.5);
      if (fy || fx) {
        flipped = flip_axial(*img, fy, fx);
        img = &flipped;
      }
    }
    auto px = img->pixels();
    std::transform(px.begin(), px.end(), x.sample(static_cast<int>(i)), [](float v) { return static_cast<S>(v); });
  }
  return x;
}

template <class S>
nn::Tensor4<S> all_images(const LabeledSet& set) {
  std::vector<std::size_t> idx(set.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return gather_batch<S>(set, idx, nullptr);
}

/// Arg-max over the allowed columns only.
template <class S>
std::vector<int> restricted_argmax(const Mat<S>& logits, std::span<const int> allowed) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    int best = allowed.front();
    for (int c : allowed)
      if (logits(i, c) > logits(i, best)) best = c;
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

template <class S>
double accuracy_percent(NoduleAlignModel<S>& model, const LabeledSet& set) {
  if (set.size() == 0) return 0.0;
  const Mat<S> logits = model.predict_logits(all_images<S>(set));
  std::vector<int> all(static_cast<std::size_t>(logits.cols()));
  std::iota(all.begin(), all.end(), 0);
  const auto pred = restricted_argmax(logits, all);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == set.instances[i].label;
  return 100.0 * static_cast<double>(hit) / static_cast<double>(set.size());
}

/// Train-mode objective over a whole set in fixed order, with batch statistics and no
/// parameter or running-statistic change.
template <class S>
LossBreakdown measure_objective(NoduleAlignModel<S>& model, const LabeledSet& set, const ObjectiveSettings& obj,
                                int batch_size) {
  auto params = model.parameters();
  std::vector<nn::Buffer<S>> buffers;
  for (auto* p : params)
    if (!p->trainable) buffers.push_back(p->value);
  std::vector<LossBreakdown> parts;
  std::vector<double> counts;
  for (std::size_t first = 0; first < set.size(); first += static_cast<std::size_t>(batch_size)) {
    const std::size_t count = std::min(static_cast<std::size_t>(batch_size), set.size() - first);
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), first);
    std::vector<Instance> inst;
    for (auto i : idx) inst.push_back(set.instances[i]);
    const auto x = gather_batch<S>(set, idx, nullptr);
    parts.push_back(model.accumulate_gradients(x, inst, obj));
    counts.push_back(static_cast<double>(count));
  }
  for (auto* p : params)
    if (p->trainable) p->zero_grad();
  std::size_t b = 0;
  for (auto* p : params)
    if (!p->trainable) p->value = buffers[b++];
  LossBreakdown m;
  m.alpha = obj.alpha;
  m.beta = obj.beta;
  const double n = std::accumulate(counts.begin(), counts.end(), 0.0);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const double f = counts[i] / n;
    m.ce += f * parts[i].ce;
    m.ic += f * parts[i].ic;
    m.ia += f * parts[i].ia;
    m.ca += f * parts[i].ca;
    m.total += f * parts[i].total;
  }
  return m;
}

inline nlohmann::json to_json(const LossBreakdown& l) {
  return {{"ce", l.ce}, {"ic", l.ic}, {"ia", l.ia}, {"ca", l.ca}, {"total", l.total}};
}

struct EpochSummary {
  int epoch = 0;
  LossBreakdown mean;
  double val_accuracy = 0.0;
  bool saved = false;
};

struct TrainResult {
  std::filesystem::path best_checkpoint;
  std::filesystem::path image_checkpoint;
  std::filesystem::path log_path;
  LossBreakdown initial_objective;
  LossBreakdown final_objective;
  std::vector<EpochSummary> epochs;
  int best_epoch = -1;
  double best_val_accuracy = -1.0;
  std::uint64_t encoder_checksum_before = 0;
  std::uint64_t encoder_checksum_after = 0;
  long steps = 0;
  double seconds = 0.0;
};

/// Optional hooks, mainly for tests.
template <class S>
struct TrainHooks {
  /// Called after every optimizer step with the step index.
  std::function<void(long, NoduleAlignModel<S>&)> after_step;
  /// Replaces the loss of a step (e.g. to inject a failure).
  std::function<void(long, LossBreakdown&)> inspect_loss;
};

/// Runs the optimization loop and writes into `out_dir`:
///   checkpoint.nalg (best by validation accuracy), checkpoint.image.nalg (image branch
///   only), last.nalg (end of the last completed epoch), train_log.jsonl.
template <class S>
TrainResult train_model(const TrainConfig& cfg, ModelBundle<S>& bundle, const LabeledSet& train,
                        const LabeledSet& validation, const std::filesystem::path& out_dir,
                        const TrainHooks<S>& hooks = {}) {
  if (train.size() == 0) throw ValidationError("empty training set");
  const auto start = std::chrono::steady_clock::now();
  auto& model = *bundle.model;
  const ObjectiveSettings obj = objective(cfg);
  std::filesystem::create_directories(out_dir);

  TrainResult result;
  result.best_checkpoint = out_dir / "checkpoint.nalg";
  result.image_checkpoint = out_dir / "checkpoint.image.nalg";
  result.log_path = out_dir / "train_log.jsonl";
  const auto last_path = out_dir / "last.nalg";
  result.encoder_checksum_before = bundle.encoder->weights_checksum();
  const auto manifest = checkpoint_manifest(cfg, true, bundle.encoder->identity(), result.encoder_checksum_before);

  std::ofstream log(result.log_path, std::ios::trunc);
  if (!log) throw RuntimeFailure("cannot write " + result.log_path.string());

  Sgd<S> opt(model.parameters(), cfg.momentum, cfg.weight_decay);
  const long batches = static_cast<long>((train.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
                                         static_cast<std::size_t>(cfg.batch_size));
  const long total_steps = batches * cfg.epochs;

  result.initial_objective = measure_objective(model, train, obj, cfg.batch_size);
  log << nlohmann::json{{"kind", "objective"}, {"when", "initial"}, {"loss", to_json(result.initial_objective)}}.dump()
      << "\n";

  Rng flip_rng(derive_seed(cfg.seed, 0xf11b));
  long step = 0;
  bool have_good = false;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    detail::seeded_shuffle(order, derive_seed(cfg.seed, 0x5eed0000ull + static_cast<std::uint64_t>(epoch)));
    std::vector<LossBreakdown> epoch_losses;
    for (long b = 0; b < batches; ++b, ++step) {
      const auto first = static_cast<std::size_t>(b) * static_cast<std::size_t>(cfg.batch_size);
      const auto count = std::min(static_cast<std::size_t>(cfg.batch_size), train.size() - first);
      std::span<const std::size_t> idx(order.data() + first, count);
      std::vector<Instance> inst;
      for (auto i : idx) inst.push_back(train.instances[i]);
      const auto x = gather_batch<S>(train, idx, cfg.augment_flip ? &flip_rng : nullptr);
      const double lr = lr_schedule(step, total_steps, cfg.lr0);
      opt.zero_grad();
      LossBreakdown loss;
      try {
        loss = model.accumulate_gradients(x, inst, obj);
        if (hooks.inspect_loss) hooks.inspect_loss(step, loss);
        total_loss(loss.ce, loss.ic, loss.ia, loss.ca, loss.alpha, loss.beta);
      } catch (const NonFiniteLoss& e) {
        log << nlohmann::json{{"kind", "abort"}, {"step", step}, {"reason", e.what()}}.dump() << "\n";
        log.flush();
        throw NonFiniteLoss(std::string(e.what()) + " at step " + std::to_string(step) + "; last good checkpoint: " +
                            (have_good ? last_path.string() : std::string("none")));
      }
      opt.step(lr);
      epoch_losses.push_back(loss);
      log << nlohmann::json{{"kind", "step"}, {"step", step},       {"epoch", epoch},     {"ce", loss.ce},
                            {"ic", loss.ic},  {"ia", loss.ia},      {"ca", loss.ca},      {"total", loss.total},
                            {"tau", static_cast<double>(model.tau())}, {"lr", lr}}
                 .dump()
          << "\n";
      if (hooks.after_step) hooks.after_step(step, model);
    }
    EpochSummary summary;
    summary.epoch = epoch;
    summary.mean = batch_mean(epoch_losses);
    summary.val_accuracy = validation.size() > 0 ? accuracy_percent(model, validation) : 0.0;
    const bool better = validation.size() == 0 || summary.val_accuracy > result.best_val_accuracy;
    if (better) {
      save_checkpoint(result.best_checkpoint, model, manifest);
      result.best_epoch = epoch;
      result.best_val_accuracy = summary.val_accuracy;
      summary.saved = true;
    }
    save_checkpoint(last_path, model, manifest);
    have_good = true;
    log << nlohmann::json{{"kind", "epoch"},
                          {"epoch", epoch},
                          {"loss", to_json(summary.mean)},
                          {"val_accuracy", summary.val_accuracy},
                          {"saved", summary.saved}}
               .dump()
        << "\n";
    log.flush();
    result.epochs.push_back(summary);
  }
  result.steps = step;
  result.final_objective = measure_objective(model, train, obj, cfg.batch_size);
  log << nlohmann::json{{"kind", "objective"}, {"when", "final"}, {"loss", to_json(result.final_objective)}}.dump()
      << "\n";

  result.encoder_checksum_after = bundle.encoder->weights_checksum();
  if (result.encoder_checksum_after != result.encoder_checksum_before)
    throw RuntimeFailure("text encoder weights changed during training");
  write_checkpoint_file(result.image_checkpoint, strip_text_branch(read_checkpoint(result.best_checkpoint)));
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

/// Reads the annotation table under `data_dir` and indexes it by nodule id.
inline std::map<std::string, NoduleRecord> record_index(const std::filesystem::path& data_dir) {
  std::map<std::string, NoduleRecord> by_id;
  for (auto& r : read_annotation_table(data_dir / "annotations.csv")) by_id.emplace(r.nodule_id, std::move(r));
  return by_id;
}

inline std::vector<NoduleRecord> select_records(const std::map<std::string, NoduleRecord>& by_id,
                                                std::span<const std::string> ids) {
  std::vector<NoduleRecord> out;
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw ValidationError("split lists unknown nodule '" + id + "'");
    out.push_back(it->second);
  }
  return out;
}

inline std::filesystem::path split_manifest_path(const std::filesystem::path& data_dir, Variant v) {
  return data_dir / "splits" / (to_string(v) + ".json");
}

/// Train one fold as configured: reads the prepared data, carves validation, trains.
template <class S>
TrainResult train_fold(const TrainConfig& cfg, AttributeCache& cache, const TrainHooks<S>& hooks = {}) {
  const std::filesystem::path data_dir = cfg.data_dir;
  const auto split = read_split_manifest(split_manifest_path(data_dir, cfg.variant));
  if (split.variant != cfg.variant) throw ValidationError("split manifest variant differs from config variant");
  const auto& fold = split.fold(cfg.fold);
  const auto by_id = record_index(data_dir);
  const auto train_records = select_records(by_id, fold.train);
  auto [train_part, val_part] = carve_validation(train_records, cfg.val_fraction, cfg.seed);
  const auto classes = train_classes(cfg.variant);
  for (ClassLabel c : classes)
    if (std::none_of(train_part.begin(), train_part.end(), [&](const auto& r) { return derive_class(r) == c; }))
      throw ValidationError("class '" + std::string(to_string(c)) + "' is absent from the training set");
  const auto train = load_labeled_set(train_part, data_dir, classes);
  const auto val = load_labeled_set(val_part, data_dir, classes);
  auto bundle = make_model<S>(cfg, cache);
  return train_model(cfg, bundle, train, val, cfg.out_dir, hooks);
}

}  // namespace nodule_align
