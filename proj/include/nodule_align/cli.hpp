#pragma once

#include "nodule_align/evaluation.hpp"
#include "nodule_align/explain.hpp"
#include "nodule_align/fixtures.hpp"
#include "nodule_align/training.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <ctime>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#ifndef NODULE_ALIGN_VERSION
#define NODULE_ALIGN_VERSION "unknown"
#endif

namespace nodule_align {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

namespace cli {

inline std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

/// Collects what every command records in its run manifest.
struct RunRecord {
  std::string command;
  std::vector<std::string> argv;
  std::filesystem::path out_dir;
  nlohmann::json details = nlohmann::json::object();
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  std::string started = utc_now();

  void write(int exit_code) const {
    if (out_dir.empty()) return;
    nlohmann::json j = details;
    j["command"] = command;
    j["argv"] = argv;
    j["version"] = NODULE_ALIGN_VERSION;
    j["started_utc"] = started;
    j["elapsed_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    j["exit_code"] = exit_code;
    io::write_text_atomic(out_dir / ("run_manifest-" + command + ".json"), j.dump(2) + "\n");
  }
};

inline std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = detail::trim(item);
    if (item.empty()) continue;
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ValidationError("not an integer list: " + s);
    }
  }
  return out;
}

inline nlohmann::json config_details(const TrainConfig& cfg, const FlatConfig& flat) {
  return {{"config", cfg.to_json()},
          {"config_hash", cfg.hash()},
          {"config_sources", flat.sources()},
          {"seed", cfg.seed}};
}

/// Config file, then the dedicated flags, then `--set` overrides.
inline FlatConfig assemble_config(const std::string& path, const std::string& variant, const std::string& fold,
                                  const std::string& seed, const std::vector<std::string>& sets) {
  FlatConfig flat = FlatConfig::load(path);
  if (!variant.empty()) flat.set("variant", variant, "flag:--variant");
  if (!fold.empty()) flat.set("fold", fold, "flag:--fold");
  if (!seed.empty()) flat.set("seed", seed, "flag:--seed");
  for (const auto& s : sets) flat.apply_override(s, "flag:--set");
  return flat;
}

inline std::string format_loss(const LossBreakdown& l) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "total %.4f (ce %.4f, ic %.4f, ia %.4f, ca %.4f)", l.total, l.ce, l.ic, l.ia, l.ca);
  return buf;
}

}  // namespace cli

/// Parses `argv`, runs one command and maps failures onto exit codes:
/// 0 success, 1 invalid input or configuration, 2 runtime failure.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Lung-nodule malignancy classification with attribute-aware text alignment", "nodule_align"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.set_version_flag("--version", NODULE_ALIGN_VERSION);

  cli::RunRecord run;
  for (int i = 0; i < argc; ++i) run.argv.emplace_back(argv[i]);

  // gen-fixtures
  auto* gen = app.add_subcommand("gen-fixtures", "Write a synthetic nodule data set");
  int gen_n = 200;
  std::uint64_t gen_seed = 0;
  std::string gen_out, gen_layout = "centered";
  gen->add_option("--n", gen_n, "Number of nodules")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Generator seed")->capture_default_str();
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--layout", gen_layout, "centered or quadrant")->capture_default_str();

  // prepare-data
  auto* prep = app.add_subcommand("prepare-data", "Crop patches and write split manifests");
  std::string prep_dir, prep_table, prep_variants = "A,B,C";
  std::uint64_t prep_seed = 0;
  prep->add_option("--data-dir", prep_dir, "Data directory (patches/ and splits/ are written here)")->required();
  prep->add_option("--annotations", prep_table, "Annotation table (default <data-dir>/annotations.csv)");
  prep->add_option("--seed", prep_seed, "Fold assignment seed")->capture_default_str();
  prep->add_option("--variants", prep_variants, "Comma-separated variants")->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "Train one fold");
  std::string tr_config, tr_variant, tr_fold, tr_seed;
  std::vector<std::string> tr_sets;
  train->add_option("--config", tr_config, "Flat key = value config file")->required();
  train->add_option("--variant", tr_variant, "A, B or C");
  train->add_option("--fold", tr_fold, "Fold index 0..4");
  train->add_option("--seed", tr_seed, "Training seed");
  train->add_option("--set", tr_sets, "key=value override (repeatable)");

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Evaluate fold checkpoints on their test sets");
  std::vector<std::string> ev_ckpts;
  std::string ev_split, ev_out = ".", ev_data_dir;
  bool ev_partial = false, ev_force = false;
  eval->add_option("--checkpoint", ev_ckpts, "Checkpoint file (one per fold, repeatable)")->required();
  eval->add_option("--split", ev_split, "Split manifest")->required();
  eval->add_option("--out", ev_out, "Report directory")->capture_default_str();
  eval->add_option("--data-dir", ev_data_dir, "Data directory (default: from the split manifest)");
  eval->add_flag("--allow-partial", ev_partial, "Aggregate fewer than five folds");
  eval->add_flag("--force", ev_force, "Load checkpoints whose config hash does not verify");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Train and evaluate the loss-ablation grid");
  std::string ab_config, ab_variant, ab_seed, ab_folds = "0,1,2,3,4", ab_rows;
  std::vector<std::string> ab_sets;
  ablate->add_option("--config", ab_config, "Flat key = value config file")->required();
  ablate->add_option("--variant", ab_variant, "A, B or C");
  ablate->add_option("--seed", ab_seed, "Training seed");
  ablate->add_option("--folds", ab_folds, "Comma-separated fold indices")->capture_default_str();
  ablate->add_option("--rows", ab_rows, "Comma-separated subset of IC, IC+IA, IA+CA, IC+CA, IC+IA+CA");
  ablate->add_option("--set", ab_sets, "key=value override (repeatable)");

  // explain
  auto* explain = app.add_subcommand("explain", "Grad-CAM heatmap for one nodule");
  std::string ex_ckpt, ex_nodule, ex_out, ex_layer = "layer4", ex_data_dir;
  int ex_class = 0;
  bool ex_force = false;
  explain->add_option("--checkpoint", ex_ckpt, "Checkpoint file")->required();
  explain->add_option("--nodule", ex_nodule, "Nodule id")->required();
  explain->add_option("--class", ex_class, "Target class index")->required();
  explain->add_option("--out", ex_out, "Output directory")->required();
  explain->add_option("--layer", ex_layer, "layer3 or layer4")->capture_default_str();
  explain->add_option("--data-dir", ex_data_dir, "Data directory (default: from the checkpoint config)");
  explain->add_flag("--force", ex_force, "Load a checkpoint whose config hash does not verify");

  // project
  auto* project = app.add_subcommand("project", "2-D t-SNE projection of pooled image features");
  std::string pr_ckpt, pr_split, pr_out, pr_subset = "test", pr_data_dir;
  double pr_perplexity = 15.0;
  std::uint64_t pr_seed = 0;
  bool pr_force = false;
  project->add_option("--checkpoint", pr_ckpt, "Checkpoint file")->required();
  project->add_option("--split", pr_split, "Split manifest")->required();
  project->add_option("--out", pr_out, "Output directory")->required();
  project->add_option("--subset", pr_subset, "test, train or all")->capture_default_str();
  project->add_option("--perplexity", pr_perplexity, "t-SNE perplexity")->capture_default_str();
  project->add_option("--seed", pr_seed, "Projection seed")->capture_default_str();
  project->add_option("--data-dir", pr_data_dir, "Data directory (default: from the split manifest)");
  project->add_flag("--force", pr_force, "Load a checkpoint whose config hash does not verify");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::CallForVersion& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitValidation;
  }

  int code = kExitOk;
  try {
    if (gen->parsed()) {
      run.command = "gen-fixtures";
      run.out_dir = gen_out;
      FixtureOptions opt{gen_n, gen_seed, parse_fixture_layout(gen_layout)};
      const auto fx = write_fixture(gen_out, opt);
      std::array<int, 3> counts{};
      for (const auto& t : fx.truth) ++counts[static_cast<std::size_t>(t.label)];
      run.details = {{"seed", gen_seed}, {"n", gen_n}, {"layout", gen_layout}};
      out << "wrote " << fx.records.size() << " nodules (" << counts[0] << " benign, " << counts[1] << " unsure, "
          << counts[2] << " malignant) to " << gen_out << "\n";
    } else if (prep->parsed()) {
      run.command = "prepare-data";
      run.out_dir = prep_dir;
      const std::filesystem::path data_dir = prep_dir;
      const auto records = read_annotation_table(prep_table.empty() ? data_dir / "annotations.csv" : std::filesystem::path(prep_table));
      for (const auto& r : records) prepare_patch(r, data_dir);
      std::vector<std::string> written;
      std::stringstream ss(prep_variants);
      std::string v;
      while (std::getline(ss, v, ',')) {
        const Variant variant = parse_variant(detail::trim(v));
        const auto manifest =
            build_split_manifest(records, variant, prep_seed, std::filesystem::absolute(data_dir).lexically_normal().string());
        write_split_manifest(split_manifest_path(data_dir, variant), manifest);
        written.push_back(split_manifest_path(data_dir, variant).string());
      }
      run.details = {{"seed", prep_seed}, {"records", records.size()}, {"split_manifests", written}};
      out << "prepared " << records.size() << " patches; split manifests: ";
      for (const auto& w : written) out << w << " ";
      out << "\n";
    } else if (train->parsed()) {
      run.command = "train";
      const FlatConfig flat = cli::assemble_config(tr_config, tr_variant, tr_fold, tr_seed, tr_sets);
      const TrainConfig cfg = TrainConfig::from_flat(flat);
      run.out_dir = cfg.out_dir;
      run.details = cli::config_details(cfg, flat);
      auto cache = AttributeCache::from_environment();
      const auto result = train_fold<float>(cfg, cache);
      run.details["result"] = {{"checkpoint", result.best_checkpoint.string()},
                               {"image_checkpoint", result.image_checkpoint.string()},
                               {"best_epoch", result.best_epoch},
                               {"best_val_accuracy", result.best_val_accuracy},
                               {"initial_objective", to_json(result.initial_objective)},
                               {"final_objective", to_json(result.final_objective)},
                               {"text_encoder_checksum", hex64(result.encoder_checksum_after)},
                               {"steps", result.steps}};
      out << to_string(cfg.variant) << " fold " << cfg.fold << ": " << result.steps << " steps in " << result.seconds
          << " s\n  initial " << cli::format_loss(result.initial_objective) << "\n  final   "
          << cli::format_loss(result.final_objective) << "\n  best validation accuracy " << result.best_val_accuracy
          << "% at epoch " << result.best_epoch << "\n  checkpoint " << result.best_checkpoint.string() << "\n";
    } else if (eval->parsed()) {
      run.command = "evaluate";
      run.out_dir = ev_out;
      const auto split = read_split_manifest(ev_split);
      const std::filesystem::path data_dir = ev_data_dir.empty() ? std::filesystem::path(split.data_dir) : std::filesystem::path(ev_data_dir);
      std::vector<FoldMetrics> folds;
      nlohmann::json predictions = nlohmann::json::array();
      for (const auto& path : ev_ckpts) {
        const auto ckpt = read_checkpoint(path);
        const auto ev = evaluate_checkpoint(ckpt, split, data_dir, ev_force);
        folds.push_back(ev.metrics);
        predictions.push_back({{"checkpoint", path}, {"fold", ev.fold}, {"nodule_ids", ev.nodule_ids},
                               {"labels", ev.labels}, {"preds", ev.preds}});
      }
      const auto report = aggregate_folds(split.variant, class_label_names(test_classes(split.variant)), folds, ev_partial);
      const std::filesystem::path dir = ev_out;
      auto j = to_json(report);
      j["predictions"] = predictions;
      io::write_text_atomic(dir / "metrics.json", j.dump(2) + "\n");
      io::write_text_atomic(dir / "metrics.txt", format_report(report));
      run.details = {{"split", ev_split}, {"checkpoints", ev_ckpts}, {"accuracy", format_pm(report.accuracy)}};
      out << format_report(report);
    } else if (ablate->parsed()) {
      run.command = "ablate";
      const FlatConfig base = cli::assemble_config(ab_config, ab_variant, "", ab_seed, ab_sets);
      const TrainConfig base_cfg = TrainConfig::from_flat(base);
      run.out_dir = base_cfg.out_dir;
      run.details = cli::config_details(base_cfg, base);
      std::vector<AblationRow> rows;
      if (ab_rows.empty()) {
        rows = ablation_rows();
      } else {
        std::stringstream ss(ab_rows);
        std::string name;
        while (std::getline(ss, name, ',')) {
          const auto all = ablation_rows();
          auto it = std::find_if(all.begin(), all.end(), [&](const auto& r) { return r.name == detail::trim(name); });
          if (it == all.end()) throw ValidationError("unknown ablation row '" + name + "'");
          rows.push_back(*it);
        }
      }
      const auto fold_list = cli::parse_int_list(ab_folds);
      const auto split = read_split_manifest(split_manifest_path(base_cfg.data_dir, base_cfg.variant));
      auto cache = AttributeCache::from_environment();
      std::vector<AblationResult> results;
      nlohmann::json jrows = nlohmann::json::array();
      for (const auto& row : rows) {
        std::vector<FoldMetrics> folds;
        for (int fold : fold_list) {
          TrainConfig cfg = base_cfg;
          cfg.losses = row.switches;
          cfg.fold = fold;
          cfg.out_dir = (std::filesystem::path(base_cfg.out_dir) / row.name / ("fold" + std::to_string(fold))).string();
          cfg.validate();
          const auto result = train_fold<float>(cfg, cache);
          const auto ev = evaluate_checkpoint(read_checkpoint(result.best_checkpoint), split, cfg.data_dir);
          folds.push_back(ev.metrics);
          out << row.name << " fold " << fold << ": accuracy " << format_percent(ev.metrics.accuracy) << "\n";
        }
        auto report = aggregate_folds(base_cfg.variant, class_label_names(test_classes(base_cfg.variant)), folds,
                                      fold_list.size() != static_cast<std::size_t>(kFoldCount));
        jrows.push_back({{"row", row.name},
                         {"ic", row.switches.ic},
                         {"ia", row.switches.ia},
                         {"ca", row.switches.ca},
                         {"report", to_json(report)}});
        results.push_back({row, std::move(report)});
      }
      const std::filesystem::path dir = base_cfg.out_dir;
      io::write_text_atomic(dir / "ablation.json", nlohmann::json{{"rows", jrows}}.dump(2) + "\n");
      io::write_text_atomic(dir / "ablation.txt", format_ablation(results));
      out << format_ablation(results);
    } else if (explain->parsed()) {
      run.command = "explain";
      run.out_dir = ex_out;
      const auto ckpt = read_checkpoint(ex_ckpt);
      check_checkpoint(ckpt, {.force = ex_force});
      const std::filesystem::path data_dir = ex_data_dir.empty() ? std::filesystem::path(ckpt.config().data_dir) : std::filesystem::path(ex_data_dir);
      const int layer = ex_layer == "layer3" ? 3 : ex_layer == "layer4" ? 4 : 0;
      if (layer == 0) throw ValidationError("--layer must be layer3 or layer4");
      auto model = image_model_from_checkpoint<float>(ckpt);
      const auto image = to_channel_layout(read_patch(patch_path(data_dir, ex_nodule)));
      const Heatmap hm = grad_cam(model, image, ex_class, layer);
      const std::filesystem::path dir = ex_out;
      const std::string stem = ex_nodule + "-class" + std::to_string(ex_class);
      write_png(dir / (stem + ".png"), Heatmap::kSide * 8, Heatmap::kSide * 8, render_overlay(image, hm));
      nlohmann::json side{{"nodule_id", ex_nodule},
                          {"class", ex_class},
                          {"class_name", ckpt.manifest.at("class_labels").at(static_cast<std::size_t>(ex_class))},
                          {"layer", ex_layer},
                          {"checkpoint", ex_ckpt},
                          {"raw_max", hm.raw_max},
                          {"overlay_slice", ChannelImage::kChannels / 2},
                          {"heatmap", hm.values}};
      io::write_text_atomic(dir / (stem + ".json"), side.dump() + "\n");
      run.details = {{"seed", ckpt.seed()}, {"config_hash", ckpt.manifest.at("config_hash")}};
      out << "wrote " << (dir / (stem + ".png")).string() << "\n";
    } else if (project->parsed()) {
      run.command = "project";
      run.out_dir = pr_out;
      const auto ckpt = read_checkpoint(pr_ckpt);
      const auto split = read_split_manifest(pr_split);
      check_checkpoint(ckpt, {.variant = split.variant, .force = pr_force});
      const std::filesystem::path data_dir = pr_data_dir.empty() ? std::filesystem::path(split.data_dir) : std::filesystem::path(pr_data_dir);
      const auto& fold = split.fold(ckpt.fold());
      std::vector<std::string> ids;
      if (pr_subset == "test" || pr_subset == "all") ids.insert(ids.end(), fold.test.begin(), fold.test.end());
      if (pr_subset == "train" || pr_subset == "all") ids.insert(ids.end(), fold.train.begin(), fold.train.end());
      if (pr_subset != "test" && pr_subset != "train" && pr_subset != "all")
        throw ValidationError("--subset must be test, train or all");
      const auto records = select_records(record_index(data_dir), ids);
      const auto set = load_labeled_set(records, data_dir, train_classes(split.variant));
      auto model = image_model_from_checkpoint<float>(ckpt);
      const auto pooled = model.image().forward(all_images<float>(set), nn::Mode::eval).pooled.cast<double>().eval();
      std::vector<int> labels;
      for (const auto& inst : set.instances) labels.push_back(inst.label);
      const Mat<double> Y = tsne(pooled, {.perplexity = pr_perplexity, .seed = pr_seed});
      const std::filesystem::path dir = pr_out;
      write_png(dir / "projection.png", 512, 512, render_scatter(Y, labels));
      io::write_atomic(dir / "projection.csv", [&](std::ostream& os) {
        os << "nodule_id,class,x,y\n";
        for (std::size_t i = 0; i < set.size(); ++i)
          os << set.records[i].nodule_id << ',' << to_string(derive_class(set.records[i])) << ','
             << detail::format_real(Y(static_cast<Eigen::Index>(i), 0)) << ','
             << detail::format_real(Y(static_cast<Eigen::Index>(i), 1)) << '\n';
      });
      std::optional<double> sil;
      if (std::set<int>(labels.begin(), labels.end()).size() > 1) sil = silhouette(pooled, labels);
      nlohmann::json side{{"method", "t-SNE (exact, PCA init)"},
                          {"perplexity", pr_perplexity},
                          {"seed", pr_seed},
                          {"subset", pr_subset},
                          {"samples", set.size()},
                          {"silhouette_features", sil ? nlohmann::json(*sil) : nlohmann::json(nullptr)}};
      io::write_text_atomic(dir / "projection.json", side.dump(2) + "\n");
      run.details = {{"seed", pr_seed}, {"config_hash", ckpt.manifest.at("config_hash")}};
      out << "projected " << set.size() << " samples to " << (dir / "projection.png").string() << "\n";
    }
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    code = kExitValidation;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << "\n";
    code = kExitValidation;
  } catch (const std::exception& e) {
    err << "runtime failure: " << e.what() << "\n";
    code = kExitRuntime;
  }
  try {
    run.write(code);
  } catch (const std::exception& e) {
    err << "warning: could not write run manifest: " << e.what() << "\n";
  }
  return code;
}

}  // namespace nodule_align
