#include "nodule_align/evaluation.hpp"

#include <gtest/gtest.h>

using namespace nodule_align;

namespace {

FoldMetrics fold_with_accuracy(int fold, double acc, int classes = 2) {
  FoldMetrics f;
  f.fold = fold;
  f.accuracy = acc;
  f.per_class.assign(static_cast<std::size_t>(classes), ClassMetrics{50.0, 50.0, 50.0, 10});
  return f;
}

}  // namespace

TEST(ConfusionMatrix, MatchesCountingLoop) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = 2 + static_cast<int>(rng.below(3));
    const int n = 1 + static_cast<int>(rng.below(60));
    std::vector<int> preds(static_cast<std::size_t>(n)), labels(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      preds[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
      labels[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
    }
    const auto cm = confusion_matrix(preds, labels, k);
    EXPECT_EQ(cm.total(), n);
    long correct = 0;
    for (int a = 0; a < k; ++a)
      for (int b = 0; b < k; ++b) {
        long c = 0;
        for (int i = 0; i < n; ++i) c += labels[static_cast<std::size_t>(i)] == a && preds[static_cast<std::size_t>(i)] == b;
        EXPECT_EQ(cm.at(a, b), c);
        if (a == b) correct += c;
      }
    const auto m = per_class_metrics(cm);
    EXPECT_DOUBLE_EQ(m.accuracy, 100.0 * static_cast<double>(correct) / n);
    for (int a = 0; a < k; ++a) {
      const auto& c = m.per_class[static_cast<std::size_t>(a)];
      EXPECT_EQ(c.support, cm.row_sum(a));
      if (c.recall) {
        EXPECT_GE(*c.recall, 0.0);
        EXPECT_LE(*c.recall, 100.0);
      }
      if (c.f1) {
        EXPECT_LE(*c.f1, 100.0);
      }
    }
  }
  EXPECT_THROW(confusion_matrix(std::vector<int>{}, std::vector<int>{}, 2), ValidationError);
  EXPECT_THROW(confusion_matrix(std::vector<int>{0, 2}, std::vector<int>{0, 1}, 2), ValidationError);
  EXPECT_THROW(confusion_matrix(std::vector<int>{0}, std::vector<int>{0, 1}, 2), ValidationError);
}

TEST(Metrics, HandComputedThreeClassExample) {
  // labels:      0 0 0 0 1 1 1 2 2 2
  // predictions: 0 0 1 2 1 1 0 2 2 1
  const std::vector<int> labels{0, 0, 0, 0, 1, 1, 1, 2, 2, 2};
  const std::vector<int> preds{0, 0, 1, 2, 1, 1, 0, 2, 2, 1};
  const auto m = per_class_metrics(confusion_matrix(preds, labels, 3));
  EXPECT_DOUBLE_EQ(m.accuracy, 60.0);
  EXPECT_DOUBLE_EQ(*m.per_class[0].recall, 50.0);
  EXPECT_NEAR(*m.per_class[0].precision, 200.0 / 3.0, 1e-12);
  EXPECT_NEAR(*m.per_class[0].f1, 2 * 50.0 * (200.0 / 3) / (50.0 + 200.0 / 3), 1e-12);
  EXPECT_NEAR(*m.per_class[1].recall, 200.0 / 3.0, 1e-12);
  EXPECT_DOUBLE_EQ(*m.per_class[1].precision, 50.0);
  EXPECT_NEAR(*m.per_class[2].recall, 200.0 / 3.0, 1e-12);
  EXPECT_NEAR(*m.per_class[2].precision, 200.0 / 3.0, 1e-12);
  EXPECT_EQ(m.per_class[2].support, 3);
  EXPECT_FALSE(m.has_undefined());
}

TEST(Metrics, EmptyColumnLeavesPrecisionAndF1Undefined) {
  const std::vector<int> labels{0, 0, 1, 1};
  const std::vector<int> preds{0, 0, 0, 0};
  const auto m = per_class_metrics(confusion_matrix(preds, labels, 2));
  EXPECT_DOUBLE_EQ(*m.per_class[1].recall, 0.0);
  EXPECT_FALSE(m.per_class[1].precision.has_value());
  EXPECT_FALSE(m.per_class[1].f1.has_value());
  EXPECT_TRUE(m.has_undefined());
  EXPECT_EQ(format_percent(m.per_class[1].f1), "undef");

  std::vector<FoldMetrics> folds;
  for (int f = 0; f < kFoldCount; ++f) {
    auto fm = fold_with_accuracy(f, 50.0);
    if (f == 2) {
      fm = m;
      fm.fold = 2;
    }
    folds.push_back(fm);
  }
  const auto r = aggregate_folds(Variant::A, {"benign", "malignant"}, folds);
  EXPECT_EQ(r.f1[1].defined, 4);
  EXPECT_EQ(r.f1[1].undefined, 1);
  EXPECT_EQ(format_pm(r.f1[1]), "50.0±0.0*");
  EXPECT_NE(format_report(r).find("undefined"), std::string::npos);
}

TEST(Aggregate, MeanAndPopulationStd) {
  const std::vector<std::optional<double>> v{60, 61, 59, 60, 60};
  const auto a = aggregate(v);
  EXPECT_DOUBLE_EQ(a.mean, 60.0);
  EXPECT_NEAR(a.std, std::sqrt(0.4), 1e-12);
  EXPECT_EQ(format_pm(a), "60.0±0.6");
  const std::vector<std::optional<double>> none{std::nullopt, std::nullopt};
  EXPECT_EQ(format_pm(aggregate(none)), "n/a");

  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::optional<double>> xs;
    for (int i = 0; i < 5; ++i) xs.emplace_back(rng.uniform() * 100);
    const auto g = aggregate(xs);
    double lo = 1e9, hi = -1e9;
    for (auto& x : xs) {
      lo = std::min(lo, *x);
      hi = std::max(hi, *x);
    }
    EXPECT_GE(g.mean, lo);
    EXPECT_LE(g.mean, hi);
    EXPECT_LE(g.std, (hi - lo) / 2 + 1e-12);
  }
}

TEST(Aggregate, RequiresFiveDistinctFolds) {
  std::vector<FoldMetrics> four;
  for (int f = 0; f < 4; ++f) four.push_back(fold_with_accuracy(f, 60));
  try {
    aggregate_folds(Variant::A, {"a", "b"}, four);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("allow-partial"), std::string::npos);
  }
  const auto partial = aggregate_folds(Variant::A, {"a", "b"}, four, true);
  EXPECT_TRUE(partial.partial);
  EXPECT_NE(format_report(partial).find("partial"), std::string::npos);
  auto dup = four;
  dup.push_back(fold_with_accuracy(3, 60));
  EXPECT_THROW(aggregate_folds(Variant::A, {"a", "b"}, dup), ValidationError);
  auto wrong = four;
  wrong.push_back(fold_with_accuracy(4, 60, 3));
  EXPECT_THROW(aggregate_folds(Variant::A, {"a", "b"}, wrong), ValidationError);
}

TEST(Report, JsonRoundTrip) {
  std::vector<FoldMetrics> folds;
  for (int f = 4; f >= 0; --f) folds.push_back(fold_with_accuracy(f, 55.0 + f));
  folds[1].per_class[0].f1.reset();
  const auto r = aggregate_folds(Variant::C, {"benign", "malignant"}, folds);
  EXPECT_EQ(r.folds.front().fold, 0);
  const auto back = metrics_report_from_json(nlohmann::json::parse(to_json(r).dump()));
  EXPECT_EQ(format_report(back), format_report(r));
  EXPECT_EQ(to_json(back), to_json(r));
  EXPECT_THROW(metrics_report_from_json(nlohmann::json{{"variant", "LIDC-A"}}), ValidationError);
}

TEST(Evaluation, RestrictedArgmaxSkipsClassesOutsideTestSpace) {
  Mat<double> logits(3, 3);
  logits << 0, 5, 1,  //
      2, 9, 3,        //
      4, 1, 0;
  const std::vector<int> allowed{0, 2};
  EXPECT_EQ(restricted_argmax(logits, allowed), (std::vector<int>{2, 2, 0}));

  typename NoduleAlignModel<double>::Shape shape;
  shape.num_classes = 3;
  shape.width = 4;
  shape.T = 4;
  NoduleAlignModel<double> model(shape);
  model.init(5);
  Rng rng(6);
  LabeledSet test;
  for (int i = 0; i < 12; ++i) {
    NoduleRecord r;
    r.nodule_id = "N" + std::to_string(i);
    r.patient_id = "P" + std::to_string(i);
    r.malignancy_score = i % 2 ? 4.5 : 1.5;
    r.attribute_values = {1, 1, 6, 3, 3, 1, 1, 5};
    ChannelImage img;
    for (float& v : img.pixels()) v = static_cast<float>(rng.uniform());
    test.records.push_back(r);
    test.images.push_back(img);
    test.instances.push_back({0, attribute_weights(r)});
  }
  const auto ev = evaluate_model(model, Variant::B, test, 1);
  EXPECT_EQ(ev.fold, 1);
  ASSERT_EQ(ev.preds.size(), 12u);
  for (std::size_t i = 0; i < 12; ++i) {
    EXPECT_TRUE(ev.preds[i] == 0 || ev.preds[i] == 1);
    EXPECT_EQ(ev.labels[i], i % 2 ? 1 : 0);
  }
  EXPECT_EQ(ev.metrics.per_class.size(), 2u);
}

TEST(Ablation, GridHasFiveRowsWithCrossEntropyAlwaysOn) {
  const auto rows = ablation_rows();
  ASSERT_EQ(rows.size(), 5u);
  std::set<std::string> names;
  for (const auto& r : rows) {
    names.insert(r.name);
    EXPECT_GE(int(r.switches.ic) + int(r.switches.ia) + int(r.switches.ca), 1);
  }
  EXPECT_EQ(names.size(), 5u);
  EXPECT_TRUE(rows.back().switches == (LossSwitches{true, true, true}));
}
