#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "ehrprompt/metrics.hpp"
#include "ehrprompt/util.hpp"

using namespace ehrprompt;

namespace {

LabelSchema schema_ab() { return {"t", {"A", "B"}, {}, "A"}; }
LabelSchema schema_abc() { return {"t", {"A", "B", "C"}, {}, "A"}; }

std::vector<PredictionRecord> preds(const std::vector<std::string>& gold, const std::vector<std::string>& pred) {
  std::vector<PredictionRecord> out;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    PredictionRecord p;
    p.record_id = "r" + std::to_string(i);
    p.gold_label = gold[i];
    p.predicted_label = pred[i];
    out.push_back(p);
  }
  return out;
}

double auroc_oracle(const std::vector<ScoredLabel>& d) {
  double wins = 0, pairs = 0;
  for (const auto& [sp, lp] : d) {
    if (lp != 1) continue;
    for (const auto& [sn, ln] : d) {
      if (ln != 0) continue;
      pairs += 1;
      wins += sp > sn ? 1.0 : (sp == sn ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

// Sweep every distinct score as a ">= t" threshold, highest first.
double ap_oracle(const std::vector<ScoredLabel>& d) {
  std::set<double, std::greater<>> thresholds;
  double positives = 0;
  for (const auto& [s, l] : d) {
    thresholds.insert(s);
    positives += l;
  }
  double ap = 0, prev_recall = 0;
  for (double t : thresholds) {
    double tp = 0, predicted = 0;
    for (const auto& [s, l] : d) {
      if (s >= t) {
        predicted += 1;
        tp += l;
      }
    }
    const double recall = tp / positives;
    ap += (recall - prev_recall) * (tp / predicted);
    prev_recall = recall;
  }
  return ap;
}

std::vector<ScoredLabel> random_scored(std::mt19937_64& rng) {
  const auto n = 2 + bounded_draw(rng, 199);
  const auto grid = 1 + bounded_draw(rng, 50);  // coarse grids force ties
  std::vector<ScoredLabel> d(n);
  for (auto& [s, l] : d) {
    s = static_cast<double>(bounded_draw(rng, grid)) / static_cast<double>(grid);
    l = static_cast<int>(bounded_draw(rng, 2));
  }
  d[0].second = 1;
  d[1].second = 0;
  return d;
}

}  // namespace

TEST(Confusion, Examples) {
  auto one = confusion_matrix(preds({"A"}, {"A"}), schema_ab());
  EXPECT_EQ(one.counts, (std::vector<std::vector<std::size_t>>{{1, 0}, {0, 0}}));
  auto cm = confusion_matrix(preds({"A", "B", "B"}, {"A", "A", "B"}), schema_ab());
  EXPECT_EQ(cm.at("A", "A"), 1u);
  EXPECT_EQ(cm.at("B", "A"), 1u);
  EXPECT_EQ(cm.at("B", "B"), 1u);
  EXPECT_EQ(cm.at("A", "B"), 0u);
  auto empty = confusion_matrix({}, schema_ab());
  EXPECT_EQ(empty.n, 0u);
  EXPECT_EQ(empty.counts, (std::vector<std::vector<std::size_t>>{{0, 0}, {0, 0}}));
  EXPECT_THROW(confusion_matrix(preds({"A"}, {"Z"}), schema_ab()), std::invalid_argument);
}

TEST(F1, Examples) {
  auto perfect = f1_scores(confusion_matrix(preds({"A", "B", "C"}, {"A", "B", "C"}), schema_abc()));
  EXPECT_DOUBLE_EQ(perfect.macro, 1.0);
  EXPECT_DOUBLE_EQ(perfect.micro, 1.0);

  auto f = f1_scores(confusion_matrix(preds({"A", "B", "B"}, {"A", "A", "B"}), schema_ab()));
  EXPECT_NEAR(f.per_class[0], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(f.per_class[1], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(f.macro, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(f.micro, 2.0 / 3.0, 1e-12);

  auto one_class = f1_scores(confusion_matrix(preds({"A", "A", "B", "B"}, {"A", "A", "A", "A"}), schema_ab()));
  EXPECT_DOUBLE_EQ(one_class.micro, 0.5);
  EXPECT_NEAR(one_class.macro, 1.0 / 3.0, 1e-12);
}

TEST(F1, MacroOverGoldClassesOrAllLabels) {
  const auto cm = confusion_matrix(preds({"A", "A"}, {"A", "B"}), schema_abc());
  // gold has only A: F1_A = 2/3
  EXPECT_NEAR(f1_scores(cm, MacroAverage::classes_in_gold).macro, 2.0 / 3.0, 1e-12);
  // all labels: (2/3 + 0 + 0) / 3
  EXPECT_NEAR(f1_scores(cm, MacroAverage::all_labels).macro, 2.0 / 9.0, 1e-12);
}

TEST(F1Property, MicroIsAccuracyAndMacroLabelPermutationInvariant) {
  std::mt19937_64 rng(13);
  const std::vector<std::string> labels{"A", "B", "C", "D"};
  LabelSchema s{"t", labels, {}, "A"};
  for (int trial = 0; trial < 500; ++trial) {
    const auto n = 1 + bounded_draw(rng, 60);
    std::vector<std::string> g(n), p(n);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
      g[i] = labels[bounded_draw(rng, 4)];
      p[i] = labels[bounded_draw(rng, 4)];
      correct += g[i] == p[i];
    }
    const auto f = f1_scores(confusion_matrix(preds(g, p), s));
    EXPECT_NEAR(f.micro, static_cast<double>(correct) / n, 1e-12);

    auto perm = labels;
    std::shuffle(perm.begin(), perm.end(), rng);
    auto rename = [&](std::vector<std::string> v) {
      for (auto& x : v) x = perm[static_cast<std::size_t>(x[0] - 'A')];
      return v;
    };
    const auto fp = f1_scores(confusion_matrix(preds(rename(g), rename(p)), s));
    EXPECT_NEAR(fp.macro, f.macro, 1e-12);
  }
}

TEST(RocAuc, Examples) {
  EXPECT_DOUBLE_EQ(roc_auc({{0.9, 1}, {0.8, 1}, {0.3, 0}, {0.2, 0}}), 1.0);
  EXPECT_DOUBLE_EQ(roc_auc({{0.8, 1}, {0.7, 0}, {0.6, 1}}), 0.5);
  EXPECT_DOUBLE_EQ(roc_auc({{0.5, 1}, {0.5, 0}}), 0.5);
  EXPECT_THROW(roc_auc({{0.5, 1}, {0.4, 1}}), UndefinedMetricError);
  EXPECT_THROW(roc_auc({}), UndefinedMetricError);
}

TEST(PrAuc, Examples) {
  EXPECT_DOUBLE_EQ(pr_auc({{0.9, 1}, {0.8, 1}, {0.3, 0}}), 1.0);
  EXPECT_NEAR(pr_auc({{0.9, 1}, {0.8, 0}, {0.7, 1}}), 0.5 * 1.0 + 0.5 * (2.0 / 3.0), 1e-12);
  EXPECT_NEAR(pr_auc({{0.9, 0}, {0.8, 0}, {0.7, 1}}), 1.0 / 3.0, 1e-12);
  EXPECT_THROW(pr_auc({{0.9, 0}}), UndefinedMetricError);
}

TEST(CurveProperty, OraclesAndInvariances) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 1000; ++trial) {
    auto d = random_scored(rng);
    const double auc = roc_auc(d);
    EXPECT_NEAR(auc, auroc_oracle(d), 1e-12);
    EXPECT_NEAR(pr_auc(d), ap_oracle(d), 1e-12);

    auto flipped = d;
    for (auto& [s, l] : flipped) l = 1 - l;
    EXPECT_NEAR(auc + roc_auc(flipped), 1.0, 1e-12);

    auto warped = d;
    for (auto& [s, l] : warped) s = std::exp(3.0 * s) - 7.0;
    EXPECT_NEAR(roc_auc(warped), auc, 1e-12);

    std::shuffle(d.begin(), d.end(), rng);
    EXPECT_NEAR(roc_auc(d), auc, 1e-12);
  }
}

TEST(Median, Examples) {
  EXPECT_DOUBLE_EQ(median({85.0, 86.0, 90.0}), 86.0);
  EXPECT_DOUBLE_EQ(median({90.0, 85.0, 86.0}), 86.0);
  EXPECT_DOUBLE_EQ(median({0.5, 0.7}), 0.6);
  EXPECT_THROW(median({}), std::invalid_argument);
}

TEST(MedianOfRuns, PerMetric) {
  std::vector<MetricsReport> rs(3);
  const double auroc[] = {0.85, 0.86, 0.90};
  const double auprc[] = {0.7, 0.5, 0.6};
  for (int i = 0; i < 3; ++i) {
    rs[i].task = "mortality";
    rs[i].n = 10;
    rs[i].auroc = auroc[i];
    rs[i].auprc = auprc[i];
  }
  const auto m = median_of_runs(rs);
  EXPECT_DOUBLE_EQ(*m.auroc, 0.86);
  EXPECT_DOUBLE_EQ(*m.auprc, 0.6);
  EXPECT_FALSE(m.micro_f1.has_value());

  const auto single = median_of_runs({rs[0]});
  EXPECT_EQ(to_json(single).dump(), to_json(rs[0]).dump());

  auto other = rs;
  other[1].n = 11;
  EXPECT_THROW(median_of_runs(other), std::invalid_argument);
  EXPECT_THROW(median_of_runs({}), std::invalid_argument);
}

TEST(Evaluate, UndefinedIsReportedNotNan) {
  std::vector<PredictionRecord> ps(3);
  for (auto& p : ps) {
    p.gold_flag = 1;
    p.score = 0.7;
  }
  const auto r = evaluate_scored("mortality", ps);
  EXPECT_FALSE(r.auroc.has_value());
  EXPECT_TRUE(r.auprc.has_value());
  EXPECT_EQ(r.undefined.size(), 1u);
  const auto j = to_json(r);
  EXPECT_TRUE(j["auroc"].is_null());
  EXPECT_EQ(j.dump().find("nan"), std::string::npos);
}

TEST(Evaluate, ClassificationAndUnparsedRate) {
  auto ps = preds({"A", "B", "B", "A"}, {"A", "A", "B", "A"});
  ps[1].unparsed = true;
  const auto r = evaluate_classification("t", ps, schema_ab());
  EXPECT_DOUBLE_EQ(*r.micro_f1, 0.75);
  EXPECT_DOUBLE_EQ(r.unparsed_rate, 0.25);
  EXPECT_EQ(r.confusion->n, 4u);
  const auto table = render_report_table({r});
  EXPECT_NE(table.find("0.75"), std::string::npos);
}
