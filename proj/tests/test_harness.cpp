#include <gtest/gtest.h>

#include <cmath>

#include "dpalab/config.hpp"
#include "dpalab/harness.hpp"
#include "dpalab/verify.hpp"

using namespace dpalab;

namespace {

struct Tiny {
  std::vector<TaskDataset> tasks;
  ToyVlodModel base{ToyVlodConfig{}};
  TrainHyper hyper;

  Tiny() {
    BenchmarkSpec spec;
    spec.n_tasks = 3;
    spec.train_images = 8;
    spec.test_images = 4;
    tasks = generate(spec);
    ToyVlodConfig cfg;
    cfg.d = 16;
    cfg.n_fusion_layers = 2;
    cfg.prompt_length = 2;
    base = ToyVlodModel(cfg);
    hyper.steps = 2;
    hyper.decay_step = 1;
    hyper.batch = 2;
    hyper.bank_m = 4;
  }
};

const Tiny& tiny() {
  static const Tiny t;
  return t;
}

double welford_std(const std::vector<double>& xs) {
  double mean = 0, m2 = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double delta = xs[i] - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta * (xs[i] - mean);
  }
  return xs.size() > 1 ? std::sqrt(m2 / static_cast<double>(xs.size() - 1)) : 0.0;
}

}  // namespace

TEST(Metrics, HandComputedMatrix) {
  const ApMatrix m{{{80}, {70, 60}, {50, 40, 30}}};
  EXPECT_DOUBLE_EQ(fap(m), 40.0);
  EXPECT_NEAR(cap(m), (80.0 + 65.0 + 40.0) / 3.0, 1e-12);
  EXPECT_DOUBLE_EQ(ffp(m), ((80.0 - 50.0) + (60.0 - 40.0)) / 2.0);
}

TEST(Metrics, ConstantMatrixHasNoForgetting) {
  const ApMatrix m{{{42}, {42, 42}, {42, 42, 42}, {42, 42, 42, 42}}};
  EXPECT_DOUBLE_EQ(fap(m), 42.0);
  EXPECT_DOUBLE_EQ(cap(m), 42.0);
  EXPECT_DOUBLE_EQ(ffp(m), 0.0);
}

TEST(Metrics, BackwardTransferGivesNegativeForgetting) {
  const ApMatrix m{{{10}, {20, 30}}};
  EXPECT_DOUBLE_EQ(ffp(m), -10.0);
}

TEST(Metrics, MalformedMatricesRaise) {
  EXPECT_THROW(fap(ApMatrix{}), MetricError);
  EXPECT_THROW(cap(ApMatrix{{{1, 2}}}), MetricError);
  EXPECT_THROW(ffp(ApMatrix{{{1}}}), MetricError);
  EXPECT_TRUE(metrics_suite().passed);
}

TEST(Metrics, MeanStdMatchesExamplesAndWelford) {
  const MeanStd a = mean_std({2, 4, 4, 4, 5, 5, 7, 9});
  EXPECT_DOUBLE_EQ(a.mean, 5.0);
  EXPECT_NEAR(a.std, std::sqrt(32.0 / 7.0), 1e-12);
  EXPECT_EQ(mean_std({3.5}).std, 0.0);
  SplitMix64 rng(1);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> xs(2 + rng.below(20));
    for (double& x : xs) x = rng.normal(50, 20);
    EXPECT_NEAR(mean_std(xs).std, welford_std(xs), 1e-9);
  }
  EXPECT_THROW(mean_std({}), MetricError);
}

TEST(Harness, MethodNamesRoundTrip) {
  for (Method m : {Method::zero_shot, Method::sequential_ft, Method::joint, Method::naive_pa, Method::idpa,
                   Method::idpa_no_transfer})
    EXPECT_EQ(method_from_string(to_string(m)), m);
  EXPECT_THROW(method_from_string("bogus"), ConfigError);
}

TEST(Harness, BudgetScalingKeepsTheDecayFraction) {
  TrainHyper h;
  const TrainHyper half = h.with_budget(0.5);
  EXPECT_EQ(half.steps, 15);
  EXPECT_EQ(half.decay_step, 9);
  EXPECT_EQ(h.with_budget(0.0).steps, 1);
}

TEST(Harness, ZeroShotStoresOnlyARoutingKey) {
  const Tiny& t = tiny();
  ContinualLearner learner(t.base, Method::zero_shot, t.hyper, 0);
  EXPECT_EQ(learner.trainable_parameters(), 0u);
  learner.train_task(t.tasks[0], t.tasks[0].class_names);
  ASSERT_EQ(learner.pool().size(), 1u);
  const PoolEntry& e = learner.pool().at(0);
  EXPECT_TRUE(e.layers.empty());
  EXPECT_TRUE(e.lambdas.empty());
  EXPECT_EQ(e.key.numel(), 16u);
  const auto p = learner.detect(t.tasks[0].test[0].pixels, t.tasks[0].class_names);
  EXPECT_EQ(p.routed, std::optional<std::size_t>(0));
}

TEST(Harness, IdpaWithoutStepsReproducesTheFrozenBase) {
  const Tiny& t = tiny();
  const SuiteResult r = zero_init_suite(20, 0, 0.0, &t.base, &t.tasks[0], 4);
  EXPECT_TRUE(r.passed) << r.detail;
}

TEST(Harness, PromptTrainingLowersTheLoss) {
  const Tiny& t = tiny();
  TrainHyper h = t.hyper;
  h.steps = 40;
  h.decay_step = 40;
  h.batch = 8;
  h.prompt_lr = 0.05;
  for (Method m : {Method::idpa, Method::naive_pa}) {
    ContinualLearner learner(t.base, m, h, 0);
    const auto losses = learner.train_task(t.tasks[0], t.tasks[0].class_names).losses;
    ASSERT_EQ(losses.size(), 40u);
    // Full batch of all eight images, so every step sees the same data.
    EXPECT_LT(losses.back(), 0.9 * losses.front()) << to_string(m);
  }
}

TEST(Harness, PoolEntriesAreImmutableOnceWritten) {
  const Tiny& t = tiny();
  ContinualLearner learner(t.base, Method::idpa, t.hyper, 0);
  learner.train_task(t.tasks[0], t.tasks[0].class_names);
  const auto first = learner.pool().hashes();
  learner.train_task(t.tasks[1], class_union(t.tasks, {0, 1}, 2));
  const auto second = learner.pool().hashes();
  ASSERT_EQ(second.size(), 2u);
  EXPECT_EQ(second[0], first[0]);
  EXPECT_EQ(learner.base().hash(), t.base.hash());
}

TEST(Harness, SingleTaskRunGivesOneByOneMatrix) {
  Tiny t = tiny();
  t.tasks.resize(1);
  const RunRecord r = run_sequence(t.base, t.tasks, Method::idpa, t.hyper, 0);
  ASSERT_EQ(r.apm.size(), 1u);
  EXPECT_EQ(r.apm.rows[0].size(), 1u);
  EXPECT_DOUBLE_EQ(r.fap_value(), r.apm.rows[0][0]);
  EXPECT_TRUE(std::isnan(r.ffp_value()));
  EXPECT_DOUBLE_EQ(r.routing_accuracy, 1.0);
}

TEST(Harness, SequentialRunFillsTheLowerTriangle) {
  const Tiny& t = tiny();
  const RunRecord r = run_sequence(t.base, t.tasks, Method::naive_pa, t.hyper, 5);
  ASSERT_EQ(r.apm.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(r.apm.rows[i].size(), i + 1);
    for (double v : r.apm.rows[i]) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 100.0);
    }
  }
  EXPECT_EQ(r.order, task_order(3, 5));
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(r.final_ap[static_cast<std::size_t>(r.order[j])], r.apm.rows[2][j]);
  EXPECT_EQ(r.loss_curves.size(), 3u);
  EXPECT_GE(r.routing_accuracy, 0.0);
  EXPECT_LE(r.routing_accuracy, 1.0);
}

TEST(Harness, JointFillsOnlyTheFinalRow) {
  const Tiny& t = tiny();
  TrainHyper h = t.hyper;
  h.steps = 1;
  const RunRecord r = run_sequence(t.base, t.tasks, Method::joint, h, 0);
  EXPECT_TRUE(r.joint());
  EXPECT_EQ(r.final_ap.size(), 3u);
  EXPECT_TRUE(std::isnan(r.cap_value()));
  EXPECT_TRUE(std::isnan(r.ffp_value()));
  EXPECT_TRUE(std::isnan(r.routing_accuracy));
  EXPECT_EQ(r.loss_curves.size(), 1u);
  EXPECT_EQ(r.loss_curves[0].size(), 3u);
  EXPECT_EQ(r.trainable_params, t.base.parameter_count());
}

TEST(Harness, RunRecordJsonRoundTrip) {
  RunRecord r;
  r.method = "idpa";
  r.seed = 10;
  r.order = {1, 0};
  r.apm.rows = {{55.5}, {40.25, 60}};
  r.final_ap = {60, 40.25};
  r.trainable_params = 1234;
  r.loss_curves = {{1.0, 0.5}, {0.7}};
  r.wall_seconds = 2.5;
  const RunRecord b = RunRecord::from_json(nlohmann::json::parse(r.to_json().dump()));
  EXPECT_EQ(b.method, r.method);
  EXPECT_EQ(b.order, r.order);
  EXPECT_EQ(b.apm.rows, r.apm.rows);
  EXPECT_EQ(b.final_ap, r.final_ap);
  EXPECT_TRUE(std::isnan(b.routing_accuracy));
  EXPECT_EQ(b.loss_curves, r.loss_curves);
  EXPECT_DOUBLE_EQ(b.ffp_value(), 55.5 - 40.25);
  nlohmann::json bad = r.to_json();
  bad["ap_matrix"] = {{1, 2}};
  EXPECT_THROW(RunRecord::from_json(bad), MetricError);
  bad.erase("seed");
  EXPECT_THROW(RunRecord::from_json(bad), ConfigError);
}

TEST(Harness, SummaryAndReportColumns) {
  RunRecord a, b;
  for (RunRecord* r : {&a, &b}) {
    r->method = "naive-pa";
    r->order = {0, 1};
    r->apm.rows = {{50}, {30, 40}};
    r->final_ap = {30, 40};
  }
  b.seed = 5;
  b.apm.rows = {{70}, {50, 60}};
  b.final_ap = {50, 60};
  const ToyVlodConfig cfg;
  const MethodSummary s = summarize({a, b}, cfg, 2);
  EXPECT_DOUBLE_EQ(s.fap.mean, 45.0);
  EXPECT_NEAR(s.fap.std, std::sqrt(200.0), 1e-12);
  EXPECT_DOUBLE_EQ(s.final_ap[0].mean, 40.0);
  const std::string csv = report_csv({s});
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "method,seeds,task0_ap,task0_ap_std,task1_ap,task1_ap_std,fap,fap_std,cap,cap_std,ffp,ffp_std,"
            "routing_acc,trainable_params,flops,memory_words,wall_seconds");
  EXPECT_EQ(csv.substr(csv.find('\n') + 1, 14), "naive-pa,0;5,4");
  b.method = "idpa";
  EXPECT_THROW(summarize({a, b}, cfg, 2), MetricError);
}

TEST(Costing, IdpaTrainsUnderFivePercentOfFullFinetuning) {
  const ToyVlodModel m{ToyVlodConfig{}};
  const auto idpa = params_count(m.config(), "idpa", m.parameter_count()).total();
  const auto ft = params_count(m.config(), "sequential-ft", m.parameter_count()).total();
  EXPECT_LT(static_cast<double>(idpa) / static_cast<double>(ft), 0.05);
  EXPECT_EQ(ft, m.parameter_count());
}

TEST(Config, UnknownKeysAndBadValuesRaise) {
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"bench": {"n_task": 3}})")), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"extra": {}})")), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"model": {"d": "wide"}})")), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"model": {"mechanism": "xa"}})")), ConfigError);
}

TEST(Config, JsonRoundTripPreservesTheHash) {
  LabConfig c = config_from_json(nlohmann::json::parse(R"({"bench": {"n_tasks": 6}, "train": {"steps": 7}})"));
  EXPECT_EQ(c.bench.n_tasks, 6);
  EXPECT_EQ(c.train.steps, 7);
  const LabConfig back = config_from_json(to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_NE(config_hash(back), config_hash(LabConfig{}));
  EXPECT_EQ(config_hash(LabConfig{}).size(), 16u);
}
