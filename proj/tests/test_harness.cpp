#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

#include "rflow/harness.hpp"

using namespace rflow;

namespace {

class HarnessRun : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() / ("rflow_harness_" + std::to_string(::getpid()));
    fs::create_directories(root_);
    ::setenv("RFLOW_OUTPUT_ROOT", root_.c_str(), 1);
  }
  void TearDown() override {
    ::unsetenv("RFLOW_OUTPUT_ROOT");
    fs::remove_all(root_);
  }
  fs::path root_;
};

std::string field_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "";
}

std::vector<std::vector<double>> read_table(const fs::path& p, std::string* header = nullptr) {
  std::ifstream in(p);
  std::string line;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.rfind('#', 0) == 0) {
      if (header) *header = line;
      continue;
    }
    std::istringstream ls(line);
    std::vector<double> row;
    for (double v; ls >> v;) row.push_back(v);
    rows.push_back(row);
  }
  return rows;
}

const char* kPerturbedDeturck = R"(
[model]
kind = grid
n = 16
recipe = ripple
amplitude = 1e-3

[flow]
variant = deturck
tau = inf
dt = 0.05
t_end = 8
sample_interval = 0.25

[stability]
interval_length = 1

[output]
name = deturck
)";

}  // namespace

TEST(ParseConfig, MinimalConfigFillsDefaults) {
  const auto c = parse_config("[model]\nn = 12\n");
  EXPECT_EQ(c.model.n, 12);
  EXPECT_EQ(c.model.kind, "grid");
  EXPECT_EQ(c.flow.variant, FlowVariant::tau_flow);
  EXPECT_TRUE(std::isinf(c.flow.tau));
  EXPECT_EQ(c.flow.dt, 1e-3);
  EXPECT_EQ(c.output.name, "run");
  EXPECT_EQ(parse_config("").model.n, 16);
  EXPECT_EQ(parse_config("[model]\nkind = frame\n").model.recipe, "round");
}

TEST(ParseConfig, RejectsWithFieldAndLine) {
  try {
    parse_config("[model]\nn = 16\n[flow]\ndt = -1\n");
    FAIL() << "negative dt accepted";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "flow.dt");
    EXPECT_NE(std::string(e.what()).find("line 4"), std::string::npos) << e.what();
  }
  EXPECT_EQ(field_of("[model]\ncolour = red\n"), "model.colour");
  EXPECT_EQ(field_of("[plots]\nx = 1\n"), "plots");
  EXPECT_EQ(field_of("n = 3\n"), "n");
  EXPECT_EQ(field_of("[flow]\ntau = fast\n"), "flow.tau");
  EXPECT_EQ(field_of("[flow]\nvariant = ricci\n"), "flow.variant");
  EXPECT_EQ(field_of("[flow]\ncoupled_f = maybe\n"), "flow.coupled_f");
  EXPECT_EQ(field_of("[model]\nn = 8.5\n"), "model.n");
  EXPECT_EQ(field_of("[model]\nn = 4\n"), "model.n");
  EXPECT_EQ(field_of("[model]\nkind = frame\n[flow]\nvariant = deturck\n"), "flow.variant");
  EXPECT_EQ(field_of("[flow]\nvariant = tau_flow\nconvention = backward\ntau = 2\n"), "flow.convention");
  EXPECT_EQ(field_of("[flow]\ncoupled_f = true\n"), "flow.coupled_f");
  EXPECT_EQ(field_of("[stability]\nbeta = 0.5\n"), "stability.beta");
  EXPECT_EQ(field_of("[model]\nn = 40\n"), "stability.analyze");
  EXPECT_EQ(field_of("[model]\nn = 40\n[stability]\nanalyze = false\n"), "");
  EXPECT_THROW(parse_config("[model\nn = 3\n"), ConfigError);
  EXPECT_THROW(parse_config("[model]\nn = 16\nn = 17\n"), ConfigError);
}

TEST(ParseConfig, SerializeRoundTrip) {
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 50; ++i) {
    RunConfig c;
    c.model.n = 8 + static_cast<int>(u(rng) * 24);
    c.model.recipe = i % 2 ? "random" : "ripple";
    c.model.amplitude = 0.3 * u(rng);
    c.model.seed = rng();
    c.model.period = 1.0 + 10.0 * u(rng);
    c.flow.variant = i % 3 == 0 ? FlowVariant::deturck : FlowVariant::unnormalized;
    c.flow.tau = i % 4 == 0 ? kInfiniteTau : 0.1 + u(rng);
    c.flow.dt = 1e-4 * (1 + u(rng));
    c.flow.t_end = 0.05 * u(rng);
    c.flow.sample_interval = 0.01 + u(rng);
    c.gauge.harmonic = i % 5 == 0;
    c.stability.eps_neutral = u(rng);
    c.stability.beta = i % 2 ? 0.0 : 1.0 + u(rng);
    c.output.name = "r" + std::to_string(i);
    const auto text = serialize(c);
    const auto back = parse_config(text);
    EXPECT_EQ(back, c) << text;
    EXPECT_EQ(serialize(back), text);
    EXPECT_EQ(config_hash(back), config_hash(c));
  }
  RunConfig a, b;
  b.flow.dt = 2e-3;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(InitialData, RecipesAreSpdAndSeeded) {
  ModelConfig m;
  m.recipe = "random";
  m.amplitude = 0.2;
  m.seed = 5;
  const auto a = initial_grid_metric(m), b = initial_grid_metric(m);
  EXPECT_EQ(a.g, b.g);
  EXPECT_NEAR(max_abs(lincomb(1.0, a.g, -1.0, GridModel<2>::flat(a.grid).g)), 0.2, 1e-12);
  m.seed = 6;
  EXPECT_NE(initial_grid_metric(m).g, a.g);
  for (const char* r : {"flat", "ripple", "conformal"}) {
    m.recipe = r;
    EXPECT_NO_THROW(validate(initial_grid_metric(m)));
  }
  ModelConfig f;
  f.kind = "frame";
  f.recipe = "berger";
  f.a = 2;
  f.squash = 0.5;
  EXPECT_DOUBLE_EQ(initial_frame_metric(f).a(2), 1.0);
}

TEST_F(HarnessRun, FlatExactSolutionConfig) {
  const auto c = parse_config("[model]\nn = 8\n[flow]\ntau = 1\ndt = 1e-3\nt_end = 1\n[output]\nname = flat\n");
  const auto rec = run_experiment(c);
  ASSERT_TRUE(rec.ok()) << rec.error;
  EXPECT_EQ(rec.verdicts.at("exact_solution"), "reproduced");
  EXPECT_LT(rec.metrics.at("exact_rel_error"), 1e-9);
  EXPECT_EQ(rec.verdicts.at("spectrum"), "unstable");  // constants grow at finite tau
  EXPECT_TRUE(fs::exists(rec.trajectory));
  EXPECT_TRUE(fs::exists(rec.spectrum));
  EXPECT_TRUE(fs::exists(rec.record));
  EXPECT_EQ(rec.directory.parent_path(), root_);
}

TEST_F(HarnessRun, RoundSphereIsStationary) {
  const auto c = parse_config(
      "[model]\nkind = frame\nrecipe = round\na = 4\n[flow]\ntau = 1\ndt = 1e-3\nt_end = 1\n[output]\nname = round\n");
  const auto rec = run_experiment(c);
  ASSERT_TRUE(rec.ok()) << rec.error;
  EXPECT_EQ(rec.verdicts.at("rate"), "stationary");
  EXPECT_LT(rec.metrics.at("drift_per_unit_time"), 1e-10);
  EXPECT_EQ(rec.metrics.at("n_grow"), 1.0);
  EXPECT_EQ(rec.metrics.at("n_decay"), 2.0);
}

TEST_F(HarnessRun, PerturbedDeturckDecaysAtTheGap) {
  const auto rec = run_experiment(parse_config(kPerturbedDeturck));
  ASSERT_TRUE(rec.ok()) << rec.error;
  EXPECT_EQ(rec.verdicts.at("rate"), "decay");
  EXPECT_LT(rec.metrics.at("rate_vs_gap_rel"), 0.1);
  EXPECT_EQ(rec.verdicts.at("integrability"), "holds");
  EXPECT_EQ(rec.verdicts.at("limit_in_family"), "yes");
  EXPECT_EQ(rec.verdicts.at("trichotomy"), "decay-propagates");
  EXPECT_EQ(rec.verdicts.at("spectrum"), "neutral");

  const auto again = run_experiment(parse_config(kPerturbedDeturck));
  EXPECT_EQ(again.verdicts, rec.verdicts);
  EXPECT_EQ(again.metrics, rec.metrics);
  EXPECT_EQ(recompute_verdicts(rec.trajectory), rec.verdicts);

  const auto loaded = load_record(rec.record);
  EXPECT_EQ(loaded.verdicts, rec.verdicts);
  const auto table = read_table(emit_plotdata(loaded, "norm"));
  ASSERT_EQ(table.size(), 33u);
  for (const auto& row : table) EXPECT_EQ(row.size(), 2u);
}

TEST_F(HarnessRun, EntropyPlotIsNondecreasing) {
  const auto c = parse_config(
      "[model]\nkind = frame\nrecipe = berger\na = 2\nsquash = 0.6\n"
      "[flow]\ntau = 0.5\ndt = 1e-3\nt_end = 0.2\nsample_interval = 0.02\ncoupled_f = true\n[output]\nname = berger\n");
  const auto rec = run_experiment(c);
  ASSERT_TRUE(rec.ok()) << rec.error;
  EXPECT_EQ(rec.verdicts.at("monotonicity"), "nondecreasing");
  std::string header;
  const auto rows = read_table(emit_plotdata(rec, "W"), &header);
  EXPECT_EQ(header, "# t W");
  ASSERT_EQ(rows.size(), 11u);
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_GE(rows[i][1], rows[i - 1][1]);
  for (const auto& r : read_table(emit_plotdata(rec, "defect"))) EXPECT_EQ(r.size(), 2u);
  EXPECT_EQ(recompute_verdicts(rec.trajectory), rec.verdicts);
  EXPECT_THROW(emit_plotdata(rec, "temperature"), RejectedInput);
}

TEST_F(HarnessRun, GaugeStageRecordsEnergy) {
  const auto c = parse_config(
      "[model]\nn = 16\nrecipe = ripple\namplitude = 1e-2\n[flow]\nvariant = unnormalized\ndt = 1\nt_end = 0.5\n"
      "sample_interval = 0.05\n[gauge]\nharmonic = true\n[stability]\nanalyze = false\n[output]\nname = gauge\n");
  const auto rec = run_experiment(c);
  ASSERT_TRUE(rec.ok()) << rec.error;
  EXPECT_EQ(rec.verdicts.at("gauge"), "injective");
  EXPECT_LT(rec.metrics.at("gauge_error_max"), 1e-3);
  EXPECT_TRUE(rec.spectrum.empty());
  const auto rows = read_table(emit_plotdata(rec, "energy"));
  ASSERT_EQ(rows.size(), 11u);
  EXPECT_EQ(rows.front()[1], 0.0);
  EXPECT_EQ(recompute_verdicts(rec.trajectory), rec.verdicts);
}

TEST_F(HarnessRun, StageFailureKeepsPartialOutput) {
  // The unnormalized flow on the round sphere a = 1 becomes extinct at t = 1/4.
  const auto c = parse_config(
      "[model]\nkind = frame\na = 1\n[flow]\nvariant = unnormalized\ndt = 1e-3\nt_end = 1\nsample_interval = 0.05\n"
      "[output]\nname = extinct\n");
  const auto rec = run_experiment(c);
  EXPECT_FALSE(rec.ok());
  EXPECT_EQ(rec.failed_stage, "flow");
  EXPECT_EQ(rec.error_kind, "numerical");
  ASSERT_TRUE(fs::exists(rec.record));
  EXPECT_EQ(load_record(rec.record).failed_stage, "flow");
  const auto L = load_trajectory(rec.trajectory);
  ASSERT_TRUE(L.frame.has_value());
  EXPECT_GE(L.frame->size(), 4u);
  EXPECT_LT(L.frame->states.back().t, 0.25);
}

TEST_F(HarnessRun, SpectrumOnlyRunHasHeaderOnlyPlots) {
  Stages st;
  st.flow = false;
  const auto rec = run_experiment(parse_config("[model]\nn = 8\n[output]\nname = spec\n"), st);
  ASSERT_TRUE(rec.ok()) << rec.error;
  std::ifstream in(rec.spectrum);
  const auto j = json::parse(in);
  EXPECT_EQ(j.at("n_neutral").get<int>(), 3);
  EXPECT_EQ(j.at("dimension").get<int>(), 3 * 64);
  std::string header;
  EXPECT_TRUE(read_table(emit_plotdata(rec, "norm"), &header).empty());
  EXPECT_EQ(header, "# t norm");
}
