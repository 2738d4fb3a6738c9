// rflow: run configured experiments and emit plot tables.
//
// Exit status: 0 success, 2 invalid input or configuration, 3 numerical
// failure. RFLOW_OUTPUT_ROOT overrides [output] root.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "rflow/harness.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 2;
constexpr int kNumerical = 3;

rflow::RunConfig read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw rflow::RejectedInput("cli", "cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return rflow::parse_config(ss.str());
}

int report(const rflow::RunRecord& rec) {
  std::cout << "record " << rec.record.string() << '\n';
  if (!rec.trajectory.empty()) std::cout << "trajectory " << rec.trajectory.string() << '\n';
  if (!rec.spectrum.empty()) std::cout << "spectrum " << rec.spectrum.string() << '\n';
  for (const auto& [k, v] : rec.verdicts) std::cout << "verdict " << k << " = " << v << '\n';
  for (const auto& [k, v] : rec.metrics) std::cout << "metric " << k << " = " << v << '\n';
  if (rec.ok()) return kOk;
  std::cerr << "failed in stage " << rec.failed_stage << ": " << rec.error << '\n';
  return rec.error_kind == "validation" ? kInvalid : kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ricci flow uniqueness experiments"};
  app.require_subcommand(1);

  std::string config, record, quantity;
  auto* run = app.add_subcommand("run", "run the full configured pipeline");
  run->add_option("config", config, "INI config")->required();
  auto* spectrum = app.add_subcommand("spectrum", "spectral report of the linearized operator only");
  spectrum->add_option("config", config, "INI config")->required();
  auto* entropy = app.add_subcommand("entropy", "flow with the coupled potential and the entropy audit");
  entropy->add_option("config", config, "INI config")->required();
  auto* gauge = app.add_subcommand("gauge-check", "flow, harmonic gauge and the DeTurck equivalence audit");
  gauge->add_option("config", config, "INI config")->required();
  auto* plot = app.add_subcommand("plot", "two-column table from a run record");
  plot->add_option("record", record, "run.json of a finished run")->required();
  plot->add_option("quantity", quantity, "norm | W | defect | energy")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInvalid;
  }

  try {
    if (*plot) {
      const auto rec = rflow::load_record(record);
      std::cout << rflow::emit_plotdata(rec, quantity).string() << '\n';
      return kOk;
    }
    auto cfg = read_config(config);
    rflow::Stages st;
    if (*spectrum) {
      st = {false, false, false, true, false};
    } else if (*entropy) {
      cfg.flow.coupled_f = true;
      st = {true, true, false, false, false};
    } else if (*gauge) {
      cfg.gauge.harmonic = true;
      st = {true, false, true, false, false};
    }
    rflow::validate(cfg);
    return report(rflow::run_experiment(cfg, st));
  } catch (const rflow::RejectedInput& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInvalid;
  } catch (const rflow::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kInvalid;
  } catch (const rflow::Error& e) {
    std::cerr << e.stage() << ": " << e.what() << '\n';
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumerical;
  }
}
