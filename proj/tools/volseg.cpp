#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "volseg/complexity/ablation.hpp"
#include "volseg/model/checkpoint.hpp"
#include "volseg/train/recipe.hpp"

using namespace volseg;

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("short write to " + path);
}

std::optional<Triple> parse_size(const std::string& text) {
  if (text.empty()) return std::nullopt;
  KeyValueDoc doc;
  doc.set("input_size", text);
  auto v = doc.get_ints("input_size", {});
  if (v.size() == 1) v = {v[0], v[0], v[0]};
  if (v.size() != 3) throw ConfigError("--input-size expects H,W,D or a single extent");
  return Triple{v[0], v[1], v[2]};
}

std::string format_percent(double v) { return format_fixed(v, 2) + "%"; }

// complexity ------------------------------------------------------------------

struct ComplexityArgs {
  std::string config = "transbtsv2";
  std::string compare;
  std::string format = "table";
  std::string convention = "mac";
  std::string input_size;
  std::string output;
  bool aux = false;
  bool rows = false;
};

ComplexityReport report_for(const std::string& spec, const ComplexityArgs& a) {
  auto cfg = load_run_config(spec).model;
  if (auto s = parse_size(a.input_size)) cfg.input_size = *s;
  Model<float> model(cfg, 0);
  return count_flops(model, model.input_shape(), parse_convention(a.convention), a.aux);
}

int cmd_complexity(const ComplexityArgs& a) {
  const auto report = report_for(a.config, a);
  std::optional<ComplexityReport> other;
  std::optional<Reduction> red;
  if (!a.compare.empty()) {
    other = report_for(a.compare, a);
    red = compare(*other, report);
  }
  std::string text;
  if (a.format == "table") {
    text = report_table(report, a.rows);
    if (red) {
      text += "compare against " + other->model + ": params " +
              std::to_string(other->total_params()) + ", flops " +
              std::to_string(other->total_flops()) + "\n";
      text += "params reduction  " + format_percent(red->params_percent) + "\n";
      text += "flops reduction   " + format_percent(red->flops_percent) + "\n";
    }
  } else if (a.format == "csv") {
    text = report_csv(report);
    if (red) {
      text += "COMPARE," + other->model + ",," + format_fixed(red->params_percent, 4) + ",,,"
              + format_fixed(red->flops_percent, 4) + ",\n";
    }
  } else {
    nlohmann::ordered_json j = report_json(report);
    if (red) {
      j["compare"] = {{"reference", other->model},
                      {"reference_params", other->total_params()},
                      {"reference_flops", other->total_flops()},
                      {"params_reduction_percent", red->params_percent},
                      {"flops_reduction_percent", red->flops_percent}};
    }
    text = j.dump(2) + "\n";
  }
  std::cout << text;
  if (!a.output.empty()) write_text(a.output, text);
  return 0;
}

// ablation-table ------------------------------------------------------------

struct AblationArgs {
  std::string format = "table";
  std::string convention = "mac";
  std::string input_size = "128";
  std::string output;
};

int cmd_ablation(const AblationArgs& a) {
  const auto rows = ablation_ladder(*parse_size(a.input_size), parse_convention(a.convention));
  std::string text;
  if (a.format == "table") {
    text = ablation_table(rows);
    const auto full = ModelConfig::ablation(AblationVariant::full);
    const auto qk = qk_expand_param_delta(full);
    const bool exact = rows.back().delta_params == static_cast<std::int64_t>(qk);
    text += "QK expansion closed form 2*d*(d_m-d) = " + std::to_string(qk) +
            (exact ? " (matches the full-row delta)\n" : " (DOES NOT match the full-row delta)\n");
  } else if (a.format == "csv") {
    text = ablation_csv(rows);
  } else {
    text = ablation_json(rows).dump(2) + "\n";
  }
  std::cout << text;
  if (!a.output.empty()) write_text(a.output, text);
  return 0;
}

// gradcheck -----------------------------------------------------------------

struct GradcheckArgs {
  std::string scope = "primitives";
  double tol = 1e-4;
  double step = 1e-6;
  std::string only;
  std::string fault;
  std::uint64_t seed = 0x5eed;
  Index probes = 0;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  const auto scope = parse_gradcheck_scope(a.scope);
  GradCheckOptions opts;
  opts.tolerance = a.tol;
  opts.step = a.step;
  opts.seed = a.seed;
  opts.max_probes = a.probes;
  std::optional<GradientFaultScope> fault;
  if (!a.fault.empty()) fault.emplace(a.fault);
  const auto t0 = std::chrono::steady_clock::now();
  const auto units = run_gradcheck_suite(scope, opts, a.only);
  if (units.empty()) throw ConfigError("no gradcheck unit named '" + a.only + "'");
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  int failed = 0;
  std::cout << std::left << std::setw(36) << "unit" << std::right << std::setw(14)
            << "worst rel" << std::setw(8) << "status" << "\n";
  for (const auto& u : units) {
    std::ostringstream err;
    err << std::scientific << std::setprecision(3) << u.report.worst();
    const bool ok = u.report.passed();
    failed += !ok;
    std::cout << std::left << std::setw(36) << u.name << std::right << std::setw(14) << err.str()
              << std::setw(8) << (ok ? "PASS" : "FAIL") << "\n";
  }
  std::cout << units.size() - failed << "/" << units.size() << " units passed at tol " << a.tol
            << " (" << format_fixed(secs, 1) << " s)\n";
  if (failed) {
    std::cerr << "gradcheck: " << failed << " unit(s) failed:";
    for (const auto& u : units) {
      if (u.report.passed()) continue;
      std::cerr << " " << u.name;
      for (const auto& e : u.report.entries) {
        if (!e.passed) std::cerr << "[" << e.name << "]";
      }
    }
    std::cerr << "\n";
    return 1;
  }
  return 0;
}

// train / eval ----------------------------------------------------------------

struct TrainArgs {
  std::string config = "overfit";
  std::optional<std::uint64_t> seed;
  std::string precision;
  std::string checkpoint = "model.ckpt";
  std::string log = "metrics.jsonl";
};

std::string metrics_table(const MetricsRecord& rec) {
  std::ostringstream o;
  o << std::left << std::setw(8) << "class" << std::right << std::setw(10) << "dice"
    << std::setw(10) << "hd95" << std::setw(10) << "[0,.1)" << std::setw(10) << "[.1,.5)"
    << std::setw(10) << "[.5,.9)" << std::setw(10) << "[.9,1]" << "\n";
  for (std::size_t c = 0; c < rec.dice.size(); ++c) {
    const auto p = rec.confidence[c].proportions();
    o << std::left << std::setw(8) << c + 1 << std::right << std::setw(10)
      << format_fixed(rec.dice[c], 4) << std::setw(10)
      << (rec.hd95[c] ? format_fixed(*rec.hd95[c], 3) : std::string("n/a"));
    for (double x : p) o << std::setw(10) << format_fixed(x, 4);
    o << "\n";
  }
  o << "mean dice " << format_fixed(rec.mean_dice(), 4) << "  loss " << format_fixed(rec.loss, 6)
    << "\n";
  return o.str();
}

template <typename T>
int run_train(const RunConfig& run, const TrainArgs& a) {
  auto data = make_training_set<T>(run.model, run.train);
  Model<T> model(run.model, run.train.seed);
  std::ofstream log(a.log);
  if (!log) throw IoError("cannot write " + a.log);
  std::cerr << "training " << run.model.name << " (" << model.params().count()
            << " params) for " << run.train.total_steps() << " steps on " << data.size()
            << " samples, " << run.train.precision << "\n";
  const auto result = train(model, data, run.train, &log);
  const std::string bytes = checkpoint_bytes(model);
  write_text(a.checkpoint, bytes);
  std::cout << metrics_table(result.epochs.back());
  std::cout << "checkpoint " << a.checkpoint << " digest "
            << hex_digest(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size())
            << "\n";
  if (result.halted) {
    std::cerr << "training halted: " << result.halt_reason
              << "; checkpoint holds the last parameters with a finite loss\n";
    return 1;
  }
  return 0;
}

int cmd_train(const TrainArgs& a) {
  auto run = load_run_config(a.config);
  if (a.seed) run.train.seed = *a.seed;
  if (!a.precision.empty()) run.train.precision = a.precision;
  run.train.validate();
  return run.train.precision == "f64" ? run_train<double>(run, a) : run_train<float>(run, a);
}

struct EvalArgs {
  std::string checkpoint;
  std::string config;
  std::string precision = "f32";
  std::string format = "table";
  std::optional<std::uint64_t> data_seed;
};

template <typename T>
int run_eval(const EvalArgs& a) {
  const auto data_ckpt = read_checkpoint(a.checkpoint);
  RunConfig run;
  if (a.config.empty()) {
    run.model = checkpoint_config(data_ckpt);
  } else {
    run = load_run_config(a.config);
  }
  if (a.data_seed) run.train.data_seed = *a.data_seed;
  Model<T> model(run.model, data_ckpt.seed);
  load_checkpoint(model, data_ckpt, a.checkpoint);
  const auto data = make_training_set<T>(run.model, run.train);
  const auto rec = evaluate(model, data);
  if (a.format == "json") {
    std::cout << rec.to_json().dump(2) << "\n";
  } else {
    std::cout << metrics_table(rec);
  }
  return 0;
}

int cmd_eval(const EvalArgs& a) {
  if (a.precision == "f64") return run_eval<double>(a);
  return run_eval<float>(a);
}

// init-config -----------------------------------------------------------------

int cmd_init_config(const std::string& name, const std::string& output, bool force) {
  const auto run = preset(name);
  const std::string text = "# volseg run config (preset " + name + ")\n" + run.to_doc().str();
  if (output.empty()) {
    std::cout << text;
    return 0;
  }
  if (std::filesystem::exists(output) && !force) {
    std::cerr << "init-config: " << output << " exists; pass --force to overwrite\n";
    return 1;
  }
  write_text(output, text);
  std::cerr << "wrote " << output << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"volseg: volumetric segmentation model toolkit"};
  app.require_subcommand(1);

  ComplexityArgs ca;
  auto* complexity = app.add_subcommand("complexity", "parameter and FLOP report");
  complexity->add_option("--config", ca.config, "config file or preset name");
  complexity->add_option("--compare", ca.compare, "reference config or preset; prints reductions");
  complexity->add_option("--format", ca.format)->check(CLI::IsMember({"table", "csv", "json"}));
  complexity->add_option("--convention", ca.convention)->check(CLI::IsMember({"mac", "flops2"}));
  complexity->add_option("--input-size", ca.input_size, "H,W,D (overrides the config)");
  complexity->add_option("--output", ca.output, "also write the report here");
  complexity->add_flag("--aux", ca.aux, "count element-wise work too");
  complexity->add_flag("--rows", ca.rows, "list every layer in the table format");

  AblationArgs aa;
  auto* ablation = app.add_subcommand("ablation-table", "params and FLOPs down the ablation ladder");
  ablation->add_option("--format", aa.format)->check(CLI::IsMember({"table", "csv", "json"}));
  ablation->add_option("--convention", aa.convention)->check(CLI::IsMember({"mac", "flops2"}));
  ablation->add_option("--input-size", aa.input_size, "H,W,D");
  ablation->add_option("--output", aa.output);

  GradcheckArgs ga;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suites (64-bit)");
  gradcheck->add_option("scope", ga.scope, "primitives, blocks or end2end")
      ->check(CLI::IsMember({"primitives", "blocks", "end2end"}));
  gradcheck->add_option("--tol", ga.tol);
  gradcheck->add_option("--step", ga.step);
  gradcheck->add_option("--only", ga.only, "run a single unit");
  gradcheck->add_option("--inject-fault", ga.fault, "perturb the backward pass of this op");
  gradcheck->add_option("--seed", ga.seed);
  gradcheck->add_option("--probes", ga.probes, "elements probed per tensor (0 = suite default)");

  TrainArgs ta;
  auto* trainc = app.add_subcommand("train", "train on synthetic volumes");
  trainc->add_option("--config", ta.config, "config file or preset name");
  trainc->add_option("--seed", ta.seed, "overrides train.seed");
  trainc->add_option("--precision", ta.precision)->check(CLI::IsMember({"f32", "f64"}));
  trainc->add_option("--checkpoint", ta.checkpoint);
  trainc->add_option("--log", ta.log, "per-epoch JSON lines");

  EvalArgs ea;
  auto* evalc = app.add_subcommand("eval", "evaluate a checkpoint on synthetic volumes");
  evalc->add_option("--checkpoint", ea.checkpoint)->required();
  evalc->add_option("--config", ea.config, "model and data settings (default: from checkpoint)");
  evalc->add_option("--precision", ea.precision)->check(CLI::IsMember({"f32", "f64"}));
  evalc->add_option("--format", ea.format)->check(CLI::IsMember({"table", "json"}));
  evalc->add_option("--seed", ea.data_seed, "data seed");

  std::string preset_name = "transbtsv2", init_output;
  bool force = false;
  auto* init = app.add_subcommand("init-config", "write a config document for a preset");
  init->add_option("--preset", preset_name);
  init->add_option("--output", init_output);
  init->add_flag("--force", force);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, std::cout, std::cerr) == 0 ? 0 : 2;
  }

  try {
    if (*complexity) return cmd_complexity(ca);
    if (*ablation) return cmd_ablation(aa);
    if (*gradcheck) return cmd_gradcheck(ga);
    if (*trainc) return cmd_train(ta);
    if (*evalc) return cmd_eval(ea);
    if (*init) return cmd_init_config(preset_name, init_output, force);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
