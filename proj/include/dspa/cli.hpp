#pragma once

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dspa/audit.hpp"
#include "dspa/density.hpp"
#include "dspa/diff_map.hpp"
#include "dspa/error.hpp"
#include "dspa/fixtures.hpp"
#include "dspa/flops.hpp"
#include "dspa/parallel.hpp"
#include "dspa/sae.hpp"
#include "dspa/steering.hpp"
#include "dspa/theory.hpp"
#include "dspa/trace.hpp"

namespace dspa::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitTheoryFailed = 3;
inline constexpr int kSchemaVersion = 1;

namespace detail {

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kMalformedMetadata, path + ": " + e.what());
  }
}

/// Fills options not given on the command line from a JSON object whose keys
/// are long option names (dashes or underscores). Unknown keys are rejected.
inline void apply_config(CLI::App& sub, const std::string& path) {
  const auto doc = read_json_file(path);
  require(doc.is_object(), ErrorCode::kMalformedMetadata, path + ": config must be a JSON object");
  for (const auto& [raw_key, value] : doc.items()) {
    std::string key = raw_key;
    std::replace(key.begin(), key.end(), '_', '-');
    CLI::Option* opt = key == "config" ? nullptr : sub.get_option_no_throw("--" + key);
    if (opt == nullptr) fail(ErrorCode::kInvalidArgument, path + ": unknown config key \"" + raw_key + "\"");
    if (opt->count() > 0) continue;  // the command line wins
    auto scalar = [](const nlohmann::json& v) {
      if (v.is_string()) return v.get<std::string>();
      if (v.is_boolean()) return std::string(v.get<bool>() ? "true" : "false");
      return v.dump();
    };
    if (value.is_array())
      for (const auto& v : value) opt->add_result(scalar(v));
    else
      opt->add_result(scalar(value));
    opt->run_callback();
  }
}

inline void need(const CLI::App& sub, const std::string& name) {
  if (sub.get_option(name)->count() == 0)
    fail(ErrorCode::kInvalidArgument, sub.get_name() + ": " + name + " is required");
}

inline unsigned resolve_threads(unsigned requested) { return requested > 0 ? requested : default_thread_count(); }

inline nlohmann::json envelope(const std::string& command, nlohmann::json config) {
  return {{"schema_version", kSchemaVersion}, {"command", command}, {"config", std::move(config)}};
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path);
  out << text;
  if (!out) fail(ErrorCode::kIo, "failed writing " + path);
}

/// Gate support counts bucketed by powers of two: [0], [1], [2, 3], [4, 7], ...
inline nlohmann::json support_histogram(const DiffMap& map) {
  std::vector<std::uint64_t> buckets;
  for (auto s : map.gate_support) {
    std::size_t b = 0;
    while ((std::uint64_t{1} << b) <= s) ++b;  // s = 0 -> 0, 1 -> 1, 2..3 -> 2, ...
    if (buckets.size() <= b) buckets.resize(b + 1, 0);
    ++buckets[b];
  }
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t b = 0; b < buckets.size(); ++b) {
    const std::uint64_t lo = b == 0 ? 0 : std::uint64_t{1} << (b - 1);
    const std::uint64_t hi = b == 0 ? 0 : (std::uint64_t{1} << b) - 1;
    out.push_back({{"min", lo}, {"max", hi}, {"rows", buckets[b]}});
  }
  return out;
}

inline std::vector<SteeringPlan> read_plans(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path);
  std::vector<SteeringPlan> plans;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kMalformedMetadata, path + ": " + e.what());
    }
    if (j.is_array())
      for (const auto& p : j) plans.push_back(plan_from_json(p));
    else
      plans.push_back(plan_from_json(j));
  }
  return plans;
}

}  // namespace detail

// ---------------------------------------------------------------------------

struct BuildMapArgs {
  std::string manifest, input_sae, output_sae, out, config;
  double percentile = 75.0;
  std::uint64_t support_floor = 5;
  unsigned threads = 0;
};

inline int cmd_build_map(const BuildMapArgs& a, std::ostream& out) {
  const unsigned threads = detail::resolve_threads(a.threads);
  const auto records = read_manifest(a.manifest);
  require(!records.empty(), ErrorCode::kEmptyInput, "manifest " + a.manifest + " lists no triples");
  BuildOptions options;
  options.percentile = a.percentile;
  options.threads = threads;
  options.support_floor = a.support_floor;
  const auto map = build_map(ManifestTriples(records), load_sae(a.input_sae), load_sae(a.output_sae), options);
  write_map(map, a.out);

  auto report = detail::envelope("build-map", {{"manifest", a.manifest},
                                               {"input_sae", a.input_sae},
                                               {"output_sae", a.output_sae},
                                               {"percentile", a.percentile},
                                               {"support_floor", a.support_floor},
                                               {"threads", threads},
                                               {"out", a.out}});
  report["N"] = map.n;
  report["d_sae"] = map.d_sae();
  report["nnz"] = map.a.nnz();
  report["low_support_rows"] = map.low_support_rows().size();
  report["support_histogram"] = detail::support_histogram(map);
  out << report.dump(2) << '\n';
  return kExitOk;
}

struct SparsifyArgs {
  std::string map, out, config;
  std::size_t k_diff = 16;
};

inline int cmd_sparsify(const SparsifyArgs& a, std::ostream& out) {
  const auto map = read_map(a.map);
  const auto sparse = sparsify(map, a.k_diff);
  write_map(sparse, a.out);
  auto report = detail::envelope("sparsify", {{"map", a.map}, {"k_diff", a.k_diff}, {"out", a.out}});
  report["nnz_before"] = map.a.nnz();
  report["nnz_after"] = sparse.a.nnz();
  report["tau"] = sparse.sparsify_tau;
  out << report.dump(2) << '\n';
  return kExitOk;
}

struct SteerArgs {
  std::string map, input_sae, output_sae, prompt_trace, stream, out, report, plan_out, config;
  std::size_t k_prompt = 32;
  std::size_t k_diff = 16;
  float alpha = 0.2f;
  std::string mode = "ablate";
  unsigned threads = 0;
};

inline int cmd_steer(const SteerArgs& a, std::ostream& out) {
  const unsigned threads = detail::resolve_threads(a.threads);
  const auto mode = parse_mode(a.mode);
  const auto map = read_map(a.map);
  const auto input_sae = load_sae(a.input_sae);
  const auto output_sae = load_sae(a.output_sae);
  const auto prompt = read_trace(a.prompt_trace);
  const auto stream = read_trace(a.stream);
  if (!map.input_layer_tag.empty())
    require(prompt.layer_tag == map.input_layer_tag, ErrorCode::kInvalidTrace,
            "prompt trace layer \"" + prompt.layer_tag + "\" is not the map's input layer \"" + map.input_layer_tag +
                "\"");
  if (!map.output_layer_tag.empty())
    require(stream.layer_tag == map.output_layer_tag, ErrorCode::kInvalidTrace,
            "stream layer \"" + stream.layer_tag + "\" is not the map's output layer \"" + map.output_layer_tag + "\"");
  require(prompt.prompt_len > 0, ErrorCode::kInvalidTrace, "prompt trace has an empty prompt region");

  const auto plan =
      make_plan(map, density(input_sae, prompt, Segment::kPrompt), a.k_prompt, a.k_diff, a.alpha, mode);
  const auto steered = steer_stream(plan, output_sae, stream.hidden, threads);
  write_trace({stream.layer_tag, stream.prompt_len, steered.hidden}, a.out);

  std::size_t edited_tokens = 0, max_changed = 0;
  std::ostringstream lines;
  for (const auto& r : steered.reports) {
    std::size_t changed = 0;
    for (const auto& e : r.edits) changed += e.after != e.before ? 1 : 0;
    edited_tokens += changed > 0 ? 1 : 0;
    max_changed = std::max(max_changed, changed);
    lines << to_json(r).dump() << '\n';
  }
  if (!a.report.empty()) detail::write_text(a.report, lines.str());
  if (!a.plan_out.empty()) detail::write_text(a.plan_out, to_json(plan).dump() + "\n");

  auto report = detail::envelope("steer", {{"map", a.map},
                                           {"input_sae", a.input_sae},
                                           {"output_sae", a.output_sae},
                                           {"prompt_trace", a.prompt_trace},
                                           {"stream", a.stream},
                                           {"k_prompt", a.k_prompt},
                                           {"k_diff", a.k_diff},
                                           {"alpha", a.alpha},
                                           {"mode", to_string(mode)},
                                           {"threads", threads},
                                           {"out", a.out},
                                           {"report", a.report},
                                           {"plan", a.plan_out}});
  report["prompt_features"] = plan.prompt_features;
  report["augment"] = plan.augment;
  report["ablate"] = plan.ablate;
  report["tokens"] = steered.reports.size();
  report["edited_tokens"] = edited_tokens;
  report["max_latents_changed"] = max_changed;
  out << report.dump(2) << '\n';
  return kExitOk;
}

struct AuditArgs {
  std::string map, compare, plans, config;
  std::size_t set_size = 50;
};

inline int cmd_audit(const AuditArgs& a, std::ostream& out) {
  const auto map = read_map(a.map);
  const auto sets = audit::rank_columns(map, a.set_size);
  auto report = detail::envelope("audit",
                                 {{"map", a.map}, {"set_size", a.set_size}, {"compare", a.compare}, {"plans", a.plans}});
  nlohmann::json warnings = nlohmann::json::array();
  if (sets.from_sparsified)
    warnings.push_back("map is sparsified; column sums cover surviving entries only");
  if (sets.degenerate) warnings.push_back("column sums do not separate augment and ablate sets");
  report["sets"] = audit::to_json(sets);
  if (!a.compare.empty()) {
    const auto other = read_map(a.compare);
    require(other.d_sae() == map.d_sae(), ErrorCode::kDimensionMismatch, "compared maps have different widths");
    const auto other_sets = audit::rank_columns(other, a.set_size);
    const auto overlap = audit::set_overlap(sets, other_sets);
    report["compare_sets"] = audit::to_json(other_sets);
    report["overlap"] = {{"augment", overlap.augment}, {"ablate", overlap.ablate}};
  }
  if (!a.plans.empty()) {
    const auto plans = detail::read_plans(a.plans);
    report["coverage"] = audit::to_json(audit::coverage_check(plans, sets));
  }
  report["warnings"] = warnings;
  out << report.dump(2) << '\n';
  return kExitOk;
}

struct EvidenceArgs {
  std::string map, output_sae, out, config;
  std::vector<std::string> traces;
  std::size_t feature = 0;
  std::size_t top_n = 20;
};

inline int cmd_evidence(const EvidenceArgs& a, std::ostream& out) {
  const auto map = read_map(a.map);
  const auto sae = load_sae(a.output_sae);
  std::vector<ActivationTrace> traces;
  for (const auto& p : a.traces) traces.push_back(read_trace(p));
  const auto records = audit::export_evidence(map, sae, traces, a.feature, a.top_n);

  std::ostringstream lines;
  lines << detail::envelope("evidence", {{"map", a.map},
                                         {"output_sae", a.output_sae},
                                         {"traces", a.traces},
                                         {"feature", a.feature},
                                         {"top_n", a.top_n}})
               .dump()
        << '\n';
  for (const auto& r : records)
    lines << nlohmann::json{{"feature", a.feature},
                            {"trace", a.traces[r.trace]},
                            {"trace_index", r.trace},
                            {"token", r.token},
                            {"activation", r.activation}}
                 .dump()
          << '\n';
  if (a.out.empty())
    out << lines.str();
  else
    detail::write_text(a.out, lines.str());
  return kExitOk;
}

struct TheoryArgs {
  std::string world, check = "all", config;
  std::size_t n = 20000;
  std::size_t trials = 500;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::size_t gate = 0;
  std::size_t n_i = 250;
  double delta = 0.05;
  std::size_t k = 4;
  double max_error = 0.05;
  double min_coverage = -1.0;
  unsigned threads = 0;
};

inline int cmd_theory(const TheoryArgs& a, std::ostream& out) {
  static const std::vector<std::string> kChecks = {"factorization", "coactivation", "concentration", "topk"};
  require(a.check == "all" || std::find(kChecks.begin(), kChecks.end(), a.check) != kChecks.end(),
          ErrorCode::kInvalidArgument,
          "unknown check \"" + a.check + "\" (expected factorization, coactivation, concentration, topk or all)");
  const unsigned threads = detail::resolve_threads(a.threads);
  const auto world = theory::world_from_json(detail::read_json_file(a.world));
  const std::uint64_t seed = a.seed_given ? a.seed : world.seed;
  auto wants = [&](const std::string& c) { return a.check == "all" || a.check == c; };

  auto report = detail::envelope("theory", {{"world", a.world},
                                            {"check", a.check},
                                            {"n", a.n},
                                            {"trials", a.trials},
                                            {"seed", seed},
                                            {"gate", a.gate},
                                            {"n_i", a.n_i},
                                            {"delta", a.delta},
                                            {"k", a.k},
                                            {"max_error", a.max_error},
                                            {"min_coverage", a.min_coverage},
                                            {"threads", threads}});
  report["world_summary"] = theory::world_summary(world);
  nlohmann::json checks = nlohmann::json::object();
  bool all_passed = true;

  if (wants("factorization")) {
    const auto r = theory::check_factorization(world, a.n, seed);
    const bool noiseless = world.noise.scale == 0.0;
    const bool passed = r.error <= a.max_error && (!noiseless || r.error_empirical_gram <= 1e-5);
    checks["factorization"] = {{"error", r.error},
                               {"error_empirical_gram", r.error_empirical_gram},
                               {"bound", a.max_error},
                               {"noiseless", noiseless},
                               {"passed", passed}};
    all_passed = all_passed && passed;
  }
  if (wants("coactivation")) {
    const auto r = theory::check_coactivation_bound(world, a.gate, a.n, seed);
    checks["coactivation"] = {{"measured", r.measured}, {"population", r.population}, {"bound", r.bound},
                              {"samples", r.samples},   {"passed", r.holds}};
    all_passed = all_passed && r.holds;
  }
  if (wants("concentration")) {
    theory::ConcentrationOptions opts;
    opts.threads = threads;
    opts.min_coverage = a.min_coverage;
    const auto r = theory::check_concentration(world, a.gate, a.n_i, a.trials, a.delta, seed, opts);
    checks["concentration"] = {{"bound", r.bound},
                               {"coverage", r.coverage},
                               {"min_coverage", r.min_coverage},
                               {"worst_deviation", r.worst_deviation},
                               {"exact_target", r.exact_target},
                               {"trials", r.trials},
                               {"n_i", r.n_i},
                               {"passed", r.passed}};
    all_passed = all_passed && r.passed;
  }
  if (wants("topk")) {
    if (world.d > 20) {
      require(a.check == "all", ErrorCode::kInvalidArgument, "top-k enumeration needs d <= 20");
      checks["topk"] = {{"skipped", "d > 20"}};
    } else {
      // Utility weights beta(x) = B g(x) over prompts drawn from the world.
      const std::size_t k = std::min(a.k, world.d);
      std::size_t agree = 0;
      nlohmann::json witness;
      for (std::size_t t = 0; t < a.trials; ++t) {
        const auto g = theory::sample_triple(world, seed, t).g;
        Eigen::VectorXd gv(static_cast<Eigen::Index>(world.d));
        for (std::size_t i = 0; i < world.d; ++i) gv(static_cast<Eigen::Index>(i)) = g[i];
        const Eigen::VectorXd beta = world.b * gv;
        std::vector<double> b(beta.data(), beta.data() + beta.size());
        const auto r = theory::check_topk_optimality(b, a.delta, k);
        if (r.agrees)
          ++agree;
        else if (witness.is_null())
          witness = {{"trial", t}, {"beta", b}, {"best", r.best}, {"bottom_k", r.bottom_k}};
      }
      const bool passed = agree == a.trials;
      checks["topk"] = {{"agree", agree}, {"trials", a.trials}, {"k", k}, {"witness", witness}, {"passed", passed}};
      all_passed = all_passed && passed;
    }
  }
  report["checks"] = checks;
  report["passed"] = all_passed;
  out << report.dump(2) << '\n';
  return all_passed ? kExitOk : kExitTheoryFailed;
}

struct FlopsArgs {
  std::string config, format = "json";
  std::vector<std::string> sweep;
  // Values given on the command line; applied over the config file.
  std::vector<std::pair<std::string, double>> overrides;
};

inline flops::SweepGrid parse_sweep(const std::vector<std::string>& specs) {
  flops::SweepGrid grid;
  for (const auto& s : specs) {
    const auto eq = s.find('=');
    require(eq != std::string::npos && eq > 0, ErrorCode::kInvalidArgument,
            "sweep \"" + s + "\" must look like name=v1,v2,...");
    std::vector<double> values;
    std::stringstream rest(s.substr(eq + 1));
    std::string item;
    while (std::getline(rest, item, ',')) {
      try {
        std::size_t used = 0;
        values.push_back(std::stod(item, &used));
        require(used == item.size(), ErrorCode::kInvalidArgument, "bad sweep value \"" + item + "\"");
      } catch (const std::logic_error&) {
        fail(ErrorCode::kInvalidArgument, "bad sweep value \"" + item + "\"");
      }
    }
    require(!values.empty(), ErrorCode::kInvalidArgument, "sweep \"" + s + "\" lists no values");
    grid[s.substr(0, eq)] = std::move(values);
  }
  return grid;
}

inline std::string flops_table(const nlohmann::json& r) {
  std::ostringstream t;
  auto row = [&](const std::string& name, double v) {
    t << std::left << std::setw(20) << name << std::right << std::setw(14) << std::setprecision(4) << std::scientific
      << v << '\n';
  };
  row("dspa", r["dspa"]["total"].get<double>());
  row("rahf.step1", r["rahf"]["step1"].get<double>());
  row("rahf.step2", r["rahf"]["step2"].get<double>());
  row("rahf.total", r["rahf"]["total"].get<double>());
  t << std::left << std::setw(20) << "ratio" << std::right << std::setw(14) << std::fixed << std::setprecision(4)
    << r["ratio"].get<double>() << '\n';
  for (const auto& [name, rows] : r["sweep"].items()) {
    t << "\nsweep " << name << '\n';
    t << std::setw(14) << "value" << std::setw(14) << "dspa" << std::setw(14) << "rahf" << std::setw(10) << "ratio"
      << '\n';
    for (const auto& x : rows)
      t << std::setw(14) << std::setprecision(4) << std::defaultfloat << x["value"].get<double>() << std::setw(14)
        << std::scientific << x["dspa"].get<double>() << std::setw(14) << x["rahf_total"].get<double>()
        << std::setw(10) << std::fixed << x["ratio"].get<double>() << '\n';
  }
  return t.str();
}

inline int cmd_flops(const FlopsArgs& a, std::ostream& out) {
  require(a.format == "json" || a.format == "text", ErrorCode::kInvalidArgument, "format must be json or text");
  flops::CostConfig c;
  flops::SweepGrid grid;
  if (!a.config.empty()) {
    const auto doc = detail::read_json_file(a.config);
    require(doc.is_object(), ErrorCode::kMalformedMetadata, a.config + ": cost config must be a JSON object");
    c = flops::config_from_json(doc);
    if (doc.contains("sweep")) {
      try {
        grid = doc["sweep"].get<flops::SweepGrid>();
      } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::kMalformedMetadata, a.config + ": sweep: " + e.what());
      }
    }
  }
  for (const auto& [name, value] : a.overrides) flops::set_field(c, name, value);
  for (auto& [name, values] : parse_sweep(a.sweep)) grid[name] = std::move(values);
  flops::validate(c);

  auto report = flops::cost_report(c, grid);
  report["command"] = "flops";
  if (a.format == "json")
    out << report.dump(2) << '\n';
  else
    out << flops_table(report);
  return kExitOk;
}

struct FixtureArgs {
  std::string out, kind = "toy";
  std::size_t d = 8, triples = 16, prompt_len = 6, response_len = 5;
  std::uint64_t seed = 1;
};

inline int cmd_fixture(const FixtureArgs& a, std::ostream& out) {
  require(a.kind == "toy" || a.kind == "corpus", ErrorCode::kInvalidArgument, "kind must be toy or corpus");
  if (a.kind == "toy") {
    fixtures::write_toy(a.out);
  } else {
    theory::CorpusOptions o;
    o.d = a.d;
    o.triples = a.triples;
    o.prompt_len = a.prompt_len;
    o.response_len = a.response_len;
    o.seed = a.seed;
    theory::write_corpus(theory::synthetic_corpus(o), a.out);
    const auto sae = SaeParams::identity(a.d);
    save_sae(sae, std::filesystem::path(a.out) / "input_sae.dspa");
    save_sae(sae, std::filesystem::path(a.out) / "output_sae.dspa");
  }
  out << detail::envelope("fixture", {{"out", a.out},
                                      {"kind", a.kind},
                                      {"d", a.d},
                                      {"triples", a.triples},
                                      {"prompt_len", a.prompt_len},
                                      {"response_len", a.response_len},
                                      {"seed", a.seed}})
             .dump(2)
      << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

inline int exit_code_for(ErrorCode code) { return code == ErrorCode::kInternal ? kExitInternal : kExitValidation; }

/// Parses and runs one invocation. Output goes to `out`, diagnostics to `err`.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Density-conditioned steering of sparse-autoencoder features"};
  app.name("dspa");
  app.require_subcommand(1);
  app.allow_extras(false);

  BuildMapArgs bm;
  auto* build = app.add_subcommand("build-map", "Build the conditional-difference map from a triple manifest");
  build->add_option("--manifest", bm.manifest, "Triple manifest (JSON)");
  build->add_option("--input-sae", bm.input_sae, "SAE container for the input layer");
  build->add_option("--output-sae", bm.output_sae, "SAE container for the output layer");
  build->add_option("--percentile", bm.percentile, "Gate percentile")->capture_default_str();
  build->add_option("--support-floor", bm.support_floor, "Rows gated fewer times are flagged")->capture_default_str();
  build->add_option("--threads", bm.threads, "Worker threads (0: DSPA_THREADS or all cores)");
  build->add_option("--out", bm.out, "Output map file");
  build->add_option("--config", bm.config, "JSON file with defaults for these options");

  SparsifyArgs sp;
  auto* sparse = app.add_subcommand("sparsify", "Zero entries below the per-row conservative threshold");
  sparse->add_option("--map", sp.map, "Input map file");
  sparse->add_option("--k-diff", sp.k_diff, "Row extremes kept")->capture_default_str();
  sparse->add_option("--out", sp.out, "Output map file");
  sparse->add_option("--config", sp.config, "JSON file with defaults for these options");

  SteerArgs st;
  auto* steer = app.add_subcommand("steer", "Edit a hidden-state stream with a per-prompt plan");
  steer->add_option("--map", st.map, "Map file");
  steer->add_option("--input-sae", st.input_sae, "SAE for the prompt trace");
  steer->add_option("--output-sae", st.output_sae, "SAE for the edited stream");
  steer->add_option("--prompt-trace", st.prompt_trace, "Input-layer prompt trace");
  steer->add_option("--stream", st.stream, "Output-layer hidden states to edit");
  steer->add_option("--k-prompt", st.k_prompt, "Densest prompt features used")->capture_default_str();
  steer->add_option("--k-diff", st.k_diff, "Features per edit set")->capture_default_str();
  steer->add_option("--alpha", st.alpha, "Edit step as a fraction of the token maximum")->capture_default_str();
  steer->add_option("--mode", st.mode, "ablate, augment or both")->capture_default_str();
  steer->add_option("--threads", st.threads, "Worker threads (0: DSPA_THREADS or all cores)");
  steer->add_option("--out", st.out, "Edited stream (trace file)");
  steer->add_option("--report", st.report, "Per-token JSON-lines report");
  steer->add_option("--plan", st.plan_out, "Write the plan as JSON");
  steer->add_option("--config", st.config, "JSON file with defaults for these options");

  AuditArgs au;
  auto* aud = app.add_subcommand("audit", "Rank map columns into global augment and ablate sets");
  aud->add_option("--map", au.map, "Map file");
  aud->add_option("--set-size", au.set_size, "Size of each set")->capture_default_str();
  aud->add_option("--compare", au.compare, "Second map for overlap counts");
  aud->add_option("--plans", au.plans, "Plans (JSON-lines) to check against the sets");
  aud->add_option("--config", au.config, "JSON file with defaults for these options");

  EvidenceArgs ev;
  auto* evid = app.add_subcommand("evidence", "Export top activations of one output feature as JSON-lines");
  evid->add_option("--map", ev.map, "Map file");
  evid->add_option("--output-sae", ev.output_sae, "SAE for the output layer");
  evid->add_option("--traces", ev.traces, "Output-layer trace files")->expected(1, -1);
  evid->add_option("--feature", ev.feature, "Output feature index");
  evid->add_option("--top-n", ev.top_n, "Records kept")->capture_default_str();
  evid->add_option("--out", ev.out, "Write here instead of stdout");
  evid->add_option("--config", ev.config, "JSON file with defaults for these options");

  TheoryArgs th;
  auto* theo = app.add_subcommand("theory", "Run synthetic-oracle checks on a world spec");
  theo->add_option("--world", th.world, "World spec (JSON)");
  theo->add_option("--check", th.check, "factorization, coactivation, concentration, topk or all")
      ->capture_default_str();
  theo->add_option("--n", th.n, "Samples for factorization and coactivation")->capture_default_str();
  theo->add_option("--trials", th.trials, "Trials for concentration and top-k")->capture_default_str();
  theo->add_option("--seed", th.seed, "Master seed (default: the world's seed)");
  theo->add_option("--gate", th.gate, "Gate index for row checks")->capture_default_str();
  theo->add_option("--n-i", th.n_i, "Gated samples per concentration trial")->capture_default_str();
  theo->add_option("--delta", th.delta, "Failure probability / ablation shift")->capture_default_str();
  theo->add_option("--k", th.k, "Subset size for top-k")->capture_default_str();
  theo->add_option("--max-error", th.max_error, "Factorization error bound")->capture_default_str();
  theo->add_option("--min-coverage", th.min_coverage, "Coverage required (default 1 - delta - 3 sd)");
  theo->add_option("--threads", th.threads, "Worker threads (0: DSPA_THREADS or all cores)");
  theo->add_option("--config", th.config, "JSON file with defaults for these options");

  FlopsArgs fl;
  auto* flo = app.add_subcommand("flops", "Alignment-stage FLOP models and their ratio");
  flo->add_option("--config", fl.config, "Cost config JSON (keys P, p, c, r, L1, L2, B, steps_factor, N, sweep)");
  const std::vector<std::pair<std::string, std::string>> cost_flags = {
      {"--params", "P"},       {"--prompt-len", "p"}, {"--chosen-len", "c"},   {"--rejected-len", "r"},
      {"--step1-len", "L1"},   {"--step2-len", "L2"}, {"--step2-batch", "B"}, {"--steps-factor", "steps_factor"},
      {"--triples", "N"}};
  std::vector<double> cost_values(cost_flags.size(), 0.0);
  for (std::size_t f = 0; f < cost_flags.size(); ++f)
    flo->add_option(cost_flags[f].first, cost_values[f], "Overrides " + cost_flags[f].second);
  flo->add_option("--sweep", fl.sweep, "name=v1,v2,... (repeatable)");
  flo->add_option("--format", fl.format, "json or text")->capture_default_str();

  FixtureArgs fx;
  auto* fix = app.add_subcommand("fixture", "Write toy or synthetic fixtures (SAEs, traces, manifest)");
  fix->add_option("--out", fx.out, "Output directory")->required();
  fix->add_option("--kind", fx.kind, "toy or corpus")->capture_default_str();
  fix->add_option("--d", fx.d, "Corpus width")->capture_default_str();
  fix->add_option("--triples", fx.triples, "Corpus size")->capture_default_str();
  fix->add_option("--prompt-len", fx.prompt_len, "Corpus prompt length")->capture_default_str();
  fix->add_option("--response-len", fx.response_len, "Corpus response length")->capture_default_str();
  fix->add_option("--seed", fx.seed, "Corpus seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    auto configured = [](CLI::App& sub, const std::string& path) {
      if (!path.empty()) detail::apply_config(sub, path);
    };
    if (build->parsed()) {
      configured(*build, bm.config);
      for (const char* f : {"--manifest", "--input-sae", "--output-sae", "--out"}) detail::need(*build, f);
      return cmd_build_map(bm, out);
    }
    if (sparse->parsed()) {
      configured(*sparse, sp.config);
      for (const char* f : {"--map", "--out"}) detail::need(*sparse, f);
      return cmd_sparsify(sp, out);
    }
    if (steer->parsed()) {
      configured(*steer, st.config);
      for (const char* f : {"--map", "--input-sae", "--output-sae", "--prompt-trace", "--stream", "--out"})
        detail::need(*steer, f);
      return cmd_steer(st, out);
    }
    if (aud->parsed()) {
      configured(*aud, au.config);
      detail::need(*aud, "--map");
      return cmd_audit(au, out);
    }
    if (evid->parsed()) {
      configured(*evid, ev.config);
      for (const char* f : {"--map", "--output-sae", "--traces", "--feature"}) detail::need(*evid, f);
      return cmd_evidence(ev, out);
    }
    if (theo->parsed()) {
      configured(*theo, th.config);
      detail::need(*theo, "--world");
      th.seed_given = theo->get_option("--seed")->count() > 0;
      return cmd_theory(th, out);
    }
    if (flo->parsed()) {
      for (std::size_t f = 0; f < cost_flags.size(); ++f)
        if (flo->get_option(cost_flags[f].first)->count() > 0)
          fl.overrides.emplace_back(cost_flags[f].second, cost_values[f]);
      return cmd_flops(fl, out);
    }
    if (fix->parsed()) return cmd_fixture(fx, out);
  } catch (const Error& e) {
    err << "dspa: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const CLI::Error& e) {
    err << "dspa: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "dspa: internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  err << "dspa: no subcommand\n";
  return kExitValidation;
}

}  // namespace dspa::cli
