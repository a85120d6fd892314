#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dspa/error.hpp"

namespace dspa::flops {

/// Dense-transformer FLOP model: a forward token costs 2P, a training token
/// (forward + backward) 6P. Attention terms are ignored.
struct CostConfig {
  double params = 8e9;           // P
  double prompt_len = 1000;      // p
  double chosen_len = 1000;      // c
  double rejected_len = 1000;    // r
  double step1_len = 768;        // L1, effective length of the supervised stage
  double step2_len = 512;        // L2
  double step2_batch = 64;       // B, effective optimizer-step batch
  double steps_factor = 0.02;    // max_steps per triple in the second stage
  double triples = 1;            // N
  /// Measured numbers supplied by the user; echoed, never modeled.
  nlohmann::json wall_clock = nlohmann::json::object();
};

inline void validate(const CostConfig& c) {
  auto positive = [](double v, const char* name) {
    require(std::isfinite(v) && v > 0.0, ErrorCode::kInvalidArgument, std::string(name) + " must be positive");
  };
  positive(c.params, "P");
  positive(c.prompt_len, "p");
  positive(c.chosen_len, "c");
  positive(c.rejected_len, "r");
  positive(c.step1_len, "L1");
  positive(c.step2_len, "L2");
  positive(c.step2_batch, "B");
  require(std::isfinite(c.triples) && c.triples >= 0.0, ErrorCode::kInvalidArgument, "N must be >= 0");
  require(c.steps_factor > 0.0 && c.steps_factor <= 1.0, ErrorCode::kInvalidArgument,
          "steps_factor must lie in (0, 1]");
}

/// Three forward-only passes per triple: prompt, prompt + chosen,
/// prompt + rejected. 2 P N (3p + c + r).
inline double flops_dspa(const CostConfig& c) {
  validate(c);
  return 2.0 * c.params * c.triples * (3.0 * c.prompt_len + c.chosen_len + c.rejected_len);
}

struct RahfCost {
  double step1 = 0;
  double step2 = 0;
  double total = 0;
};

/// Step 1: 4N effective examples, two gradient-tracked passes each at
/// length L1, 48 P N L1. Step 2: three no-grad passes plus one tracked pass
/// per example (12P per token) over B L2 tokens for steps_factor N steps.
inline RahfCost flops_rahf(const CostConfig& c) {
  validate(c);
  RahfCost r;
  r.step1 = 48.0 * c.params * c.triples * c.step1_len;
  r.step2 = 12.0 * c.params * (c.step2_batch * c.step2_len) * (c.steps_factor * c.triples);
  r.total = r.step1 + r.step2;
  return r;
}

/// RAHF-to-DSPA ratio. Both models are linear in N, so N is set to 1.
inline double compute_ratio(CostConfig c) {
  c.triples = 1.0;
  return flops_rahf(c).total / flops_dspa(c);
}

inline nlohmann::json config_to_json(const CostConfig& c) {
  return {{"P", c.params},      {"p", c.prompt_len},   {"c", c.chosen_len},        {"r", c.rejected_len},
          {"L1", c.step1_len},  {"L2", c.step2_len},   {"B", c.step2_batch},       {"steps_factor", c.steps_factor},
          {"N", c.triples},     {"wall_clock", c.wall_clock}};
}

inline CostConfig config_from_json(const nlohmann::json& j, CostConfig c = {}) {
  try {
    c.params = j.value("P", c.params);
    c.prompt_len = j.value("p", c.prompt_len);
    c.chosen_len = j.value("c", c.chosen_len);
    c.rejected_len = j.value("r", c.rejected_len);
    c.step1_len = j.value("L1", c.step1_len);
    c.step2_len = j.value("L2", c.step2_len);
    c.step2_batch = j.value("B", c.step2_batch);
    c.steps_factor = j.value("steps_factor", c.steps_factor);
    c.triples = j.value("N", c.triples);
    if (j.contains("wall_clock")) c.wall_clock = j["wall_clock"];
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kMalformedMetadata, std::string("cost config: ") + e.what());
  }
  for (const auto& [key, value] : j.items()) {
    static const std::vector<std::string> known = {"P", "p", "c", "r", "L1", "L2", "B", "steps_factor", "N",
                                                   "wall_clock", "sweep"};
    if (std::find(known.begin(), known.end(), key) == known.end())
      fail(ErrorCode::kInvalidArgument, "unknown cost config field \"" + key + "\"");
  }
  return c;
}

inline void set_field(CostConfig& c, const std::string& name, double v) {
  if (name == "P") c.params = v;
  else if (name == "p") c.prompt_len = v;
  else if (name == "c") c.chosen_len = v;
  else if (name == "r") c.rejected_len = v;
  else if (name == "L1") c.step1_len = v;
  else if (name == "L2") c.step2_len = v;
  else if (name == "B") c.step2_batch = v;
  else if (name == "steps_factor") c.steps_factor = v;
  else if (name == "N") c.triples = v;
  else fail(ErrorCode::kInvalidArgument, "cannot sweep unknown parameter \"" + name + "\"");
}

/// One-at-a-time sweep: each grid varies a single parameter around `base`.
using SweepGrid = std::map<std::string, std::vector<double>>;

inline nlohmann::json cost_report(const CostConfig& c, const SweepGrid& sweep = {}) {
  CostConfig unit = c;
  unit.triples = 1.0;
  const auto rahf = flops_rahf(c);
  const auto rahf_unit = flops_rahf(unit);
  nlohmann::json report = {
      {"schema_version", 1},
      {"config", config_to_json(c)},
      {"dspa", {{"total", flops_dspa(c)}, {"per_triple", flops_dspa(unit)}}},
      {"rahf",
       {{"step1", rahf.step1},
        {"step2", rahf.step2},
        {"total", rahf.total},
        {"per_triple", {{"step1", rahf_unit.step1}, {"step2", rahf_unit.step2}, {"total", rahf_unit.total}}}}},
      {"ratio", compute_ratio(c)},
      {"wall_clock", c.wall_clock},
  };
  nlohmann::json sweeps = nlohmann::json::object();
  for (const auto& [name, values] : sweep) {
    nlohmann::json rows = nlohmann::json::array();
    for (double v : values) {
      CostConfig varied = c;
      set_field(varied, name, v);
      const auto r = flops_rahf(varied);
      rows.push_back({{"value", v},
                      {"dspa", flops_dspa(varied)},
                      {"rahf_step1", r.step1},
                      {"rahf_step2", r.step2},
                      {"rahf_total", r.total},
                      {"ratio", compute_ratio(varied)}});
    }
    sweeps[name] = std::move(rows);
  }
  report["sweep"] = std::move(sweeps);
  return report;
}

}  // namespace dspa::flops
