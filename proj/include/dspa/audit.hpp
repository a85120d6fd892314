#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dspa/diff_map.hpp"
#include "dspa/error.hpp"
#include "dspa/sae.hpp"
#include "dspa/steering.hpp"
#include "dspa/trace.hpp"

namespace dspa::audit {

/// Global augment/ablate candidates ranked by column sum of the map.
struct AuditSets {
  std::vector<FeatureIndex> augment;  // column sum descending
  std::vector<FeatureIndex> ablate;   // column sum ascending, disjoint from augment
  std::vector<double> augment_magnitude;
  std::vector<double> ablate_magnitude;
  /// The unrestricted bottom ranking collided with the augment set, i.e. the
  /// column sums are too flat to separate the two sets.
  bool degenerate = false;
  /// Ranked from a sparsified map, so sums cover surviving entries only.
  bool from_sparsified = false;
};

inline AuditSets rank_columns(const DiffMap& map, std::size_t set_size) {
  const std::size_t d = map.a.cols;
  require(set_size >= 1 && 2 * set_size <= d, ErrorCode::kInvalidArgument,
          "set size " + std::to_string(set_size) + " must lie in [1, d_sae / 2 = " + std::to_string(d / 2) + "]");
  const auto sums = column_sums(map.a);
  AuditSets out;
  out.from_sparsified = map.sparsify_tau > 0.0;
  out.augment = top_k_indices(std::span<const double>(sums), set_size);

  std::vector<std::uint8_t> taken(d, 0);
  for (auto j : out.augment) taken[j] = 1;
  auto unrestricted = bottom_k_indices(std::span<const double>(sums), set_size);
  out.degenerate = std::any_of(unrestricted.begin(), unrestricted.end(), [&](FeatureIndex j) { return taken[j]; });

  std::vector<FeatureIndex> rest;
  for (std::size_t j = 0; j < d; ++j)
    if (!taken[j]) rest.push_back(static_cast<FeatureIndex>(j));
  std::partial_sort(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(set_size), rest.end(),
                    [&](FeatureIndex a, FeatureIndex b) { return sums[a] < sums[b] || (sums[a] == sums[b] && a < b); });
  out.ablate.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(set_size));

  for (auto j : out.augment) out.augment_magnitude.push_back(std::fabs(sums[j]));
  for (auto j : out.ablate) out.ablate_magnitude.push_back(std::fabs(sums[j]));
  return out;
}

struct Overlap {
  std::size_t augment = 0;
  std::size_t ablate = 0;
};

inline std::size_t intersection_size(std::vector<FeatureIndex> a, std::vector<FeatureIndex> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  a.erase(std::unique(a.begin(), a.end()), a.end());
  b.erase(std::unique(b.begin(), b.end()), b.end());
  std::vector<FeatureIndex> common;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
  return common.size();
}

inline Overlap set_overlap(const AuditSets& a, const AuditSets& b) {
  return {intersection_size(a.augment, b.augment), intersection_size(a.ablate, b.ablate)};
}

struct PlanCoverage {
  std::vector<FeatureIndex> augment_outside;
  std::vector<FeatureIndex> ablate_outside;
  bool augment_subset = true;
  bool ablate_subset = true;
};

struct CoverageReport {
  std::vector<PlanCoverage> plans;
  std::size_t plans_with_violations = 0;
  std::size_t total_violations = 0;
  std::size_t augment_subset_count = 0;
  std::size_t ablate_subset_count = 0;
};

/// Which per-prompt selections fall outside the global sets. A measurement,
/// not an invariant: only single-row plans are guaranteed to be covered.
inline CoverageReport coverage_check(std::span<const SteeringPlan> plans, const AuditSets& sets) {
  auto outside = [](const std::vector<FeatureIndex>& selected, std::vector<FeatureIndex> global) {
    std::sort(global.begin(), global.end());
    std::vector<FeatureIndex> out;
    for (auto j : selected)
      if (!std::binary_search(global.begin(), global.end(), j)) out.push_back(j);
    return out;
  };
  CoverageReport report;
  for (const auto& plan : plans) {
    PlanCoverage pc;
    if (plan.augments()) pc.augment_outside = outside(plan.augment, sets.augment);
    if (plan.ablates()) pc.ablate_outside = outside(plan.ablate, sets.ablate);
    pc.augment_subset = pc.augment_outside.empty();
    pc.ablate_subset = pc.ablate_outside.empty();
    const std::size_t violations = pc.augment_outside.size() + pc.ablate_outside.size();
    report.total_violations += violations;
    report.plans_with_violations += violations > 0 ? 1 : 0;
    report.augment_subset_count += pc.augment_subset ? 1 : 0;
    report.ablate_subset_count += pc.ablate_subset ? 1 : 0;
    report.plans.push_back(std::move(pc));
  }
  return report;
}

struct EvidenceRecord {
  std::size_t trace = 0;  // position in the supplied trace list
  std::size_t token = 0;
  float activation = 0.0f;
};

/// The top_n strictly positive activations of output feature `feature`,
/// ordered by activation descending, then trace, then token.
inline std::vector<EvidenceRecord> export_evidence(const DiffMap& map, const SaeParams& output_sae,
                                                   std::span<const ActivationTrace> traces, std::size_t feature,
                                                   std::size_t top_n) {
  require(feature < map.d_sae() && feature < output_sae.d_sae(), ErrorCode::kInvalidArgument,
          "feature " + std::to_string(feature) + " is out of range for d_sae = " + std::to_string(map.d_sae()));
  require(map.d_sae() == output_sae.d_sae(), ErrorCode::kDimensionMismatch, "map and SAE widths differ");
  std::vector<EvidenceRecord> records;
  std::vector<float> code(output_sae.d_sae());
  for (std::size_t t = 0; t < traces.size(); ++t) {
    for (std::size_t tok = 0; tok < traces[t].token_count(); ++tok) {
      output_sae.encode_into(traces[t].hidden.row(tok), code);
      if (code[feature] > 0.0f) records.push_back({t, tok, code[feature]});
    }
  }
  auto before = [](const EvidenceRecord& a, const EvidenceRecord& b) {
    if (a.activation != b.activation) return a.activation > b.activation;
    if (a.trace != b.trace) return a.trace < b.trace;
    return a.token < b.token;
  };
  const std::size_t keep = std::min(top_n, records.size());
  std::partial_sort(records.begin(), records.begin() + static_cast<std::ptrdiff_t>(keep), records.end(), before);
  records.resize(keep);
  return records;
}

inline nlohmann::json to_json(const AuditSets& s) {
  return {{"augment", s.augment},
          {"ablate", s.ablate},
          {"augment_magnitude", s.augment_magnitude},
          {"ablate_magnitude", s.ablate_magnitude},
          {"degenerate", s.degenerate},
          {"from_sparsified", s.from_sparsified}};
}

inline nlohmann::json to_json(const CoverageReport& r) {
  nlohmann::json plans = nlohmann::json::array();
  for (const auto& p : r.plans)
    plans.push_back({{"augment_outside", p.augment_outside},
                     {"ablate_outside", p.ablate_outside},
                     {"augment_subset", p.augment_subset},
                     {"ablate_subset", p.ablate_subset}});
  return {{"plans", plans},
          {"plan_count", r.plans.size()},
          {"plans_with_violations", r.plans_with_violations},
          {"total_violations", r.total_violations},
          {"augment_subset_count", r.augment_subset_count},
          {"ablate_subset_count", r.ablate_subset_count}};
}

}  // namespace dspa::audit
