#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dspa/error.hpp"
#include "dspa/parallel.hpp"
#include "dspa/sae.hpp"
#include "dspa/topk.hpp"
#include "dspa/trace.hpp"

namespace dspa {

enum class Segment { kPrompt, kResponse };

/// Per-feature fraction of segment tokens on which the feature is strictly
/// active. Each value is count / length rounded to f32.
struct DensityVector {
  std::vector<float> values;
  Segment segment = Segment::kPrompt;
  std::size_t length = 0;

  std::size_t size() const noexcept { return values.size(); }
};

inline DensityVector density(const SaeParams& sae, const ActivationTrace& trace, Segment segment) {
  const std::size_t begin = segment == Segment::kPrompt ? 0 : trace.prompt_len;
  const std::size_t end = segment == Segment::kPrompt ? trace.prompt_len : trace.token_count();
  require(end > begin, ErrorCode::kInvalidArgument,
          std::string(segment == Segment::kPrompt ? "prompt" : "response") + " segment of trace \"" +
              trace.layer_tag + "\" is empty");
  require(trace.d_model() == sae.d_model(), ErrorCode::kDimensionMismatch,
          "trace \"" + trace.layer_tag + "\" has width " + std::to_string(trace.d_model()) + ", SAE expects " +
              std::to_string(sae.d_model()));

  std::vector<std::uint32_t> counts(sae.d_sae(), 0);
  std::vector<float> code(sae.d_sae());
  for (std::size_t t = begin; t < end; ++t) {
    sae.encode_into(trace.hidden.row(t), code);
    for (std::size_t j = 0; j < code.size(); ++j) counts[j] += code[j] > 0.0f ? 1u : 0u;
  }
  const double length = static_cast<double>(end - begin);
  DensityVector out{std::vector<float>(sae.d_sae()), segment, end - begin};
  for (std::size_t j = 0; j < counts.size(); ++j) out.values[j] = static_cast<float>(counts[j] / length);
  return out;
}

struct GateThresholds {
  std::vector<float> tau;
  double percentile = 75.0;
  std::size_t fit_count = 0;

  friend bool operator==(const GateThresholds&, const GateThresholds&) = default;
};

/// 1-based nearest-rank position ceil(p N / 100), clamped to [1, N].
inline std::size_t nearest_rank(double percentile, std::size_t n) {
  auto rank = static_cast<std::size_t>(std::ceil(percentile * static_cast<double>(n) / 100.0));
  return std::clamp<std::size_t>(rank, 1, n);
}

/// Per-feature p-th percentile of the densities by the nearest-rank method.
/// p = 100 is accepted and yields the per-feature maximum.
inline GateThresholds fit_thresholds(std::span<const DensityVector> densities, double percentile,
                                     unsigned threads = 1) {
  require(!densities.empty(), ErrorCode::kEmptyInput, "cannot fit thresholds on zero prompts");
  require(percentile > 0.0 && percentile <= 100.0, ErrorCode::kInvalidArgument,
          "percentile must lie in (0, 100], got " + std::to_string(percentile));
  const std::size_t d = densities.front().size();
  for (const auto& dv : densities)
    require(dv.size() == d, ErrorCode::kDimensionMismatch, "density vectors have inconsistent widths");

  const std::size_t n = densities.size();
  const std::size_t rank = nearest_rank(percentile, n);
  GateThresholds out{std::vector<float>(d), percentile, n};
  constexpr std::size_t kFeaturesPerTask = 256;
  const std::size_t tasks = (d + kFeaturesPerTask - 1) / kFeaturesPerTask;
  parallel_for(tasks, threads, [&](std::size_t task) {
    std::vector<float> column(n);
    const std::size_t end = std::min(d, (task + 1) * kFeaturesPerTask);
    for (std::size_t i = task * kFeaturesPerTask; i < end; ++i) {
      for (std::size_t k = 0; k < n; ++k) column[k] = densities[k].values[i];
      std::nth_element(column.begin(), column.begin() + static_cast<std::ptrdiff_t>(rank - 1), column.end());
      out.tau[i] = column[rank - 1];
    }
  });
  return out;
}

using GateVector = std::vector<std::uint8_t>;

/// g_i = 1 iff density_i >= tau_i.
inline GateVector gate(const DensityVector& density, const GateThresholds& thresholds) {
  require(density.size() == thresholds.tau.size(), ErrorCode::kDimensionMismatch,
          "density width " + std::to_string(density.size()) + " does not match threshold width " +
              std::to_string(thresholds.tau.size()));
  GateVector g(density.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = density.values[i] >= thresholds.tau[i] ? 1 : 0;
  return g;
}

struct PromptSelection {
  std::vector<FeatureIndex> indices;  // ordered by density descending
  GateVector indicator;
};

inline PromptSelection top_k_prompt_features(const DensityVector& density, std::size_t k_prompt) {
  require(k_prompt >= 1 && k_prompt <= density.size(), ErrorCode::kInvalidArgument,
          "k_prompt = " + std::to_string(k_prompt) + " must lie in [1, d_sae = " + std::to_string(density.size()) + "]");
  PromptSelection sel{top_k_indices(std::span<const float>(density.values), k_prompt),
                      GateVector(density.size(), 0)};
  for (auto i : sel.indices) sel.indicator[i] = 1;
  return sel;
}

}  // namespace dspa
