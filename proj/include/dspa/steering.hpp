#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "dspa/density.hpp"
#include "dspa/diff_map.hpp"
#include "dspa/error.hpp"
#include "dspa/parallel.hpp"
#include "dspa/sae.hpp"
#include "dspa/topk.hpp"

namespace dspa {

enum class SteeringMode { kAblateOnly, kAugmentOnly, kBoth };

inline std::string to_string(SteeringMode mode) {
  switch (mode) {
    case SteeringMode::kAblateOnly: return "ablate";
    case SteeringMode::kAugmentOnly: return "augment";
    case SteeringMode::kBoth: return "both";
  }
  return "ablate";
}

inline SteeringMode parse_mode(const std::string& s) {
  if (s == "ablate" || s == "ablate_only") return SteeringMode::kAblateOnly;
  if (s == "augment" || s == "augment_only") return SteeringMode::kAugmentOnly;
  if (s == "both") return SteeringMode::kBoth;
  fail(ErrorCode::kInvalidArgument, "unknown steering mode \"" + s + "\" (expected ablate, augment or both)");
}

/// Per-prompt selection, frozen for the whole generation.
struct SteeringPlan {
  std::vector<double> scores;
  std::vector<FeatureIndex> prompt_features;
  std::vector<FeatureIndex> augment;  // score descending
  std::vector<FeatureIndex> ablate;   // score ascending
  float alpha = 0.2f;
  SteeringMode mode = SteeringMode::kAblateOnly;

  bool augments() const noexcept { return mode != SteeringMode::kAblateOnly; }
  bool ablates() const noexcept { return mode != SteeringMode::kAugmentOnly; }
};

/// Selects the k_diff highest and lowest scoring features. Overlapping
/// selections mean the scores are too flat to rank and are rejected.
inline SteeringPlan plan_from_scores(std::vector<double> scores, std::size_t k_diff, float alpha, SteeringMode mode) {
  require(k_diff >= 1 && k_diff <= scores.size(), ErrorCode::kInvalidArgument,
          "k_diff = " + std::to_string(k_diff) + " must lie in [1, d_sae = " + std::to_string(scores.size()) + "]");
  require(std::isfinite(alpha) && alpha >= 0.0f, ErrorCode::kInvalidArgument, "alpha must be finite and >= 0");
  SteeringPlan plan;
  plan.augment = top_k_indices(std::span<const double>(scores), k_diff);
  plan.ablate = bottom_k_indices(std::span<const double>(scores), k_diff);
  auto a = sorted_copy(plan.augment);
  auto b = sorted_copy(plan.ablate);
  std::vector<FeatureIndex> overlap;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(overlap));
  if (!overlap.empty()) {
    std::string names;
    for (auto j : overlap) names += (names.empty() ? "" : ", ") + std::to_string(j);
    fail(ErrorCode::kDegenerateScores,
         "augment and ablate selections overlap on features {" + names + "}; the map is too flat to rank");
  }
  plan.scores = std::move(scores);
  plan.alpha = alpha;
  plan.mode = mode;
  return plan;
}

/// s = A^T g^, where g^ indicates the k_prompt densest prompt features.
inline SteeringPlan make_plan(const DiffMap& map, const DensityVector& prompt_density, std::size_t k_prompt,
                              std::size_t k_diff, float alpha, SteeringMode mode) {
  require(prompt_density.size() == map.d_sae(), ErrorCode::kDimensionMismatch,
          "prompt density width " + std::to_string(prompt_density.size()) + " does not match map width " +
              std::to_string(map.d_sae()));
  auto selection = top_k_prompt_features(prompt_density, k_prompt);
  auto plan = plan_from_scores(sum_rows(map.a, selection.indices), k_diff, alpha, mode);
  plan.prompt_features = std::move(selection.indices);
  return plan;
}

inline nlohmann::json to_json(const SteeringPlan& p) {
  return {{"schema_version", 1},     {"mode", to_string(p.mode)}, {"alpha", p.alpha},
          {"prompt_features", p.prompt_features}, {"augment", p.augment}, {"ablate", p.ablate},
          {"scores", p.scores}};
}

inline SteeringPlan plan_from_json(const nlohmann::json& j) {
  SteeringPlan p;
  try {
    p.mode = parse_mode(j.at("mode").get<std::string>());
    p.alpha = j.at("alpha").get<float>();
    p.prompt_features = j.value("prompt_features", std::vector<FeatureIndex>{});
    p.augment = j.at("augment").get<std::vector<FeatureIndex>>();
    p.ablate = j.at("ablate").get<std::vector<FeatureIndex>>();
    p.scores = j.value("scores", std::vector<double>{});
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kMalformedMetadata, std::string("steering plan: ") + e.what());
  }
  return p;
}

struct LatentEdit {
  FeatureIndex feature = 0;
  float before = 0.0f;
  float after = 0.0f;
};

struct TokenEditReport {
  std::size_t token = 0;
  float max_latent = 0.0f;  // M_t
  bool dead = false;        // every latent was zero
  std::vector<LatentEdit> edits;
  double residual_norm = 0.0;
};

inline nlohmann::json to_json(const TokenEditReport& r) {
  nlohmann::json edits = nlohmann::json::array();
  for (const auto& e : r.edits) edits.push_back({{"feature", e.feature}, {"before", e.before}, {"after", e.after}});
  return {{"token", r.token}, {"M_t", r.max_latent}, {"dead", r.dead}, {"edits", edits},
          {"residual_norm", r.residual_norm}};
}

struct EditedToken {
  std::vector<float> hidden;
  TokenEditReport report;
};

/// Token-conditional edit: only latents strictly active at this token move,
/// by +alpha M_t (augment) or -alpha M_t clamped at zero (ablate). The
/// residual W_dec (f' - f) is added back to the hidden state. When nothing
/// moves the input is returned bit-for-bit.
inline EditedToken edit_token(const SteeringPlan& plan, const SaeParams& sae, std::span<const float> h_out,
                              std::size_t token_index = 0) {
  require(plan.scores.empty() || plan.scores.size() == sae.d_sae(), ErrorCode::kDimensionMismatch,
          "plan width does not match SAE width");
  EditedToken out{std::vector<float>(h_out.begin(), h_out.end()), {}};
  out.report.token = token_index;
  const auto latents = sae.encode(h_out);
  const float m_t = *std::max_element(latents.begin(), latents.end());
  out.report.max_latent = m_t;
  if (m_t <= 0.0f) {
    out.report.dead = true;
    return out;
  }
  const float step = plan.alpha * m_t;

  auto& edits = out.report.edits;
  if (plan.augments())
    for (auto j : plan.augment)
      if (latents[j] > 0.0f) edits.push_back({j, latents[j], latents[j] + step});
  if (plan.ablates())
    for (auto j : plan.ablate)
      if (latents[j] > 0.0f) edits.push_back({j, latents[j], std::max(latents[j] - step, 0.0f)});
  std::sort(edits.begin(), edits.end(), [](const LatentEdit& a, const LatentEdit& b) { return a.feature < b.feature; });

  std::vector<FeatureIndex> idx;
  std::vector<float> delta;
  for (const auto& e : edits) {
    if (e.after != e.before) {
      idx.push_back(e.feature);
      delta.push_back(e.after - e.before);
    }
  }
  if (idx.empty()) return out;

  const auto residual = sae.decode_delta_sparse(idx, delta);
  double norm2 = 0.0;
  for (std::size_t m = 0; m < residual.size(); ++m) {
    out.hidden[m] = h_out[m] + residual[m];
    norm2 += static_cast<double>(residual[m]) * residual[m];
  }
  out.report.residual_norm = std::sqrt(norm2);
  return out;
}

struct SteeredStream {
  Matrix hidden;
  std::vector<TokenEditReport> reports;
};

/// Applies edit_token to every row independently; the plan is the only
/// state shared across positions.
inline SteeredStream steer_stream(const SteeringPlan& plan, const SaeParams& sae, const Matrix& stream,
                                  unsigned threads = 1) {
  require(stream.rows() == 0 || stream.cols() == sae.d_model(), ErrorCode::kDimensionMismatch,
          "stream width " + std::to_string(stream.cols()) + " does not match SAE d_model " +
              std::to_string(sae.d_model()));
  SteeredStream out{Matrix(stream.rows(), stream.rows() == 0 ? 0 : stream.cols()),
                    std::vector<TokenEditReport>(stream.rows())};
  parallel_for(stream.rows(), threads, [&](std::size_t t) {
    auto edited = edit_token(plan, sae, stream.row(t), t);
    std::copy(edited.hidden.begin(), edited.hidden.end(), out.hidden.row(t).begin());
    out.reports[t] = std::move(edited.report);
  });
  return out;
}

inline constexpr double kDefaultRidge = 1e-6;
inline constexpr double kMaxDemixCondition = 1e6;

/// De-mixed score A_{S,:}^T (M_S + lambda I)^{-1} g_S. `gram` must cover
/// every feature in `subset`; `gate_values` holds g_S in subset order.
inline std::vector<double> demix_scores(const DiffMap& map, const GramMatrix& gram,
                                        std::span<const FeatureIndex> subset, std::span<const double> gate_values,
                                        double lambda = kDefaultRidge) {
  require(!subset.empty(), ErrorCode::kInvalidArgument, "de-mixing needs a non-empty active set");
  require(gate_values.size() == subset.size(), ErrorCode::kDimensionMismatch, "g_S must have one entry per feature");
  require(lambda >= 0.0 && std::isfinite(lambda), ErrorCode::kInvalidArgument, "ridge must be finite and >= 0");
  for (auto i : subset) require(i < map.d_sae(), ErrorCode::kInvalidArgument, "active feature out of range");

  const GramMatrix ms = gram.restrict_to(subset);
  const auto s = static_cast<Eigen::Index>(subset.size());
  Eigen::MatrixXd system(s, s);
  for (Eigen::Index a = 0; a < s; ++a)
    for (Eigen::Index b = 0; b < s; ++b) system(a, b) = ms(static_cast<std::size_t>(a), static_cast<std::size_t>(b));
  require(system.isApprox(system.transpose(), 1e-12) || system.isZero(), ErrorCode::kInvalidArgument,
          "M_S is not symmetric");
  system.diagonal().array() += lambda;

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(system, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  const double cond = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
  if (!(cond <= kMaxDemixCondition))
    fail(ErrorCode::kIllConditioned, "condition number of M_S + lambda I is " + std::to_string(cond) +
                                         " (limit 1e6); increase the ridge lambda (currently " +
                                         std::to_string(lambda) + ")");

  Eigen::VectorXd rhs(s);
  for (Eigen::Index a = 0; a < s; ++a) rhs(a) = gate_values[static_cast<std::size_t>(a)];
  const Eigen::VectorXd w = system.ldlt().solve(rhs);

  std::vector<double> out(map.d_sae(), 0.0);
  for (Eigen::Index a = 0; a < s; ++a) {
    const auto row = subset[static_cast<std::size_t>(a)];
    auto cs = map.a.row_cols(row);
    auto vs = map.a.row_values(row);
    for (std::size_t e = 0; e < cs.size(); ++e) out[cs[e]] += w(a) * static_cast<double>(vs[e]);
  }
  return out;
}

}  // namespace dspa
