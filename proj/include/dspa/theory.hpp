#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "dspa/density.hpp"
#include "dspa/diff_map.hpp"
#include "dspa/error.hpp"
#include "dspa/parallel.hpp"
#include "dspa/sae.hpp"
#include "dspa/topk.hpp"
#include "dspa/trace.hpp"

namespace dspa::theory {

/// Independent gates: g_i ~ Bernoulli(p_i).
struct BernoulliGates {
  std::vector<double> p;
};

/// Joint gates: one of a fixed list of binary patterns, drawn with the given
/// (normalized) weights. Expresses arbitrary co-activation.
struct PatternGates {
  std::vector<GateVector> patterns;
  std::vector<double> weights;
};

using GateLaw = std::variant<BernoulliGates, PatternGates>;

enum class NoiseFamily { kGaussian, kUniform };

struct NoiseModel {
  NoiseFamily family = NoiseFamily::kGaussian;
  double scale = 0.0;  // standard deviation
  bool clip = false;   // clip delta to [-1, 1]

  /// Largest possible |noise|; infinite for Gaussian noise with scale > 0.
  double half_width() const {
    if (scale == 0.0) return 0.0;
    return family == NoiseFamily::kUniform ? scale * std::sqrt(3.0) : std::numeric_limits<double>::infinity();
  }
};

/// Shared-covariance mean-shift world: delta = c Sigma B g + noise.
struct SyntheticWorld {
  std::size_t d = 0;
  double c = 1.0;
  Eigen::MatrixXd sigma;
  Eigen::MatrixXd b;  // column i is beta^(i)
  GateLaw gates;
  NoiseModel noise;
  std::uint64_t seed = 0;
  /// Set when a user-supplied Sigma had to be symmetrized or floored.
  bool sigma_projected = false;

  /// c Sigma B, the map from gates to the conditional mean.
  Eigen::MatrixXd loading() const { return c * sigma * b; }
};

inline constexpr double kPsdTolerance = 1e-8;

inline void validate(const SyntheticWorld& w) {
  require(w.d >= 1, ErrorCode::kInvalidWorld, "world dimension must be >= 1");
  require(std::isfinite(w.c) && w.c > 0.0, ErrorCode::kInvalidWorld, "c must be positive");
  const auto d = static_cast<Eigen::Index>(w.d);
  require(w.sigma.rows() == d && w.sigma.cols() == d, ErrorCode::kInvalidWorld, "Sigma must be d x d");
  require(w.b.rows() == d && w.b.cols() == d, ErrorCode::kInvalidWorld, "B must be d x d");
  require(w.sigma.allFinite() && w.b.allFinite(), ErrorCode::kInvalidWorld, "Sigma and B must be finite");
  require(w.sigma.isApprox(w.sigma.transpose(), 1e-12) || w.sigma.isZero(), ErrorCode::kInvalidWorld,
          "Sigma must be symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(w.sigma, Eigen::EigenvaluesOnly);
  require(eig.eigenvalues().minCoeff() >= -kPsdTolerance, ErrorCode::kInvalidWorld, "Sigma must be PSD");
  require(std::isfinite(w.noise.scale) && w.noise.scale >= 0.0, ErrorCode::kInvalidWorld,
          "noise scale must be finite and >= 0");
  if (const auto* bern = std::get_if<BernoulliGates>(&w.gates)) {
    require(bern->p.size() == w.d, ErrorCode::kInvalidWorld, "need one gate probability per feature");
    for (double p : bern->p)
      require(p >= 0.0 && p <= 1.0, ErrorCode::kInvalidWorld, "gate probabilities must lie in [0, 1]");
  } else {
    const auto& pat = std::get<PatternGates>(w.gates);
    require(!pat.patterns.empty(), ErrorCode::kInvalidWorld, "pattern gate law needs at least one pattern");
    require(pat.weights.size() == pat.patterns.size(), ErrorCode::kInvalidWorld, "need one weight per pattern");
    double total = 0.0;
    for (std::size_t k = 0; k < pat.patterns.size(); ++k) {
      require(pat.patterns[k].size() == w.d, ErrorCode::kInvalidWorld, "gate pattern has wrong width");
      require(std::isfinite(pat.weights[k]) && pat.weights[k] >= 0.0, ErrorCode::kInvalidWorld,
              "pattern weights must be >= 0");
      total += pat.weights[k];
    }
    require(total > 0.0, ErrorCode::kInvalidWorld, "pattern weights sum to zero");
  }
}

/// Symmetrizes Sigma and floors its eigenvalues at zero. Returns true when
/// the matrix changed beyond rounding.
inline bool project_psd(Eigen::MatrixXd& sigma) {
  const Eigen::MatrixXd sym = 0.5 * (sigma + sigma.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
  bool changed = !sym.isApprox(sigma, 1e-12) && !sigma.isZero();
  if (eig.eigenvalues().minCoeff() >= 0.0) {
    sigma = sym;
    return changed;
  }
  const Eigen::VectorXd floored = eig.eigenvalues().cwiseMax(0.0);
  sigma = eig.eigenvectors() * floored.asDiagonal() * eig.eigenvectors().transpose();
  sigma = 0.5 * (sigma + sigma.transpose());
  return true;
}

/// Per-sample generator seeded from (master seed, index) so any sample can be
/// drawn independently of the others.
inline std::mt19937_64 stream_rng(std::uint64_t master, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

// ---------------------------------------------------------------------------
// JSON world specification

namespace detail {

inline Eigen::MatrixXd parse_square(const nlohmann::json& j, std::size_t d, const std::string& what) {
  const auto n = static_cast<Eigen::Index>(d);
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "identity") return Eigen::MatrixXd::Identity(n, n);
    if (s == "zero") return Eigen::MatrixXd::Zero(n, n);
    fail(ErrorCode::kInvalidWorld, what + ": unknown shorthand \"" + s + "\"");
  }
  if (j.is_object() && j.contains("diag")) {
    const auto v = j["diag"].get<std::vector<double>>();
    require(v.size() == d, ErrorCode::kInvalidWorld, what + ": diag needs " + std::to_string(d) + " entries");
    return Eigen::Map<const Eigen::VectorXd>(v.data(), n).asDiagonal();
  }
  if (j.is_object() && j.contains("random_normal")) {
    const auto& r = j["random_normal"];
    const auto seed = r.value("seed", std::uint64_t{0});
    const double scale = r.value("scale", 1.0);
    auto rng = stream_rng(seed, 0);
    std::normal_distribution<double> normal(0.0, scale);
    Eigen::MatrixXd m(n, n);
    for (Eigen::Index row = 0; row < n; ++row)
      for (Eigen::Index col = 0; col < n; ++col) m(row, col) = normal(rng);
    if (r.contains("columns")) {
      // Keep only the listed columns; the rest are zero.
      const auto keep = r["columns"].get<std::vector<std::size_t>>();
      Eigen::MatrixXd masked = Eigen::MatrixXd::Zero(n, n);
      for (auto col : keep) {
        require(col < d, ErrorCode::kInvalidWorld, what + ": column out of range");
        masked.col(static_cast<Eigen::Index>(col)) = m.col(static_cast<Eigen::Index>(col));
      }
      m = masked;
    }
    return m;
  }
  if (j.is_array()) {
    require(j.size() == d, ErrorCode::kInvalidWorld, what + ": expected " + std::to_string(d) + " rows");
    Eigen::MatrixXd m(n, n);
    for (std::size_t r = 0; r < d; ++r) {
      const auto row = j[r].get<std::vector<double>>();
      require(row.size() == d, ErrorCode::kInvalidWorld, what + ": row " + std::to_string(r) + " has wrong width");
      for (std::size_t c = 0; c < d; ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = row[c];
    }
    return m;
  }
  fail(ErrorCode::kInvalidWorld, what + ": expected \"identity\", {\"diag\": ...}, {\"random_normal\": ...} or a dense array");
}

}  // namespace detail

/// {"d", "c", "sigma", "B", "gates": {"bernoulli": p | [p_i]} or
/// {"patterns": [[...]], "weights": [...]}, "noise": {"family", "scale",
/// "clip"}, "seed"}.
inline SyntheticWorld world_from_json(const nlohmann::json& j) {
  SyntheticWorld w;
  try {
    w.d = j.at("d").get<std::size_t>();
    require(w.d >= 1, ErrorCode::kInvalidWorld, "world dimension must be >= 1");
    w.c = j.value("c", 1.0);
    w.seed = j.value("seed", std::uint64_t{0});
    w.sigma = detail::parse_square(j.value("sigma", nlohmann::json("identity")), w.d, "sigma");
    w.b = detail::parse_square(j.value("B", nlohmann::json("identity")), w.d, "B");
    const auto& g = j.at("gates");
    if (g.contains("bernoulli")) {
      const auto& p = g["bernoulli"];
      w.gates = BernoulliGates{p.is_number() ? std::vector<double>(w.d, p.get<double>()) : p.get<std::vector<double>>()};
    } else if (g.contains("patterns")) {
      PatternGates pat;
      for (const auto& row : g["patterns"]) {
        GateVector v;
        for (const auto& x : row) v.push_back(x.get<int>() != 0 ? 1 : 0);
        pat.patterns.push_back(std::move(v));
      }
      pat.weights = g.contains("weights") ? g["weights"].get<std::vector<double>>()
                                          : std::vector<double>(pat.patterns.size(), 1.0);
      w.gates = std::move(pat);
    } else {
      fail(ErrorCode::kInvalidWorld, "gates must contain \"bernoulli\" or \"patterns\"");
    }
    if (j.contains("noise")) {
      const auto& n = j["noise"];
      const auto family = n.value("family", std::string("gaussian"));
      require(family == "gaussian" || family == "uniform", ErrorCode::kInvalidWorld,
              "noise family must be gaussian or uniform");
      w.noise.family = family == "gaussian" ? NoiseFamily::kGaussian : NoiseFamily::kUniform;
      w.noise.scale = n.value("scale", 0.0);
      w.noise.clip = n.value("clip", false);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kInvalidWorld, std::string("world spec: ") + e.what());
  }
  w.sigma_projected = project_psd(w.sigma);
  validate(w);
  return w;
}

inline nlohmann::json world_summary(const SyntheticWorld& w) {
  nlohmann::json gates;
  if (const auto* bern = std::get_if<BernoulliGates>(&w.gates))
    gates = {{"law", "bernoulli"}, {"p", bern->p}};
  else
    gates = {{"law", "patterns"}, {"count", std::get<PatternGates>(w.gates).patterns.size()}};
  return {{"d", w.d},
          {"c", w.c},
          {"seed", w.seed},
          {"gates", gates},
          {"noise",
           {{"family", w.noise.family == NoiseFamily::kGaussian ? "gaussian" : "uniform"},
            {"scale", w.noise.scale},
            {"clip", w.noise.clip}}},
          {"sigma_projected", w.sigma_projected}};
}

// ---------------------------------------------------------------------------
// Gate statistics in closed form

/// M = E[g g^T].
inline Eigen::MatrixXd closed_form_gram(const SyntheticWorld& w) {
  const auto d = static_cast<Eigen::Index>(w.d);
  if (const auto* bern = std::get_if<BernoulliGates>(&w.gates)) {
    const Eigen::Map<const Eigen::VectorXd> p(bern->p.data(), d);
    Eigen::MatrixXd m = p * p.transpose();
    m.diagonal() = p;
    return m;
  }
  const auto& pat = std::get<PatternGates>(w.gates);
  double total = 0.0;
  for (double x : pat.weights) total += x;
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(d, d);
  for (std::size_t k = 0; k < pat.patterns.size(); ++k) {
    Eigen::VectorXd g(d);
    for (Eigen::Index i = 0; i < d; ++i) g(i) = pat.patterns[k][static_cast<std::size_t>(i)];
    m += (pat.weights[k] / total) * g * g.transpose();
  }
  return m;
}

/// E[g | g_i = 1]; entry i' is the co-activation probability pi_{i'|i}.
inline Eigen::VectorXd conditional_gate_mean(const SyntheticWorld& w, std::size_t i) {
  const Eigen::MatrixXd m = closed_form_gram(w);
  const double p_i = m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i));
  require(p_i > 0.0, ErrorCode::kInvalidArgument, "gate " + std::to_string(i) + " never fires (p_i = 0)");
  return m.col(static_cast<Eigen::Index>(i)) / p_i;
}

// ---------------------------------------------------------------------------
// Sampling

struct Sample {
  GateVector g;
  std::vector<double> delta;
};

namespace detail {

inline GateVector draw_gates(const SyntheticWorld& w, std::mt19937_64& rng, std::ptrdiff_t force_on = -1) {
  if (const auto* bern = std::get_if<BernoulliGates>(&w.gates)) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    GateVector g(w.d, 0);
    for (std::size_t i = 0; i < w.d; ++i) {
      const double draw = u(rng);  // always consumed so the stream layout is fixed
      g[i] = draw < bern->p[i] ? 1 : 0;
    }
    if (force_on >= 0) g[static_cast<std::size_t>(force_on)] = 1;
    return g;
  }
  const auto& pat = std::get<PatternGates>(w.gates);
  std::vector<double> weights = pat.weights;
  if (force_on >= 0)
    for (std::size_t k = 0; k < weights.size(); ++k)
      if (!pat.patterns[k][static_cast<std::size_t>(force_on)]) weights[k] = 0.0;
  double total = 0.0;
  for (double x : weights) total += x;
  require(total > 0.0, ErrorCode::kInvalidArgument, "no gate pattern activates the requested gate");
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  return pat.patterns[pick(rng)];
}

inline std::vector<double> draw_delta(const SyntheticWorld& w, const Eigen::MatrixXd& loading, const GateVector& g,
                                      std::mt19937_64& rng) {
  std::vector<double> delta(w.d, 0.0);
  for (std::size_t i = 0; i < w.d; ++i) {
    if (!g[i]) continue;
    const auto col = loading.col(static_cast<Eigen::Index>(i));
    for (std::size_t j = 0; j < w.d; ++j) delta[j] += col(static_cast<Eigen::Index>(j));
  }
  if (w.noise.scale > 0.0) {
    if (w.noise.family == NoiseFamily::kGaussian) {
      std::normal_distribution<double> noise(0.0, w.noise.scale);
      for (auto& x : delta) x += noise(rng);
    } else {
      const double a = w.noise.half_width();
      std::uniform_real_distribution<double> noise(-a, a);
      for (auto& x : delta) x += noise(rng);
    }
  }
  if (w.noise.clip)
    for (auto& x : delta) x = std::clamp(x, -1.0, 1.0);
  return delta;
}

}  // namespace detail

/// Sample `index` of the world's stream: g from the gate law, then
/// delta = c Sigma B g + noise. Fully determined by (seed, index).
inline Sample sample_triple(const SyntheticWorld& w, const Eigen::MatrixXd& loading, std::uint64_t seed,
                            std::uint64_t index) {
  auto rng = stream_rng(seed, index);
  Sample s;
  s.g = detail::draw_gates(w, rng);
  s.delta = detail::draw_delta(w, loading, s.g, rng);
  return s;
}

inline Sample sample_triple(const SyntheticWorld& w, std::uint64_t seed, std::uint64_t index) {
  return sample_triple(w, w.loading(), seed, index);
}

/// The same stream conditioned on g_i = 1.
inline Sample sample_given_gate(const SyntheticWorld& w, const Eigen::MatrixXd& loading, std::size_t i,
                                std::uint64_t seed, std::uint64_t index) {
  auto rng = stream_rng(seed, index);
  Sample s;
  s.g = detail::draw_gates(w, rng, static_cast<std::ptrdiff_t>(i));
  s.delta = detail::draw_delta(w, loading, s.g, rng);
  return s;
}

struct Dataset {
  std::vector<GateVector> gates;
  std::vector<SparseDelta> deltas;
};

inline Dataset sample_dataset(const SyntheticWorld& w, std::size_t n, std::uint64_t seed) {
  const Eigen::MatrixXd loading = w.loading();
  Dataset out;
  out.gates.reserve(n);
  out.deltas.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    auto s = sample_triple(w, loading, seed, k);
    out.gates.push_back(std::move(s.g));
    out.deltas.push_back(sparse_from_dense(s.delta));
  }
  return out;
}

/// A-hat built by the map builder's accumulation from gates given directly.
inline DiffMap estimate_map(const SyntheticWorld& w, const Dataset& data) {
  return finalize_map(accumulate_partial(w.d, data.gates, data.deltas));
}

inline Eigen::MatrixXd to_eigen(const CsrMatrix& a) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(a.rows), static_cast<Eigen::Index>(a.cols));
  for (std::size_t r = 0; r < a.rows; ++r) {
    auto cs = a.row_cols(r);
    auto vs = a.row_values(r);
    for (std::size_t e = 0; e < cs.size(); ++e) m(static_cast<Eigen::Index>(r), cs[e]) = vs[e];
  }
  return m;
}

inline Eigen::MatrixXd empirical_gram(const std::vector<GateVector>& gates, std::size_t d) {
  const auto g = estimate_gram(gates);
  Eigen::MatrixXd m(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b) m(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = g(a, b);
  return m;
}

// ---------------------------------------------------------------------------
// Checks

struct FactorizationResult {
  /// ||A-hat^T - c Sigma B M||_F / ||c Sigma B M||_F with closed-form M.
  double error = 0.0;
  /// The same against the empirical Gram of the drawn gates. Exact up to
  /// rounding when the data are noiseless.
  double error_empirical_gram = 0.0;
  std::size_t n = 0;
};

inline double relative_frobenius(const Eigen::MatrixXd& estimate, const Eigen::MatrixXd& target) {
  const double norm = target.norm();
  require(norm > 0.0, ErrorCode::kInvalidArgument, "target c Sigma B M has zero norm");
  return (estimate - target).norm() / norm;
}

inline FactorizationResult check_factorization(const SyntheticWorld& w, std::size_t n, std::uint64_t seed) {
  validate(w);
  require(n >= 1, ErrorCode::kInvalidArgument, "factorization check needs N >= 1");
  const auto data = sample_dataset(w, n, seed);
  const Eigen::MatrixXd a_t = to_eigen(estimate_map(w, data).a).transpose();
  const Eigen::MatrixXd loading = w.loading();
  FactorizationResult r;
  r.n = n;
  r.error = relative_frobenius(a_t, loading * closed_form_gram(w));
  r.error_empirical_gram = relative_frobenius(a_t, loading * empirical_gram(data.gates, w.d));
  return r;
}

struct CoactivationResult {
  double measured = 0.0;    // ||E-hat[delta | g_i = 1] - c Sigma beta^(i)||
  double population = 0.0;  // the same with the exact conditional mean
  double bound = 0.0;       // c ||Sigma||_2 sum_{i' != i} pi_{i'|i} ||beta^(i')||
  std::size_t samples = 0;  // draws with g_i = 1
  bool holds = false;       // population <= bound
};

inline CoactivationResult check_coactivation_bound(const SyntheticWorld& w, std::size_t i, std::size_t n,
                                                   std::uint64_t seed) {
  validate(w);
  require(i < w.d, ErrorCode::kInvalidArgument, "gate index out of range");
  const Eigen::VectorXd pi = conditional_gate_mean(w, i);
  const Eigen::MatrixXd loading = w.loading();
  const auto ii = static_cast<Eigen::Index>(i);
  const Eigen::VectorXd isolated = loading.col(ii);

  Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(w.d));
  std::size_t hits = 0;
  for (std::size_t k = 0; k < n; ++k) {
    auto s = sample_triple(w, loading, seed, k);
    if (!s.g[i]) continue;
    ++hits;
    for (std::size_t j = 0; j < w.d; ++j) sum(static_cast<Eigen::Index>(j)) += s.delta[j];
  }
  require(hits > 0, ErrorCode::kEmptyInput, "no sample has g_" + std::to_string(i) + " = 1");

  CoactivationResult r;
  r.samples = hits;
  r.measured = (sum / static_cast<double>(hits) - isolated).norm();
  r.population = (loading * pi - isolated).norm();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(w.sigma);
  const double sigma_norm = svd.singularValues().size() > 0 ? svd.singularValues()(0) : 0.0;
  double mix = 0.0;
  for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(w.d); ++k)
    if (k != ii) mix += pi(k) * w.b.col(k).norm();
  r.bound = w.c * sigma_norm * mix;
  r.holds = r.population <= r.bound * (1.0 + 1e-12) + 1e-12;
  return r;
}

/// sqrt(2 ln(2d / delta) / N_i).
inline double concentration_bound(std::size_t d, double delta, std::size_t n_i) {
  require(d >= 1 && n_i >= 1, ErrorCode::kInvalidArgument, "d and N_i must be >= 1");
  require(delta > 0.0 && delta < 1.0, ErrorCode::kInvalidArgument, "delta must lie in (0, 1)");
  return std::sqrt(2.0 * std::log(2.0 * static_cast<double>(d) / delta) / static_cast<double>(n_i));
}

/// 1 - delta - 3 sd of the binomial coverage count over `trials`.
inline double coverage_floor(double delta, std::size_t trials) {
  return 1.0 - delta - 3.0 * std::sqrt(delta * (1.0 - delta) / static_cast<double>(trials));
}

struct ConcentrationResult {
  double bound = 0.0;
  double coverage = 0.0;
  double min_coverage = 0.0;
  std::size_t trials = 0;
  std::size_t n_i = 0;
  double worst_deviation = 0.0;
  /// The target row is exact (no clipping can occur); otherwise it is a
  /// Monte-Carlo estimate from `reference_samples` draws.
  bool exact_target = true;
  std::size_t reference_samples = 0;
  bool passed = false;
};

struct ConcentrationOptions {
  std::size_t reference_samples = 200000;
  unsigned threads = 1;
  /// Coverage required to pass; defaults to coverage_floor(delta, trials).
  double min_coverage = -1.0;
};

/// Draws `trials` independent datasets of N_i samples conditioned on g_i = 1,
/// estimates row i with the builder's accumulation and records whether
/// max_j |A-hat_ij - A_ij| stays within the Hoeffding bound.
inline ConcentrationResult check_concentration(const SyntheticWorld& w, std::size_t i, std::size_t n_i,
                                               std::size_t trials, double delta, std::uint64_t seed,
                                               const ConcentrationOptions& options = {}) {
  validate(w);
  require(i < w.d, ErrorCode::kInvalidArgument, "gate index out of range");
  require(trials >= 100, ErrorCode::kInvalidArgument, "concentration check needs at least 100 trials");
  require(n_i >= 1, ErrorCode::kInvalidArgument, "N_i must be >= 1");
  const Eigen::MatrixXd loading = w.loading();
  const Eigen::VectorXd pi = conditional_gate_mean(w, i);

  // Deltas stay inside [-1, 1] without clipping when the worst-case mean
  // plus the noise half-width does.
  const double worst_mean = loading.cwiseAbs().rowwise().sum().maxCoeff();
  const bool bounded = worst_mean + w.noise.half_width() <= 1.0;
  require(bounded || w.noise.clip, ErrorCode::kInvalidWorld,
          "deltas can leave [-1, 1]; enable noise.clip or shrink c, B or the noise");

  ConcentrationResult r;
  r.trials = trials;
  r.n_i = n_i;
  r.bound = concentration_bound(w.d, delta, n_i);
  r.min_coverage = options.min_coverage >= 0.0 ? options.min_coverage : coverage_floor(delta, trials);

  std::vector<double> target(w.d);
  if (bounded) {
    const Eigen::VectorXd mean = loading * pi;
    for (std::size_t j = 0; j < w.d; ++j) target[j] = mean(static_cast<Eigen::Index>(j));
  } else {
    // Clipped deltas have no closed-form mean; use a large reference sample
    // drawn from a stream disjoint from the trials.
    r.exact_target = false;
    r.reference_samples = options.reference_samples;
    std::vector<double> acc(w.d, 0.0);
    for (std::size_t k = 0; k < options.reference_samples; ++k) {
      auto s = sample_given_gate(w, loading, i, ~seed, k);
      for (std::size_t j = 0; j < w.d; ++j) acc[j] += s.delta[j];
    }
    for (std::size_t j = 0; j < w.d; ++j) target[j] = acc[j] / static_cast<double>(options.reference_samples);
  }

  std::vector<double> deviation(trials, 0.0);
  GateVector only_i(w.d, 0);
  only_i[i] = 1;
  parallel_for(trials, options.threads, [&](std::size_t t) {
    const std::uint64_t trial_seed = stream_rng(seed, t)();
    std::vector<GateVector> gates(n_i, only_i);
    std::vector<SparseDelta> deltas;
    deltas.reserve(n_i);
    for (std::size_t k = 0; k < n_i; ++k)
      deltas.push_back(sparse_from_dense(sample_given_gate(w, loading, i, trial_seed, k).delta));
    const auto part = accumulate_partial(w.d, gates, deltas);
    std::vector<double> row(w.d, 0.0);
    for (auto e = part.row_ptr[i]; e < part.row_ptr[i + 1]; ++e)
      row[part.col_idx[e]] = part.sums[e] / static_cast<double>(n_i);
    double worst = 0.0;
    for (std::size_t j = 0; j < w.d; ++j) worst = std::max(worst, std::fabs(row[j] - target[j]));
    deviation[t] = worst;
  });

  std::size_t covered = 0;
  for (double dev : deviation) {
    covered += dev <= r.bound ? 1 : 0;
    r.worst_deviation = std::max(r.worst_deviation, dev);
  }
  r.coverage = static_cast<double>(covered) / static_cast<double>(trials);
  r.passed = r.coverage >= r.min_coverage;
  return r;
}

struct TopKResult {
  bool agrees = false;
  std::vector<FeatureIndex> best;     // exhaustive maximizer, first in lexicographic order
  std::vector<FeatureIndex> bottom_k; // bottom-k of beta, ascending indices
  double improvement = 0.0;           // -delta * sum_{j in best} beta_j
};

/// Sum of beta over a subset, added in ascending value order so subsets
/// holding the same values give the same sum.
inline double subset_sum(std::span<const double> beta, std::span<const FeatureIndex> subset) {
  std::vector<double> v;
  v.reserve(subset.size());
  for (auto j : subset) v.push_back(beta[j]);
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

/// Enumerates every k-subset and compares the best expected improvement
/// under a uniform ablation shift delta against the bottom-k of beta.
inline TopKResult check_topk_optimality(std::span<const double> beta, double delta, std::size_t k) {
  const std::size_t d = beta.size();
  require(delta > 0.0 && std::isfinite(delta), ErrorCode::kInvalidArgument, "delta must be positive");
  require(d >= 1 && d <= 20, ErrorCode::kInvalidArgument, "exhaustive enumeration needs 1 <= d <= 20");
  require(k >= 1 && k <= d, ErrorCode::kInvalidArgument, "k must lie in [1, d]");
  for (double b : beta) require(std::isfinite(b), ErrorCode::kNonFinite, "beta must be finite");

  std::vector<FeatureIndex> subset(k);
  for (std::size_t a = 0; a < k; ++a) subset[a] = static_cast<FeatureIndex>(a);
  TopKResult r;
  double best = -std::numeric_limits<double>::infinity();
  while (true) {
    const double value = -delta * subset_sum(beta, subset);
    if (value > best) {
      best = value;
      r.best = subset;
    }
    // Next combination in lexicographic order.
    std::size_t a = k;
    while (a > 0 && subset[a - 1] == d - k + a - 1) --a;
    if (a == 0) break;
    ++subset[a - 1];
    for (std::size_t b = a; b < k; ++b) subset[b] = subset[b - 1] + 1;
  }
  r.improvement = best;
  r.bottom_k = sorted_copy(bottom_k_indices(beta, k));
  r.agrees = r.best == r.bottom_k;
  return r;
}

// ---------------------------------------------------------------------------
// De-mixing target

/// c Sigma B_S g_S: the score the de-mixed estimator should recover.
inline std::vector<double> demix_target(const SyntheticWorld& w, std::span<const FeatureIndex> subset,
                                        std::span<const double> gate_values) {
  require(subset.size() == gate_values.size(), ErrorCode::kDimensionMismatch, "g_S must match S");
  const Eigen::MatrixXd loading = w.loading();
  std::vector<double> out(w.d, 0.0);
  for (std::size_t a = 0; a < subset.size(); ++a)
    for (std::size_t j = 0; j < w.d; ++j)
      out[j] += loading(static_cast<Eigen::Index>(j), subset[a]) * gate_values[a];
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic trace corpus for end-to-end runs

struct CorpusOptions {
  std::size_t d = 8;            // d_model = d_sae (identity SAEs)
  std::size_t triples = 16;
  std::size_t prompt_len = 6;
  std::size_t response_len = 5;
  std::uint64_t seed = 1;
  std::string input_tag = "layer_in";
  std::string output_tag = "layer_out";
};

/// Triples whose hidden states are +-1 per coordinate, so identity ReLU SAEs
/// see feature j active exactly where coordinate j is +1. Each prompt has its
/// own per-feature activity rate, which the chosen response tracks more
/// closely than the rejected one.
inline std::vector<PreferenceTriple> synthetic_corpus(const CorpusOptions& o) {
  require(o.d >= 1 && o.prompt_len >= 1 && o.response_len >= 1, ErrorCode::kInvalidArgument,
          "corpus dimensions must be >= 1");
  std::vector<PreferenceTriple> out;
  out.reserve(o.triples);
  for (std::size_t k = 0; k < o.triples; ++k) {
    auto rng = stream_rng(o.seed, k);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> rate(o.d);
    for (auto& x : rate) x = u(rng);
    auto fill = [&](Matrix& m, std::size_t from, std::size_t to, auto&& prob) {
      for (std::size_t t = from; t < to; ++t)
        for (std::size_t j = 0; j < o.d; ++j) m(t, j) = u(rng) < prob(j) ? 1.0f : -1.0f;
    };
    const std::size_t total = o.prompt_len + o.response_len;
    Matrix prompt(o.prompt_len, o.d);
    fill(prompt, 0, o.prompt_len, [&](std::size_t j) { return rate[j]; });
    Matrix chosen(total, o.d), rejected(total, o.d);
    Matrix prompt_out(o.prompt_len, o.d);
    fill(prompt_out, 0, o.prompt_len, [&](std::size_t j) { return rate[j]; });
    for (std::size_t t = 0; t < o.prompt_len; ++t)
      for (std::size_t j = 0; j < o.d; ++j) chosen(t, j) = rejected(t, j) = prompt_out(t, j);
    fill(chosen, o.prompt_len, total, [&](std::size_t j) { return rate[j]; });
    fill(rejected, o.prompt_len, total, [&](std::size_t j) { return 1.0 - rate[j]; });
    out.push_back({"t" + std::to_string(k),
                   {o.input_tag, o.prompt_len, std::move(prompt)},
                   {o.output_tag, o.prompt_len, std::move(chosen)},
                   {o.output_tag, o.prompt_len, std::move(rejected)}});
  }
  return out;
}

/// Writes each triple's traces plus a manifest with relative paths.
inline std::filesystem::path write_corpus(const std::vector<PreferenceTriple>& triples,
                                          const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<TripleRecord> records;
  for (const auto& t : triples) {
    TripleRecord r{t.id, t.id + ".prompt.dspa", t.id + ".chosen.dspa", t.id + ".rejected.dspa"};
    write_trace(t.prompt, dir / r.prompt);
    write_trace(t.chosen, dir / r.chosen);
    write_trace(t.rejected, dir / r.rejected);
    records.push_back(std::move(r));
  }
  const auto manifest = dir / "manifest.json";
  write_manifest(records, manifest);
  return manifest;
}

}  // namespace dspa::theory
