#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dspa/binary_io.hpp"
#include "dspa/csr.hpp"
#include "dspa/density.hpp"
#include "dspa/error.hpp"
#include "dspa/parallel.hpp"
#include "dspa/sae.hpp"
#include "dspa/trace.hpp"

namespace dspa {

/// Nonzero entries of a response-density difference, columns ascending.
struct SparseDelta {
  std::vector<FeatureIndex> cols;
  std::vector<double> values;
};

/// chosen - rejected, evaluated exactly in f64.
inline SparseDelta density_difference(std::span<const float> chosen, std::span<const float> rejected) {
  require(chosen.size() == rejected.size(), ErrorCode::kDimensionMismatch, "density widths differ");
  SparseDelta out;
  for (std::size_t j = 0; j < chosen.size(); ++j) {
    double v = static_cast<double>(chosen[j]) - static_cast<double>(rejected[j]);
    if (v != 0.0) {
      out.cols.push_back(static_cast<FeatureIndex>(j));
      out.values.push_back(v);
    }
  }
  return out;
}

inline SparseDelta sparse_from_dense(std::span<const double> dense) {
  SparseDelta out;
  for (std::size_t j = 0; j < dense.size(); ++j) {
    if (dense[j] != 0.0) {
      out.cols.push_back(static_cast<FeatureIndex>(j));
      out.values.push_back(dense[j]);
    }
  }
  return out;
}

/// Unnormalized accumulation of sum_k g(x_k) delta_k^T over a run of triples,
/// stored row-wise with f64 sums. Entries that sum to exactly zero are not
/// stored.
struct PartialMap {
  std::size_t d = 0;
  std::uint64_t count = 0;
  std::vector<std::uint64_t> gate_support;
  std::vector<std::uint64_t> row_ptr{0};
  std::vector<FeatureIndex> col_idx;
  std::vector<double> sums;
  /// Thresholds the gates were derived from; empty when gates were supplied
  /// directly.
  std::vector<float> tau;
};

/// Accumulates the samples in order. Every entry's sum is formed in sample
/// order, so the result does not depend on how rows are visited.
inline PartialMap accumulate_partial(std::size_t d, std::span<const GateVector> gates,
                                     std::span<const SparseDelta> deltas, std::vector<float> tau = {}) {
  require(gates.size() == deltas.size(), ErrorCode::kDimensionMismatch, "gate and delta counts differ");
  PartialMap p;
  p.d = d;
  p.count = gates.size();
  p.gate_support.assign(d, 0);
  p.tau = std::move(tau);

  // Transpose: for each row i, the samples (ascending) with g_i = 1.
  std::vector<std::vector<std::uint32_t>> gated(d);
  for (std::size_t k = 0; k < gates.size(); ++k) {
    require(gates[k].size() == d, ErrorCode::kDimensionMismatch, "gate vector has wrong width");
    for (std::size_t i = 0; i < d; ++i)
      if (gates[k][i]) gated[i].push_back(static_cast<std::uint32_t>(k));
    for (auto c : deltas[k].cols) require(c < d, ErrorCode::kDimensionMismatch, "delta column out of range");
  }

  std::vector<double> scratch(d, 0.0);
  std::vector<std::uint8_t> touched(d, 0);
  std::vector<FeatureIndex> touched_cols;
  for (std::size_t i = 0; i < d; ++i) {
    p.gate_support[i] = gated[i].size();
    for (auto k : gated[i]) {
      const auto& delta = deltas[k];
      for (std::size_t e = 0; e < delta.cols.size(); ++e) {
        auto c = delta.cols[e];
        if (!touched[c]) {
          touched[c] = 1;
          touched_cols.push_back(c);
        }
        scratch[c] += delta.values[e];
      }
    }
    std::sort(touched_cols.begin(), touched_cols.end());
    for (auto c : touched_cols) {
      if (scratch[c] != 0.0) {
        p.col_idx.push_back(c);
        p.sums.push_back(scratch[c]);
      }
      scratch[c] = 0.0;
      touched[c] = 0;
    }
    touched_cols.clear();
    p.row_ptr.push_back(p.sums.size());
  }
  return p;
}

/// Entrywise a + b. Rejects parts built under different thresholds.
inline PartialMap merge_two(const PartialMap& a, const PartialMap& b) {
  require(a.d == b.d, ErrorCode::kDimensionMismatch, "partial maps have different widths");
  require(a.tau == b.tau, ErrorCode::kThresholdMismatch, "partial maps were built with different gate thresholds");
  PartialMap out;
  out.d = a.d;
  out.count = a.count + b.count;
  out.tau = a.tau;
  out.gate_support.resize(a.d);
  for (std::size_t i = 0; i < a.d; ++i) out.gate_support[i] = a.gate_support[i] + b.gate_support[i];
  out.col_idx.reserve(std::max(a.sums.size(), b.sums.size()));
  out.sums.reserve(std::max(a.sums.size(), b.sums.size()));
  for (std::size_t i = 0; i < a.d; ++i) {
    auto ea = a.row_ptr[i], enda = a.row_ptr[i + 1];
    auto eb = b.row_ptr[i], endb = b.row_ptr[i + 1];
    auto emit = [&](FeatureIndex c, double v) {
      if (v != 0.0) {
        out.col_idx.push_back(c);
        out.sums.push_back(v);
      }
    };
    while (ea < enda || eb < endb) {
      if (eb == endb || (ea < enda && a.col_idx[ea] < b.col_idx[eb])) {
        emit(a.col_idx[ea], a.sums[ea]);
        ++ea;
      } else if (ea == enda || b.col_idx[eb] < a.col_idx[ea]) {
        emit(b.col_idx[eb], b.sums[eb]);
        ++eb;
      } else {
        emit(a.col_idx[ea], a.sums[ea] + b.sums[eb]);
        ++ea;
        ++eb;
      }
    }
    out.row_ptr.push_back(out.sums.size());
  }
  return out;
}

/// Reduces parts with a fixed binary tree over part indices: adjacent pairs
/// (0,1), (2,3), ... are merged level by level and an odd trailing part is
/// carried up unchanged.
inline PartialMap merge_partial_maps(std::vector<PartialMap> parts) {
  require(!parts.empty(), ErrorCode::kEmptyInput, "no partial maps to merge");
  while (parts.size() > 1) {
    std::vector<PartialMap> next;
    next.reserve((parts.size() + 1) / 2);
    for (std::size_t i = 0; i + 1 < parts.size(); i += 2) next.push_back(merge_two(parts[i], parts[i + 1]));
    if (parts.size() % 2 == 1) next.push_back(std::move(parts.back()));
    parts = std::move(next);
  }
  return std::move(parts.front());
}

/// Streaming form of merge_partial_maps: pushing parts in index order and
/// calling finish() yields the same tree, holding O(log n) parts at a time.
class TreeReducer {
 public:
  void push(PartialMap part) {
    std::size_t level = 0;
    while (level < levels_.size() && levels_[level]) {
      part = merge_two(*levels_[level], part);
      levels_[level].reset();
      ++level;
    }
    if (level == levels_.size()) levels_.emplace_back();
    levels_[level] = std::move(part);
  }

  PartialMap finish() {
    std::optional<PartialMap> acc;
    for (auto& slot : levels_) {
      if (!slot) continue;
      acc = acc ? merge_two(*slot, *acc) : std::move(*slot);
      slot.reset();
    }
    require(acc.has_value(), ErrorCode::kEmptyInput, "no partial maps to merge");
    return std::move(*acc);
  }

 private:
  std::vector<std::optional<PartialMap>> levels_;
};

/// The conditional-difference map plus everything needed to audit it.
struct DiffMap {
  CsrMatrix a;  // row = input feature i, column = output feature j
  std::uint64_t n = 0;
  GateThresholds thresholds;
  std::vector<std::uint64_t> gate_support;
  double sparsify_tau = 0.0;
  std::uint64_t support_floor = 5;
  std::string input_layer_tag;
  std::string output_layer_tag;

  std::size_t d_sae() const noexcept { return a.rows; }

  std::vector<FeatureIndex> low_support_rows() const {
    std::vector<FeatureIndex> rows;
    for (std::size_t i = 0; i < gate_support.size(); ++i)
      if (gate_support[i] < support_floor) rows.push_back(static_cast<FeatureIndex>(i));
    return rows;
  }

  friend bool operator==(const DiffMap&, const DiffMap&) = default;
};

/// Divides the accumulated sums by the triple count and rounds to f32.
inline DiffMap finalize_map(const PartialMap& p, GateThresholds thresholds = {}) {
  require(p.count > 0, ErrorCode::kEmptyInput, "cannot finalize a map built from zero triples");
  DiffMap m;
  m.n = p.count;
  m.thresholds = std::move(thresholds);
  m.gate_support = p.gate_support;
  m.a.rows = p.d;
  m.a.cols = p.d;
  m.a.row_ptr.assign(1, 0);
  const double n = static_cast<double>(p.count);
  for (std::size_t i = 0; i < p.d; ++i) {
    for (auto e = p.row_ptr[i]; e < p.row_ptr[i + 1]; ++e) {
      float v = static_cast<float>(p.sums[e] / n);
      if (v != 0.0f) {
        m.a.col_idx.push_back(p.col_idx[e]);
        m.a.values.push_back(v);
      }
    }
    m.a.row_ptr.push_back(m.a.values.size());
  }
  return m;
}

struct BuildOptions {
  double percentile = 75.0;
  unsigned threads = 1;
  /// Triples per accumulation block. Fixes the reduction tree, so it must not
  /// depend on the thread count.
  std::size_t block_size = 64;
  std::uint64_t support_floor = 5;
};

/// Triples held in memory.
class InMemoryTriples {
 public:
  explicit InMemoryTriples(std::span<const PreferenceTriple> triples) : triples_(triples) {}

  std::size_t size() const noexcept { return triples_.size(); }
  const std::string& id(std::size_t k) const { return triples_[k].id; }

  template <typename Fn>
  void visit_prompt(std::size_t k, Fn&& fn) const {
    validate_triple(triples_[k]);
    fn(triples_[k].prompt);
  }
  template <typename Fn>
  void visit_responses(std::size_t k, Fn&& fn) const {
    fn(triples_[k].chosen, triples_[k].rejected);
  }

 private:
  std::span<const PreferenceTriple> triples_;
};

/// Triples read from disk on demand, one pass per layer.
class ManifestTriples {
 public:
  explicit ManifestTriples(std::vector<TripleRecord> records) : records_(std::move(records)) {}

  std::size_t size() const noexcept { return records_.size(); }
  const std::string& id(std::size_t k) const { return records_[k].id; }

  template <typename Fn>
  void visit_prompt(std::size_t k, Fn&& fn) const {
    auto prompt = load(k, records_[k].prompt);
    if (prompt.prompt_len != prompt.token_count())
      fail(ErrorCode::kInvalidTriple, "triple \"" + records_[k].id + "\": prompt trace must be prompt-only (T_x = T)");
    fn(prompt);
  }
  template <typename Fn>
  void visit_responses(std::size_t k, Fn&& fn) const {
    auto chosen = load(k, records_[k].chosen);
    auto rejected = load(k, records_[k].rejected);
    validate_responses(records_[k].id, chosen, rejected);
    fn(chosen, rejected);
  }

 private:
  ActivationTrace load(std::size_t k, const std::filesystem::path& p) const {
    if (!std::filesystem::exists(p))
      fail(ErrorCode::kIo, "triple \"" + records_[k].id + "\": missing file " + p.string());
    return read_trace(p);
  }

  std::vector<TripleRecord> records_;
};

/// A source of triples visited by index, either in memory or streamed.
template <typename S>
concept TripleSource = requires(const S& s, std::size_t k) {
  { s.size() } -> std::convertible_to<std::size_t>;
  { s.id(k) };
};

/// Two passes: fit gate thresholds on all prompt densities, then accumulate
/// A_ij = (1/N) sum_k g_i(x_k) (rho~_j(x_k, y_k+) - rho~_j(x_k, y_k-)).
template <TripleSource Source>
DiffMap build_map(const Source& source, const SaeParams& input_sae, const SaeParams& output_sae,
                  const BuildOptions& options = {}) {
  const std::size_t n = source.size();
  require(n > 0, ErrorCode::kEmptyInput, "cannot build a map from zero triples");
  require(input_sae.d_sae() == output_sae.d_sae(), ErrorCode::kDimensionMismatch,
          "input and output SAEs must have the same width");
  require(options.block_size > 0, ErrorCode::kInvalidArgument, "block size must be positive");
  const std::size_t d = input_sae.d_sae();

  std::vector<DensityVector> prompt_density(n);
  std::vector<std::string> input_tags(n);
  parallel_for(n, options.threads, [&](std::size_t k) {
    source.visit_prompt(k, [&](const ActivationTrace& prompt) {
      prompt_density[k] = density(input_sae, prompt, Segment::kPrompt);
      input_tags[k] = prompt.layer_tag;
    });
  });
  for (std::size_t k = 0; k < n; ++k)
    require(input_tags[k] == input_tags[0], ErrorCode::kInvalidTriple,
            "triple \"" + source.id(k) + "\": prompt layer tag \"" + input_tags[k] + "\" differs from \"" +
                input_tags[0] + "\"");

  GateThresholds thresholds = fit_thresholds(prompt_density, options.percentile, options.threads);
  std::vector<GateVector> gates(n);
  for (std::size_t k = 0; k < n; ++k) gates[k] = gate(prompt_density[k], thresholds);
  prompt_density.clear();
  prompt_density.shrink_to_fit();

  const std::size_t blocks = (n + options.block_size - 1) / options.block_size;
  const std::size_t wave = std::max(1u, options.threads);
  std::vector<std::string> output_tags(n);
  TreeReducer reducer;
  for (std::size_t first = 0; first < blocks; first += wave) {
    const std::size_t count = std::min(wave, blocks - first);
    std::vector<PartialMap> parts(count);
    parallel_for(count, options.threads, [&](std::size_t w) {
      const std::size_t begin = (first + w) * options.block_size;
      const std::size_t end = std::min(n, begin + options.block_size);
      std::vector<SparseDelta> deltas(end - begin);
      for (std::size_t k = begin; k < end; ++k) {
        source.visit_responses(k, [&](const ActivationTrace& chosen, const ActivationTrace& rejected) {
          auto plus = density(output_sae, chosen, Segment::kResponse);
          auto minus = density(output_sae, rejected, Segment::kResponse);
          deltas[k - begin] = density_difference(plus.values, minus.values);
          output_tags[k] = chosen.layer_tag;
          if (rejected.layer_tag != chosen.layer_tag)
            fail(ErrorCode::kInvalidTriple, "triple \"" + source.id(k) + "\": chosen and rejected layer tags differ");
        });
      }
      parts[w] = accumulate_partial(d, std::span<const GateVector>(gates).subspan(begin, end - begin), deltas,
                                    thresholds.tau);
    });
    for (auto& part : parts) reducer.push(std::move(part));
  }
  for (std::size_t k = 0; k < n; ++k)
    require(output_tags[k] == output_tags[0], ErrorCode::kInvalidTriple,
            "triple \"" + source.id(k) + "\": response layer tag differs from \"" + output_tags[0] + "\"");

  DiffMap map = finalize_map(reducer.finish(), std::move(thresholds));
  map.support_floor = options.support_floor;
  map.input_layer_tag = input_tags[0];
  map.output_layer_tag = output_tags[0];
  return map;
}

inline DiffMap build_map(std::span<const PreferenceTriple> triples, const SaeParams& input_sae,
                         const SaeParams& output_sae, const BuildOptions& options = {}) {
  return build_map(InMemoryTriples(triples), input_sae, output_sae, options);
}

/// k-th largest (descending = true) or k-th smallest element of a row whose
/// unstored entries are zero.
inline float row_order_statistic(std::span<const float> stored, std::size_t row_width, std::size_t k,
                                 bool descending) {
  std::vector<float> v(stored.begin(), stored.end());
  std::size_t zeros = row_width - stored.size();
  if (descending) std::sort(v.begin(), v.end(), std::greater<>());
  else std::sort(v.begin(), v.end());
  // Entries strictly before the zero block in this ordering.
  auto ahead = static_cast<std::size_t>(std::count_if(
      v.begin(), v.end(), [&](float x) { return descending ? x > 0.0f : x < 0.0f; }));
  if (k <= ahead) return v[k - 1];
  if (k <= ahead + zeros) return 0.0f;
  return v[k - 1 - zeros];
}

/// Zeroes every entry whose magnitude falls below
///   tau = min |A_ij| over nonzero A_ij with A_ij >= A_i,(k) or A_ij <= A_i,(-k),
/// where A_i,(k) and A_i,(-k) are the k-th largest and smallest entries of row
/// i (unstored entries count as zeros). The k largest and k smallest entries
/// of every row therefore survive unchanged.
inline DiffMap sparsify(const DiffMap& map, std::size_t k_diff) {
  const std::size_t d = map.a.cols;
  require(k_diff >= 1 && k_diff <= d, ErrorCode::kInvalidArgument,
          "k_diff = " + std::to_string(k_diff) + " must lie in [1, d_sae = " + std::to_string(d) + "]");
  float tau = std::numeric_limits<float>::infinity();
  for (std::size_t i = 0; i < map.a.rows; ++i) {
    auto vs = map.a.row_values(i);
    if (vs.empty()) continue;
    float upper = row_order_statistic(vs, d, k_diff, true);
    float lower = row_order_statistic(vs, d, k_diff, false);
    for (float v : vs)
      if (v >= upper || v <= lower) tau = std::min(tau, std::fabs(v));
  }
  if (!std::isfinite(tau)) tau = 0.0f;

  DiffMap out = map;
  out.sparsify_tau = tau;
  out.a.col_idx.clear();
  out.a.values.clear();
  out.a.row_ptr.assign(1, 0);
  for (std::size_t i = 0; i < map.a.rows; ++i) {
    auto cs = map.a.row_cols(i);
    auto vs = map.a.row_values(i);
    for (std::size_t e = 0; e < cs.size(); ++e) {
      if (std::fabs(vs[e]) >= tau) {
        out.a.col_idx.push_back(cs[e]);
        out.a.values.push_back(vs[e]);
      }
    }
    out.a.row_ptr.push_back(out.a.values.size());
  }
  return out;
}

/// Empirical gate Gram matrix restricted to `features` (all features when
/// constructed by estimate_gram without a subset). Row-major |S| x |S|.
struct GramMatrix {
  std::vector<FeatureIndex> features;
  std::vector<double> m;
  std::uint64_t n = 0;

  std::size_t size() const noexcept { return features.size(); }
  double operator()(std::size_t a, std::size_t b) const { return m[a * features.size() + b]; }

  GramMatrix restrict_to(std::span<const FeatureIndex> subset) const {
    GramMatrix out{{subset.begin(), subset.end()}, std::vector<double>(subset.size() * subset.size()), n};
    std::vector<std::size_t> pos(subset.size());
    for (std::size_t a = 0; a < subset.size(); ++a) {
      auto it = std::find(features.begin(), features.end(), subset[a]);
      require(it != features.end(), ErrorCode::kInvalidArgument,
              "feature " + std::to_string(subset[a]) + " is not covered by this Gram matrix");
      pos[a] = static_cast<std::size_t>(it - features.begin());
    }
    for (std::size_t a = 0; a < subset.size(); ++a)
      for (std::size_t b = 0; b < subset.size(); ++b) out.m[a * subset.size() + b] = (*this)(pos[a], pos[b]);
    return out;
  }
};

/// M_S = (1/N) sum_k g_S(x_k) g_S(x_k)^T from co-occurrence counts.
inline GramMatrix estimate_gram(std::span<const GateVector> gates, std::span<const FeatureIndex> features) {
  require(!gates.empty(), ErrorCode::kEmptyInput, "cannot estimate a Gram matrix from zero gate vectors");
  const std::size_t s = features.size();
  std::vector<std::uint64_t> counts(s * s, 0);
  for (const auto& g : gates) {
    for (std::size_t a = 0; a < s; ++a) {
      require(features[a] < g.size(), ErrorCode::kDimensionMismatch, "feature index exceeds gate width");
      if (!g[features[a]]) continue;
      for (std::size_t b = 0; b < s; ++b) counts[a * s + b] += g[features[b]] ? 1 : 0;
    }
  }
  GramMatrix out{{features.begin(), features.end()}, std::vector<double>(s * s), gates.size()};
  const double n = static_cast<double>(gates.size());
  for (std::size_t e = 0; e < counts.size(); ++e) out.m[e] = static_cast<double>(counts[e]) / n;
  return out;
}

inline GramMatrix estimate_gram(std::span<const GateVector> gates) {
  require(!gates.empty(), ErrorCode::kEmptyInput, "cannot estimate a Gram matrix from zero gate vectors");
  std::vector<FeatureIndex> all(gates.front().size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<FeatureIndex>(i);
  return estimate_gram(gates, all);
}

// ---------------------------------------------------------------------------
// "DSPM" map file:
//   "DSPM" | u32 version (1) | u64 metadata length | metadata JSON |
//   row_ptr u64[d_sae + 1] | col_idx u32[nnz] | values f32[nnz]

inline constexpr char kMapMagic[4] = {'D', 'S', 'P', 'M'};
inline constexpr std::uint32_t kMapVersion = 1;

inline nlohmann::json map_metadata(const DiffMap& m) {
  return {{"schema_version", 1},
          {"kind", "diff_map"},
          {"N", m.n},
          {"percentile", m.thresholds.percentile},
          {"fit_count", m.thresholds.fit_count},
          {"sparsify_tau", m.sparsify_tau},
          {"input_layer_tag", m.input_layer_tag},
          {"output_layer_tag", m.output_layer_tag},
          {"d_sae", m.d_sae()},
          {"nnz", m.a.nnz()},
          {"gate_support", m.gate_support},
          {"support_floor", m.support_floor},
          {"low_support_rows", m.low_support_rows()},
          {"tau", m.thresholds.tau}};
}

inline std::vector<char> encode_map(const DiffMap& m) {
  const std::string json = map_metadata(m).dump();
  io::ByteWriter w;
  w.bytes(std::string_view(kMapMagic, 4));
  w.uint<std::uint32_t>(kMapVersion);
  w.uint<std::uint64_t>(json.size());
  w.bytes(json);
  for (auto v : m.a.row_ptr) w.uint<std::uint64_t>(v);
  for (auto c : m.a.col_idx) w.uint<std::uint32_t>(c);
  w.f32s(m.a.values);
  return w.buffer();
}

inline DiffMap decode_map(std::span<const char> bytes) {
  io::ByteReader r(bytes);
  if (r.bytes(4) != std::string_view(kMapMagic, 4)) fail(ErrorCode::kBadMagic, "expected \"DSPM\"");
  auto version = r.uint<std::uint32_t>();
  if (version != kMapVersion) fail(ErrorCode::kBadVersion, "map version " + std::to_string(version));
  auto meta_text = r.bytes(r.uint<std::uint64_t>());
  DiffMap m;
  std::size_t d = 0, nnz = 0;
  try {
    auto meta = nlohmann::json::parse(meta_text);
    m.n = meta.at("N").get<std::uint64_t>();
    m.thresholds.percentile = meta.at("percentile").get<double>();
    m.thresholds.fit_count = meta.at("fit_count").get<std::size_t>();
    m.thresholds.tau = meta.at("tau").get<std::vector<float>>();
    m.sparsify_tau = meta.at("sparsify_tau").get<double>();
    m.input_layer_tag = meta.at("input_layer_tag").get<std::string>();
    m.output_layer_tag = meta.at("output_layer_tag").get<std::string>();
    m.gate_support = meta.at("gate_support").get<std::vector<std::uint64_t>>();
    m.support_floor = meta.value("support_floor", std::uint64_t{5});
    d = meta.at("d_sae").get<std::size_t>();
    nnz = meta.at("nnz").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kMalformedMetadata, std::string("map metadata: ") + e.what());
  }
  require(m.gate_support.size() == d, ErrorCode::kDimensionMismatch, "gate_support length differs from d_sae");
  require(m.thresholds.tau.empty() || m.thresholds.tau.size() == d, ErrorCode::kDimensionMismatch,
          "tau length differs from d_sae");
  const std::size_t remaining = r.remaining();
  if (d >= remaining / sizeof(std::uint64_t) || nnz > remaining / 8 ||
      (d + 1) * sizeof(std::uint64_t) + nnz * 8 > remaining)
    fail(ErrorCode::kTruncated, "map arrays extend past end of data");
  m.a.rows = m.a.cols = d;
  m.a.row_ptr.resize(d + 1);
  for (auto& v : m.a.row_ptr) v = r.uint<std::uint64_t>();
  m.a.col_idx.resize(nnz);
  for (auto& c : m.a.col_idx) c = r.uint<std::uint32_t>();
  m.a.values.resize(nnz);
  r.f32s(m.a.values);
  require(r.remaining() == 0, ErrorCode::kMalformedMetadata, "trailing bytes after map values");
  m.a.validate();
  return m;
}

inline void write_map(const DiffMap& m, const std::filesystem::path& path) { io::write_file(path, encode_map(m)); }

inline DiffMap read_map(const std::filesystem::path& path) { return decode_map(io::read_file(path)); }

}  // namespace dspa
