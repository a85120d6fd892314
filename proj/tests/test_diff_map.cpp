#include <gtest/gtest.h>

#include <cmath>

#include "dspa/binary_io.hpp"
#include "dspa/diff_map.hpp"
#include "dspa/fixtures.hpp"
#include "dspa/theory.hpp"
#include "test_util.hpp"

using namespace dspa;
using dspa::testing::error_code_of;
using dspa::testing::Gen;
using dspa::testing::TempDir;

namespace {

/// Independent oracle: densities by direct counting, nearest-rank thresholds
/// by full sort, then the averaging formula in long double.
std::vector<std::vector<long double>> oracle_map(const std::vector<PreferenceTriple>& triples, const SaeParams& in,
                                                 const SaeParams& out, double percentile) {
  const std::size_t d = in.d_sae(), n = triples.size();
  auto count_density = [](const SaeParams& sae, const ActivationTrace& t, std::size_t from, std::size_t to) {
    std::vector<float> rho(sae.d_sae(), 0.0f);
    std::vector<std::size_t> c(sae.d_sae(), 0);
    for (std::size_t tok = from; tok < to; ++tok) {
      const auto f = sae.encode(t.hidden.row(tok));
      for (std::size_t j = 0; j < f.size(); ++j) c[j] += f[j] > 0.0f;
    }
    for (std::size_t j = 0; j < rho.size(); ++j) rho[j] = static_cast<float>(double(c[j]) / double(to - from));
    return rho;
  };
  std::vector<std::vector<float>> prompt(n);
  for (std::size_t k = 0; k < n; ++k) prompt[k] = count_density(in, triples[k].prompt, 0, triples[k].prompt.prompt_len);
  const auto rank = static_cast<std::size_t>(std::ceil(percentile * double(n) / 100.0));
  std::vector<float> tau(d);
  for (std::size_t i = 0; i < d; ++i) {
    std::vector<float> col;
    for (const auto& p : prompt) col.push_back(p[i]);
    std::sort(col.begin(), col.end());
    tau[i] = col[std::clamp<std::size_t>(rank, 1, n) - 1];
  }
  std::vector<std::vector<long double>> a(d, std::vector<long double>(d, 0.0L));
  for (std::size_t k = 0; k < n; ++k) {
    const auto& c = triples[k].chosen;
    const auto& r = triples[k].rejected;
    const auto plus = count_density(out, c, c.prompt_len, c.token_count());
    const auto minus = count_density(out, r, r.prompt_len, r.token_count());
    for (std::size_t i = 0; i < d; ++i) {
      if (prompt[k][i] < tau[i]) continue;
      for (std::size_t j = 0; j < d; ++j)
        a[i][j] += static_cast<long double>(plus[j]) - static_cast<long double>(minus[j]);
    }
  }
  for (auto& row : a)
    for (auto& x : row) x /= static_cast<long double>(n);
  return a;
}

DiffMap dense_map(std::size_t rows, std::size_t cols, std::vector<float> values) {
  DiffMap m;
  m.a = CsrMatrix::from_dense(Matrix(rows, cols, std::move(values)));
  m.n = 1;
  m.gate_support.assign(rows, 1);
  return m;
}

}  // namespace

TEST(BuildMap, ToyHandExample) {
  const auto triples = fixtures::toy_triples();
  const auto sae = SaeParams::identity(2);
  const auto map = build_map(triples, sae, sae);
  const auto a = map.a.to_dense();
  EXPECT_FLOAT_EQ(a(0, 0), 0.2f);
  EXPECT_FLOAT_EQ(a(0, 1), 0.2f);
  EXPECT_EQ(a(1, 0), 0.0f);
  EXPECT_FLOAT_EQ(a(1, 1), 0.3f);
  EXPECT_EQ(map.a.nnz(), 3u);
  EXPECT_EQ(map.n, 2u);
  EXPECT_EQ(map.gate_support, (std::vector<std::uint64_t>{2, 1}));
  EXPECT_EQ(map.thresholds.tau, (std::vector<float>{1.0f, 1.0f}));
  EXPECT_EQ(map.input_layer_tag, fixtures::kInputTag);
  EXPECT_EQ(map.output_layer_tag, fixtures::kOutputTag);
  EXPECT_EQ(map.low_support_rows(), (std::vector<FeatureIndex>{0, 1}));
}

TEST(BuildMap, IdenticalResponsesGiveZeroMap) {
  auto triples = fixtures::toy_triples();
  for (auto& t : triples) t.rejected = t.chosen;
  const auto sae = SaeParams::identity(2);
  const auto map = build_map(triples, sae, sae);
  EXPECT_EQ(map.a.nnz(), 0u);
}

TEST(BuildMap, SingleAllOnTripleBroadcastsDelta) {
  auto t = fixtures::toy_triples()[0];
  t.prompt = fixtures::make_trace(fixtures::kInputTag, 1, {{1.0f, 1.0f}});
  const auto sae = SaeParams::identity(2);
  const auto map = build_map(std::vector<PreferenceTriple>{t}, sae, sae);
  const auto a = map.a.to_dense();
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(a(i, 0), 0.4f);
    EXPECT_EQ(a(i, 1), static_cast<float>(0.0 - static_cast<double>(0.2f)));
  }
}

TEST(BuildMap, Errors) {
  const auto sae = SaeParams::identity(2);
  EXPECT_EQ(error_code_of([&] { build_map(std::vector<PreferenceTriple>{}, sae, sae); }), ErrorCode::kEmptyInput);
  EXPECT_EQ(error_code_of([&] { build_map(fixtures::toy_triples(), SaeParams::identity(3), sae); }),
            ErrorCode::kDimensionMismatch);
  const SaeParams wide(Matrix(3, 2), {0, 0, 0}, Matrix(2, 3), {0, 0}, Relu{});
  EXPECT_EQ(error_code_of([&] { build_map(fixtures::toy_triples(), sae, wide); }), ErrorCode::kDimensionMismatch);
  auto mixed = fixtures::toy_triples();
  mixed[1].chosen.layer_tag = mixed[1].rejected.layer_tag = "other";
  EXPECT_EQ(error_code_of([&] { build_map(mixed, sae, sae); }), ErrorCode::kInvalidTriple);
}

TEST(BuildMap, MatchesOracleOnRandomCorpora) {
  Gen gen(1);
  for (int trial = 0; trial < 30; ++trial) {
    theory::CorpusOptions o;
    o.d = gen.index(1, 12);
    o.triples = gen.index(1, 150);
    o.prompt_len = gen.index(1, 7);
    o.response_len = gen.index(1, 7);
    o.seed = static_cast<std::uint64_t>(trial);
    const auto triples = theory::synthetic_corpus(o);
    const auto sae = SaeParams::identity(o.d);
    const double p = gen.uniform_d(1.0, 100.0);
    BuildOptions options;
    options.percentile = p;
    options.block_size = gen.index(1, 70);
    options.threads = static_cast<unsigned>(gen.index(1, 4));
    const auto map = build_map(triples, sae, sae, options);
    const auto oracle = oracle_map(triples, sae, sae, p);
    const auto a = map.a.to_dense();
    for (std::size_t i = 0; i < o.d; ++i)
      for (std::size_t j = 0; j < o.d; ++j)
        EXPECT_NEAR(a(i, j), static_cast<double>(oracle[i][j]), 1e-6) << "trial " << trial;
  }
}

TEST(BuildMap, ResultIndependentOfThreadsAndBlockingWithinBlockSize) {
  theory::CorpusOptions o;
  o.d = 16;
  o.triples = 300;
  const auto triples = theory::synthetic_corpus(o);
  const auto sae = SaeParams::identity(o.d);
  BuildOptions base;
  const auto reference = encode_map(build_map(triples, sae, sae, base));
  for (unsigned threads : {2u, 3u, 8u}) {
    BuildOptions opt = base;
    opt.threads = threads;
    EXPECT_EQ(encode_map(build_map(triples, sae, sae, opt)), reference) << threads << " threads";
  }
}

TEST(BuildMap, ManifestSourceMatchesInMemory) {
  TempDir dir;
  theory::CorpusOptions o;
  o.d = 6;
  o.triples = 40;
  const auto triples = theory::synthetic_corpus(o);
  const auto manifest = theory::write_corpus(triples, dir.path());
  const auto sae = SaeParams::identity(o.d);
  BuildOptions opt;
  opt.block_size = 7;
  opt.threads = 3;
  EXPECT_EQ(build_map(ManifestTriples(read_manifest(manifest)), sae, sae, opt), build_map(triples, sae, sae, opt));
}

TEST(BuildMap, ScaleEquivarianceOfAccumulation) {
  Gen gen(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = gen.index(1, 8), n = gen.index(1, 30);
    std::vector<GateVector> gates;
    std::vector<SparseDelta> deltas, scaled;
    for (std::size_t k = 0; k < n; ++k) {
      GateVector g(d);
      for (auto& x : g) x = gen.coin(0.4);
      gates.push_back(g);
      std::vector<double> delta(d);
      for (auto& x : delta) x = static_cast<double>(gen.uniform(-1.0f, 1.0f));
      deltas.push_back(sparse_from_dense(delta));
      for (auto& x : delta) x *= 4.0;  // power of two keeps scaling exact
      scaled.push_back(sparse_from_dense(delta));
    }
    const auto a = finalize_map(accumulate_partial(d, gates, deltas)).a.to_dense();
    const auto b = finalize_map(accumulate_partial(d, gates, scaled)).a.to_dense();
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(b(i, j), 4.0f * a(i, j));
    // Rows never gated are identically zero.
    const auto m = finalize_map(accumulate_partial(d, gates, deltas));
    for (std::size_t i = 0; i < d; ++i)
      if (m.gate_support[i] == 0) {
        EXPECT_TRUE(m.a.row_cols(i).empty());
      }
  }
}

TEST(MergePartialMaps, SinglePartIsIdentityAndPairsMatchSequential) {
  const std::size_t d = 3;
  std::vector<GateVector> gates = {{1, 0, 1}, {1, 1, 0}};
  std::vector<SparseDelta> deltas = {sparse_from_dense(std::vector<double>{0.25, -0.5, 0.0}),
                                     sparse_from_dense(std::vector<double>{0.125, 0.5, 1.0})};
  const auto whole = accumulate_partial(d, gates, deltas);
  const auto one = merge_partial_maps({whole});
  EXPECT_EQ(finalize_map(one), finalize_map(whole));
  const auto a = accumulate_partial(d, std::span(gates).subspan(0, 1), std::span(deltas).subspan(0, 1));
  const auto b = accumulate_partial(d, std::span(gates).subspan(1, 1), std::span(deltas).subspan(1, 1));
  EXPECT_EQ(finalize_map(merge_partial_maps({a, b})), finalize_map(whole));
}

TEST(MergePartialMaps, TreeReducerMatchesLevelwiseTree) {
  Gen gen(3);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t d = gen.index(1, 6), parts_count = gen.index(1, 20);
    std::vector<PartialMap> parts;
    for (std::size_t p = 0; p < parts_count; ++p) {
      std::vector<GateVector> gates;
      std::vector<SparseDelta> deltas;
      for (std::size_t k = 0, n = gen.index(1, 5); k < n; ++k) {
        GateVector g(d);
        for (auto& x : g) x = gen.coin(0.5);
        gates.push_back(g);
        std::vector<double> delta(d);
        for (auto& x : delta) x = static_cast<double>(gen.uniform(-1.0f, 1.0f)) / 3.0;
        deltas.push_back(sparse_from_dense(delta));
      }
      parts.push_back(accumulate_partial(d, gates, deltas));
    }
    TreeReducer reducer;
    for (const auto& p : parts) reducer.push(p);
    const auto streamed = reducer.finish();
    const auto tree = merge_partial_maps(parts);
    EXPECT_EQ(streamed.sums, tree.sums);
    EXPECT_EQ(streamed.col_idx, tree.col_idx);
    EXPECT_EQ(streamed.row_ptr, tree.row_ptr);
    EXPECT_EQ(streamed.count, tree.count);
  }
}

TEST(MergePartialMaps, RejectsMismatchedThresholdsAndEmpty) {
  std::vector<GateVector> g = {{1}};
  std::vector<SparseDelta> dl = {sparse_from_dense(std::vector<double>{0.5})};
  const auto a = accumulate_partial(1, g, dl, {0.5f});
  const auto b = accumulate_partial(1, g, dl, {0.25f});
  EXPECT_EQ(error_code_of([&] { merge_partial_maps({a, b}); }), ErrorCode::kThresholdMismatch);
  EXPECT_EQ(error_code_of([] { merge_partial_maps({}); }), ErrorCode::kEmptyInput);
  EXPECT_EQ(error_code_of([] { TreeReducer().finish(); }), ErrorCode::kEmptyInput);
}

TEST(Gram, HandExamples) {
  const std::vector<GateVector> gates = {{1, 0}, {1, 1}};
  const auto m = estimate_gram(gates);
  EXPECT_EQ(m(0, 0), 1.0);
  EXPECT_EQ(m(0, 1), 0.5);
  EXPECT_EQ(m(1, 0), 0.5);
  EXPECT_EQ(m(1, 1), 0.5);
  const auto zero = estimate_gram(std::vector<GateVector>{{0, 0}, {0, 0}});
  for (double x : zero.m) EXPECT_EQ(x, 0.0);
  const auto always = estimate_gram(std::vector<GateVector>{{1, 0}, {1, 1}, {1, 0}});
  EXPECT_EQ(always(0, 0), 1.0);
  EXPECT_EQ(error_code_of([] { estimate_gram(std::vector<GateVector>{}); }), ErrorCode::kEmptyInput);
  const auto sub = m.restrict_to(std::vector<FeatureIndex>{1});
  EXPECT_EQ(sub(0, 0), 0.5);
  EXPECT_EQ(error_code_of([&] { estimate_gram(gates, std::vector<FeatureIndex>{0}).restrict_to(std::vector<FeatureIndex>{1}); }),
            ErrorCode::kInvalidArgument);
}

TEST(Sparsify, HandExample) {
  const auto map = dense_map(2, 3, {0.5f, 0.1f, -0.4f, 0.2f, -0.3f, 0.05f});
  const auto s = sparsify(map, 1);
  EXPECT_FLOAT_EQ(static_cast<float>(s.sparsify_tau), 0.2f);
  const auto a = s.a.to_dense();
  EXPECT_EQ(a, Matrix(2, 3, {0.5f, 0.0f, -0.4f, 0.2f, -0.3f, 0.0f}));
  EXPECT_EQ(s.a.nnz(), 4u);
}

TEST(Sparsify, KEqualsWidthKeepsEverythingAndIsIdempotent) {
  const auto map = dense_map(2, 3, {0.5f, 0.1f, -0.4f, 0.2f, -0.3f, 0.05f});
  EXPECT_EQ(sparsify(map, 3).a, map.a);
  const auto once = sparsify(map, 1);
  const auto twice = sparsify(once, 1);
  EXPECT_EQ(twice.a, once.a);
  EXPECT_EQ(twice.sparsify_tau, once.sparsify_tau);
  EXPECT_EQ(error_code_of([&] { sparsify(map, 4); }), ErrorCode::kInvalidArgument);
  EXPECT_EQ(error_code_of([&] { sparsify(map, 0); }), ErrorCode::kInvalidArgument);
}

TEST(Sparsify, ZeroMapHasZeroThreshold) {
  const auto s = sparsify(dense_map(2, 2, {0, 0, 0, 0}), 1);
  EXPECT_EQ(s.sparsify_tau, 0.0);
  EXPECT_EQ(s.a.nnz(), 0u);
}

TEST(Sparsify, PreservesRowExtremesAndNeverChangesSurvivors) {
  Gen gen(4);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t rows = gen.index(1, 8), cols = gen.index(1, 12);
    std::vector<float> v(rows * cols);
    for (auto& x : v) x = gen.coin(0.3) ? 0.0f : gen.uniform(-1.0f, 1.0f);
    const auto map = dense_map(rows, cols, v);
    const std::size_t k = gen.index(1, cols);
    const auto s = sparsify(map, k);
    const auto before = map.a.to_dense(), after = s.a.to_dense();
    for (std::size_t i = 0; i < rows; ++i) {
      std::vector<float> row(before.row(i).begin(), before.row(i).end());
      std::vector<float> sorted = row;
      std::sort(sorted.begin(), sorted.end());
      const float kth_small = sorted[k - 1], kth_large = sorted[cols - k];
      for (std::size_t j = 0; j < cols; ++j) {
        if (after(i, j) != 0.0f) {
          EXPECT_EQ(after(i, j), row[j]);
        }
        if (row[j] >= kth_large || row[j] <= kth_small) {
          EXPECT_EQ(after(i, j), row[j]);
        }
      }
    }
  }
}

TEST(MapFile, RoundTripAndHeader) {
  TempDir dir;
  const auto sae = SaeParams::identity(2);
  auto map = build_map(fixtures::toy_triples(), sae, sae);
  write_map(map, dir / "m.dspm");
  EXPECT_EQ(read_map(dir / "m.dspm"), map);
  const auto bytes = io::read_file(dir / "m.dspm");
  EXPECT_EQ(std::string(bytes.data(), 4), "DSPM");
  io::ByteReader r(bytes);
  r.bytes(4);
  EXPECT_EQ(r.uint<std::uint32_t>(), 1u);
  const auto meta = nlohmann::json::parse(r.bytes(r.uint<std::uint64_t>()));
  EXPECT_EQ(meta["N"], 2);
  EXPECT_EQ(meta["percentile"], 75.0);
  EXPECT_EQ(meta["nnz"], 3);
  EXPECT_EQ(meta["low_support_rows"], nlohmann::json::array({0, 1}));
  EXPECT_EQ(r.remaining(), 3 * 8 + 3 * 4 + 3 * 4u);

  const auto sparse = sparsify(map, 1);
  write_map(sparse, dir / "s.dspm");
  EXPECT_EQ(read_map(dir / "s.dspm"), sparse);
}

TEST(MapFile, CorruptionIsRejected) {
  const auto sae = SaeParams::identity(2);
  const auto bytes = encode_map(build_map(fixtures::toy_triples(), sae, sae));
  for (std::size_t len = 0; len < bytes.size(); ++len) {
    std::vector<char> cut(bytes.begin(), bytes.begin() + static_cast<long>(len));
    const auto code = error_code_of([&] { decode_map(cut); });
    EXPECT_TRUE(code == ErrorCode::kTruncated || code == ErrorCode::kMalformedMetadata) << "length " << len;
  }
  auto magic = bytes;
  magic[3] = 'A';
  EXPECT_EQ(error_code_of([&] { decode_map(magic); }), ErrorCode::kBadMagic);
  auto version = bytes;
  version[4] = 9;
  EXPECT_EQ(error_code_of([&] { decode_map(version); }), ErrorCode::kBadVersion);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_EQ(error_code_of([&] { decode_map(trailing); }), ErrorCode::kMalformedMetadata);
  auto bad_col = bytes;
  // Last col_idx sits just before the three f32 values.
  const std::size_t col_pos = bytes.size() - 3 * 4 - 4;
  bad_col[col_pos] = 7;
  EXPECT_EQ(error_code_of([&] { decode_map(bad_col); }), ErrorCode::kMalformedMetadata);
}

TEST(Csr, DenseRoundTripAndRowSums) {
  const Matrix m(2, 3, {0.5f, 0.0f, -1.0f, 0.0f, 0.0f, 2.0f});
  const auto a = CsrMatrix::from_dense(m);
  EXPECT_EQ(a.nnz(), 3u);
  EXPECT_EQ(a.to_dense(), m);
  EXPECT_EQ(a.at(0, 2), -1.0f);
  EXPECT_EQ(a.at(1, 0), 0.0f);
  EXPECT_EQ(sum_rows(a, std::vector<FeatureIndex>{1, 0}), (std::vector<double>{0.5, 0.0, 1.0}));
  EXPECT_EQ(column_sums(a), (std::vector<double>{0.5, 0.0, 1.0}));
  EXPECT_NO_THROW(a.validate());
  auto broken = a;
  broken.row_ptr = {0, 5, 3};
  EXPECT_EQ(error_code_of([&] { broken.validate(); }), ErrorCode::kMalformedMetadata);
}
