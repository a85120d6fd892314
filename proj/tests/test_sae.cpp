#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "dspa/sae.hpp"
#include "test_util.hpp"

using namespace dspa;
using dspa::testing::error_code_of;
using dspa::testing::Gen;

namespace {

SaeParams identity_with(std::size_t d, Activation act) { return SaeParams::identity(d, std::move(act)); }

}  // namespace

TEST(SaeEncode, IdentityRelu) {
  const auto sae = SaeParams::identity(2);
  EXPECT_EQ(sae.encode(std::vector<float>{1.5f, -0.5f}), (std::vector<float>{1.5f, 0.0f}));
}

TEST(SaeEncode, BatchTopKBreaksTiesByLowestIndex) {
  const auto sae = identity_with(3, BatchTopK{1});
  EXPECT_EQ(sae.encode(std::vector<float>{0.2f, 0.9f, 0.9f}), (std::vector<float>{0.0f, 0.9f, 0.0f}));
}

TEST(SaeEncode, JumpReluIsStrictAtThreshold) {
  const auto sae = identity_with(2, JumpRelu{{1.0f, 1.0f}});
  EXPECT_EQ(sae.encode(std::vector<float>{1.0f, 1.2f}), (std::vector<float>{0.0f, 1.2f}));
}

TEST(SaeEncode, RejectsBadInputs) {
  const auto sae = SaeParams::identity(2);
  EXPECT_EQ(error_code_of([&] { sae.encode(std::vector<float>{1.0f}); }), ErrorCode::kDimensionMismatch);
  EXPECT_EQ(error_code_of([&] { sae.encode(std::vector<float>{1.0f, NAN}); }), ErrorCode::kNonFinite);
  EXPECT_EQ(error_code_of([&] { sae.encode(std::vector<float>{INFINITY, 0.0f}); }), ErrorCode::kNonFinite);
}

TEST(SaeParams, ValidatesConstruction) {
  EXPECT_EQ(error_code_of([] { identity_with(2, JumpRelu{{-0.1f, 0.0f}}); }), ErrorCode::kInvalidArgument);
  EXPECT_EQ(error_code_of([] { identity_with(2, JumpRelu{{0.1f}}); }), ErrorCode::kDimensionMismatch);
  EXPECT_EQ(error_code_of([] { identity_with(2, BatchTopK{3}); }), ErrorCode::kInvalidArgument);
  EXPECT_EQ(error_code_of([] { identity_with(2, BatchTopK{0}); }), ErrorCode::kInvalidArgument);
  Matrix bad = Matrix::identity(2);
  bad(0, 1) = NAN;
  EXPECT_EQ(error_code_of([&] { SaeParams(bad, {0, 0}, Matrix::identity(2), {0, 0}, Relu{}); }),
            ErrorCode::kNonFinite);
  EXPECT_EQ(error_code_of([] { SaeParams(Matrix::identity(2), {0, 0}, Matrix(3, 2), {0, 0, 0}, Relu{}); }),
            ErrorCode::kDimensionMismatch);
}

TEST(SaeDecode, HandExamples) {
  const auto sae = SaeParams::identity(2);
  EXPECT_EQ(sae.decode(std::vector<float>{2.0f, 3.0f}), (std::vector<float>{2.0f, 3.0f}));
  Matrix w_dec(2, 2, {2, 0, 0, 2});
  const SaeParams scaled(Matrix::identity(2), {0, 0}, w_dec, {1, 1}, Relu{});
  EXPECT_EQ(scaled.decode(std::vector<float>{1.0f, 1.0f}), (std::vector<float>{3.0f, 3.0f}));
  EXPECT_EQ(scaled.decode(std::vector<float>{0.0f, 0.0f}), (std::vector<float>{1.0f, 1.0f}));
  EXPECT_EQ(error_code_of([&] { sae.decode(std::vector<float>{1.0f}); }), ErrorCode::kDimensionMismatch);
}

TEST(SaeDecodeDelta, HandExamples) {
  const auto sae = SaeParams::identity(2);
  EXPECT_EQ(sae.decode_delta(std::vector<float>{0.0f, 0.0f}), (std::vector<float>{0.0f, 0.0f}));
  EXPECT_EQ(sae.decode_delta(std::vector<float>{-1.0f, 0.0f}), (std::vector<float>{-1.0f, 0.0f}));
  EXPECT_EQ(error_code_of([&] { sae.decode_delta(std::vector<float>{1.0f}); }), ErrorCode::kDimensionMismatch);
}

TEST(SaeProperties, EncodeIsNonNegative) {
  Gen gen(1);
  for (int trial = 0; trial < 300; ++trial) {
    const auto sae = gen.sae(gen.index(1, 12), gen.index(1, 24));
    for (float v : sae.encode(gen.vec(sae.d_model(), -3.0f, 3.0f))) EXPECT_GE(v, 0.0f);
  }
}

TEST(SaeProperties, BatchTopKSupportAtMostK) {
  Gen gen(2);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t ds = gen.index(1, 20);
    const std::size_t k = gen.index(1, ds);
    const SaeParams sae(gen.matrix(ds, 6), gen.vec(ds), gen.matrix(6, ds), gen.vec(6), BatchTopK{k});
    const auto f = sae.encode(gen.vec(6, -2.0f, 2.0f));
    EXPECT_LE(static_cast<std::size_t>(std::count_if(f.begin(), f.end(), [](float x) { return x > 0.0f; })), k);
  }
}

TEST(SaeProperties, DecodeDeltaIsDifferenceOfDecodes) {
  Gen gen(3);
  for (int trial = 0; trial < 300; ++trial) {
    const auto sae = gen.sae(gen.index(1, 10), gen.index(1, 16));
    const auto f = gen.vec(sae.d_sae(), 0.0f, 2.0f);
    const auto g = gen.vec(sae.d_sae(), 0.0f, 2.0f);
    std::vector<float> delta(f.size());
    for (std::size_t j = 0; j < f.size(); ++j) delta[j] = g[j] - f[j];
    const auto dd = sae.decode_delta(delta);
    const auto a = sae.decode(g), b = sae.decode(f);
    for (std::size_t m = 0; m < dd.size(); ++m) EXPECT_NEAR(dd[m], a[m] - b[m], 1e-5 * (1.0 + std::fabs(a[m])));
  }
}

TEST(SaeProperties, DecodeDeltaIsLinear) {
  Gen gen(4);
  for (int trial = 0; trial < 300; ++trial) {
    const auto sae = gen.sae(gen.index(1, 10), gen.index(1, 16));
    const auto u = gen.vec(sae.d_sae()), v = gen.vec(sae.d_sae());
    const float a = gen.uniform(-2.0f, 2.0f), b = gen.uniform(-2.0f, 2.0f);
    std::vector<float> mix(u.size());
    for (std::size_t j = 0; j < u.size(); ++j) mix[j] = a * u[j] + b * v[j];
    const auto lhs = sae.decode_delta(mix);
    const auto du = sae.decode_delta(u), dv = sae.decode_delta(v);
    double num = 0.0, den = 0.0;
    for (std::size_t m = 0; m < lhs.size(); ++m) {
      const double rhs = static_cast<double>(a) * du[m] + static_cast<double>(b) * dv[m];
      num += (lhs[m] - rhs) * (lhs[m] - rhs);
      den += rhs * rhs;
    }
    EXPECT_LE(std::sqrt(num), 1e-5 * std::sqrt(den) + 1e-6);
  }
}

TEST(SaeProperties, SparseDecodeDeltaIsBitIdenticalToDense) {
  Gen gen(5);
  for (int trial = 0; trial < 500; ++trial) {
    const auto sae = gen.sae(gen.index(1, 10), gen.index(1, 24));
    std::vector<FeatureIndex> idx;
    std::vector<float> vals;
    std::vector<float> dense(sae.d_sae(), 0.0f);
    for (std::size_t j = 0; j < sae.d_sae(); ++j) {
      if (!gen.coin(0.3)) continue;
      idx.push_back(static_cast<FeatureIndex>(j));
      vals.push_back(gen.uniform(-1.0f, 1.0f));
      dense[j] = vals.back();
    }
    const auto a = sae.decode_delta_sparse(idx, vals);
    const auto b = sae.decode_delta(dense);
    ASSERT_EQ(a.size(), b.size());
    EXPECT_EQ(0, std::memcmp(a.data(), b.data(), a.size() * sizeof(float)));
  }
}

TEST(SaeProperties, SparseDecodeDeltaValidatesIndices) {
  const auto sae = SaeParams::identity(3);
  const std::vector<float> v = {1.0f, 1.0f};
  EXPECT_EQ(error_code_of([&] { sae.decode_delta_sparse(std::vector<FeatureIndex>{2, 1}, v); }),
            ErrorCode::kInvalidArgument);
  EXPECT_EQ(error_code_of([&] { sae.decode_delta_sparse(std::vector<FeatureIndex>{0, 3}, v); }),
            ErrorCode::kInvalidArgument);
}

TEST(SaeProperties, PlantedCodesRoundTripThroughOrthonormalDictionary) {
  Gen gen(6);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t dm = gen.index(2, 12);
    const std::size_t ds = gen.index(1, dm);
    // Orthonormal columns by Gram-Schmidt on a random matrix.
    std::vector<std::vector<double>> cols;
    while (cols.size() < ds) {
      std::vector<double> v(dm);
      for (auto& x : v) x = gen.uniform_d(-1.0, 1.0);
      for (const auto& c : cols) {
        double dot = 0.0;
        for (std::size_t m = 0; m < dm; ++m) dot += v[m] * c[m];
        for (std::size_t m = 0; m < dm; ++m) v[m] -= dot * c[m];
      }
      double norm = 0.0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      if (norm < 1e-3) continue;
      for (auto& x : v) x /= norm;
      cols.push_back(std::move(v));
    }
    Matrix w_dec(dm, ds), w_enc(ds, dm);
    for (std::size_t j = 0; j < ds; ++j)
      for (std::size_t m = 0; m < dm; ++m) w_dec(m, j) = w_enc(j, m) = static_cast<float>(cols[j][m]);
    const SaeParams sae(w_enc, std::vector<float>(ds, 0.0f), w_dec, std::vector<float>(dm, 0.0f), Relu{});
    std::vector<float> f(ds, 0.0f);
    for (auto& x : f)
      if (gen.coin(0.4)) x = gen.uniform(0.0f, 3.0f);
    const auto back = sae.encode(sae.decode(f));
    for (std::size_t j = 0; j < ds; ++j) EXPECT_NEAR(back[j], f[j], 1e-5);
  }
}

TEST(SaeContainer, RoundTripsEveryActivation) {
  dspa::testing::TempDir dir;
  Gen gen(7);
  for (Activation act : {Activation{Relu{}}, Activation{JumpRelu{{0.0f, 0.25f, 1.5f}}}, Activation{BatchTopK{2}}}) {
    const SaeParams sae(gen.matrix(3, 4), gen.vec(3), gen.matrix(4, 3), gen.vec(4), act);
    save_sae(sae, dir / "sae.dspa");
    const auto back = load_sae(dir / "sae.dspa");
    EXPECT_EQ(back.w_enc(), sae.w_enc());
    EXPECT_EQ(back.w_dec(), sae.w_dec());
    EXPECT_TRUE(std::equal(back.b_enc().begin(), back.b_enc().end(), sae.b_enc().begin()));
    EXPECT_TRUE(std::equal(back.b_dec().begin(), back.b_dec().end(), sae.b_dec().begin()));
    EXPECT_EQ(activation_name(back.activation()), activation_name(sae.activation()));
    if (const auto* j = std::get_if<JumpRelu>(&act)) EXPECT_EQ(std::get<JumpRelu>(back.activation()).theta, j->theta);
    if (const auto* k = std::get_if<BatchTopK>(&act)) EXPECT_EQ(std::get<BatchTopK>(back.activation()).k, k->k);
  }
}

TEST(SaeContainer, RejectsWrongShapesAndUnknownActivation) {
  auto c = to_container(SaeParams::identity(2));
  auto wrong_shape = c;
  wrong_shape.tensors["b_enc"] = Tensor{{3}, {0, 0, 0}};
  EXPECT_EQ(error_code_of([&] { sae_from_container(wrong_shape); }), ErrorCode::kDimensionMismatch);
  auto unknown = c;
  unknown.attributes["activation"]["type"] = "gelu";
  EXPECT_EQ(error_code_of([&] { sae_from_container(unknown); }), ErrorCode::kMalformedMetadata);
  auto missing = c;
  missing.tensors.erase("W_dec");
  EXPECT_EQ(error_code_of([&] { sae_from_container(missing); }), ErrorCode::kMalformedMetadata);
}

TEST(SaeEncode, MatchesDoubleOracle) {
  Gen gen(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t dm = gen.index(1, 16), ds = gen.index(1, 16);
    const SaeParams sae(gen.matrix(ds, dm), gen.vec(ds), gen.matrix(dm, ds), gen.vec(dm), Relu{});
    const auto h = gen.vec(dm, -2.0f, 2.0f);
    const auto f = sae.encode(h);
    for (std::size_t j = 0; j < ds; ++j) {
      long double acc = 0.0L;
      for (std::size_t m = 0; m < dm; ++m) acc += static_cast<long double>(sae.w_enc()(j, m)) * h[m];
      acc += sae.b_enc()[j];
      const float pre = static_cast<float>(acc);
      EXPECT_NEAR(f[j], pre > 0.0f ? pre : 0.0f, 1e-6f * (1.0f + std::fabs(pre)));
    }
  }
}
