#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "dspa/container.hpp"
#include "dspa/error.hpp"
#include "dspa/tensor.hpp"
#include "dspa/topk.hpp"

namespace dspa {

struct Relu {};

/// Zeroes any pre-activation that does not strictly exceed its threshold.
struct JumpRelu {
  std::vector<float> theta;
};

/// Keeps the k largest post-ReLU values of each row. Applied per token rather
/// than over a batch.
struct BatchTopK {
  std::size_t k = 1;
};

using Activation = std::variant<Relu, JumpRelu, BatchTopK>;

inline std::string activation_name(const Activation& a) {
  return std::visit(
      [](const auto& v) -> std::string {
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, Relu>) return "relu";
        else if constexpr (std::is_same_v<V, JumpRelu>) return "jumprelu";
        else return "batchtopk";
      },
      a);
}

/// An SAE's weights plus its activation rule. Immutable once constructed;
/// encode and decode are pure and may be called concurrently.
///
/// Storage is f32. Every dot product accumulates in f64 and is rounded once.
class SaeParams {
 public:
  SaeParams(Matrix w_enc, std::vector<float> b_enc, Matrix w_dec, std::vector<float> b_dec,
            Activation activation = Relu{})
      : w_enc_(std::move(w_enc)),
        b_enc_(std::move(b_enc)),
        w_dec_(std::move(w_dec)),
        b_dec_(std::move(b_dec)),
        activation_(std::move(activation)) {
    validate();
  }

  /// Identity encoder/decoder of width d with zero biases.
  static SaeParams identity(std::size_t d, Activation activation = Relu{}) {
    return SaeParams(Matrix::identity(d), std::vector<float>(d, 0.0f), Matrix::identity(d),
                     std::vector<float>(d, 0.0f), std::move(activation));
  }

  std::size_t d_model() const noexcept { return w_enc_.cols(); }
  std::size_t d_sae() const noexcept { return w_enc_.rows(); }
  const Matrix& w_enc() const noexcept { return w_enc_; }
  const Matrix& w_dec() const noexcept { return w_dec_; }
  std::span<const float> b_enc() const noexcept { return b_enc_; }
  std::span<const float> b_dec() const noexcept { return b_dec_; }
  const Activation& activation() const noexcept { return activation_; }

  /// Latent code sigma(W_enc h + b_enc). `out` must hold d_sae values.
  void encode_into(std::span<const float> h, std::span<float> out) const {
    require(h.size() == d_model(), ErrorCode::kDimensionMismatch,
            "hidden state has " + std::to_string(h.size()) + " entries, SAE expects " + std::to_string(d_model()));
    require(out.size() == d_sae(), ErrorCode::kDimensionMismatch, "latent buffer has wrong size");
    require(all_finite(h), ErrorCode::kNonFinite, "hidden state contains a non-finite value");

    for (std::size_t j = 0; j < d_sae(); ++j) {
      auto w = w_enc_.row(j);
      double acc = 0.0;
      for (std::size_t m = 0; m < h.size(); ++m) acc += static_cast<double>(w[m]) * static_cast<double>(h[m]);
      out[j] = static_cast<float>(acc + static_cast<double>(b_enc_[j]));
    }

    if (const auto* jump = std::get_if<JumpRelu>(&activation_)) {
      for (std::size_t j = 0; j < out.size(); ++j) out[j] = out[j] > jump->theta[j] ? out[j] : 0.0f;
      return;
    }
    for (float& v : out) v = v > 0.0f ? v : 0.0f;
    if (const auto* topk = std::get_if<BatchTopK>(&activation_)) {
      if (topk->k < out.size()) {
        auto keep = top_k_indices(std::span<const float>(out.data(), out.size()), topk->k);
        std::vector<float> kept(out.size(), 0.0f);
        for (auto j : keep) kept[j] = out[j];
        std::copy(kept.begin(), kept.end(), out.begin());
      }
    }
  }

  std::vector<float> encode(std::span<const float> h) const {
    std::vector<float> out(d_sae());
    encode_into(h, out);
    return out;
  }

  /// W_dec f + b_dec.
  std::vector<float> decode(std::span<const float> f) const {
    require(f.size() == d_sae(), ErrorCode::kDimensionMismatch,
            "latent code has " + std::to_string(f.size()) + " entries, SAE expects " + std::to_string(d_sae()));
    std::vector<float> out(d_model());
    for (std::size_t m = 0; m < d_model(); ++m) {
      auto w = w_dec_.row(m);
      double acc = 0.0;
      for (std::size_t j = 0; j < f.size(); ++j) acc += static_cast<double>(w[j]) * static_cast<double>(f[j]);
      out[m] = static_cast<float>(acc + static_cast<double>(b_dec_[m]));
    }
    return out;
  }

  /// W_dec delta with no bias term; decode_delta(0) is exactly 0.
  std::vector<float> decode_delta(std::span<const float> delta) const {
    require(delta.size() == d_sae(), ErrorCode::kDimensionMismatch,
            "latent delta has " + std::to_string(delta.size()) + " entries, SAE expects " + std::to_string(d_sae()));
    std::vector<float> out(d_model());
    for (std::size_t m = 0; m < d_model(); ++m) {
      auto w = w_dec_.row(m);
      double acc = 0.0;
      for (std::size_t j = 0; j < delta.size(); ++j) acc += static_cast<double>(w[j]) * static_cast<double>(delta[j]);
      out[m] = static_cast<float>(acc);
    }
    return out;
  }

  /// Same result as decode_delta on the dense vector holding `values` at
  /// `indices` and zeros elsewhere. `indices` must be strictly ascending.
  std::vector<float> decode_delta_sparse(std::span<const FeatureIndex> indices, std::span<const float> values) const {
    require(indices.size() == values.size(), ErrorCode::kDimensionMismatch, "sparse delta index/value mismatch");
    for (std::size_t e = 0; e < indices.size(); ++e) {
      require(indices[e] < d_sae(), ErrorCode::kInvalidArgument, "sparse delta index out of range");
      require(e == 0 || indices[e - 1] < indices[e], ErrorCode::kInvalidArgument, "sparse delta indices not ascending");
    }
    std::vector<float> out(d_model());
    for (std::size_t m = 0; m < d_model(); ++m) {
      auto w = w_dec_.row(m);
      double acc = 0.0;
      for (std::size_t e = 0; e < indices.size(); ++e)
        acc += static_cast<double>(w[indices[e]]) * static_cast<double>(values[e]);
      out[m] = static_cast<float>(acc);
    }
    return out;
  }

 private:
  void validate() const {
    const std::size_t dm = w_enc_.cols();
    const std::size_t ds = w_enc_.rows();
    require(dm > 0 && ds > 0, ErrorCode::kInvalidArgument, "SAE dimensions must be positive");
    require(b_enc_.size() == ds, ErrorCode::kDimensionMismatch, "b_enc must have d_sae entries");
    require(w_dec_.rows() == dm && w_dec_.cols() == ds, ErrorCode::kDimensionMismatch,
            "W_dec must be d_model x d_sae");
    require(b_dec_.size() == dm, ErrorCode::kDimensionMismatch, "b_dec must have d_model entries");
    require(w_enc_.all_finite() && w_dec_.all_finite() && all_finite(b_enc_) && all_finite(b_dec_),
            ErrorCode::kNonFinite, "SAE weights contain a non-finite value");
    if (const auto* jump = std::get_if<JumpRelu>(&activation_)) {
      require(jump->theta.size() == ds, ErrorCode::kDimensionMismatch, "JumpReLU theta must have d_sae entries");
      for (float t : jump->theta)
        require(std::isfinite(t) && t >= 0.0f, ErrorCode::kInvalidArgument,
                "JumpReLU thresholds must be finite and non-negative");
    }
    if (const auto* topk = std::get_if<BatchTopK>(&activation_))
      require(topk->k >= 1 && topk->k <= ds, ErrorCode::kInvalidArgument, "BatchTopK k must lie in [1, d_sae]");
  }

  Matrix w_enc_;
  std::vector<float> b_enc_;
  Matrix w_dec_;
  std::vector<float> b_dec_;
  Activation activation_;
};

inline Container to_container(const SaeParams& sae) {
  Container c;
  nlohmann::json act = {{"type", activation_name(sae.activation())}};
  if (const auto* topk = std::get_if<BatchTopK>(&sae.activation())) act["k"] = topk->k;
  c.attributes = {{"kind", "sae"}, {"d_model", sae.d_model()}, {"d_sae", sae.d_sae()}, {"activation", act}};
  auto put = [&](const std::string& name, std::vector<std::size_t> shape, std::span<const float> data) {
    c.tensors[name] = Tensor{std::move(shape), std::vector<float>(data.begin(), data.end())};
  };
  put("W_enc", {sae.d_sae(), sae.d_model()}, sae.w_enc().data());
  put("b_enc", {sae.d_sae()}, sae.b_enc());
  put("W_dec", {sae.d_model(), sae.d_sae()}, sae.w_dec().data());
  put("b_dec", {sae.d_model()}, sae.b_dec());
  if (const auto* jump = std::get_if<JumpRelu>(&sae.activation())) put("theta", {sae.d_sae()}, jump->theta);
  return c;
}

inline SaeParams sae_from_container(const Container& c) {
  const auto& attrs = c.attributes;
  std::size_t d_model = 0, d_sae = 0;
  std::string type;
  std::size_t k = 0;
  try {
    d_model = attrs.at("d_model").get<std::size_t>();
    d_sae = attrs.at("d_sae").get<std::size_t>();
    type = attrs.at("activation").at("type").get<std::string>();
    if (type == "batchtopk") k = attrs.at("activation").at("k").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kMalformedMetadata, std::string("SAE metadata: ") + e.what());
  }
  auto shaped = [&](const std::string& name, std::vector<std::size_t> shape) -> const Tensor& {
    const Tensor& t = c.tensor(name);
    require(t.shape == shape, ErrorCode::kDimensionMismatch, "tensor \"" + name + "\" has unexpected shape");
    return t;
  };
  Matrix w_enc(d_sae, d_model, shaped("W_enc", {d_sae, d_model}).data);
  Matrix w_dec(d_model, d_sae, shaped("W_dec", {d_model, d_sae}).data);
  auto b_enc = shaped("b_enc", {d_sae}).data;
  auto b_dec = shaped("b_dec", {d_model}).data;

  Activation act;
  if (type == "relu") act = Relu{};
  else if (type == "jumprelu") act = JumpRelu{shaped("theta", {d_sae}).data};
  else if (type == "batchtopk") act = BatchTopK{k};
  else fail(ErrorCode::kMalformedMetadata, "unknown activation \"" + type + "\"");
  return SaeParams(std::move(w_enc), std::move(b_enc), std::move(w_dec), std::move(b_dec), std::move(act));
}

inline void save_sae(const SaeParams& sae, const std::filesystem::path& path) {
  write_container(to_container(sae), path);
}

inline SaeParams load_sae(const std::filesystem::path& path) { return sae_from_container(read_container(path)); }

}  // namespace dspa
