#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mhss/errors.hpp"
#include "mhss/flops.hpp"
#include "mhss/hsi.hpp"
#include "mhss/rng.hpp"
#include "mhss/tensor.hpp"

namespace mhss {

// ---------------------------------------------------------------------------
// Hyperparameters.
// ---------------------------------------------------------------------------
struct HyperParams {
  std::size_t embed_dim = 64;
  std::size_t num_heads = 4;
  std::size_t state_dim = 128;
  std::size_t num_layers = 1;
  std::size_t num_classes = 0;

  std::size_t head_dim() const { return embed_dim / num_heads; }

  void validate() const {
    if (embed_dim == 0 || num_heads == 0 || state_dim == 0 || num_layers == 0 ||
        num_classes == 0) {
      throw ConfigError("hyperparameters must all be positive");
    }
    if (embed_dim % num_heads != 0) {
      throw ConfigError("embed_dim (" + std::to_string(embed_dim) +
                        ") must be divisible by num_heads (" + std::to_string(num_heads) + ")");
    }
  }
};

// ---------------------------------------------------------------------------
// Parameter groups. Weights are (in, out); biases are (out).
// ---------------------------------------------------------------------------
struct DenseParams {
  Tensor weight;
  Tensor bias;
};

struct HeadParams {
  Tensor wq, wk, wv;  // each (embed_dim, head_dim)
};

struct AttentionParams {
  std::vector<HeadParams> heads;
  Tensor w_out;  // (embed_dim, embed_dim)
};

struct EnhancementParams {
  DenseParams spatial;   // context (C) -> gate (embed_dim)
  DenseParams spectral;
};

struct SsmParams {
  Tensor w_transition;  // (state_dim, state_dim)
  Tensor w_update;      // (embed_dim, state_dim)
};

struct LayerParams {
  EnhancementParams enhance;
  AttentionParams attn_spatial;   // queries from the spatial branch
  AttentionParams attn_spectral;  // queries from the spectral branch
  DenseParams gate_spatial;       // post-attention self-gates, (embed_dim, embed_dim)
  DenseParams gate_spectral;
};

struct ModelParams {
  HyperParams hp;
  std::size_t bands = 0;
  std::uint64_t seed = 0;
  DenseParams proj_spatial;   // (bands, embed_dim)
  DenseParams proj_spectral;
  std::vector<LayerParams> layers;
  SsmParams ssm_spatial;
  SsmParams ssm_spectral;
  DenseParams classifier;     // (2 * state_dim, num_classes)

  /// Visits every learnable tensor in a fixed order with (name, tensor).
  /// Initialization, Adam, and checkpoints all rely on this order.
  template <class F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <class F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  std::size_t param_tensor_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor&) { ++n; });
    return n;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }

 private:
  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    f("proj_spatial.weight", self.proj_spatial.weight);
    f("proj_spatial.bias", self.proj_spatial.bias);
    f("proj_spectral.weight", self.proj_spectral.weight);
    f("proj_spectral.bias", self.proj_spectral.bias);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      const std::string prefix = "layer" + std::to_string(l) + ".";
      auto& layer = self.layers[l];
      f(prefix + "enhance.spatial.weight", layer.enhance.spatial.weight);
      f(prefix + "enhance.spatial.bias", layer.enhance.spatial.bias);
      f(prefix + "enhance.spectral.weight", layer.enhance.spectral.weight);
      f(prefix + "enhance.spectral.bias", layer.enhance.spectral.bias);
      const char* branches[2] = {"attn_spatial", "attn_spectral"};
      for (int b = 0; b < 2; ++b) {
        auto& attn = b == 0 ? layer.attn_spatial : layer.attn_spectral;
        for (std::size_t h = 0; h < attn.heads.size(); ++h) {
          const std::string head = prefix + branches[b] + ".head" + std::to_string(h) + ".";
          f(head + "wq", attn.heads[h].wq);
          f(head + "wk", attn.heads[h].wk);
          f(head + "wv", attn.heads[h].wv);
        }
        f(prefix + branches[b] + ".w_out", attn.w_out);
      }
      f(prefix + "gate_spatial.weight", layer.gate_spatial.weight);
      f(prefix + "gate_spatial.bias", layer.gate_spatial.bias);
      f(prefix + "gate_spectral.weight", layer.gate_spectral.weight);
      f(prefix + "gate_spectral.bias", layer.gate_spectral.bias);
    }
    f("ssm_spatial.w_transition", self.ssm_spatial.w_transition);
    f("ssm_spatial.w_update", self.ssm_spatial.w_update);
    f("ssm_spectral.w_transition", self.ssm_spectral.w_transition);
    f("ssm_spectral.w_update", self.ssm_spectral.w_update);
    f("classifier.weight", self.classifier.weight);
    f("classifier.bias", self.classifier.bias);
  }
};

namespace detail {

inline DenseParams make_dense(std::size_t in, std::size_t out) {
  return {Tensor::param({in, out}), Tensor::param({out})};
}

inline AttentionParams make_attention(const HyperParams& hp) {
  AttentionParams p;
  for (std::size_t h = 0; h < hp.num_heads; ++h) {
    p.heads.push_back({Tensor::param({hp.embed_dim, hp.head_dim()}),
                       Tensor::param({hp.embed_dim, hp.head_dim()}),
                       Tensor::param({hp.embed_dim, hp.head_dim()})});
  }
  p.w_out = Tensor::param({hp.embed_dim, hp.embed_dim});
  return p;
}

}  // namespace detail

/// Allocates all parameter tensors (zero-filled) for the given topology.
inline ModelParams make_params(const HyperParams& hp, std::size_t bands) {
  hp.validate();
  if (bands == 0) throw ConfigError("bands must be positive");
  ModelParams p;
  p.hp = hp;
  p.bands = bands;
  p.proj_spatial = detail::make_dense(bands, hp.embed_dim);
  p.proj_spectral = detail::make_dense(bands, hp.embed_dim);
  for (std::size_t l = 0; l < hp.num_layers; ++l) {
    LayerParams layer;
    layer.enhance.spatial = detail::make_dense(bands, hp.embed_dim);
    layer.enhance.spectral = detail::make_dense(bands, hp.embed_dim);
    layer.attn_spatial = detail::make_attention(hp);
    layer.attn_spectral = detail::make_attention(hp);
    layer.gate_spatial = detail::make_dense(hp.embed_dim, hp.embed_dim);
    layer.gate_spectral = detail::make_dense(hp.embed_dim, hp.embed_dim);
    p.layers.push_back(std::move(layer));
  }
  p.ssm_spatial = {Tensor::param({hp.state_dim, hp.state_dim}),
                   Tensor::param({hp.embed_dim, hp.state_dim})};
  p.ssm_spectral = {Tensor::param({hp.state_dim, hp.state_dim}),
                    Tensor::param({hp.embed_dim, hp.state_dim})};
  p.classifier = detail::make_dense(2 * hp.state_dim, hp.num_classes);
  return p;
}

/// Xavier-uniform initialization: weights (rank 2, shape (fan_in, fan_out))
/// drawn from U(-a, a) with a = sqrt(6 / (fan_in + fan_out)); biases (rank 1)
/// zero. One RNG stream consumed in for_each order, so results are
/// bit-reproducible per seed.
inline ModelParams init_params(const HyperParams& hp, std::size_t bands, std::uint64_t seed) {
  ModelParams p = make_params(hp, bands);
  p.seed = seed;
  Rng rng(seed);
  p.for_each([&](const std::string&, Tensor& t) {
    if (t.rank() == 1) return;  // biases stay zero
    const double fan_in = static_cast<double>(t.shape()[0]);
    const double fan_out = static_cast<double>(t.shape()[1]);
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    for (double& v : t.data()) v = rng.uniform(-a, a);
  });
  return p;
}

// ---------------------------------------------------------------------------
// Model ops.
// ---------------------------------------------------------------------------

/// x (..., in) -> (..., out).
inline Tensor dense(const Tensor& x, const DenseParams& p) {
  return add_rowwise(matmul(x, p.weight), p.bias);
}

struct EnhanceOut {
  Tensor spatial, spectral;            // enhanced tokens (B, L, embed_dim)
  Tensor gate_spatial, gate_spectral;  // the gates themselves (B, embed_dim)
};

/// Gated token enhancement. Each branch's gate is sigmoid(W c + b) computed
/// from the patch-center context c, broadcast across the L token positions
/// and applied elementwise. Gates lie strictly in (0,1), so enhancement
/// never grows a token's magnitude.
inline EnhanceOut enhance_tokens(const Tensor& s, const Tensor& f, const Tensor& context,
                                 const EnhancementParams& p) {
  if (s.rank() != 3 || f.rank() != 3) {
    throw DimensionError("enhance_tokens: tokens must be rank 3, got " + shape_str(s.shape()) +
                         " and " + shape_str(f.shape()));
  }
  EnhanceOut out;
  {
    FlopStage stage("enhance_gate");
    out.gate_spatial = sigmoid(dense(context, p.spatial));
    out.gate_spectral = sigmoid(dense(context, p.spectral));
  }
  const std::size_t positions = s.shape()[1];
  out.spatial = hadamard(s, broadcast_tokens(out.gate_spatial, positions));
  out.spectral = hadamard(f, broadcast_tokens(out.gate_spectral, positions));
  return out;
}

/// Cross-modal multi-head attention: queries from one branch, keys and
/// values from the other. Per head i, A_i = softmax(Q_i K_i^T / sqrt(d_k))
/// and O_i = A_i V_i; head outputs concatenate and mix through w_out. When
/// `attention` is non-null the row-stochastic A_i matrices (B, L, L) are
/// appended to it, one per head.
inline Tensor mhsa(const Tensor& query_src, const Tensor& kv_src, const AttentionParams& p,
                   const HyperParams& hp, std::vector<Tensor>* attention = nullptr) {
  if (p.heads.size() != hp.num_heads) {
    throw ConfigError("mhsa: params carry " + std::to_string(p.heads.size()) +
                      " heads but hyperparameters say " + std::to_string(hp.num_heads));
  }
  check_same_shape("mhsa", query_src, kv_src);
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(hp.head_dim()));
  std::vector<Tensor> head_outputs;
  head_outputs.reserve(p.heads.size());
  for (const HeadParams& head : p.heads) {
    Tensor q, k, v;
    {
      FlopStage stage("attention_proj");
      q = matmul(query_src, head.wq);
      k = matmul(kv_src, head.wk);
      v = matmul(kv_src, head.wv);
    }
    Tensor scores;
    {
      FlopStage stage("attention_scores");
      scores = matmul(q, transpose_last_two(k));
    }
    Tensor a = softmax_rows(scale(scores, inv_sqrt_dk));
    if (attention) attention->push_back(a);
    FlopStage stage("attention_values");
    head_outputs.push_back(matmul(a, v));
  }
  FlopStage stage("attention_out");
  return matmul(concat_last(head_outputs), p.w_out);
}

/// Post-attention self-gated enhancement: x * sigmoid(x W + b), per token.
inline Tensor feature_gate(const Tensor& x, const DenseParams& p) {
  FlopStage stage("feature_gate");
  return hadamard(x, sigmoid(dense(x, p)));
}

/// State-space recurrence over the token sequence:
///   h_0 = 0,  h_t = ReLU(h_{t-1} W_transition + E_t W_update)
/// left to right over the L positions; returns the final state (B,
/// state_dim), elementwise >= 0. The transition multiply runs every step
/// (including t=1 from the zero state), so recorded MACs are exactly
/// L * B * state_dim^2.
inline Tensor ssm_scan(const Tensor& x, const SsmParams& p) {
  if (x.rank() != 3) {
    throw DimensionError("ssm_scan: expected (B, L, embed) input, got " + shape_str(x.shape()));
  }
  const std::size_t b = x.shape()[0];
  const std::size_t l = x.shape()[1];
  const std::size_t state = p.w_transition.shape()[0];
  Tensor h = Tensor::zeros({b, state});
  for (std::size_t t = 0; t < l; ++t) {
    Tensor e_t = select_token(x, t);
    Tensor transition, update;
    {
      FlopStage stage("ssm_transition");
      transition = matmul(h, p.w_transition);
    }
    {
      FlopStage stage("ssm_update");
      update = matmul(e_t, p.w_update);
    }
    h = relu(add(transition, update));
  }
  return h;
}

namespace detail {

template <class Fn>
auto forward_stage(const char* name, Fn&& fn) -> decltype(fn()) {
  const auto tag = [&](const std::exception& e) {
    return "forward[" + std::string(name) + "]: " + e.what();
  };
  try {
    return fn();
  } catch (const DimensionError& e) {
    throw DimensionError(tag(e));
  } catch (const ConfigError& e) {
    throw ConfigError(tag(e));
  } catch (const ContractError& e) {
    throw ContractError(tag(e));
  } catch (const NumericError& e) {
    throw NumericError(tag(e));
  }
}

}  // namespace detail

/// Full pipeline from raw (B, L, C) token pairs + (B, C) center context to
/// (B, num_classes) logits. Each stage tags errors with its name.
inline Tensor forward_tokens(const Tensor& spatial_raw, const Tensor& spectral_raw,
                             const Tensor& context, const ModelParams& params) {
  const HyperParams& hp = params.hp;
  Tensor s, f;
  detail::forward_stage("token_projection", [&] {
    FlopStage stage("token_projection");
    s = dense(spatial_raw, params.proj_spatial);
    f = dense(spectral_raw, params.proj_spectral);
    return 0;
  });
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const LayerParams& layer = params.layers[l];
    EnhanceOut enhanced;
    detail::forward_stage("enhance", [&] {
      enhanced = enhance_tokens(s, f, context, layer.enhance);
      return 0;
    });
    Tensor attended_s, attended_f;
    detail::forward_stage("attention", [&] {
      attended_s = mhsa(enhanced.spatial, enhanced.spectral, layer.attn_spatial, hp);
      attended_f = mhsa(enhanced.spectral, enhanced.spatial, layer.attn_spectral, hp);
      return 0;
    });
    detail::forward_stage("feature_gate", [&] {
      s = feature_gate(attended_s, layer.gate_spatial);
      f = feature_gate(attended_f, layer.gate_spectral);
      return 0;
    });
  }
  Tensor h_spatial, h_spectral;
  detail::forward_stage("ssm", [&] {
    h_spatial = ssm_scan(s, params.ssm_spatial);
    h_spectral = ssm_scan(f, params.ssm_spectral);
    return 0;
  });
  return detail::forward_stage("classifier", [&] {
    FlopStage stage("classifier");
    return dense(concat_last(h_spatial, h_spectral), params.classifier);
  });
}

/// Convenience entry: tokens straight from a patch set.
inline Tensor forward(const PatchSet& set, const std::vector<std::size_t>& batch,
                      const ModelParams& params) {
  if (set.bands != params.bands) {
    throw ConfigError("forward: model expects " + std::to_string(params.bands) +
                      " bands but patches have " + std::to_string(set.bands));
  }
  TokenPair tokens = make_tokens(set, batch);
  Tensor context = make_context(set, batch);
  return forward_tokens(tokens.spatial, tokens.spectral, context, params);
}

/// Row-wise argmax, ties to the lowest class index. Softmax/sigmoid squash
/// monotonically, so taking argmax on raw logits gives the same classes.
inline std::vector<std::size_t> predict(const Tensor& logits) {
  if (logits.rank() != 2) {
    throw DimensionError("predict: expected (B, K) logits, got " + shape_str(logits.shape()));
  }
  const std::size_t b = logits.shape()[0];
  const std::size_t k = logits.shape()[1];
  std::vector<std::size_t> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = logits.data().data() + i * k;
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (row[j] > row[best]) best = j;
    }
    out[i] = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "MHSM", version, hyperparameter block, then each
// parameter as (name, rank, extents, float64 payload), all little-endian.
// Round-trips are bit-exact.
// ---------------------------------------------------------------------------

inline std::string params_to_bytes(const ModelParams& params) {
  std::string out;
  out.append("MHSM");
  detail::put_u32(out, 1);  // version
  detail::put_u32(out, static_cast<std::uint32_t>(params.hp.embed_dim));
  detail::put_u32(out, static_cast<std::uint32_t>(params.hp.num_heads));
  detail::put_u32(out, static_cast<std::uint32_t>(params.hp.state_dim));
  detail::put_u32(out, static_cast<std::uint32_t>(params.hp.num_layers));
  detail::put_u32(out, static_cast<std::uint32_t>(params.hp.num_classes));
  detail::put_u32(out, static_cast<std::uint32_t>(params.bands));
  detail::put_u64(out, params.seed);
  detail::put_u32(out, static_cast<std::uint32_t>(params.param_tensor_count()));
  params.for_each([&](const std::string& name, const Tensor& t) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(e));
    for (double v : t.data()) detail::put_f64(out, v);
  });
  return out;
}

inline void save_params(const ModelParams& params, const std::string& path) {
  detail::write_file(path, params_to_bytes(params));
}

inline ModelParams params_from_bytes(const std::string& bytes,
                                     const std::string& what = "checkpoint") {
  detail::ByteReader r(bytes, what);
  r.expect_magic("MHSM", 4);
  const std::uint32_t version = r.u32("version");
  if (version != 1) {
    throw FormatError(what + ": unsupported version " + std::to_string(version) + " at offset 4");
  }
  HyperParams hp;
  hp.embed_dim = r.u32("embed_dim");
  hp.num_heads = r.u32("num_heads");
  hp.state_dim = r.u32("state_dim");
  hp.num_layers = r.u32("num_layers");
  hp.num_classes = r.u32("num_classes");
  const std::uint32_t bands = r.u32("bands");
  const std::uint64_t seed = r.u64("seed");
  try {
    hp.validate();
    if (bands == 0) throw ConfigError("bands must be positive");
  } catch (const ConfigError& e) {
    throw FormatError(what + ": invalid hyperparameter block: " + e.what());
  }

  ModelParams params = make_params(hp, bands);
  params.seed = seed;
  const std::uint32_t count = r.u32("param count");
  if (count != params.param_tensor_count()) {
    throw FormatError(what + ": file lists " + std::to_string(count) +
                      " parameter tensors, topology needs " +
                      std::to_string(params.param_tensor_count()));
  }
  params.for_each([&](const std::string& name, Tensor& t) {
    const std::size_t record_at = r.offset();
    const std::uint32_t name_len = r.u32("param name length");
    const std::string file_name = r.raw(name_len, "param name");
    if (file_name != name) {
      throw FormatError(what + ": parameter at offset " + std::to_string(record_at) +
                        " is named \"" + file_name + "\", expected \"" + name + "\"");
    }
    const std::uint32_t rank = r.u32("param rank");
    if (rank != t.rank()) {
      throw FormatError(what + ": " + name + " has rank " + std::to_string(rank) + ", expected " +
                        std::to_string(t.rank()));
    }
    Shape extents(rank);
    for (std::uint32_t i = 0; i < rank; ++i) extents[i] = r.u32("param extent");
    if (extents != t.shape()) {
      throw FormatError(what + ": " + name + " has shape " + shape_str(extents) + ", expected " +
                        shape_str(t.shape()));
    }
    for (double& v : t.data()) v = r.f64("param payload");
  });
  r.expect_end();
  return params;
}

inline ModelParams load_params(const std::string& path) {
  return params_from_bytes(detail::read_file(path), path);
}

}  // namespace mhss
