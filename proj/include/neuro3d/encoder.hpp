#pragma once

// Static/dynamic EEG embedders and the cross-attention aggregator.
//
// Trials are batched by stacking their token sequences row-wise: a batch of
// B trials with S tokens each is a (B*S × d_model) matrix, and attention is
// restricted to blocks of S rows.

#include "neuro3d/autodiff.hpp"
#include "neuro3d/nn.hpp"
#include "neuro3d/random.hpp"

#include "json.hpp"

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace neuro3d::encoder {

using ad::Index;
using ad::Matrix;
using ad::Var;

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class FusionMode { Fused, Static, Dynamic };

inline const char* to_string(FusionMode m) {
  switch (m) {
    case FusionMode::Static: return "static";
    case FusionMode::Dynamic: return "dynamic";
    default: return "fused";
  }
}

inline FusionMode fusion_mode_from_string(const std::string& s) {
  if (s == "fused") return FusionMode::Fused;
  if (s == "static") return FusionMode::Static;
  if (s == "dynamic") return FusionMode::Dynamic;
  throw std::invalid_argument("unknown fusion mode '" + s + "' (expected fused, static or dynamic)");
}

struct EncoderConfig {
  Index channels = 64;
  Index patch = 25;
  Index d_model = 256;
  Index heads = 4;
  Index layers = 4;
  Index ffn_mult = 4;
  Index aggregator_heads = 1;
  Index static_samples = 250;
  Index dynamic_samples = 1500;
  FusionMode mode = FusionMode::Fused;

  Index static_tokens() const { return static_samples / patch; }
  Index dynamic_tokens() const { return dynamic_samples / patch; }

  void validate() const {
    if (channels <= 0 || patch <= 0 || d_model <= 0 || layers < 0 || ffn_mult <= 0) {
      throw std::invalid_argument("EncoderConfig: sizes must be positive");
    }
    if (heads <= 0 || d_model % heads != 0) throw std::invalid_argument("EncoderConfig: d_model must be divisible by heads");
    if (aggregator_heads <= 0 || d_model % aggregator_heads != 0) {
      throw std::invalid_argument("EncoderConfig: d_model must be divisible by aggregator_heads");
    }
    if (static_samples < patch || dynamic_samples < patch) throw std::invalid_argument("EncoderConfig: epoch shorter than one patch");
  }
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"channels", c.channels},         {"patch", c.patch},
       {"d_model", c.d_model},           {"heads", c.heads},
       {"layers", c.layers},             {"ffn_mult", c.ffn_mult},
       {"aggregator_heads", c.aggregator_heads}, {"static_samples", c.static_samples},
       {"dynamic_samples", c.dynamic_samples},   {"mode", to_string(c.mode)}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c.channels = j.at("channels");
  c.patch = j.at("patch");
  c.d_model = j.at("d_model");
  c.heads = j.at("heads");
  c.layers = j.at("layers");
  c.ffn_mult = j.at("ffn_mult");
  c.aggregator_heads = j.at("aggregator_heads");
  c.static_samples = j.at("static_samples");
  c.dynamic_samples = j.at("dynamic_samples");
  c.mode = fusion_mode_from_string(j.at("mode").get<std::string>());
}

template <typename T>
void check_finite(const Var<T>& v, const char* where) {
  if (!v.value().allFinite()) throw NonFiniteError(std::string("non-finite activations in ") + where);
}

/// Rearranges B trials (each channels × samples, row-major) into
/// (B*S × channels*patch) patch rows; feature c*patch + p holds sample
/// s*patch + p of channel c. Trailing samples past S*patch are dropped.
template <typename T, typename Src>
Matrix<T> patchify(std::span<const Src> trials, Index batch, Index channels, Index samples, Index patch) {
  if (samples < patch) throw std::invalid_argument("tokenize: epoch has fewer samples than one patch");
  if (static_cast<Index>(trials.size()) != batch * channels * samples) throw std::invalid_argument("tokenize: buffer size mismatch");
  const Index s_count = samples / patch;
  Matrix<T> out(batch * s_count, channels * patch);
  for (Index b = 0; b < batch; ++b) {
    const Src* trial = trials.data() + b * channels * samples;
    for (Index s = 0; s < s_count; ++s) {
      T* row = out.data() + (b * s_count + s) * channels * patch;
      for (Index c = 0; c < channels; ++c) {
        const Src* src = trial + c * samples + s * patch;
        for (Index p = 0; p < patch; ++p) row[c * patch + p] = static_cast<T>(src[p]);
      }
    }
  }
  return out;
}

template <typename T>
struct Block {
  nn::LayerNorm<T> ln1, ln2;
  nn::Linear<T> wq, wk, wv, wo, ff1, ff2;

  Block() = default;
  Block(Index d, Index ffn, RandomStream& rng)
      : ln1(d), ln2(d),
        wq(d, d, rng), wk(d, d, rng), wv(d, d, rng), wo(d, d, rng),
        ff1(d, ffn, rng), ff2(ffn, d, rng) {}

  Var<T> operator()(const Var<T>& x, Index groups, Index heads) const {
    auto h = ln1(x);
    auto a = ad::attention(wq(h), wk(h), wv(h), groups, heads);
    auto y = x + wo(a);
    return y + ff2(ad::gelu(ff1(ln2(y))));
  }

  void collect(nn::ParameterSet<T>& ps, const std::string& p) const {
    ln1.collect(ps, p + ".ln1");
    wq.collect(ps, p + ".wq");
    wk.collect(ps, p + ".wk");
    wv.collect(ps, p + ".wv");
    wo.collect(ps, p + ".wo");
    ln2.collect(ps, p + ".ln2");
    ff1.collect(ps, p + ".ff1");
    ff2.collect(ps, p + ".ff2");
  }
};

/// Patch projection + positional encoding, pre-norm self-attention blocks,
/// final norm and a two-layer output MLP.
template <typename T>
struct Embedder {
  Index channels = 0, patch = 0, d_model = 0, heads = 1, tokens = 0;
  nn::Linear<T> proj;
  Matrix<T> positional;
  std::vector<Block<T>> blocks;
  nn::LayerNorm<T> norm;
  nn::Linear<T> out1, out2;

  Embedder() = default;
  Embedder(const EncoderConfig& cfg, Index samples, RandomStream& rng)
      : channels(cfg.channels), patch(cfg.patch), d_model(cfg.d_model), heads(cfg.heads), tokens(samples / cfg.patch),
        proj(cfg.channels * cfg.patch, cfg.d_model, rng),
        positional(nn::sinusoidal_table<T>(samples / cfg.patch, cfg.d_model)),
        norm(cfg.d_model),
        out1(cfg.d_model, cfg.d_model, rng), out2(cfg.d_model, cfg.d_model, rng) {
    for (Index l = 0; l < cfg.layers; ++l) blocks.emplace_back(cfg.d_model, cfg.ffn_mult * cfg.d_model, rng);
  }

  /// Patch rows (B*S × C*P) -> token rows (B*S × d).
  Var<T> tokenize(const Matrix<T>& patches) const {
    if (patches.cols() != channels * patch || patches.rows() % tokens != 0) throw ad::ShapeError("tokenize: patch matrix shape");
    const Index batch = patches.rows() / tokens;
    return proj(ad::constant<T>(patches)) + ad::constant<T>(positional.replicate(batch, 1));
  }

  /// Token rows -> embedded rows; `groups` is the number of trials.
  Var<T> embed(const Var<T>& tok, Index groups) const {
    if (tok.cols() != d_model) throw ad::ShapeError("embed: token width must equal d_model");
    Var<T> x = tok;
    for (const auto& b : blocks) x = b(x, groups, heads);
    auto y = out2(ad::gelu(out1(norm(x))));
    check_finite(y, "embedder");
    return y;
  }

  Var<T> operator()(const Matrix<T>& patches) const { return embed(tokenize(patches), patches.rows() / tokens); }

  void collect(nn::ParameterSet<T>& ps, const std::string& p) const {
    proj.collect(ps, p + ".proj");
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(ps, p + ".block" + std::to_string(i));
    norm.collect(ps, p + ".norm");
    out1.collect(ps, p + ".out1");
    out2.collect(ps, p + ".out2");
  }
};

/// Cross-attention: queries from z_s, keys and values from z_d.
template <typename T>
struct Aggregator {
  Index heads = 1;
  nn::Linear<T> wq, wk, wv;

  Aggregator() = default;
  Aggregator(Index d, Index heads_, RandomStream& rng)
      : heads(heads_), wq(d, d, rng, false), wk(d, d, rng, false), wv(d, d, rng, false) {}

  Var<T> operator()(const Var<T>& zs, const Var<T>& zd, Index groups, std::vector<Matrix<T>>* weights = nullptr) const {
    if (zs.cols() != zd.cols()) throw ad::ShapeError("aggregate: width mismatch");
    return ad::attention(wq(zs), wk(zd), wv(zd), groups, heads, weights);
  }

  void collect(nn::ParameterSet<T>& ps, const std::string& p) const {
    wq.collect(ps, p + ".wq");
    wk.collect(ps, p + ".wk");
    wv.collect(ps, p + ".wv");
  }
};

/// A batch of paired trials. Either side may be empty when the fusion mode
/// does not need it.
template <typename Src>
struct TrialBatch {
  Index batch = 0;
  std::span<const Src> static_trials;   // batch × channels × static_samples
  std::span<const Src> dynamic_trials;  // batch × channels × dynamic_samples
};

template <typename T>
struct Encoder {
  EncoderConfig cfg;
  Embedder<T> static_embedder;
  Embedder<T> dynamic_embedder;
  Aggregator<T> aggregator;

  Encoder() = default;
  Encoder(const EncoderConfig& c, RandomStream& rng)
      : cfg(c), static_embedder((c.validate(), c), c.static_samples, rng), dynamic_embedder(c, c.dynamic_samples, rng),
        aggregator(c.d_model, c.aggregator_heads, rng) {}

  bool uses_static() const { return cfg.mode != FusionMode::Dynamic; }
  bool uses_dynamic() const { return cfg.mode != FusionMode::Static; }

  /// Fused token rows (B*S_query × d). In static mode the dynamic stream is
  /// replaced by the static one (and vice versa).
  Var<T> fuse(const Var<T>& zs, const Var<T>& zd, Index batch, std::vector<Matrix<T>>* weights = nullptr) const {
    switch (cfg.mode) {
      case FusionMode::Static: return aggregator(zs, zs, batch, weights);
      case FusionMode::Dynamic: return aggregator(zd, zd, batch, weights);
      default: return aggregator(zs, zd, batch, weights);
    }
  }

  template <typename Src>
  Var<T> encode_tokens(const TrialBatch<Src>& in, std::vector<Matrix<T>>* weights = nullptr) const {
    Var<T> zs, zd;
    if (uses_static()) {
      zs = static_embedder(patchify<T, Src>(in.static_trials, in.batch, cfg.channels, cfg.static_samples, cfg.patch));
    }
    if (uses_dynamic()) {
      zd = dynamic_embedder(patchify<T, Src>(in.dynamic_trials, in.batch, cfg.channels, cfg.dynamic_samples, cfg.patch));
    }
    auto fused = fuse(zs, zd, in.batch, weights);
    check_finite(fused, "aggregator");
    return fused;
  }

  /// Mean-pooled embedding, one row per trial.
  template <typename Src>
  Var<T> encode(const TrialBatch<Src>& in) const {
    auto fused = encode_tokens(in);
    return ad::group_mean(fused, fused.rows() / in.batch);
  }

  void collect(nn::ParameterSet<T>& ps, const std::string& p = "encoder") const {
    if (uses_static()) static_embedder.collect(ps, p + ".static");
    if (uses_dynamic()) dynamic_embedder.collect(ps, p + ".dynamic");
    aggregator.collect(ps, p + ".aggregator");
  }
};

}  // namespace neuro3d::encoder
