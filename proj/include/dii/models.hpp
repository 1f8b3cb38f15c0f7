#pragma once

// Desk-scale model zoo. Every model runs its forward pass on an ad::Tape and
// calls out to an optional hook at each named activation stream, which is how
// captures and interventions are implemented without touching model code.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "dii/autodiff.hpp"
#include "dii/error.hpp"
#include "dii/linalg.hpp"
#include "dii/rng.hpp"

namespace dii {

// ---------------------------------------------------------------------------
// Stream names and sites

enum class Stream {
  kBlockInput,
  kAttnInput,
  kAttnValueOutput,
  kHeadMixingOut,
  kAttnOut,
  kMlpInput,
  kMlpAct,
  kMlpOutput,
  kBlockOut,
};

inline constexpr std::array<Stream, 9> kAllStreams = {
    Stream::kBlockInput,    Stream::kAttnInput, Stream::kAttnValueOutput,
    Stream::kHeadMixingOut, Stream::kAttnOut,   Stream::kMlpInput,
    Stream::kMlpAct,        Stream::kMlpOutput, Stream::kBlockOut};

constexpr std::string_view stream_name(Stream s) {
  switch (s) {
    case Stream::kBlockInput: return "block_input";
    case Stream::kAttnInput: return "attn_input";
    case Stream::kAttnValueOutput: return "attn_value_output";
    case Stream::kHeadMixingOut: return "head_mixing_out";
    case Stream::kAttnOut: return "attn_out";
    case Stream::kMlpInput: return "mlp_input";
    case Stream::kMlpAct: return "mlp_act";
    case Stream::kMlpOutput: return "mlp_output";
    case Stream::kBlockOut: return "block_out";
  }
  return "?";
}

inline std::optional<Stream> parse_stream(std::string_view name) {
  for (Stream s : kAllStreams) {
    if (stream_name(s) == name) return s;
  }
  return std::nullopt;
}

/// Transformer-style site name, e.g. "L1.block_out".
inline std::string site_name(int layer, Stream s) {
  return "L" + std::to_string(layer) + "." + std::string(stream_name(s));
}

struct SiteInfo {
  std::string name;
  int layer = 0;
  Stream stream = Stream::kBlockOut;
  Eigen::Index width = 0;
  /// Width of one head's slice for per-head streams, 0 otherwise.
  Eigen::Index head_width = 0;
};

/// Token ids or a real feature vector.
using Input = std::variant<std::vector<int>, Vector>;

/// Receives the whole stream matrix at a site (positions x width) and
/// returns its replacement, which must have the same shape.
using Hook = std::function<ad::Var(ad::Var)>;
using HookMap = std::map<std::string, Hook, std::less<>>;

// ---------------------------------------------------------------------------
// Model interface

class Model {
 public:
  virtual ~Model() = default;

  virtual std::string kind() const = 0;
  virtual const std::vector<SiteInfo>& sites() const = 0;
  virtual Eigen::Index output_dim() const = 0;
  virtual const std::vector<Matrix>& parameters() const = 0;
  virtual std::vector<std::string> parameter_names() const = 0;

  /// Logits (1 x output_dim) for the answer position. `params` must come
  /// from bind() on the same tape.
  virtual ad::Var forward(ad::Tape& tape, std::span<const ad::Var> params,
                          const Input& input, const HookMap& hooks) const = 0;

  /// Puts the parameters on the tape, as trainable leaves or constants.
  std::vector<ad::Var> bind(ad::Tape& tape, bool trainable) const {
    std::vector<ad::Var> out;
    out.reserve(parameters().size());
    for (const Matrix& p : parameters()) {
      out.push_back(trainable ? tape.parameter(p) : tape.constant(p));
    }
    return out;
  }

  /// Weights that read the given mlp_act-style site (width x out), if the
  /// site feeds a single linear map.
  virtual const Matrix* down_projection(std::string_view /*site*/) const { return nullptr; }

  bool has_site(std::string_view name) const {
    for (const SiteInfo& s : sites()) {
      if (s.name == name) return true;
    }
    return false;
  }

  const SiteInfo& site(std::string_view name) const {
    for (const SiteInfo& s : sites()) {
      if (s.name == name) return s;
    }
    fail(ErrorCode::kUnknownSite, std::string(name) + " in " + kind());
  }

  /// Positions the model produces for this input (1 for vector inputs).
  virtual Eigen::Index positions(const Input& input) const {
    if (const auto* toks = std::get_if<std::vector<int>>(&input)) {
      return static_cast<Eigen::Index>(toks->size());
    }
    return 1;
  }

  Eigen::RowVectorXd logits(const Input& input) const {
    ad::Tape tape;
    const auto params = bind(tape, false);
    return forward(tape, params, input, {}).value().row(0);
  }

  int predict(const Input& input) const {
    Eigen::Index best = 0;
    logits(input).maxCoeff(&best);
    return static_cast<int>(best);
  }
};

namespace detail {

inline ad::Var run_hook(const HookMap& hooks, const std::string& name, ad::Var x) {
  if (hooks.empty()) return x;
  const auto it = hooks.find(name);
  if (it == hooks.end()) return x;
  ad::Var y = it->second(x);
  if (y.rows() != x.rows() || y.cols() != x.cols()) {
    fail(ErrorCode::kShapeMismatch, "hook at " + name + " changed the stream shape");
  }
  return y;
}

inline const std::vector<int>& tokens_of(const Input& input, std::string_view who) {
  const auto* toks = std::get_if<std::vector<int>>(&input);
  if (toks == nullptr) {
    fail(ErrorCode::kShapeMismatch, std::string(who) + " expects token input");
  }
  return *toks;
}

inline const Vector& vector_of(const Input& input, std::string_view who) {
  const auto* v = std::get_if<Vector>(&input);
  if (v == nullptr) {
    fail(ErrorCode::kShapeMismatch, std::string(who) + " expects a real vector input");
  }
  return *v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Toy copy network and its rotated twin

/// f(x) = (x W1^T) W2 with one scalar input, three hidden units and one
/// scalar output.
struct ToyNetwork {
  Eigen::Vector3d w1{1.0, 0.0, 1.0};
  Eigen::Vector3d w2{0.0, 2.0, 1.0};

  struct Result {
    Eigen::Vector3d hidden;
    double output = 0.0;
  };

  Result forward(double x) const {
    Result r;
    r.hidden = x * w1;
    // Written out term by term: w2[0]*H1 + w2[1]*H2 + w2[2]*H3.
    r.output = w2(0) * r.hidden(0) + w2(1) * r.hidden(1) + w2(2) * r.hidden(2);
    return r;
  }

  /// Output when the hidden vector is replaced wholesale.
  double readout(const Eigen::Vector3d& hidden) const { return hidden.dot(w2); }
};

inline ToyNetwork::Result toy_forward(const ToyNetwork& net, double x) {
  return net.forward(x);
}

/// Change-of-basis used by default for the rotated toy network. Its first
/// row is the (H1 + H2) direction.
inline Eigen::Matrix3d default_toy_rotation() {
  const double s = 1.0 / std::numbers::sqrt2;
  Eigen::Matrix3d r;
  r << s, s, 0.0,  //
      -s, s, 0.0,  //
      0.0, 0.0, 1.0;
  return r;
}

/// g(x) = W2^T R^T (R x W1): hidden units live in the rotated basis and the
/// output weights are rotated to match, so g and f agree on every input.
struct RotatedToyNetwork {
  ToyNetwork base;
  Eigen::Matrix3d rotation = default_toy_rotation();

  static RotatedToyNetwork make(const ToyNetwork& base, const Eigen::Matrix3d& r) {
    if (!(r.transpose() * r).isApprox(Eigen::Matrix3d::Identity(), 1e-12)) {
      fail(ErrorCode::kNotOrthonormal, "rotation is not orthonormal");
    }
    return RotatedToyNetwork{base, r};
  }

  Eigen::Vector3d hidden(double x) const { return rotation * (x * base.w1); }
  Eigen::Vector3d output_weights() const { return rotation * base.w2; }
  double readout(const Eigen::Vector3d& hidden_rot) const {
    return output_weights().dot(hidden_rot);
  }

  ToyNetwork::Result forward(double x) const {
    ToyNetwork::Result r;
    r.hidden = hidden(x);
    r.output = readout(r.hidden);
    return r;
  }
};

inline ToyNetwork::Result rotated_forward(const RotatedToyNetwork& net, double x) {
  return net.forward(x);
}

/// Either toy network as a Model with a single site "hidden" (the activation
/// right before the output weights, i.e. an mlp_act-style stream).
class ToyModel final : public Model {
 public:
  explicit ToyModel(const ToyNetwork& net) : rotated_(false) {
    init(net.w1, net.w2);
  }
  explicit ToyModel(const RotatedToyNetwork& net) : rotated_(true) {
    init(net.rotation * net.base.w1, net.output_weights());
  }
  ToyModel(const Eigen::Vector3d& w1, const Eigen::Vector3d& w2, bool rotated)
      : rotated_(rotated) {
    init(w1, w2);
  }

  std::string kind() const override { return rotated_ ? "rotated_toy" : "toy"; }
  const std::vector<SiteInfo>& sites() const override { return sites_; }
  Eigen::Index output_dim() const override { return 1; }
  const std::vector<Matrix>& parameters() const override { return params_; }
  std::vector<std::string> parameter_names() const override { return {"w1", "w2"}; }

  /// Down-projection applied to the hidden site, shape 3 x 1.
  const Matrix& w_out() const { return params_[1]; }
  const Matrix* down_projection(std::string_view site) const override {
    return site == "hidden" ? &params_[1] : nullptr;
  }

  ad::Var forward(ad::Tape& tape, std::span<const ad::Var> params,
                  const Input& input, const HookMap& hooks) const override {
    const Vector& x = detail::vector_of(input, "toy network");
    if (x.size() != 1) fail(ErrorCode::kShapeMismatch, "toy network takes one scalar");
    ad::Var in = tape.constant(Matrix::Constant(1, 1, x(0)));
    ad::Var hidden = ad::matmul(in, params[0]);
    hidden = detail::run_hook(hooks, "hidden", hidden);
    return ad::matmul(hidden, params[1]);
  }

 private:
  void init(const Eigen::Vector3d& w1, const Eigen::Vector3d& w2) {
    params_ = {Matrix(w1.transpose()), Matrix(w2)};
    sites_ = {SiteInfo{"hidden", 0, Stream::kMlpAct, 3, 0}};
  }

  bool rotated_;
  std::vector<Matrix> params_;
  std::vector<SiteInfo> sites_;
};

// ---------------------------------------------------------------------------
// Plain MLP over a real input vector

enum class Activation { kRelu, kGelu };

/// Stack of blocks h -> act(h W1 + b1) W2 + b2. Logits are the last block's
/// output. Sites per block: L{i}.mlp_input, L{i}.mlp_act, L{i}.mlp_output.
class Mlp final : public Model {
 public:
  struct Config {
    Eigen::Index input_dim = 8;
    std::vector<Eigen::Index> hidden = {16};
    std::vector<Eigen::Index> outputs = {8};
    Activation activation = Activation::kRelu;
  };

  Mlp(Config cfg, std::vector<Matrix> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    validate();
  }

  static Mlp random(const Config& cfg, std::uint64_t seed) {
    Rng rng = make_rng(seed, "mlp.init");
    std::vector<Matrix> p;
    Eigen::Index in = cfg.input_dim;
    for (std::size_t b = 0; b < cfg.hidden.size(); ++b) {
      const Eigen::Index h = cfg.hidden[b], o = cfg.outputs[b];
      p.push_back(gaussian(rng, in, h, 1.0 / std::sqrt(static_cast<double>(in))));
      p.push_back(gaussian(rng, 1, h, 0.1));
      p.push_back(gaussian(rng, h, o, 1.0 / std::sqrt(static_cast<double>(h))));
      p.push_back(gaussian(rng, 1, o, 0.1));
      in = o;
    }
    return Mlp(cfg, std::move(p));
  }

  std::string kind() const override { return "mlp"; }
  const std::vector<SiteInfo>& sites() const override { return sites_; }
  Eigen::Index output_dim() const override { return cfg_.outputs.back(); }
  const std::vector<Matrix>& parameters() const override { return params_; }
  std::vector<std::string> parameter_names() const override {
    std::vector<std::string> n;
    for (std::size_t b = 0; b < cfg_.hidden.size(); ++b) {
      const std::string p = "L" + std::to_string(b) + ".";
      for (const char* s : {"w_in", "b_in", "w_out", "b_out"}) n.push_back(p + s);
    }
    return n;
  }
  const Config& config() const { return cfg_; }

  /// Down-projection of block `layer` (hidden x output).
  const Matrix& w_out(int layer) const { return params_[4 * static_cast<std::size_t>(layer) + 2]; }
  const Matrix* down_projection(std::string_view site) const override {
    for (const SiteInfo& s : sites_) {
      if (s.name == site && s.stream == Stream::kMlpAct) return &w_out(s.layer);
    }
    return nullptr;
  }

  ad::Var forward(ad::Tape& tape, std::span<const ad::Var> params,
                  const Input& input, const HookMap& hooks) const override {
    const Vector& x = detail::vector_of(input, "mlp");
    if (x.size() != cfg_.input_dim) {
      fail(ErrorCode::kShapeMismatch, "mlp input has wrong length");
    }
    ad::Var h = tape.constant(Matrix(x.transpose()));
    for (std::size_t b = 0; b < cfg_.hidden.size(); ++b) {
      const int l = static_cast<int>(b);
      h = detail::run_hook(hooks, site_name(l, Stream::kMlpInput), h);
      ad::Var pre = ad::add_row(ad::matmul(h, params[4 * b]), params[4 * b + 1]);
      ad::Var act = cfg_.activation == Activation::kRelu ? ad::relu(pre) : ad::gelu(pre);
      act = detail::run_hook(hooks, site_name(l, Stream::kMlpAct), act);
      h = ad::add_row(ad::matmul(act, params[4 * b + 2]), params[4 * b + 3]);
      h = detail::run_hook(hooks, site_name(l, Stream::kMlpOutput), h);
    }
    return h;
  }

 private:
  void validate() {
    if (cfg_.hidden.empty() || cfg_.hidden.size() != cfg_.outputs.size() ||
        params_.size() != 4 * cfg_.hidden.size()) {
      fail(ErrorCode::kShapeMismatch, "mlp config and parameters disagree");
    }
    Eigen::Index in = cfg_.input_dim;
    sites_.clear();
    for (std::size_t b = 0; b < cfg_.hidden.size(); ++b) {
      const Eigen::Index h = cfg_.hidden[b], o = cfg_.outputs[b];
      const auto& p = params_;
      if (p[4 * b].rows() != in || p[4 * b].cols() != h || p[4 * b + 1].cols() != h ||
          p[4 * b + 2].rows() != h || p[4 * b + 2].cols() != o || p[4 * b + 3].cols() != o) {
        fail(ErrorCode::kShapeMismatch, "mlp block " + std::to_string(b) + " shape");
      }
      const int l = static_cast<int>(b);
      sites_.push_back({site_name(l, Stream::kMlpInput), l, Stream::kMlpInput, in, 0});
      sites_.push_back({site_name(l, Stream::kMlpAct), l, Stream::kMlpAct, h, 0});
      sites_.push_back({site_name(l, Stream::kMlpOutput), l, Stream::kMlpOutput, o, 0});
      in = o;
    }
  }

  Config cfg_;
  std::vector<Matrix> params_;
  std::vector<SiteInfo> sites_;
};

// ---------------------------------------------------------------------------
// Mini transformer

struct TransformerConfig {
  int n_layers = 2;
  int d_model = 32;
  int n_heads = 4;
  int vocab = 64;
  int max_seq = 18;
  int d_mlp = 128;
  bool layer_norm = true;
  Activation activation = Activation::kGelu;

  int head_width() const { return d_model / n_heads; }
};

/// Pre-norm decoder-only transformer with learned absolute positions.
///
/// Per layer the streams are, in order:
///   block_input       residual entering the layer
///   attn_input        LN1(block_input)
///   attn_value_output per-head attention outputs, concatenated (H x d/H)
///   head_mixing_out   attn_value_output W_O
///   attn_out          head_mixing_out + b_O
///   mlp_input         LN2(block_input + attn_out)
///   mlp_act           act(mlp_input W_1 + b_1)
///   mlp_output        mlp_act W_2 + b_2
///   block_out         block_input + attn_out + mlp_output
/// Logits are read from the last position after a final LN.
class MiniTransformer final : public Model {
 public:
  // Parameter layout: tok_emb, pos_emb, 16 per layer, ln_f gain, ln_f bias,
  // unembed.
  static constexpr std::size_t kPerLayer = 16;
  enum LayerParam : std::size_t {
    kLn1Gain, kLn1Bias, kWq, kBq, kWk, kBk, kWv, kBv, kWo, kBo,
    kLn2Gain, kLn2Bias, kW1, kB1, kW2, kB2,
  };

  MiniTransformer(TransformerConfig cfg, std::vector<Matrix> params)
      : cfg_(cfg), params_(std::move(params)) {
    validate();
  }

  static MiniTransformer random(const TransformerConfig& cfg, std::uint64_t seed,
                                double init_std = 0.1) {
    Rng rng = make_rng(seed, "transformer.init");
    const Eigen::Index d = cfg.d_model, m = cfg.d_mlp;
    std::vector<Matrix> p;
    p.push_back(gaussian(rng, cfg.vocab, d, init_std));
    p.push_back(gaussian(rng, cfg.max_seq, d, init_std));
    const double proj_std = init_std / std::sqrt(2.0 * cfg.n_layers);
    for (int l = 0; l < cfg.n_layers; ++l) {
      p.push_back(Matrix::Ones(1, d));
      p.push_back(Matrix::Zero(1, d));
      for (int k = 0; k < 3; ++k) {
        p.push_back(gaussian(rng, d, d, init_std));
        p.push_back(Matrix::Zero(1, d));
      }
      p.push_back(gaussian(rng, d, d, proj_std));
      p.push_back(Matrix::Zero(1, d));
      p.push_back(Matrix::Ones(1, d));
      p.push_back(Matrix::Zero(1, d));
      p.push_back(gaussian(rng, d, m, init_std));
      p.push_back(Matrix::Zero(1, m));
      p.push_back(gaussian(rng, m, d, proj_std));
      p.push_back(Matrix::Zero(1, d));
    }
    p.push_back(Matrix::Ones(1, d));
    p.push_back(Matrix::Zero(1, d));
    p.push_back(gaussian(rng, d, cfg.vocab, init_std));
    return MiniTransformer(cfg, std::move(p));
  }

  std::string kind() const override { return "mini_transformer"; }
  const std::vector<SiteInfo>& sites() const override { return sites_; }
  Eigen::Index output_dim() const override { return cfg_.vocab; }
  const std::vector<Matrix>& parameters() const override { return params_; }
  std::vector<Matrix>& mutable_parameters() { return params_; }
  const TransformerConfig& config() const { return cfg_; }

  std::vector<std::string> parameter_names() const override {
    static constexpr std::array<const char*, kPerLayer> names = {
        "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk",
        "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ln2.g", "ln2.b",
        "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"};
    std::vector<std::string> out = {"tok_emb", "pos_emb"};
    for (int l = 0; l < cfg_.n_layers; ++l) {
      for (const char* n : names) out.push_back("L" + std::to_string(l) + "." + n);
    }
    out.insert(out.end(), {"ln_f.g", "ln_f.b", "unembed"});
    return out;
  }

  static std::size_t layer_param(int layer, LayerParam p) {
    return 2 + kPerLayer * static_cast<std::size_t>(layer) + p;
  }
  const Matrix& param(int layer, LayerParam p) const { return params_[layer_param(layer, p)]; }
  Matrix& param(int layer, LayerParam p) { return params_[layer_param(layer, p)]; }
  Matrix& token_embedding() { return params_[0]; }
  Matrix& position_embedding() { return params_[1]; }
  Matrix& unembedding() { return params_.back(); }
  const Matrix* down_projection(std::string_view site) const override {
    for (const SiteInfo& s : sites_) {
      if (s.name == site && s.stream == Stream::kMlpAct) return &param(s.layer, kW2);
    }
    return nullptr;
  }

  ad::Var forward(ad::Tape& /*tape*/, std::span<const ad::Var> params,
                  const Input& input, const HookMap& hooks) const override {
    const auto& toks = detail::tokens_of(input, "mini transformer");
    const auto n = static_cast<Eigen::Index>(toks.size());
    if (n == 0 || n > cfg_.max_seq) {
      fail(ErrorCode::kShapeMismatch, "sequence length " + std::to_string(n) +
                                          " outside [1, " + std::to_string(cfg_.max_seq) + "]");
    }
    std::vector<int> pos(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);

    ad::Var x = ad::add(ad::gather_rows(params[0], toks), ad::gather_rows(params[1], pos));
    const int dh = cfg_.head_width();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    for (int l = 0; l < cfg_.n_layers; ++l) {
      auto P = [&](LayerParam p) { return params[layer_param(l, p)]; };
      auto hook = [&](Stream s, ad::Var v) { return detail::run_hook(hooks, site_name(l, s), v); };

      x = hook(Stream::kBlockInput, x);
      ad::Var a_in = norm(x, P(kLn1Gain), P(kLn1Bias));
      a_in = hook(Stream::kAttnInput, a_in);

      const ad::Var q = ad::add_row(ad::matmul(a_in, P(kWq)), P(kBq));
      const ad::Var k = ad::add_row(ad::matmul(a_in, P(kWk)), P(kBk));
      const ad::Var v = ad::add_row(ad::matmul(a_in, P(kWv)), P(kBv));
      std::vector<ad::Var> heads;
      heads.reserve(static_cast<std::size_t>(cfg_.n_heads));
      for (int h = 0; h < cfg_.n_heads; ++h) {
        const ad::Var qh = ad::slice_cols(q, h * dh, dh);
        const ad::Var kh = ad::slice_cols(k, h * dh, dh);
        const ad::Var vh = ad::slice_cols(v, h * dh, dh);
        const ad::Var att = ad::causal_softmax(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt));
        heads.push_back(ad::matmul(att, vh));
      }
      ad::Var avo = ad::concat_cols(heads);
      avo = hook(Stream::kAttnValueOutput, avo);
      ad::Var mixed = ad::matmul(avo, P(kWo));
      mixed = hook(Stream::kHeadMixingOut, mixed);
      ad::Var attn_out = ad::add_row(mixed, P(kBo));
      attn_out = hook(Stream::kAttnOut, attn_out);
      const ad::Var mid = ad::add(x, attn_out);

      ad::Var m_in = norm(mid, P(kLn2Gain), P(kLn2Bias));
      m_in = hook(Stream::kMlpInput, m_in);
      const ad::Var pre = ad::add_row(ad::matmul(m_in, P(kW1)), P(kB1));
      ad::Var act = cfg_.activation == Activation::kGelu ? ad::gelu(pre) : ad::relu(pre);
      act = hook(Stream::kMlpAct, act);
      ad::Var m_out = ad::add_row(ad::matmul(act, P(kW2)), P(kB2));
      m_out = hook(Stream::kMlpOutput, m_out);
      x = ad::add(mid, m_out);
      x = hook(Stream::kBlockOut, x);
    }
    const std::size_t nf = params.size();
    const ad::Var last = ad::row(x, n - 1);
    const ad::Var fin = norm(last, params[nf - 3], params[nf - 2]);
    return ad::matmul(fin, params[nf - 1]);
  }

 private:
  ad::Var norm(const ad::Var& x, const ad::Var& gain, const ad::Var& bias) const {
    if (!cfg_.layer_norm) return x;
    return ad::add_row(ad::mul_row(ad::layer_norm(x), gain), bias);
  }

  void validate() {
    if (cfg_.n_heads <= 0 || cfg_.d_model % cfg_.n_heads != 0) {
      fail(ErrorCode::kShapeMismatch, "d_model must be a multiple of n_heads");
    }
    const std::size_t expected = 2 + kPerLayer * static_cast<std::size_t>(cfg_.n_layers) + 3;
    if (params_.size() != expected) {
      fail(ErrorCode::kShapeMismatch, "transformer expects " + std::to_string(expected) +
                                          " parameter matrices, got " +
                                          std::to_string(params_.size()));
    }
    const Eigen::Index d = cfg_.d_model, m = cfg_.d_mlp;
    auto check = [&](std::size_t i, Eigen::Index r, Eigen::Index c) {
      if (params_[i].rows() != r || params_[i].cols() != c) {
        fail(ErrorCode::kShapeMismatch, "parameter " + parameter_names()[i] + " is " +
                                            linalg::shape_of(params_[i]));
      }
    };
    check(0, cfg_.vocab, d);
    check(1, cfg_.max_seq, d);
    for (int l = 0; l < cfg_.n_layers; ++l) {
      for (LayerParam p : {kLn1Gain, kLn1Bias, kBq, kBk, kBv, kBo, kLn2Gain, kLn2Bias, kB2}) {
        check(layer_param(l, p), 1, d);
      }
      for (LayerParam p : {kWq, kWk, kWv, kWo}) check(layer_param(l, p), d, d);
      check(layer_param(l, kW1), d, m);
      check(layer_param(l, kB1), 1, m);
      check(layer_param(l, kW2), m, d);
    }
    check(params_.size() - 3, 1, d);
    check(params_.size() - 2, 1, d);
    check(params_.size() - 1, d, cfg_.vocab);

    sites_.clear();
    for (int l = 0; l < cfg_.n_layers; ++l) {
      for (Stream s : kAllStreams) {
        const Eigen::Index w = s == Stream::kMlpAct ? m : d;
        const Eigen::Index hw = s == Stream::kAttnValueOutput ? cfg_.head_width() : 0;
        sites_.push_back({site_name(l, s), l, s, w, hw});
      }
    }
  }

  TransformerConfig cfg_;
  std::vector<Matrix> params_;
  std::vector<SiteInfo> sites_;
};

// ---------------------------------------------------------------------------
// Capture and patching

/// Position selector: non-negative indexes from the front, negative from the
/// back (-1 is the last token); kAllPositions selects every row.
inline constexpr int kAllPositions = std::numeric_limits<int>::min();
inline constexpr int kLastPosition = -1;

inline Eigen::Index resolve_position(int position, Eigen::Index n) {
  const Eigen::Index p = position < 0 ? n + position : position;
  if (p < 0 || p >= n) {
    fail(ErrorCode::kIndexOutOfRange, "position " + std::to_string(position) +
                                          " outside sequence of length " + std::to_string(n));
  }
  return p;
}

struct Activations {
  std::map<std::string, Matrix, std::less<>> streams;  // positions x width
  Eigen::RowVectorXd logits;
};

/// Runs one forward pass recording the requested streams.
inline Activations forward_with_capture(const Model& model, const Input& input,
                                        std::span<const std::string> site_names) {
  Activations out;
  HookMap hooks;
  for (const std::string& name : site_names) {
    model.site(name);
    hooks[name] = [&out, name](ad::Var v) {
      out.streams[name] = v.value();
      return v;
    };
  }
  ad::Tape tape;
  const auto params = model.bind(tape, false);
  out.logits = model.forward(tape, params, input, hooks).value().row(0);
  return out;
}

/// A non-differentiable patch applied to the selected rows of one site.
struct PatchIntervention {
  std::string site;
  int position = kLastPosition;
  std::function<Matrix(const Matrix&)> patch;
};

inline Eigen::RowVectorXd forward_with_intervention(
    const Model& model, const Input& input, std::span<const PatchIntervention> patches) {
  HookMap hooks;
  std::map<std::string, std::vector<const PatchIntervention*>, std::less<>> by_site;
  for (const auto& p : patches) {
    model.site(p.site);
    by_site[p.site].push_back(&p);
  }
  for (auto& [name, list] : by_site) {
    hooks[name] = [list](ad::Var x) {
      Matrix m = x.value();
      for (const PatchIntervention* p : list) {
        if (p->position == kAllPositions) {
          Matrix r = p->patch(m);
          if (r.rows() != m.rows() || r.cols() != m.cols()) {
            fail(ErrorCode::kShapeMismatch, "patch at " + p->site + " returned " +
                                                linalg::shape_of(r));
          }
          m = std::move(r);
        } else {
          const Eigen::Index row = resolve_position(p->position, m.rows());
          Matrix r = p->patch(m.row(row));
          if (r.rows() != 1 || r.cols() != m.cols()) {
            fail(ErrorCode::kShapeMismatch, "patch at " + p->site + " returned " +
                                                linalg::shape_of(r));
          }
          m.row(row) = r.row(0);
        }
      }
      return x.tape()->constant(std::move(m));
    };
  }
  ad::Tape tape;
  const auto params = model.bind(tape, false);
  return model.forward(tape, params, input, hooks).value().row(0);
}

}  // namespace dii
