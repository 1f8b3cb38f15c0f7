#pragma once

// Synthetic tasks with exact high-level causal models, and networks whose
// causal variables sit in a known subspace by construction.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "dii/autodiff.hpp"
#include "dii/error.hpp"
#include "dii/intervention.hpp"
#include "dii/linalg.hpp"
#include "dii/metrics.hpp"
#include "dii/models.hpp"
#include "dii/optim.hpp"
#include "dii/rng.hpp"

namespace dii {

struct ExamplePair {
  Input base;
  Input source;
  int base_label = -1;
  int cf_label = -1;
  int template_id = 0;
};

struct PairSplit {
  std::vector<ExamplePair> train;
  std::vector<ExamplePair> eval;
};

inline std::set<int> template_ids(std::span<const ExamplePair> pairs) {
  std::set<int> ids;
  for (const ExamplePair& p : pairs) ids.insert(p.template_id);
  return ids;
}

inline void require_disjoint_templates(std::span<const ExamplePair> train,
                                       std::span<const ExamplePair> eval) {
  const auto a = template_ids(train);
  for (int t : template_ids(eval)) {
    if (a.count(t) != 0) {
      fail(ErrorCode::kTemplateLeak, "template " + std::to_string(t) +
                                         " appears in both training and evaluation pairs");
    }
  }
}

// ---------------------------------------------------------------------------
// IOI-like name task
//
// Fixed length sequences. Position 1 holds the first name, position 3 the
// second, the final position repeats one of them (the subject). The answer
// is the other name. Remaining positions hold filler tokens whose
// arrangement is what distinguishes templates.

enum class IoiVariable { kNamePosition, kIoName };

struct IoiConfig {
  int n_names = 20;
  int n_fillers = 10;
  int seq_len = 18;
  int n_templates = 3;
  std::vector<int> train_templates = {0, 1};
  std::vector<int> eval_templates = {2};
  IoiVariable variable = IoiVariable::kNamePosition;

  int vocab() const { return n_names + n_fillers; }
};

inline constexpr int kFirstNamePos = 1;
inline constexpr int kSecondNamePos = 3;

struct IoiExample {
  std::vector<int> tokens;
  int first = 0;
  int second = 0;
  bool io_first = true;  // the answer is the first name
  int template_id = 0;

  int io() const { return io_first ? first : second; }
  int subject() const { return io_first ? second : first; }
};

/// Filler layout of one template. Independent of any dataset seed.
inline std::vector<int> ioi_template(int template_id, const IoiConfig& cfg) {
  Rng rng = make_rng(static_cast<std::uint64_t>(template_id), "ioi.template");
  std::uniform_int_distribution<int> pick(0, cfg.n_fillers - 1);
  std::vector<int> layout(static_cast<std::size_t>(cfg.seq_len));
  for (int& f : layout) f = cfg.n_names + pick(rng);
  return layout;
}

inline IoiExample make_ioi_example(int template_id, int first, int second, bool io_first,
                                   const IoiConfig& cfg) {
  if (first == second) fail(ErrorCode::kConfigInvalid, "IOI example needs two distinct names");
  IoiExample ex;
  ex.tokens = ioi_template(template_id, cfg);
  ex.tokens[kFirstNamePos] = first;
  ex.tokens[kSecondNamePos] = second;
  ex.tokens.back() = io_first ? second : first;
  ex.first = first;
  ex.second = second;
  ex.io_first = io_first;
  ex.template_id = template_id;
  return ex;
}

/// Reads the causal variables back from a token sequence.
inline IoiExample parse_ioi(const std::vector<int>& tokens, int template_id = -1) {
  IoiExample ex;
  ex.tokens = tokens;
  ex.first = tokens.at(kFirstNamePos);
  ex.second = tokens.at(kSecondNamePos);
  ex.io_first = tokens.back() == ex.second;
  ex.template_id = template_id;
  return ex;
}

inline int ioi_label(const IoiExample& ex) { return ex.io(); }

/// High-level counterfactual: the base's answer once `variable` takes the
/// source's value.
inline int ioi_counterfactual(const IoiExample& base, const IoiExample& source,
                              IoiVariable variable) {
  if (variable == IoiVariable::kNamePosition) {
    return source.io_first ? base.first : base.second;
  }
  return source.io();
}

inline IoiExample random_ioi_example(Rng& rng, int template_id, const IoiConfig& cfg,
                                     std::optional<bool> io_first = std::nullopt) {
  std::uniform_int_distribution<int> name(0, cfg.n_names - 1);
  const int a = name(rng);
  int b = name(rng);
  while (b == a) b = name(rng);
  const bool first = io_first.has_value() ? *io_first : std::bernoulli_distribution(0.5)(rng);
  return make_ioi_example(template_id, a, b, first, cfg);
}

/// Sources always change the aligned variable, so every counterfactual label
/// differs from the base label.
inline ExamplePair random_ioi_pair(Rng& rng, int template_id, const IoiConfig& cfg) {
  const IoiExample base = random_ioi_example(rng, template_id, cfg);
  IoiExample source;
  if (cfg.variable == IoiVariable::kNamePosition) {
    source = random_ioi_example(rng, template_id, cfg, !base.io_first);
  } else {
    do {
      source = random_ioi_example(rng, template_id, cfg);
    } while (source.io() == base.io() || source.io() == base.subject());
  }
  return ExamplePair{base.tokens, source.tokens, ioi_label(base),
                     ioi_counterfactual(base, source, cfg.variable), template_id};
}

inline PairSplit gen_ioi_like(std::uint64_t seed, int n_train, int n_eval, const IoiConfig& cfg) {
  if (cfg.n_templates < 3) {
    fail(ErrorCode::kInsufficientTemplates,
         std::to_string(cfg.n_templates) + " templates; at least 3 are needed");
  }
  if (cfg.n_names < 2) fail(ErrorCode::kConfigInvalid, "need at least two names");
  if (cfg.seq_len < 5) fail(ErrorCode::kConfigInvalid, "sequence too short for the layout");
  if (cfg.train_templates.empty() || cfg.eval_templates.empty()) {
    fail(ErrorCode::kInsufficientTemplates, "training and evaluation templates must be non-empty");
  }
  for (int t : cfg.train_templates) {
    if (std::find(cfg.eval_templates.begin(), cfg.eval_templates.end(), t) !=
        cfg.eval_templates.end()) {
      fail(ErrorCode::kTemplateLeak, "template " + std::to_string(t) + " in both splits");
    }
  }
  for (const auto* list : {&cfg.train_templates, &cfg.eval_templates}) {
    for (int t : *list) {
      if (t < 0 || t >= cfg.n_templates) {
        fail(ErrorCode::kConfigInvalid, "template id " + std::to_string(t) + " out of range");
      }
    }
  }
  Rng rng = make_rng(seed, "dataset");
  PairSplit out;
  auto fill = [&](std::vector<ExamplePair>& dst, const std::vector<int>& templates, int n) {
    std::uniform_int_distribution<std::size_t> pick(0, templates.size() - 1);
    for (int i = 0; i < n; ++i) dst.push_back(random_ioi_pair(rng, templates[pick(rng)], cfg));
  };
  fill(out.train, cfg.train_templates, n_train);
  fill(out.eval, cfg.eval_templates, n_eval);
  require_disjoint_templates(out.train, out.eval);
  return out;
}

// ---------------------------------------------------------------------------
// Equality-of-equalities task over object ids: ((a, b), (c, d)).

enum class EqualityVariable { kLeft, kRight };

struct EqualityTask {
  static bool left(const std::vector<int>& t) { return t.at(0) == t.at(1); }
  static bool right(const std::vector<int>& t) { return t.at(2) == t.at(3); }
  static int label(const std::vector<int>& t) { return left(t) == right(t) ? 1 : 0; }
  /// Base label once the chosen equality takes the source's value.
  static int counterfactual(const std::vector<int>& base, const std::vector<int>& source,
                            EqualityVariable v) {
    const bool l = v == EqualityVariable::kLeft ? left(source) : left(base);
    const bool r = v == EqualityVariable::kRight ? right(source) : right(base);
    return l == r ? 1 : 0;
  }
};

inline std::vector<int> random_equality_input(Rng& rng, int n_objects, bool left_eq,
                                              bool right_eq) {
  std::uniform_int_distribution<int> obj(0, n_objects - 1);
  auto half = [&](bool eq) {
    const int a = obj(rng);
    int b = a;
    if (!eq) {
      while (b == a) b = obj(rng);
    }
    return std::pair{a, b};
  };
  const auto [a, b] = half(left_eq);
  const auto [c, d] = half(right_eq);
  return {a, b, c, d};
}

/// Pairs whose source flips the chosen intermediate equality.
inline std::vector<ExamplePair> gen_equality_task(std::uint64_t seed, int n_pairs,
                                                  int n_objects = 10,
                                                  EqualityVariable v = EqualityVariable::kLeft) {
  if (n_objects < 2) fail(ErrorCode::kConfigInvalid, "need at least two objects");
  Rng rng = make_rng(seed, "dataset");
  std::bernoulli_distribution coin(0.5);
  std::vector<ExamplePair> out;
  out.reserve(static_cast<std::size_t>(n_pairs));
  for (int i = 0; i < n_pairs; ++i) {
    const bool bl = coin(rng), br = coin(rng);
    const auto base = random_equality_input(rng, n_objects, bl, br);
    const bool sl = v == EqualityVariable::kLeft ? !bl : coin(rng);
    const bool sr = v == EqualityVariable::kRight ? !br : coin(rng);
    const auto source = random_equality_input(rng, n_objects, sl, sr);
    out.push_back({base, source, EqualityTask::label(base),
                   EqualityTask::counterfactual(base, source, v), 0});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Planted-subspace MLP
//
// Inputs are four tokens (x, y, template, noise). The hidden site holds
// h = f Q^T where f = [code(x); code(y); nuisance(joint input)] and Q is
// orthogonal. Codes are vertices of a regular simplex, so k dimensions carry
// a (k+1)-valued variable. A fixed soft readout computes (x + y) mod (k+1).
// The first k columns of Q span the x variable.

class PlantedMlp final : public Model {
 public:
  struct Shape {
    int width = 16;
    int rank = 1;
    int values = 2;  // rank + 1
    int noise = 1;   // number of noise tokens
    int templates = 3;
    int joint() const { return templates * values * values * noise; }
  };

  PlantedMlp(Shape shape, std::vector<Matrix> params) : shape_(shape), params_(std::move(params)) {
    const int units = shape_.values * shape_.values;
    if (params_.size() != 4 || params_[0].rows() != shape_.joint() ||
        params_[0].cols() != shape_.width || params_[1].rows() != shape_.width ||
        params_[1].cols() != units || params_[2].cols() != units ||
        params_[3].rows() != units || params_[3].cols() != shape_.values) {
      fail(ErrorCode::kShapeMismatch, "planted network parameters do not match its shape");
    }
    sites_ = {SiteInfo{"hidden", 0, Stream::kMlpInput, shape_.width, 0},
              SiteInfo{"readout_act", 0, Stream::kMlpAct, units, 0}};
  }

  std::string kind() const override { return "planted_mlp"; }
  const std::vector<SiteInfo>& sites() const override { return sites_; }
  Eigen::Index output_dim() const override { return shape_.values; }
  const std::vector<Matrix>& parameters() const override { return params_; }
  std::vector<std::string> parameter_names() const override {
    return {"hidden_table", "readout_w", "readout_b", "logit_w"};
  }
  const Matrix* down_projection(std::string_view site) const override {
    if (site == "readout_act") return &params_[3];
    if (site == "hidden") return &params_[1];
    return nullptr;
  }
  const Shape& shape() const { return shape_; }

  static constexpr double kSharpness = 10.0;

  std::vector<int> tokens(int x, int y, int t, int n) const {
    const int m = shape_.values;
    return {x, m + y, 2 * m + t, 2 * m + shape_.templates + n};
  }

  int joint_index(const std::vector<int>& toks) const {
    const int m = shape_.values;
    if (toks.size() != 4) fail(ErrorCode::kShapeMismatch, "planted network takes 4 tokens");
    const int x = toks[0], y = toks[1] - m, t = toks[2] - 2 * m,
              n = toks[3] - 2 * m - shape_.templates;
    if (x < 0 || x >= m || y < 0 || y >= m || t < 0 || t >= shape_.templates || n < 0 ||
        n >= shape_.noise) {
      fail(ErrorCode::kIndexOutOfRange, "token outside the planted network's vocabulary");
    }
    return ((t * m + x) * m + y) * shape_.noise + n;
  }

  ad::Var forward(ad::Tape& tape, std::span<const ad::Var> params, const Input& input,
                  const HookMap& hooks) const override {
    (void)tape;
    const auto& toks = detail::tokens_of(input, "planted network");
    const int idx[] = {joint_index(toks)};
    ad::Var h = ad::gather_rows(params[0], idx);
    h = detail::run_hook(hooks, "hidden", h);
    const ad::Var pre = ad::add_row(ad::matmul(h, params[1]), params[2]);
    ad::Var act = ad::softplus(pre, kSharpness);
    act = detail::run_hook(hooks, "readout_act", act);
    return ad::matmul(act, params[3]);
  }

  /// The four tokens index a single hidden row.
  Eigen::Index positions(const Input&) const override { return 1; }

 private:
  Shape shape_;
  std::vector<Matrix> params_;
  std::vector<SiteInfo> sites_;
};

/// Unit vectors c_0..c_k in R^k with <c_i, c_j> = -1/k for i != j.
inline Matrix simplex_codes(int k) {
  const int m = k + 1;
  Matrix centered = Matrix::Identity(m, m) - Matrix::Constant(m, m, 1.0 / m);
  // Rows of `centered` live in the k-dim subspace orthogonal to 1; express
  // them in an orthonormal basis of that subspace.
  Eigen::JacobiSVD<Matrix> svd(centered, Eigen::ComputeFullV);
  Matrix basis = svd.matrixV().leftCols(k);
  Matrix codes = centered * basis;
  for (Eigen::Index i = 0; i < codes.rows(); ++i) codes.row(i).normalize();
  return codes;  // m x k
}

struct PlantedNetwork {
  std::shared_ptr<PlantedMlp> model;
  SubspaceBasis planted;  // rank x width, the x-variable subspace
  Matrix rotation;        // Q
  std::string site = "hidden";
  bool rotated = true;

  int values() const { return model->shape().values; }
  int label(int x, int y) const { return (x + y) % values(); }

  /// Pairs sharing a template, sources always changing x.
  std::vector<ExamplePair> pairs(std::uint64_t seed, int n, std::span<const int> templates) const {
    Rng rng = make_rng(seed, "dataset");
    const auto& s = model->shape();
    std::uniform_int_distribution<int> val(0, s.values - 1), noise(0, s.noise - 1);
    std::uniform_int_distribution<std::size_t> tpl(0, templates.size() - 1);
    std::vector<ExamplePair> out;
    for (int i = 0; i < n; ++i) {
      const int t = templates[tpl(rng)];
      const int xa = val(rng), ya = val(rng), na = noise(rng);
      int xb = val(rng);
      while (xb == xa) xb = val(rng);
      const int yb = val(rng), nb = noise(rng);
      out.push_back({model->tokens(xa, ya, t, na), model->tokens(xb, yb, t, nb), label(xa, ya),
                     label(xb, ya), t});
    }
    return out;
  }

  PairSplit split(std::uint64_t seed, int n_train, int n_eval) const {
    const int train_t[] = {0, 1};
    const int eval_t[] = {2};
    PairSplit s{pairs(substream(seed, "train"), n_train, train_t),
                pairs(substream(seed, "eval"), n_eval, eval_t)};
    require_disjoint_templates(s.train, s.eval);
    return s;
  }

  /// Every (base, source) combination within each template.
  std::vector<ExamplePair> all_pairs() const {
    const auto& s = model->shape();
    std::vector<ExamplePair> out;
    for (int t = 0; t < s.templates; ++t) {
      for (int xa = 0; xa < s.values; ++xa)
        for (int ya = 0; ya < s.values; ++ya)
          for (int na = 0; na < s.noise; ++na)
            for (int xb = 0; xb < s.values; ++xb)
              for (int yb = 0; yb < s.values; ++yb)
                for (int nb = 0; nb < s.noise; ++nb)
                  out.push_back({model->tokens(xa, ya, t, na), model->tokens(xb, yb, t, nb),
                                 label(xa, ya), label(xb, ya), t});
    }
    return out;
  }
};

/// Builds and verifies a planted network. With rotated = false the planted
/// subspace is the first `rank` coordinate axes. A non-positive logit_gain
/// selects 2 * rank.
inline PlantedNetwork make_planted_network(int width, int rank, std::uint64_t seed,
                                           bool rotated = true, double logit_gain = 0.0) {
  if (rank < 1 || width < 1) fail(ErrorCode::kConfigInvalid, "width and rank must be positive");
  if (2 * rank > width) {
    fail(ErrorCode::kSiteTooNarrow, "width " + std::to_string(width) + " cannot hold two " +
                                        std::to_string(rank) + "-dim variables");
  }
  PlantedMlp::Shape shape;
  shape.width = width;
  shape.rank = rank;
  shape.values = rank + 1;
  const int nuisance = width - 2 * rank;
  const int per_noise = 3 * shape.values * shape.values;
  shape.noise = std::max(1, (nuisance + 1 + per_noise - 1) / per_noise);
  const int m = shape.values;
  if (!(logit_gain > 0.0)) logit_gain = 2.0 * rank;

  Rng rng = make_rng(seed, "planted.init");
  const Matrix codes = simplex_codes(rank);
  const Matrix q = rotated ? random_orthogonal(rng, width) : Matrix::Identity(width, width);
  Matrix nuisance_rows = gaussian(rng, shape.joint(), nuisance, 1.0 / std::sqrt(std::max(1, nuisance)));

  Matrix features = Matrix::Zero(shape.joint(), width);
  for (int t = 0; t < shape.templates; ++t)
    for (int x = 0; x < m; ++x)
      for (int y = 0; y < m; ++y)
        for (int n = 0; n < shape.noise; ++n) {
          const int j = ((t * m + x) * m + y) * shape.noise + n;
          features.block(j, 0, 1, rank) = codes.row(x);
          features.block(j, rank, 1, rank) = codes.row(y);
          if (nuisance > 0) features.block(j, 2 * rank, 1, nuisance) = nuisance_rows.row(j);
        }
  const Matrix hidden_table = features * q.transpose();

  const int units = m * m;
  Matrix code_map = Matrix::Zero(width, units);
  Matrix logit_w = Matrix::Zero(units, m);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      const int u = i * m + j;
      code_map.block(0, u, rank, 1) = codes.row(i).transpose();
      code_map.block(rank, u, rank, 1) = codes.row(j).transpose();
      logit_w(u, (i + j) % m) = logit_gain;
    }
  const double threshold = 1.5 - 1.0 / (2.0 * rank);
  const Matrix readout_w = q * code_map;
  const Matrix readout_b = Matrix::Constant(1, units, -threshold);

  PlantedNetwork net;
  net.model = std::make_shared<PlantedMlp>(
      shape, std::vector<Matrix>{hidden_table, readout_w, readout_b, logit_w});
  net.rotation = q;
  net.planted = linalg::orthonormalize(q.leftCols(rank).transpose());
  net.rotated = rotated;

  // Exhaustive check: swapping the planted subspace realizes the
  // counterfactual on every pair in the domain, and the clean network is
  // correct on every input.
  const SiteView view = site_view(*net.model, net.site);
  const SwapRule rule = net.planted;
  for (const ExamplePair& p : net.all_pairs()) {
    if (net.model->predict(p.base) != p.base_label) {
      fail(ErrorCode::kConstructionFailed, "planted network mislabels a clean input");
    }
    const auto logits = interchange(*net.model, view, p.base, p.source, rule);
    if (argmax(logits) != p.cf_label) {
      fail(ErrorCode::kConstructionFailed, "planted subspace swap misses a counterfactual");
    }
  }
  return net;
}

// ---------------------------------------------------------------------------
// Planted two-layer attention model for the name task
//
// Residual layout (width 32):
//   0-7   name one-hot        8-15  moved name        16 slot sign (+1 first, -1 second)
//   17    slot indicator      18    constant          19 subject-position signal
//   20-27 written by unplanted heads                  28-31 filler embeddings
// Layer 0: two heads (see planted_heads) attend from the last token to the
// earlier copy of the subject and write half the slot sign each into dim 19.
// Layer 1 head 0 moves the name from the slot the signal points away from.

struct PlantedTransformer {
  MiniTransformer model;
  IoiConfig task;
  std::vector<int> planted_heads;
  int planted_layer = 0;
  std::string signal_site = "L0.attn_out";
};

inline PlantedTransformer make_planted_transformer(std::uint64_t seed, int n_fillers = 10) {
  constexpr int kNames = 8;
  constexpr int kSlot = 16, kSlotOn = 17, kConst = 18, kSignal = 19, kJunk = 20, kFiller = 28;
  IoiConfig task;
  task.n_names = kNames;
  task.n_fillers = n_fillers;

  TransformerConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 32;
  cfg.n_heads = 4;
  cfg.vocab = task.vocab();
  cfg.max_seq = task.seq_len;
  cfg.d_mlp = 64;
  cfg.layer_norm = false;
  const int dh = cfg.head_width();
  const double sqrt_dh = std::sqrt(static_cast<double>(dh));

  Rng rng = make_rng(seed, "planted.transformer");
  MiniTransformer t = MiniTransformer::random(cfg, seed, 0.0);
  Matrix& emb = t.token_embedding();
  emb.setZero();
  for (int j = 0; j < kNames; ++j) emb(j, j) = 1.0;
  emb.block(kNames, kFiller, n_fillers, 4) = gaussian(rng, n_fillers, 4, 0.5);
  Matrix& pos = t.position_embedding();
  pos.setZero();
  pos.col(kConst).setOnes();
  pos(kFirstNamePos, kSlot) = 1.0;
  pos(kSecondNamePos, kSlot) = -1.0;
  pos(kFirstNamePos, kSlotOn) = 1.0;
  pos(kSecondNamePos, kSlotOn) = 1.0;

  const std::vector<int> planted = {1, 3};
  const double match_gain = std::sqrt(20.0 * sqrt_dh);
  for (int l = 0; l < 2; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h) {
      const int c = h * dh;
      const bool is_planted = (l == 0 && (h == 1 || h == 3)) || (l == 1 && h == 0);
      if (is_planted) continue;
      // Unplanted heads: random reads, writes confined to the junk block.
      using MT = MiniTransformer;
      t.param(l, MT::kWq).block(0, c, cfg.d_model, dh) = gaussian(rng, cfg.d_model, dh, 0.3);
      t.param(l, MT::kWk).block(0, c, cfg.d_model, dh) = gaussian(rng, cfg.d_model, dh, 0.3);
      t.param(l, MT::kWv).block(0, c, cfg.d_model, dh) = gaussian(rng, cfg.d_model, dh, 0.3);
      t.param(l, MT::kWo).block(c, kJunk, dh, 8) = gaussian(rng, dh, 8, 0.3);
    }
  }
  using MT = MiniTransformer;
  for (int h : planted) {
    const int c = h * dh;
    for (int j = 0; j < kNames; ++j) {
      t.param(0, MT::kWq)(j, c + j) = match_gain;
      t.param(0, MT::kWk)(j, c + j) = match_gain;
    }
    t.param(0, MT::kWv)(kSlot, c) = 1.0;
    t.param(0, MT::kWo)(c, kSignal) = 1.0;
  }
  // Name mover. Scores (after the 1/sqrt(dh) scaling): 30 on both name
  // slots, -/+2 * signal on the first/second slot, and a small preference
  // for the first slot that decides the outcome when the signal is zero.
  // The signal gain is kept low so the softmax is not saturated.
  t.param(1, MT::kWq)(kSignal, 0) = -2.0 * sqrt_dh;
  t.param(1, MT::kBq)(0, 0) = 0.25 * sqrt_dh;
  t.param(1, MT::kBq)(0, 1) = 30.0 * sqrt_dh;
  t.param(1, MT::kWk)(kSlot, 0) = 1.0;
  t.param(1, MT::kWk)(kSlotOn, 1) = 1.0;
  for (int j = 0; j < kNames; ++j) {
    t.param(1, MT::kWv)(j, j) = 1.0;
    t.param(1, MT::kWo)(j, 8 + j) = 1.0;
  }
  Matrix& unembed = t.unembedding();
  unembed.setZero();
  for (int j = 0; j < kNames; ++j) unembed(8 + j, j) = 10.0;

  PlantedTransformer out{std::move(t), task, planted, 0, "L0.attn_out"};
  return out;
}

// ---------------------------------------------------------------------------
// Training the mini transformer on the name task

struct TrainConfig {
  int steps = 600;
  int batch = 32;
  double lr = 3e-3;
  int n_train_examples = 4000;
  int n_eval_examples = 400;
  double init_std = 0.1;
  bool shuffle_labels = false;
  double min_accuracy = 0.60;
};

struct TrainedTransformer {
  MiniTransformer model;
  double train_accuracy = 0.0;
  double heldout_accuracy = 0.0;
  std::vector<double> loss_curve;
};

struct LabeledSequence {
  std::vector<int> tokens;
  int label = 0;
};

inline std::vector<LabeledSequence> ioi_examples(Rng& rng, std::span<const int> templates, int n,
                                                 const IoiConfig& cfg) {
  std::uniform_int_distribution<std::size_t> pick(0, templates.size() - 1);
  std::vector<LabeledSequence> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const IoiExample ex = random_ioi_example(rng, templates[pick(rng)], cfg);
    out.push_back({ex.tokens, ioi_label(ex)});
  }
  return out;
}

inline double sequence_accuracy(const Model& model, std::span<const LabeledSequence> data) {
  if (data.empty()) fail(ErrorCode::kEmptyEvaluation, "no sequences");
  std::size_t hit = 0;
  for (const auto& s : data) hit += model.predict(s.tokens) == s.label ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(data.size());
}

inline TrainedTransformer train_mini_transformer(const IoiConfig& task, std::uint64_t seed,
                                                 const TransformerConfig& arch = {},
                                                 const TrainConfig& tc = {}) {
  if (arch.vocab < task.vocab() || arch.max_seq < task.seq_len) {
    fail(ErrorCode::kConfigInvalid, "transformer too small for the task vocabulary or length");
  }
  Rng data_rng = make_rng(seed, "dataset");
  auto train = ioi_examples(data_rng, task.train_templates, tc.n_train_examples, task);
  const auto eval = ioi_examples(data_rng, task.eval_templates, tc.n_eval_examples, task);
  if (tc.shuffle_labels) {
    Rng lab = make_rng(seed, "shuffle.labels");
    std::uniform_int_distribution<int> name(0, task.n_names - 1);
    for (auto& s : train) s.label = name(lab);
  }

  MiniTransformer model = MiniTransformer::random(arch, seed, tc.init_std);
  Adam opt(AdamOptions{tc.lr});
  Rng order_rng = make_rng(seed, "shuffle");
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  TrainedTransformer out{model, 0.0, 0.0, {}};

  for (int step = 0; step < tc.steps; ++step) {
    ad::Tape tape;
    const auto params = model.bind(tape, true);
    std::vector<ad::Var> losses;
    for (int b = 0; b < tc.batch; ++b) {
      if (cursor == order.size()) {
        shuffle_in_place(order, order_rng);
        cursor = 0;
      }
      const auto& ex = train[order[cursor++]];
      losses.push_back(ad::cross_entropy(model.forward(tape, params, ex.tokens, {}), ex.label));
    }
    const ad::Var loss = ad::mean(losses);
    if (!std::isfinite(loss.item())) {
      fail(ErrorCode::kTrainingDiverged, "non-finite loss at step " + std::to_string(step));
    }
    tape.backward(loss);
    std::vector<Matrix> grads;
    std::vector<Matrix*> ptrs;
    for (std::size_t i = 0; i < params.size(); ++i) {
      grads.push_back(tape.grad(params[i]));
      ptrs.push_back(&model.mutable_parameters()[i]);
    }
    opt.step(ptrs, grads);
    out.loss_curve.push_back(loss.item());
  }
  out.model = model;
  out.train_accuracy = sequence_accuracy(model, train);
  out.heldout_accuracy = sequence_accuracy(model, eval);
  if (out.heldout_accuracy < tc.min_accuracy) {
    fail(ErrorCode::kTrainingDiverged,
         "held-out accuracy " + std::to_string(out.heldout_accuracy) + " after training");
  }
  return out;
}

}  // namespace dii
