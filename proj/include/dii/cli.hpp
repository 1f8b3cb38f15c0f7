#pragma once

// Command-line front end. Every command reads an optional JSON config, writes
// its results under an output directory, and leaves a manifest next to them.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dii/das.hpp"
#include "dii/error.hpp"
#include "dii/experiments.hpp"
#include "dii/illusion.hpp"
#include "dii/intervention.hpp"
#include "dii/io.hpp"
#include "dii/metrics.hpp"
#include "dii/models.hpp"
#include "dii/tasks.hpp"

namespace dii::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kMismatch = 1, kConfigError = 2, kRuntimeError = 3 };

inline constexpr const char* kOutEnv = "DII_OUT";

struct RunConfig {
  std::string command;
  std::optional<std::uint64_t> seed;
  std::string config_path;
  std::string out;
  bool normalized = false;
  std::string method;
  std::optional<double> tolerance;
  double x = 1.0;
  double x_prime = 5.0;
};

inline fs::path output_dir(const RunConfig& rc) {
  if (!rc.out.empty()) return rc.out;
  if (const char* env = std::getenv(kOutEnv); env != nullptr && *env != '\0') {
    return fs::path(env) / rc.command;
  }
  return fs::path("dii-out") / rc.command;
}

// ---------------------------------------------------------------------------
// Config access with field diagnostics

class Fields {
 public:
  Fields(const Json& j, std::string where, std::set<std::string> allowed)
      : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) fail(ErrorCode::kConfigInvalid, where_ + " must be an object");
    for (const auto& [key, _] : j_.items()) {
      if (!allowed.contains(key)) fail(ErrorCode::kConfigInvalid, where_ + "." + key + ": unknown field");
    }
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  T get(const std::string& key, T fallback) const {
    if (!j_.contains(key)) return fallback;
    return require<T>(key);
  }

  template <typename T>
  T require(const std::string& key) const {
    if (!j_.contains(key)) fail(ErrorCode::kConfigInvalid, where_ + "." + key + ": missing");
    try {
      return j_.at(key).get<T>();
    } catch (const Json::exception& e) {
      fail(ErrorCode::kConfigInvalid, where_ + "." + key + ": " + e.what());
    }
  }

  const Json& object(const std::string& key) const {
    static const Json empty = Json::object();
    return j_.contains(key) ? j_.at(key) : empty;
  }

 private:
  const Json& j_;
  std::string where_;
};

inline DasConfig das_config(const Json& j, std::uint64_t seed) {
  const Fields f(j, "das", {"rank", "lr", "epochs", "batch", "restarts", "budget_seconds"});
  DasConfig c;
  c.rank = f.get("rank", c.rank);
  c.lr = f.get("lr", c.lr);
  c.epochs = f.get("epochs", c.epochs);
  c.batch = f.get("batch", c.batch);
  c.restarts = f.get("restarts", c.restarts);
  c.budget_seconds = f.get("budget_seconds", c.budget_seconds);
  c.seed = seed;
  return c;
}

inline BoundlessConfig boundless_config(const Json& j, std::uint64_t seed) {
  const Fields f(j, "boundless",
                 {"lr", "boundary_lr", "das_weight", "boundary_weight", "temperature_start",
                  "temperature_end", "initial_fraction", "epochs", "batch", "mask",
                  "budget_seconds"});
  BoundlessConfig c;
  c.lr = f.get("lr", c.lr);
  c.boundary_lr = f.get("boundary_lr", c.boundary_lr);
  c.das_weight = f.get("das_weight", c.das_weight);
  c.boundary_weight = f.get("boundary_weight", c.boundary_weight);
  c.temperature_start = f.get("temperature_start", c.temperature_start);
  c.temperature_end = f.get("temperature_end", c.temperature_end);
  c.initial_fraction = f.get("initial_fraction", c.initial_fraction);
  c.epochs = f.get("epochs", c.epochs);
  c.batch = f.get("batch", c.batch);
  c.budget_seconds = f.get("budget_seconds", c.budget_seconds);
  const std::string mask = f.get<std::string>("mask", "centered");
  if (mask == "centered") {
    c.mask = MaskForm::kCenteredSigmoid;
  } else if (mask == "plain") {
    c.mask = MaskForm::kPlainSigmoid;
  } else {
    fail(ErrorCode::kConfigInvalid, "boundless.mask: expected centered or plain");
  }
  c.seed = seed;
  return c;
}

// ---------------------------------------------------------------------------
// Tasks: a model plus train/eval pairs

struct TaskBundle {
  std::string kind;
  std::shared_ptr<Model> model;
  PairSplit split;
  std::optional<SubspaceBasis> planted;
  std::string site;
  int position = kLastPosition;
  int planted_layer = -1;
  std::vector<int> planted_heads;
  double task_accuracy = std::nan("");
};

inline void check_templates(const std::vector<int>& train, const std::vector<int>& eval) {
  if (train.empty() || eval.empty()) {
    fail(ErrorCode::kConfigInvalid, "task: train_templates and eval_templates must be non-empty");
  }
  for (int t : train) {
    if (std::find(eval.begin(), eval.end(), t) != eval.end()) {
      fail(ErrorCode::kTemplateLeak,
           "task: template " + std::to_string(t) + " is listed for both training and evaluation");
    }
  }
}

/// Parsed task description; nothing is computed until build().
struct TaskSpec {
  Json raw;
  std::string kind;
  int n_train = 200;
  int n_eval = 200;
  std::vector<int> train_templates = {0, 1};
  std::vector<int> eval_templates = {2};
  std::string site;
  int position = kLastPosition;
};

inline TaskSpec parse_task(const Json& j) {
  const Fields f(j, "task",
                 {"kind", "n_train", "n_eval", "train_templates", "eval_templates", "site",
                  "position", "width", "rank", "rotated", "logit_gain", "n_fillers", "n_names",
                  "variable", "steps", "lr", "batch", "model", "train", "eval"});
  TaskSpec t;
  t.raw = j;
  t.kind = f.require<std::string>("kind");
  t.n_train = f.get("n_train", t.n_train);
  t.n_eval = f.get("n_eval", t.n_eval);
  t.train_templates = f.get("train_templates", t.train_templates);
  t.eval_templates = f.get("eval_templates", t.eval_templates);
  t.site = f.get<std::string>("site", "");
  t.position = f.get("position", t.position);
  if (t.kind != "checkpoint") check_templates(t.train_templates, t.eval_templates);
  if (t.n_train < 1 || t.n_eval < 1) fail(ErrorCode::kConfigInvalid, "task: n_train and n_eval must be positive");
  static const std::set<std::string> kinds = {"planted_mlp", "planted_transformer", "ioi",
                                              "checkpoint"};
  if (!kinds.contains(t.kind)) fail(ErrorCode::kConfigInvalid, "task.kind: unknown kind " + t.kind);
  if (t.kind == "checkpoint" && !(j.contains("model") && j.contains("train") && j.contains("eval"))) {
    fail(ErrorCode::kConfigInvalid, "task: checkpoint tasks need model, train and eval paths");
  }
  return t;
}

inline IoiVariable parse_variable(const std::string& s) {
  if (s == "name_position") return IoiVariable::kNamePosition;
  if (s == "io_name") return IoiVariable::kIoName;
  fail(ErrorCode::kConfigInvalid, "task.variable: expected name_position or io_name");
}

inline TaskBundle build_task(const TaskSpec& spec, std::uint64_t seed) {
  const Json& j = spec.raw;
  auto opt = [&j](const char* key, auto fallback) {
    if (!j.contains(key)) return fallback;
    try {
      return j.at(key).get<decltype(fallback)>();
    } catch (const Json::exception& e) {
      fail(ErrorCode::kConfigInvalid, std::string("task.") + key + ": " + e.what());
    }
  };
  TaskBundle b;
  b.kind = spec.kind;
  b.position = spec.position;
  if (spec.kind == "planted_mlp") {
    const PlantedNetwork pn = make_planted_network(opt("width", 16), opt("rank", 1), seed,
                                                   opt("rotated", true), opt("logit_gain", 0.0));
    for (const auto* list : {&spec.train_templates, &spec.eval_templates}) {
      for (int t : *list) {
        if (t < 0 || t >= pn.model->shape().templates) {
          fail(ErrorCode::kConfigInvalid, "task: template " + std::to_string(t) + " out of range");
        }
      }
    }
    b.model = pn.model;
    b.split = {pn.pairs(substream(seed, "train"), spec.n_train, spec.train_templates),
               pn.pairs(substream(seed, "eval"), spec.n_eval, spec.eval_templates)};
    b.planted = pn.planted;
    b.site = pn.site;
  } else if (spec.kind == "planted_transformer") {
    PlantedTransformer pt = make_planted_transformer(seed, opt("n_fillers", 10));
    pt.task.train_templates = spec.train_templates;
    pt.task.eval_templates = spec.eval_templates;
    b.split = gen_ioi_like(substream(seed, "pairs"), spec.n_train, spec.n_eval, pt.task);
    b.model = std::make_shared<MiniTransformer>(std::move(pt.model));
    b.site = pt.signal_site;
    b.planted_layer = pt.planted_layer;
    b.planted_heads = pt.planted_heads;
  } else if (spec.kind == "ioi") {
    IoiConfig task;
    task.n_names = opt("n_names", task.n_names);
    task.n_fillers = opt("n_fillers", task.n_fillers);
    task.train_templates = spec.train_templates;
    task.eval_templates = spec.eval_templates;
    task.variable = parse_variable(opt("variable", std::string("name_position")));
    TransformerConfig arch;
    arch.vocab = std::max(arch.vocab, task.vocab());
    TrainConfig tc;
    tc.steps = opt("steps", tc.steps);
    tc.lr = opt("lr", tc.lr);
    tc.batch = opt("batch", tc.batch);
    TrainedTransformer trained = train_mini_transformer(task, seed, arch, tc);
    b.task_accuracy = trained.heldout_accuracy;
    b.model = std::make_shared<MiniTransformer>(std::move(trained.model));
    b.split = gen_ioi_like(substream(seed, "pairs"), spec.n_train, spec.n_eval, task);
    b.site = site_name(1, Stream::kBlockOut);
  } else {
    b.model = load_model(j.at("model").get<std::string>());
    b.split = {load_pairs(j.at("train").get<std::string>()), load_pairs(j.at("eval").get<std::string>())};
    require_disjoint_templates(b.split.train, b.split.eval);
  }
  if (!spec.site.empty()) b.site = spec.site;
  if (b.site.empty()) fail(ErrorCode::kConfigInvalid, "task.site: required for this task kind");
  b.model->site(b.site);
  return b;
}

// ---------------------------------------------------------------------------
// CSV writers

inline std::string curve_csv(const TrainedSubspace& t) {
  std::ostringstream os;
  os << "epoch,loss,train_iia,eval_iia,boundary_fraction\n";
  for (const CurvePoint& c : t.curve) {
    os << c.epoch << ',' << format_double(c.loss) << ',' << format_double(c.train_iia) << ','
       << format_double(c.eval_iia) << ',' << format_double(c.boundary_fraction) << '\n';
  }
  return os.str();
}

inline std::string metrics_csv(const MetricsReport& m) {
  std::ostringstream os;
  write_metrics_csv(os, m);
  return os.str();
}

inline std::string sweep_csv(const Model& model, const SweepResult& r) {
  std::ostringstream os;
  os << "site,layer,stream,method,complete,iia,fldd,fldd_pooled,n_pairs,dims\n";
  for (const SweepCell& c : r.cells) {
    const SiteInfo& info = model.site(c.site);
    const long dims = c.subspace ? static_cast<long>(c.subspace->basis.rank())
                                 : static_cast<long>(c.neurons.size());
    os << c.site << ',' << info.layer << ',' << stream_name(info.stream) << ','
       << method_name(c.method) << ',' << (c.complete ? 1 : 0) << ','
       << format_double(c.complete ? c.report.iia : std::nan("")) << ','
       << format_double(c.complete ? c.report.fldd : std::nan("")) << ','
       << format_double(c.complete ? c.report.fldd_pooled : std::nan("")) << ','
       << c.report.n_pairs << ',' << dims << '\n';
  }
  return os.str();
}

inline Json cell_json(const SweepCell& c) {
  Json j{{"site", c.site}, {"method", method_name(c.method)}, {"complete", c.complete}};
  if (!c.note.empty()) j["note"] = c.note;
  if (c.complete) j["iia"] = c.report.iia;
  if (c.subspace) j["subspace"] = subspace_to_json(*c.subspace);
  if (!c.neurons.empty()) j["neurons"] = c.neurons;
  return j;
}

// ---------------------------------------------------------------------------
// Output bookkeeping

class OutputSet {
 public:
  OutputSet(fs::path dir, std::string command, Json config, std::uint64_t seed)
      : dir_(std::move(dir)), command_(std::move(command)), config_(std::move(config)), seed_(seed) {
    fs::create_directories(dir_);
  }

  void text(const std::string& name, const std::string& body) {
    write_text_file(dir_ / name, body);
    names_.push_back(name);
  }
  void json(const std::string& name, const Json& body) { text(name, body.dump(2) + "\n"); }

  void finish() {
    write_json_file(dir_ / "manifest.json", make_manifest(command_, config_, seed_, names_));
  }
  const fs::path& dir() const { return dir_; }

 private:
  fs::path dir_;
  std::string command_;
  Json config_;
  std::uint64_t seed_;
  std::vector<std::string> names_;
};

inline std::uint64_t require_seed(const RunConfig& rc, const Json& config) {
  if (rc.seed) return *rc.seed;
  if (config.contains("seed")) {
    try {
      return config.at("seed").get<std::uint64_t>();
    } catch (const Json::exception& e) {
      fail(ErrorCode::kConfigInvalid, std::string("seed: ") + e.what());
    }
  }
  fail(ErrorCode::kConfigInvalid, rc.command + " is stochastic and needs --seed or a seed field");
}

inline Json load_config(const RunConfig& rc) {
  if (rc.config_path.empty()) return Json::object();
  return read_json_file(rc.config_path);
}

inline Method resolve_method(const RunConfig& rc, const Fields& f, Method fallback) {
  std::string name = rc.method;
  if (name.empty()) name = f.get<std::string>("method", std::string(method_name(fallback)));
  const auto m = parse_method(name);
  if (!m) fail(ErrorCode::kConfigInvalid, "method: expected vanilla, das or boundless, got " + name);
  return *m;
}

// ---------------------------------------------------------------------------
// toy

struct ToyCheck {
  std::string name;
  double value;
  double expected;
};

inline int cmd_toy(const RunConfig& rc, std::ostream& out) {
  const ToyNetwork net;
  const Matrix w2 = net.w2;
  const NullspaceDecomposition dec = decompose_direction(Vector::Unit(3, 2), w2);
  const SubspaceBasis null = linalg::nullspace_basis(w2);
  const double x = rc.x, xp = rc.x_prime;
  const Vector u_a = x * net.w1, u_b = xp * net.w1;
  const IllusionReport full = illusion_effect(phi_noop(), w2, dec.v, u_a, u_b);

  std::vector<ToyCheck> checks = {
      {"v_null[0]", dec.null_part(0), 0.0},     {"v_null[1]", dec.null_part(1), -0.4},
      {"v_null[2]", dec.null_part(2), 0.8},     {"v_range[0]", dec.range_part(0), 0.0},
      {"v_range[1]", dec.range_part(1), 0.4},   {"v_range[2]", dec.range_part(2), 0.2},
      {"output_v", full.output_full(0), xp},    {"output_v_range", full.output_range(0), x + 0.2 * (xp - x)},
      {"illusion_effect", toy_illusion_effect(x, xp, net), 0.8 * (xp - x)},
      {"coefficient", toy_illusion_effect(0.0, 1.0, net), 0.8},
  };
  Json report{{"x", x}, {"x_prime", xp}, {"nullspace_basis", matrix_to_json(null.rows())},
              {"v_null", vector_to_json(dec.null_part)}, {"v_range", vector_to_json(dec.range_part)},
              {"output_v", full.output_full(0)}, {"output_v_range", full.output_range(0)},
              {"illusion_effect", full.difference(0)}, {"coefficient", 0.8}};
  if (rc.normalized) {
    const IllusionReport n = normalized_variant_effect(phi_noop(), w2, dec.v, u_a, u_b);
    report["normalized_effect"] = n.difference(0);
    out << "normalized effect " << format_double(n.difference(0)) << '\n';
    if (x != xp && !(std::abs(n.difference(0)) > std::abs(full.difference(0)))) {
      checks.push_back({"normalized_exceeds_plain", 0.0, 1.0});
    }
  }
  const double tol = rc.tolerance.value_or(1e-9);
  bool ok = true;
  Json rows = Json::array();
  for (const ToyCheck& c : checks) {
    const bool pass = std::abs(c.value - c.expected) <= tol;
    ok = ok && pass;
    out << (pass ? "ok   " : "FAIL ") << c.name << " = " << format_double(c.value)
        << " (expected " << format_double(c.expected) << ")\n";
    rows.push_back(Json{{"name", c.name}, {"value", c.value}, {"expected", c.expected}, {"pass", pass}});
  }
  report["checks"] = rows;
  if (!rc.out.empty() || std::getenv(kOutEnv) != nullptr) {
    OutputSet o(output_dir(rc), "toy", Json{{"x", x}, {"x_prime", xp}, {"normalized", rc.normalized},
                                            {"tolerance", tol}}, 0);
    o.json("toy.json", report);
    o.finish();
  }
  return ok ? kOk : kMismatch;
}

// ---------------------------------------------------------------------------
// decompose

inline int cmd_decompose(const RunConfig& rc, std::ostream& out) {
  const Json config = load_config(rc);
  const Fields f(config, "config", {"direction", "weights", "base", "source", "seed"});
  if (!f.has("direction") || !f.has("weights")) {
    fail(ErrorCode::kConfigInvalid, "decompose needs direction and weights");
  }
  const Matrix dir = dense_from_json(f.object("direction"));
  const Matrix w = dense_from_json(f.object("weights"));
  const Vector v = dir.cols() == 1 ? Vector(dir.col(0)) : Vector(dir.row(0).transpose());
  const NullspaceDecomposition dec = decompose_direction(v, w, rc.tolerance.value_or(linalg::kRankTolerance));
  Json result{{"v", vector_to_json(dec.v)},
              {"v_null", vector_to_json(dec.null_part)},
              {"v_range", vector_to_json(dec.range_part)},
              {"norm_v", dec.v.norm()},
              {"norm_null", dec.null_part.norm()},
              {"norm_range", dec.range_part.norm()}};
  if (f.has("base") && f.has("source")) {
    const Matrix ua = dense_from_json(f.object("base")), ub = dense_from_json(f.object("source"));
    const Vector u_a = ua.cols() == 1 ? Vector(ua.col(0)) : Vector(ua.row(0).transpose());
    const Vector u_b = ub.cols() == 1 ? Vector(ub.col(0)) : Vector(ub.row(0).transpose());
    const ExpansionBreakdown e = expansion_breakdown(u_a, u_b, dec);
    result["breakdown"] = Json{{"base", vector_to_json(e.base)},
                               {"null_via_null", vector_to_json(e.null_via_null)},
                               {"range_via_null", vector_to_json(e.range_via_null)},
                               {"null_via_range", vector_to_json(e.null_via_range)},
                               {"range_via_range", vector_to_json(e.range_via_range)},
                               {"total", vector_to_json(e.total())}};
    const IllusionReport ir = illusion_effect(phi_noop(), w, v, u_a, u_b);
    result["illusion_effect"] = vector_to_json(ir.difference);
    if (rc.normalized) {
      result["normalized_effect"] = vector_to_json(normalized_variant_effect(phi_noop(), w, v, u_a, u_b).difference);
    }
  }
  OutputSet o(output_dir(rc), "decompose", config, 0);
  o.json("decomposition.json", result);
  o.finish();
  out << "norm_null " << format_double(dec.null_part.norm()) << " norm_range "
      << format_double(dec.range_part.norm()) << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// train-das, boundless, eval

inline double planted_cosine(const TaskBundle& task, const SubspaceBasis& basis) {
  if (!task.planted || basis.rank() == 0 || basis.dim() != task.planted->dim()) return std::nan("");
  // Smallest principal cosine between the two subspaces.
  const Eigen::JacobiSVD<Matrix> svd(task.planted->rows() * basis.rows().transpose());
  const Eigen::Index k = std::min(task.planted->rank(), basis.rank());
  return svd.singularValues()(k - 1);
}

inline int train_command(const RunConfig& rc, std::ostream& out, bool boundless) {
  const Json config = load_config(rc);
  const Fields f(config, "config", {"seed", "task", "das", "boundless"});
  const std::uint64_t seed = require_seed(rc, config);
  const TaskSpec spec = parse_task(f.object("task"));
  const DasConfig das = das_config(f.object("das"), seed);
  const BoundlessConfig bl = boundless_config(f.object("boundless"), seed);
  const TaskBundle task = build_task(spec, seed);
  const SiteView view = site_view(*task.model, task.site, task.position);
  const TrainedSubspace t = boundless ? train_boundless_das(*task.model, view, task.split.train, task.split.eval, bl)
                                      : train_das(*task.model, view, task.split.train, task.split.eval, das);
  const MetricsReport m = evaluate(*task.model, view, task.split.eval, t.basis);
  const std::string name = boundless ? "boundless" : "train-das";
  OutputSet o(output_dir(rc), name, config, seed);
  o.json("subspace.json", subspace_to_json(t));
  o.text("curve.csv", curve_csv(t));
  o.text("metrics.csv", metrics_csv(m));
  o.finish();
  out << "eval_iia " << format_double(m.iia) << " dims " << t.basis.rank();
  if (task.planted) out << " planted_cos " << format_double(planted_cosine(task, t.basis));
  out << '\n';
  return kOk;
}

inline int cmd_eval(const RunConfig& rc, std::ostream& out) {
  const Json config = load_config(rc);
  const Fields f(config, "config", {"seed", "task", "subspace", "neurons", "method"});
  const std::uint64_t seed = require_seed(rc, config);
  const TaskSpec spec = parse_task(f.object("task"));
  const TaskBundle task = build_task(spec, seed);
  SwapRule rule;
  SiteView view = site_view(*task.model, task.site, task.position);
  if (f.has("subspace")) {
    const TrainedSubspace t = subspace_from_json(read_json_file(f.require<std::string>("subspace")));
    view = t.view;
    rule = t.basis;
  } else if (f.has("neurons")) {
    rule = f.require<std::vector<int>>("neurons");
  } else {
    rule = SubspaceBasis::identity(view.width());
  }
  const MetricsReport m = evaluate(*task.model, view, task.split.eval, rule);
  OutputSet o(output_dir(rc), "eval", config, seed);
  o.text("metrics.csv", metrics_csv(m));
  o.finish();
  out << "iia " << format_double(m.iia) << " fldd " << format_double(m.fldd) << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// Experiment grids

inline SweepSpec sweep_spec(const RunConfig& rc, const Fields& f, const TaskBundle& task,
                            std::uint64_t seed) {
  SweepSpec s;
  s.position = task.position;
  s.method = resolve_method(rc, f, Method::kDas);
  s.das = das_config(f.object("das"), seed);
  s.boundless = boundless_config(f.object("boundless"), seed);
  s.cell_budget_seconds = f.get("cell_budget_seconds", 0.0);
  s.threads = f.get("threads", 1);
  return s;
}

inline const std::set<std::string> kGridFields = {"seed", "task", "das", "boundless", "method",
                                                  "cell_budget_seconds", "threads", "streams",
                                                  "sites", "layer"};

inline int cmd_sweep(const RunConfig& rc, std::ostream& out) {
  const Json config = load_config(rc);
  const Fields f(config, "config", kGridFields);
  const std::uint64_t seed = require_seed(rc, config);
  const TaskSpec spec = parse_task(f.object("task"));
  std::vector<Stream> streams;
  for (const std::string& s : f.get<std::vector<std::string>>("streams", {"attn_out", "mlp_output"})) {
    const auto st = parse_stream(s);
    if (!st) fail(ErrorCode::kConfigInvalid, "streams: unknown stream " + s);
    streams.push_back(*st);
  }
  const TaskBundle task = build_task(spec, seed);
  SweepSpec s = sweep_spec(rc, f, task, seed);
  s.sites = f.get<std::vector<std::string>>("sites", sweep_sites(*task.model, streams));
  const SweepResult r = run_stream_sweep(*task.model, s, task.split);
  Json cells = Json::array();
  for (const SweepCell& c : r.cells) cells.push_back(cell_json(c));
  OutputSet o(output_dir(rc), "sweep-streams", config, seed);
  o.text("grid.csv", sweep_csv(*task.model, r));
  o.json("cells.json", cells);
  o.finish();
  for (const SweepCell& c : r.cells) {
    out << c.site << ' ' << (c.complete ? format_double(c.report.iia) : "incomplete") << '\n';
  }
  return kOk;
}

inline int planted_or_configured_layer(const Fields& f, const TaskBundle& task) {
  return f.get("layer", task.planted_layer >= 0 ? task.planted_layer : 0);
}

inline int cmd_loo(const RunConfig& rc, std::ostream& out) {
  const Json config = load_config(rc);
  const Fields f(config, "config", kGridFields);
  const std::uint64_t seed = require_seed(rc, config);
  const TaskSpec spec = parse_task(f.object("task"));
  const TaskBundle task = build_task(spec, seed);
  const SweepSpec s = sweep_spec(rc, f, task, seed);
  const LooResult r = loo_head_alignment(*task.model, planted_or_configured_layer(f, task), s, task.split);
  std::ostringstream csv;
  csv << "head,without_iia,drop\n";
  csv << "all," << format_double(r.all_heads_iia) << ",0\n";
  for (std::size_t h = 0; h < r.drop.size(); ++h) {
    csv << h << ',' << format_double(r.without_head_iia[h]) << ',' << format_double(r.drop[h]) << '\n';
  }
  Json cells = Json::array();
  for (const SweepCell& c : r.cells) cells.push_back(cell_json(c));
  OutputSet o(output_dir(rc), "loo-heads", config, seed);
  o.text("loo.csv", csv.str());
  o.json("cells.json", Json{{"site", r.site}, {"ranking", rank_heads(r.drop)}, {"cells", cells}});
  o.finish();
  out << csv.str();
  return kOk;
}

inline int cmd_cumulative(const RunConfig& rc, std::ostream& out) {
  const Json config = load_config(rc);
  const Fields f(config, "config", kGridFields);
  const std::uint64_t seed = require_seed(rc, config);
  const TaskSpec spec = parse_task(f.object("task"));
  const TaskBundle task = build_task(spec, seed);
  const SweepSpec s = sweep_spec(rc, f, task, seed);
  const int layer = planted_or_configured_layer(f, task);
  const LooResult loo = loo_head_alignment(*task.model, layer, s, task.split);
  const std::vector<int> order = rank_heads(loo.drop);
  const CumulativeResult r = cumulative_head_alignment(*task.model, layer, order, s, task.split);
  std::ostringstream csv;
  csv << "prefix,added_head,iia,fraction_of_ceiling\n";
  for (std::size_t k = 0; k < r.iia.size(); ++k) {
    csv << k << ',' << (k == 0 ? std::string("none") : std::to_string(r.order[k - 1])) << ','
        << format_double(r.iia[k]) << ',' << format_double(r.iia[k] / r.ceiling) << '\n';
  }
  OutputSet o(output_dir(rc), "cumulative-heads", config, seed);
  o.text("cumulative.csv", csv.str());
  o.json("cumulative.json", Json{{"site", r.site}, {"order", r.order}, {"ceiling", r.ceiling},
                                 {"first_reaching_0.9", r.first_reaching(0.9)}});
  o.finish();
  out << csv.str();
  return kOk;
}

// ---------------------------------------------------------------------------
// pipeline: generate -> train -> evaluate -> decompose

inline int cmd_pipeline(const RunConfig& rc, std::ostream& out) {
  const Json config = load_config(rc);
  const Fields f(config, "config", {"seed", "task", "method", "das", "boundless", "expect"});
  const std::uint64_t seed = require_seed(rc, config);
  const TaskSpec spec = parse_task(f.object("task"));
  const Method method = resolve_method(rc, f, Method::kDas);
  const DasConfig das = das_config(f.object("das"), seed);
  const BoundlessConfig bl = boundless_config(f.object("boundless"), seed);
  const Fields expect(f.object("expect"), "expect", {"min_iia", "min_planted_cos"});
  const double min_iia = expect.get("min_iia", -1.0);
  const double min_cos = expect.get("min_planted_cos", -1.0);

  const fs::path dir = output_dir(rc);
  OutputSet o(dir, "pipeline", config, seed);
  try {
    const TaskBundle task = build_task(spec, seed);
    o.text("train.jsonl", pairs_to_jsonl(task.split.train));
    o.text("eval.jsonl", pairs_to_jsonl(task.split.eval));
    if (task.kind != "checkpoint") o.json("model.json", model_to_json(*task.model));

    const SiteView view = site_view(*task.model, task.site, task.position);
    PairSplit split{task.split.train, task.split.eval};
    SweepCell cell = run_cell(*task.model, view, split, method, das, bl, 0.0);
    if (cell.subspace) {
      o.json("subspace.json", subspace_to_json(*cell.subspace));
      o.text("curve.csv", curve_csv(*cell.subspace));
    }
    o.text("metrics.csv", metrics_csv(cell.report));

    Json summary{{"task", task.kind}, {"site", task.site}, {"method", method_name(method)},
                 {"eval_iia", cell.report.iia}, {"fldd", cell.report.fldd},
                 {"fldd_pooled", cell.report.fldd_pooled}, {"n_eval", cell.report.n_pairs}};
    if (!std::isnan(task.task_accuracy)) summary["task_accuracy"] = task.task_accuracy;
    double cos = std::nan("");
    if (cell.subspace) {
      const SubspaceBasis& basis = cell.subspace->basis;
      summary["dims"] = basis.rank();
      cos = planted_cosine(task, basis);
      if (!std::isnan(cos)) summary["planted_cos"] = cos;
      if (const Matrix* w = task.model->down_projection(task.site); w != nullptr && basis.rank() > 0) {
        const BasisDecomposition d = decompose_basis(basis, *w);
        std::ostringstream csv;
        csv << "vector,norm_null,norm_range\n";
        for (Eigen::Index i = 0; i < basis.rank(); ++i) {
          csv << i << ',' << format_double(d.null_rows.row(i).norm()) << ','
              << format_double(d.range_rows.row(i).norm()) << '\n';
        }
        o.text("decomposition.csv", csv.str());
      }
    }
    o.json("summary.json", summary);
    o.finish();
    out << "eval_iia " << format_double(cell.report.iia);
    if (!std::isnan(cos)) out << " planted_cos " << format_double(cos);
    out << '\n';
    const bool ok = cell.report.iia >= min_iia && (min_cos < 0.0 || cos >= min_cos);
    if (!ok) out << "expectation not met\n";
    return ok ? kOk : kMismatch;
  } catch (...) {
    write_text_file(dir / "INCOMPLETE", "pipeline stopped before finishing\n");
    throw;
  }
}

// ---------------------------------------------------------------------------

inline int dispatch(const RunConfig& rc, std::ostream& out) {
  if (rc.command == "toy") return cmd_toy(rc, out);
  if (rc.command == "decompose") return cmd_decompose(rc, out);
  if (rc.command == "train-das") return train_command(rc, out, false);
  if (rc.command == "boundless") return train_command(rc, out, true);
  if (rc.command == "eval") return cmd_eval(rc, out);
  if (rc.command == "sweep-streams") return cmd_sweep(rc, out);
  if (rc.command == "loo-heads") return cmd_loo(rc, out);
  if (rc.command == "cumulative-heads") return cmd_cumulative(rc, out);
  if (rc.command == "pipeline") return cmd_pipeline(rc, out);
  fail(ErrorCode::kConfigInvalid, "unknown command " + rc.command);
}

inline int exit_code_for(const Error& e) {
  switch (e.code()) {
    case ErrorCode::kConfigInvalid:
    case ErrorCode::kTemplateLeak:
    case ErrorCode::kInsufficientTemplates:
      return kConfigError;
    default:
      return kRuntimeError;
  }
}

/// Runs a parsed command, mapping failures onto exit codes.
inline int run(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  try {
    return dispatch(rc, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
}

inline int main(int argc, char** argv) {
  CLI::App app{"Distributed interchange interventions and nullspace audits"};
  app.require_subcommand(1);
  RunConfig rc;
  std::uint64_t seed = 0;
  double tolerance = 0.0;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "Top-level seed");
    sub->add_option("--config", rc.config_path, "JSON config")->check(CLI::ExistingFile);
    sub->add_option("--out", rc.out, std::string("Output directory (default $") + kOutEnv + "/<command>)");
    sub->add_flag("--normalized", rc.normalized, "Also report the unit-normalized variant");
    sub->add_option("--method", rc.method, "vanilla, das or boundless")
        ->check(CLI::IsMember({"vanilla", "das", "boundless"}));
    sub->add_option("--tolerance", tolerance, "Comparison tolerance");
  };
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"toy", "Worked three-neuron example"},
      {"decompose", "Split a direction against a weight nullspace"},
      {"train-das", "Train a subspace by DAS"},
      {"boundless", "Train a subspace with a learned boundary"},
      {"eval", "Evaluate an intervention on held-out pairs"},
      {"sweep-streams", "Align across layers and streams"},
      {"loo-heads", "Leave-one-head-out alignment"},
      {"cumulative-heads", "Alignment on growing head sets"},
      {"pipeline", "Generate, train, evaluate and decompose"}};
  std::vector<CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    common(sub);
    if (name == "toy") {
      sub->add_option("--x", rc.x, "Base input");
      sub->add_option("--xprime", rc.x_prime, "Source input");
    }
    subs.push_back(sub);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }
  for (CLI::App* sub : subs) {
    if (sub->parsed()) {
      rc.command = sub->get_name();
      if (sub->count("--seed") > 0) rc.seed = seed;
      if (sub->count("--tolerance") > 0) rc.tolerance = tolerance;
    }
  }
  return run(rc, std::cout, std::cerr);
}

}  // namespace dii::cli
