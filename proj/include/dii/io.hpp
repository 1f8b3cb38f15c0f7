#pragma once

// Checkpoints, JSON-lines datasets and run manifests.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dii/das.hpp"
#include "dii/error.hpp"
#include "dii/intervention.hpp"
#include "dii/models.hpp"
#include "dii/tasks.hpp"

namespace dii {

using Json = nlohmann::ordered_json;

inline constexpr int kCheckpointVersion = 1;
inline constexpr std::string_view kToolVersion = "0.3.0";

inline Json matrix_to_json(const Matrix& m) {
  Json rows = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return Json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(rows)}};
}

inline Matrix matrix_from_json(const Json& j) {
  try {
    const auto r = j.at("rows").get<Eigen::Index>();
    const auto c = j.at("cols").get<Eigen::Index>();
    const Json& data = j.at("data");
    if (static_cast<Eigen::Index>(data.size()) != r) {
      fail(ErrorCode::kShapeMismatch, "matrix declares " + std::to_string(r) + " rows");
    }
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < r; ++i) {
      const Json& row = data[static_cast<std::size_t>(i)];
      if (static_cast<Eigen::Index>(row.size()) != c) {
        fail(ErrorCode::kShapeMismatch, "row " + std::to_string(i) + " has wrong length");
      }
      for (Eigen::Index k = 0; k < c; ++k) m(i, k) = row[static_cast<std::size_t>(k)].get<double>();
    }
    return m;
  } catch (const Json::exception& e) {
    fail(ErrorCode::kIo, std::string("bad matrix: ") + e.what());
  }
}

/// Plain rows-of-numbers form, as accepted by the decompose command.
inline Matrix dense_from_json(const Json& j) {
  if (j.is_object()) return matrix_from_json(j);
  try {
    if (!j.is_array() || j.empty()) fail(ErrorCode::kIo, "expected a non-empty array");
    if (j.front().is_number()) {
      Matrix m(static_cast<Eigen::Index>(j.size()), 1);
      for (std::size_t i = 0; i < j.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = j[i].get<double>();
      return m;
    }
    const auto cols = j.front().size();
    Matrix m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(cols));
    for (std::size_t i = 0; i < j.size(); ++i) {
      if (j[i].size() != cols) fail(ErrorCode::kShapeMismatch, "ragged matrix rows");
      for (std::size_t k = 0; k < cols; ++k) {
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = j[i][k].get<double>();
      }
    }
    return m;
  } catch (const Json::exception& e) {
    fail(ErrorCode::kIo, std::string("bad matrix: ") + e.what());
  }
}

inline Json vector_to_json(const Vector& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    fail(ErrorCode::kConfigInvalid, path.string() + ": " + e.what());
  }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out << text;
  if (!out) fail(ErrorCode::kIo, "write failed for " + path.string());
}

inline void write_json_file(const std::filesystem::path& path, const Json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Model checkpoints

inline std::string_view activation_name(Activation a) {
  return a == Activation::kRelu ? "relu" : "gelu";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "gelu") return Activation::kGelu;
  fail(ErrorCode::kConfigInvalid, "unknown activation " + s);
}

inline Json model_config_json(const Model& model) {
  if (const auto* t = dynamic_cast<const MiniTransformer*>(&model)) {
    const auto& c = t->config();
    return Json{{"n_layers", c.n_layers}, {"d_model", c.d_model}, {"n_heads", c.n_heads},
                {"vocab", c.vocab},       {"max_seq", c.max_seq}, {"d_mlp", c.d_mlp},
                {"layer_norm", c.layer_norm}, {"activation", activation_name(c.activation)}};
  }
  if (const auto* m = dynamic_cast<const Mlp*>(&model)) {
    const auto& c = m->config();
    return Json{{"input_dim", c.input_dim}, {"hidden", c.hidden}, {"outputs", c.outputs},
                {"activation", activation_name(c.activation)}};
  }
  if (const auto* p = dynamic_cast<const PlantedMlp*>(&model)) {
    const auto& s = p->shape();
    return Json{{"width", s.width}, {"rank", s.rank}, {"values", s.values},
                {"noise", s.noise}, {"templates", s.templates}};
  }
  fail(ErrorCode::kConfigInvalid, "no checkpoint format for model kind " + model.kind());
}

inline Json model_to_json(const Model& model) {
  Json sites = Json::array();
  for (const SiteInfo& s : model.sites()) {
    sites.push_back(Json{{"name", s.name}, {"layer", s.layer}, {"stream", stream_name(s.stream)},
                         {"width", s.width}, {"head_width", s.head_width}});
  }
  Json params = Json::array();
  const auto names = model.parameter_names();
  const auto& values = model.parameters();
  for (std::size_t i = 0; i < values.size(); ++i) {
    Json p = matrix_to_json(values[i]);
    p["name"] = names[i];
    params.push_back(std::move(p));
  }
  return Json{{"format", "dii-model"},
              {"version", kCheckpointVersion},
              {"kind", model.kind()},
              {"config", model_config_json(model)},
              {"sites", std::move(sites)},
              {"params", std::move(params)}};
}

inline std::shared_ptr<Model> model_from_json(const Json& j) {
  try {
    if (j.at("format") != "dii-model") fail(ErrorCode::kIo, "not a model checkpoint");
    if (j.at("version").get<int>() != kCheckpointVersion) {
      fail(ErrorCode::kIo, "unsupported checkpoint version " + j.at("version").dump());
    }
    std::vector<Matrix> params;
    for (const Json& p : j.at("params")) params.push_back(matrix_from_json(p));
    const std::string kind = j.at("kind").get<std::string>();
    const Json& c = j.at("config");
    std::shared_ptr<Model> model;
    if (kind == "mini_transformer") {
      TransformerConfig cfg;
      cfg.n_layers = c.at("n_layers");
      cfg.d_model = c.at("d_model");
      cfg.n_heads = c.at("n_heads");
      cfg.vocab = c.at("vocab");
      cfg.max_seq = c.at("max_seq");
      cfg.d_mlp = c.at("d_mlp");
      cfg.layer_norm = c.at("layer_norm");
      cfg.activation = parse_activation(c.at("activation"));
      model = std::make_shared<MiniTransformer>(cfg, std::move(params));
    } else if (kind == "mlp") {
      Mlp::Config cfg;
      cfg.input_dim = c.at("input_dim");
      cfg.hidden = c.at("hidden").get<std::vector<Eigen::Index>>();
      cfg.outputs = c.at("outputs").get<std::vector<Eigen::Index>>();
      cfg.activation = parse_activation(c.at("activation"));
      model = std::make_shared<Mlp>(cfg, std::move(params));
    } else if (kind == "planted_mlp") {
      PlantedMlp::Shape s;
      s.width = c.at("width");
      s.rank = c.at("rank");
      s.values = c.at("values");
      s.noise = c.at("noise");
      s.templates = c.at("templates");
      model = std::make_shared<PlantedMlp>(s, std::move(params));
    } else {
      fail(ErrorCode::kIo, "unknown model kind " + kind);
    }
    const Json& sites = j.at("sites");
    if (sites.size() != model->sites().size()) {
      fail(ErrorCode::kIo, "site registry does not match the rebuilt model");
    }
    for (std::size_t i = 0; i < sites.size(); ++i) {
      if (sites[i].at("name") != model->sites()[i].name) {
        fail(ErrorCode::kIo, "site " + sites[i].at("name").dump() + " does not match");
      }
    }
    return model;
  } catch (const Json::exception& e) {
    fail(ErrorCode::kIo, std::string("bad model checkpoint: ") + e.what());
  }
}

inline void save_model(const std::filesystem::path& path, const Model& model) {
  write_json_file(path, model_to_json(model));
}

inline std::shared_ptr<Model> load_model(const std::filesystem::path& path) {
  return model_from_json(read_json_file(path));
}

// ---------------------------------------------------------------------------
// Views and trained subspaces

inline Json view_to_json(const SiteView& v) {
  Json parts = Json::array();
  for (const ViewPart& p : v.parts) {
    parts.push_back(Json{{"position", p.position}, {"col_begin", p.col_begin}, {"col_end", p.col_end}});
  }
  return Json{{"site", v.site}, {"site_width", v.site_width}, {"parts", std::move(parts)}};
}

inline SiteView view_from_json(const Json& j) {
  SiteView v;
  v.site = j.at("site").get<std::string>();
  v.site_width = j.at("site_width").get<Eigen::Index>();
  for (const Json& p : j.at("parts")) {
    v.parts.push_back(ViewPart{p.at("position").get<int>(), p.at("col_begin").get<Eigen::Index>(),
                               p.at("col_end").get<Eigen::Index>()});
  }
  return v;
}

inline Json subspace_to_json(const TrainedSubspace& t) {
  Json curve = Json::array();
  for (const CurvePoint& c : t.curve) {
    curve.push_back(Json{{"epoch", c.epoch}, {"loss", c.loss}, {"train_iia", c.train_iia},
                         {"eval_iia", std::isnan(c.eval_iia) ? Json() : Json(c.eval_iia)}});
  }
  Json j{{"format", "dii-subspace"},
         {"version", kCheckpointVersion},
         {"view", view_to_json(t.view)},
         {"basis", matrix_to_json(t.basis.rows())},
         {"curve", std::move(curve)}};
  if (t.boundary_fraction) {
    j["boundary_fraction"] = *t.boundary_fraction;
    j["boundary_dims"] = t.boundary_dims;
    j["rotation"] = matrix_to_json(t.rotation);
  }
  return j;
}

inline TrainedSubspace subspace_from_json(const Json& j) {
  try {
    if (j.at("format") != "dii-subspace") fail(ErrorCode::kIo, "not a subspace checkpoint");
    TrainedSubspace t;
    t.view = view_from_json(j.at("view"));
    const Matrix rows = matrix_from_json(j.at("basis"));
    t.basis = rows.rows() == 0 ? SubspaceBasis::empty(rows.cols()) : SubspaceBasis::from_rows(rows, 1e-8);
    for (const Json& c : j.at("curve")) {
      CurvePoint p;
      p.epoch = c.at("epoch");
      p.loss = c.at("loss");
      p.train_iia = c.at("train_iia");
      if (!c.at("eval_iia").is_null()) p.eval_iia = c.at("eval_iia");
      t.curve.push_back(p);
    }
    if (j.contains("boundary_fraction")) {
      t.boundary_fraction = j.at("boundary_fraction").get<double>();
      t.boundary_dims = j.at("boundary_dims");
      t.rotation = matrix_from_json(j.at("rotation"));
    }
    return t;
  } catch (const Json::exception& e) {
    fail(ErrorCode::kIo, std::string("bad subspace checkpoint: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Datasets as JSON lines, one pair per line

inline Json input_to_json(const Input& in) {
  if (const auto* t = std::get_if<std::vector<int>>(&in)) return Json{{"tokens", *t}};
  return Json{{"vector", vector_to_json(std::get<Vector>(in))}};
}

inline Input input_from_json(const Json& j) {
  if (j.contains("tokens")) return j.at("tokens").get<std::vector<int>>();
  const auto v = j.at("vector").get<std::vector<double>>();
  return Vector(Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
}

inline std::string pairs_to_jsonl(std::span<const ExamplePair> pairs) {
  std::string out;
  for (const ExamplePair& p : pairs) {
    out += Json{{"base", input_to_json(p.base)},
                {"source", input_to_json(p.source)},
                {"base_label", p.base_label},
                {"cf_label", p.cf_label},
                {"template", p.template_id}}
               .dump();
    out += '\n';
  }
  return out;
}

inline std::vector<ExamplePair> pairs_from_jsonl(std::istream& in) {
  std::vector<ExamplePair> out;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const Json j = Json::parse(line);
      out.push_back({input_from_json(j.at("base")), input_from_json(j.at("source")),
                     j.at("base_label").get<int>(), j.at("cf_label").get<int>(),
                     j.at("template").get<int>()});
    } catch (const Json::exception& e) {
      fail(ErrorCode::kIo, "dataset line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<ExamplePair> load_pairs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  return pairs_from_jsonl(in);
}

// ---------------------------------------------------------------------------
// Manifests

/// FNV-1a over the compact dump, so key order in the file matters.
inline std::string config_hash(const Json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : config.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline Json make_manifest(const std::string& command, const Json& config, std::uint64_t seed,
                          const std::vector<std::string>& outputs) {
  return Json{{"tool", "dii"},
              {"tool_version", kToolVersion},
              {"command", command},
              {"seed", seed},
              {"config_hash", config_hash(config)},
              {"config", config},
              {"eigen_version", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                    std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                    std::to_string(EIGEN_MINOR_VERSION)},
              {"outputs", outputs}};
}

}  // namespace dii
