#include "calibfield/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <set>

extern char** environ;

namespace calibfield {

using nlohmann::json;

namespace {

// Walks one JSON object, reading typed fields with defaults and rejecting
// keys nobody asked for (typos would otherwise be silently ignored).
class Section {
 public:
  Section(const json& doc, std::string path) : path_(std::move(path)) {
    if (doc.is_null()) return;
    if (!doc.is_object()) throw ConfigError(path_ + ": expected an object");
    doc_ = &doc;
  }

  Section child(const std::string& key) {
    seen_.insert(key);
    static const json kNull;
    if (doc_ == nullptr || !doc_->contains(key)) return Section(kNull, name(key));
    return Section(doc_->at(key), name(key));
  }

  bool has(const std::string& key) const { return doc_ != nullptr && doc_->contains(key); }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (!has(key)) return;
    try {
      out = doc_->at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(name(key) + ": wrong type (" + doc_->at(key).dump() + ")");
    }
  }

  void read_vec2(const std::string& key, Eigen::Vector2d& out) {
    std::vector<double> v;
    read(key, v);
    if (!has(key)) return;
    if (v.size() != 2) throw ConfigError(name(key) + ": expected two numbers");
    out = Eigen::Vector2d(v[0], v[1]);
  }

  void finish() const {
    if (doc_ == nullptr) return;
    for (const auto& [key, value] : doc_->items()) {
      if (!seen_.contains(key)) throw ConfigError(name(key) + ": unknown key");
    }
  }

 private:
  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* doc_ = nullptr;
  std::string path_;
  std::set<std::string> seen_;
};

json vec2(const Eigen::Vector2d& v) { return json::array({v.x(), v.y()}); }

DataSource parse_source(const std::string& s) {
  if (s == "three_cluster") return DataSource::ThreeCluster;
  if (s == "sinusoidal") return DataSource::Sinusoidal;
  if (s == "file") return DataSource::File;
  throw ConfigError("dataset.source: unknown source '" + s + "' (expected three_cluster, sinusoidal or file)");
}

const char* source_name(DataSource s) {
  switch (s) {
    case DataSource::ThreeCluster: return "three_cluster";
    case DataSource::Sinusoidal: return "sinusoidal";
    case DataSource::File: return "file";
  }
  return "?";
}

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return text;
  }
}

}  // namespace

void RunConfig::validate() const {
  if (jobs < 1) throw ConfigError("jobs must be at least 1");
  if (reliability_bins < 1) throw ConfigError("reliability_bins must be at least 1");
  if (dataset.source == DataSource::File && dataset.path.empty()) throw ConfigError("dataset.path: required for source 'file'");
  if (dataset.source == DataSource::ThreeCluster) dataset.three_cluster.validate();
  if (dataset.source == DataSource::Sinusoidal) dataset.sinusoid.validate();
  split.validate();
  kernel.validate();
  loss.validate();
  train.validate();
  grid.validate();
  regime.validate();
  correction.validate();
  if (audit.bootstrap != 0 && audit.bootstrap < 100) throw ConfigError("audit.bootstrap: needs at least 100 replicates");
  if (audit.permutation_null < 0) throw ConfigError("audit.permutation_null: must be >= 0");
  if (audit.raw_sigmas.empty()) throw ConfigError("audit.raw_sigmas: must not be empty");
  for (double s : audit.raw_sigmas)
    if (!(s > 0.0)) throw ConfigError("audit.raw_sigmas: entries must be positive");
}

void apply_env_overrides(json& doc, const std::map<std::string, std::string>& env) {
  static const std::string prefix = "CALIBFIELD_";
  for (const auto& [name, value] : env) {
    if (!name.starts_with(prefix) || name.size() == prefix.size()) continue;
    std::string rest = name.substr(prefix.size());
    std::transform(rest.begin(), rest.end(), rest.begin(), [](unsigned char c) { return std::tolower(c); });

    json* node = &doc;
    std::size_t start = 0;
    while (true) {
      const std::size_t sep = rest.find("__", start);
      const std::string key = rest.substr(start, sep == std::string::npos ? std::string::npos : sep - start);
      if (key.empty()) throw ConfigError("environment override " + name + ": empty key segment");
      if (!node->is_null() && !node->is_object())
        throw ConfigError("environment override " + name + ": '" + key + "' lies under a non-object value");
      if (sep == std::string::npos) {
        (*node)[key] = parse_value(value);
        break;
      }
      node = &(*node)[key];
      start = sep + 2;
    }
  }
}

std::map<std::string, std::string> calibfield_environment() {
  std::map<std::string, std::string> out;
  for (char** e = environ; e != nullptr && *e != nullptr; ++e) {
    const std::string entry(*e);
    const auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    std::string key = entry.substr(0, eq);
    if (key.starts_with("CALIBFIELD_")) out.emplace(std::move(key), entry.substr(eq + 1));
  }
  return out;
}

json load_config_document(const std::filesystem::path& path) {
  json doc = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    try {
      doc = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config file " + path.string() + ": " + e.what());
    }
    if (!doc.is_object()) throw ConfigError("config file " + path.string() + ": top level must be an object");
  }
  apply_env_overrides(doc, calibfield_environment());
  return doc;
}

RunConfig config_from_json(const json& doc) {
  RunConfig c;
  Section root(doc, "");
  root.read("seed", c.seed);
  root.read("jobs", c.jobs);
  std::string out_dir = c.output_dir.string();
  root.read("output_dir", out_dir);
  c.output_dir = out_dir;
  root.read("reliability_bins", c.reliability_bins);

  // Sub-seeds default to the global seed.
  c.dataset.three_cluster.seed = c.seed;
  c.dataset.sinusoid.seed = c.seed;
  c.split.seed = c.seed;
  c.train.seed = c.seed;

  {
    Section ds = root.child("dataset");
    std::string source = source_name(c.dataset.source);
    ds.read("source", source);
    c.dataset.source = parse_source(source);
    std::string path;
    ds.read("path", path);
    c.dataset.path = path;
    std::string format;
    ds.read("format", format);
    c.dataset.format = !format.empty() ? parse_format(format)
                       : !path.empty() ? format_from_path(path)
                                       : FileFormat::Csv;

    Section tc = ds.child("three_cluster");
    auto& t = c.dataset.three_cluster;
    tc.read("n", t.n);
    tc.read("seed", t.seed);
    tc.read("cluster_std", t.cluster_std);
    tc.read("logit_noise_std", t.logit_noise_std);
    tc.read_vec2("logit_direction", t.logit_direction);
    std::vector<double> shifts(t.shifts.begin(), t.shifts.end());
    tc.read("shifts", shifts);
    if (shifts.size() != 3) throw ConfigError("dataset.three_cluster.shifts: expected three numbers");
    std::copy(shifts.begin(), shifts.end(), t.shifts.begin());
    std::vector<std::vector<double>> centers;
    tc.read("cluster_centers", centers);
    if (tc.has("cluster_centers")) {
      if (centers.size() != 3) throw ConfigError("dataset.three_cluster.cluster_centers: expected three points");
      for (std::size_t i = 0; i < 3; ++i) {
        if (centers[i].size() != 2)
          throw ConfigError("dataset.three_cluster.cluster_centers: each center needs two coordinates");
        t.cluster_centers[i] = Eigen::Vector2d(centers[i][0], centers[i][1]);
      }
    }
    tc.finish();

    Section sc = ds.child("sinusoidal");
    auto& s = c.dataset.sinusoid;
    sc.read("n", s.n);
    sc.read("seed", s.seed);
    sc.read("amplitude", s.amplitude);
    sc.read("frequency", s.frequency);
    sc.read_vec2("direction", s.direction);
    sc.read_vec2("logit_direction", s.logit_direction);
    sc.read("logit_noise_std", s.logit_noise_std);
    sc.finish();
    ds.finish();
  }

  {
    Section sp = root.child("split");
    sp.read("train", c.split.train_frac);
    sp.read("val", c.split.val_frac);
    sp.read("test", c.split.test_frac);
    sp.read("seed", c.split.seed);
    sp.finish();
  }

  {
    Section a = root.child("arch");
    a.read("preset", c.arch_preset);
    if (c.arch_preset == "synthetic")
      c.arch = NetArch::synthetic(2);
    else if (c.arch_preset == "embedding")
      c.arch = NetArch::embedding(2);
    else
      throw ConfigError("arch.preset: unknown preset '" + c.arch_preset + "' (expected synthetic or embedding)");
    a.read("input_dim", c.arch.input_dim);
    a.read("hidden_width", c.arch.hidden_width);
    a.read("hidden_layers", c.arch.hidden_layers);
    a.read("output_dim", c.arch.output_dim);
    a.read("dropout", c.arch.dropout);
    a.read("normalize_output", c.arch.normalize_output);
    a.finish();
  }

  {
    Section k = root.child("kernel");
    k.read("sigma", c.kernel.sigma);
    k.finish();
    Section l = root.child("loss");
    l.read("lambda", c.loss.lambda);
    l.read("m_min", c.loss.m_min);
    l.finish();
    c.grid.m_min = c.loss.m_min;
  }

  {
    Section t = root.child("train");
    t.read("learning_rate", c.train.learning_rate);
    t.read("weight_decay", c.train.weight_decay);
    t.read("batch_size", c.train.batch_size);
    t.read("grad_clip_norm", c.train.grad_clip_norm);
    t.read("max_epochs", c.train.max_epochs);
    t.read("patience", c.train.patience);
    t.read("seed", c.train.seed);
    t.read("bank_cap", c.train.bank_cap);
    t.read("beta1", c.train.beta1);
    t.read("beta2", c.train.beta2);
    t.read("adam_eps", c.train.adam_eps);
    t.finish();
  }

  {
    Section g = root.child("grid");
    g.read("sigmas", c.grid.sigmas);
    g.read("lambdas", c.grid.lambdas);
    g.finish();
  }

  {
    Section r = root.child("regime");
    r.read("epsilon", c.regime.epsilon);
    r.read("sweep", c.regime.sweep);
    r.finish();
  }

  {
    Section r = root.child("correction");
    r.read("alpha", c.correction.alpha);
    r.read("alpha_grid", c.correction.alpha_grid);
    r.finish();
  }

  {
    Section a = root.child("audit");
    std::string metric = metric_name(c.audit.metric);
    a.read("metric", metric);
    c.audit.metric = parse_metric(metric);
    a.read("bootstrap", c.audit.bootstrap);
    a.read("permutation_null", c.audit.permutation_null);
    std::string null_mode = null_mode_name(c.audit.null_mode);
    a.read("null_mode", null_mode);
    c.audit.null_mode = parse_null_mode(null_mode);
    a.read("seeds", c.audit.seeds);
    a.read("raw_sigmas", c.audit.raw_sigmas);
    a.finish();
  }

  root.finish();
  return c;
}

json config_to_json(const RunConfig& c) {
  const auto& t = c.dataset.three_cluster;
  const auto& s = c.dataset.sinusoid;
  json centers = json::array();
  for (const auto& p : t.cluster_centers) centers.push_back(vec2(p));

  json doc;
  doc["seed"] = c.seed;
  doc["jobs"] = c.jobs;
  doc["output_dir"] = c.output_dir.string();
  doc["reliability_bins"] = c.reliability_bins;
  doc["dataset"] = {
      {"source", source_name(c.dataset.source)},
      {"path", c.dataset.path.string()},
      {"format", format_name(c.dataset.format)},
      {"three_cluster",
       {{"n", t.n},
        {"seed", t.seed},
        {"cluster_centers", centers},
        {"cluster_std", t.cluster_std},
        {"logit_direction", vec2(t.logit_direction)},
        {"logit_noise_std", t.logit_noise_std},
        {"shifts", t.shifts}}},
      {"sinusoidal",
       {{"n", s.n},
        {"seed", s.seed},
        {"amplitude", s.amplitude},
        {"frequency", s.frequency},
        {"direction", vec2(s.direction)},
        {"logit_direction", vec2(s.logit_direction)},
        {"logit_noise_std", s.logit_noise_std}}},
  };
  doc["split"] = {{"train", c.split.train_frac}, {"val", c.split.val_frac}, {"test", c.split.test_frac},
                  {"seed", c.split.seed}};
  doc["arch"] = {{"preset", c.arch_preset},
                 {"input_dim", c.arch.input_dim},
                 {"hidden_width", c.arch.hidden_width},
                 {"hidden_layers", c.arch.hidden_layers},
                 {"output_dim", c.arch.output_dim},
                 {"dropout", c.arch.dropout},
                 {"normalize_output", c.arch.normalize_output}};
  doc["kernel"] = {{"sigma", c.kernel.sigma}};
  doc["loss"] = {{"lambda", c.loss.lambda}, {"m_min", c.loss.m_min}};
  doc["train"] = {{"learning_rate", c.train.learning_rate},
                  {"weight_decay", c.train.weight_decay},
                  {"batch_size", c.train.batch_size},
                  {"grad_clip_norm", c.train.grad_clip_norm},
                  {"max_epochs", c.train.max_epochs},
                  {"patience", c.train.patience},
                  {"seed", c.train.seed},
                  {"bank_cap", c.train.bank_cap},
                  {"beta1", c.train.beta1},
                  {"beta2", c.train.beta2},
                  {"adam_eps", c.train.adam_eps}};
  doc["grid"] = {{"sigmas", c.grid.sigmas}, {"lambdas", c.grid.lambdas}};
  doc["regime"] = {{"epsilon", c.regime.epsilon}, {"sweep", c.regime.sweep}};
  doc["correction"] = {{"alpha", c.correction.alpha}, {"alpha_grid", c.correction.alpha_grid}};
  doc["audit"] = {{"metric", metric_name(c.audit.metric)},
                  {"bootstrap", c.audit.bootstrap},
                  {"permutation_null", c.audit.permutation_null},
                  {"null_mode", null_mode_name(c.audit.null_mode)},
                  {"seeds", c.audit.seeds},
                  {"raw_sigmas", c.audit.raw_sigmas}};
  return doc;
}

}  // namespace calibfield
