#include "switch_sae/run_config.hpp"

#include "switch_sae/errors.hpp"

#include <cmath>
#include <fstream>
#include <limits>

namespace ssae {
namespace {

using nlohmann::json;
using nlohmann::ordered_json;

std::string type_name(const json& v) {
  if (v.is_boolean()) return "boolean";
  if (v.is_number_integer()) return "integer";
  if (v.is_number()) return "number";
  if (v.is_string()) return "string";
  if (v.is_object()) return "object";
  if (v.is_array()) return "array";
  return "null";
}

/// Accepts `value` where the schema holds `like`. Integers are accepted
/// for real-valued fields but not the other way round.
void check_type(const std::string& key, const json& value, const ordered_json& like) {
  bool ok = false;
  if (like.is_boolean()) ok = value.is_boolean();
  else if (like.is_number_integer()) ok = value.is_number_integer();
  else if (like.is_number()) ok = value.is_number();
  else if (like.is_string()) ok = value.is_string();
  if (!ok) {
    std::string expected = like.is_boolean() ? "boolean"
                         : like.is_number_integer() ? "integer"
                         : like.is_number() ? "number"
                         : "string";
    throw ConfigError(key, "expected " + expected + ", found " + type_name(value));
  }
}

Index get_count(const ordered_json& doc, const char* section, const char* key, Index min) {
  const json& v = doc.at(section).at(key);
  const std::string name = std::string(section) + "." + key;
  if (v.is_number_unsigned()) {
    const auto u = v.get<std::uint64_t>();
    if (u > static_cast<std::uint64_t>(std::numeric_limits<Index>::max()))
      throw ConfigError(name, "value too large");
    if (static_cast<Index>(u) < min)
      throw ConfigError(name, "must be at least " + std::to_string(min));
    return static_cast<Index>(u);
  }
  const auto i = v.get<std::int64_t>();
  if (i < min) throw ConfigError(name, "must be at least " + std::to_string(min));
  return static_cast<Index>(i);
}

std::uint64_t get_seed(const ordered_json& doc, const char* section, const char* key) {
  const json& v = doc.at(section).at(key);
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  const auto i = v.get<std::int64_t>();
  if (i < 0) throw ConfigError(std::string(section) + "." + key, "seed must be non-negative");
  return static_cast<std::uint64_t>(i);
}

double get_real(const ordered_json& doc, const char* section, const char* key) {
  const double v = doc.at(section).at(key).get<double>();
  if (!std::isfinite(v)) throw ConfigError(std::string(section) + "." + key, "must be finite");
  return v;
}

}  // namespace

ordered_json default_config_json() {
  ordered_json doc;
  doc["data"] = {
      {"d", 64},
      {"num_true_features", 256},
      {"active_per_sample", 8},
      {"num_clusters", 1},
      {"cluster_exclusive", false},
      {"coeff_low", 0.5},
      {"coeff_high", 1.5},
      {"noise_sigma", 0.05},
      {"feature_frequency_exponent", 0.0},
      {"seed", 0},
      {"count", 65536},
      {"sample_stream", 0},
  };
  doc["model"] = {
      {"arch", "topk"},
      {"M", 256},
      {"N", 1},
      {"k", 8},
      {"topk_relu", false},
  };
  doc["train"] = {
      {"alpha", 3.0},
      {"l1_coeff", 0.05},
      {"base_lr_scale", 0.0128},
      {"steps", 1000},
      {"batch_size", 256},
      {"seed", 0},
      {"eval_every", 100},
      {"lr_decay_fraction", 0.2},
      {"shuffle_buffer", 4096},
  };
  doc["eval"] = {
      {"threshold", 0.9},
      {"chunk_rows", 4096},
      {"baseline_blocks", 16},
  };
  return doc;
}

RunConfig parse_run_config(const json& doc) {
  if (!doc.is_object()) throw ConfigError("<root>", "config must be a JSON object");
  ordered_json merged = default_config_json();
  for (const auto& [section, body] : doc.items()) {
    if (!merged.contains(section)) throw ConfigError(section, "unknown section");
    if (!body.is_object()) throw ConfigError(section, "section must be an object");
    for (const auto& [key, value] : body.items()) {
      const std::string name = section + "." + key;
      if (!merged[section].contains(key)) throw ConfigError(name, "unknown key");
      check_type(name, value, merged[section][key]);
      merged[section][key] = value;
    }
  }

  RunConfig c;
  auto& data = c.data;
  data.d = get_count(merged, "data", "d", 1);
  data.num_true_features = get_count(merged, "data", "num_true_features", 1);
  data.active_per_sample = get_count(merged, "data", "active_per_sample", 1);
  data.num_clusters = get_count(merged, "data", "num_clusters", 1);
  data.cluster_exclusive = merged["data"]["cluster_exclusive"].get<bool>();
  data.coeff_low = get_real(merged, "data", "coeff_low");
  data.coeff_high = get_real(merged, "data", "coeff_high");
  data.noise_sigma = get_real(merged, "data", "noise_sigma");
  data.feature_frequency_exponent = get_real(merged, "data", "feature_frequency_exponent");
  data.seed = get_seed(merged, "data", "seed");
  c.data_count = get_count(merged, "data", "count", 1);
  c.sample_stream = get_seed(merged, "data", "sample_stream");

  if (data.active_per_sample > data.num_true_features)
    throw ConfigError("data.active_per_sample", "must not exceed data.num_true_features");
  if (data.num_clusters > data.num_true_features)
    throw ConfigError("data.num_clusters", "must not exceed data.num_true_features");
  if (data.coeff_low > data.coeff_high) throw ConfigError("data.coeff_low", "must not exceed data.coeff_high");
  if (data.noise_sigma < 0) throw ConfigError("data.noise_sigma", "must be non-negative");
  if (data.cluster_exclusive && data.active_per_sample > data.num_true_features / data.num_clusters)
    throw ConfigError("data.active_per_sample", "exceeds the cluster size in cluster_exclusive mode");

  auto& t = c.train;
  try {
    t.arch = arch_from_string(merged["model"]["arch"].get<std::string>());
  } catch (const std::invalid_argument& e) {
    throw ConfigError("model.arch", e.what());
  }
  t.d = data.d;
  t.width = get_count(merged, "model", "M", 1);
  t.experts = get_count(merged, "model", "N", 1);
  t.k = get_count(merged, "model", "k", 0);
  t.topk_relu = merged["model"]["topk_relu"].get<bool>();
  t.alpha = get_real(merged, "train", "alpha");
  t.l1_coeff = get_real(merged, "train", "l1_coeff");
  t.base_lr_scale = get_real(merged, "train", "base_lr_scale");
  t.steps = get_count(merged, "train", "steps", 1);
  t.batch_size = get_count(merged, "train", "batch_size", 1);
  t.seed = get_seed(merged, "train", "seed");
  t.eval_every = get_count(merged, "train", "eval_every", 1);
  t.lr_decay_fraction = get_real(merged, "train", "lr_decay_fraction");
  c.shuffle_buffer = get_count(merged, "train", "shuffle_buffer", 1);

  if (t.arch == ArchKind::Switch) {
    if (t.width % t.experts != 0) throw ConfigError("model.N", "must divide model.M");
    if (t.k < 1 || t.k > t.width / t.experts) throw ConfigError("model.k", "must lie in [1, M/N]");
  } else {
    if (t.experts != 1) throw ConfigError("model.N", "dense architectures require N = 1");
    if (t.arch == ArchKind::TopK && (t.k < 1 || t.k > t.width))
      throw ConfigError("model.k", "must lie in [1, M]");
  }
  if (t.alpha < 0) throw ConfigError("train.alpha", "must be non-negative");
  if (t.l1_coeff < 0) throw ConfigError("train.l1_coeff", "must be non-negative");
  if (t.base_lr_scale < 0) throw ConfigError("train.base_lr_scale", "must be non-negative");
  if (t.lr_decay_fraction < 0 || t.lr_decay_fraction > 1)
    throw ConfigError("train.lr_decay_fraction", "must lie in [0, 1]");

  c.eval_threshold = get_real(merged, "eval", "threshold");
  c.eval_chunk_rows = get_count(merged, "eval", "chunk_rows", 1);
  c.eval_baseline_blocks = get_count(merged, "eval", "baseline_blocks", 2);
  if (c.eval_threshold < -1 || c.eval_threshold > 1) throw ConfigError("eval.threshold", "must lie in [-1, 1]");

  try {
    c.data.validate();
    c.train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("<config>", e.what());
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string(), std::string("invalid JSON: ") + e.what());
  }
  return parse_run_config(doc);
}

ordered_json to_json(const RunConfig& c) {
  ordered_json doc;
  doc["data"] = {
      {"d", c.data.d},
      {"num_true_features", c.data.num_true_features},
      {"active_per_sample", c.data.active_per_sample},
      {"num_clusters", c.data.num_clusters},
      {"cluster_exclusive", c.data.cluster_exclusive},
      {"coeff_low", c.data.coeff_low},
      {"coeff_high", c.data.coeff_high},
      {"noise_sigma", c.data.noise_sigma},
      {"feature_frequency_exponent", c.data.feature_frequency_exponent},
      {"seed", c.data.seed},
      {"count", c.data_count},
      {"sample_stream", c.sample_stream},
  };
  doc["model"] = {
      {"arch", to_string(c.train.arch)},
      {"M", c.train.width},
      {"N", c.train.experts},
      {"k", c.train.k},
      {"topk_relu", c.train.topk_relu},
  };
  doc["train"] = {
      {"alpha", c.train.alpha},
      {"l1_coeff", c.train.l1_coeff},
      {"base_lr_scale", c.train.base_lr_scale},
      {"steps", c.train.steps},
      {"batch_size", c.train.batch_size},
      {"seed", c.train.seed},
      {"eval_every", c.train.eval_every},
      {"lr_decay_fraction", c.train.lr_decay_fraction},
      {"shuffle_buffer", c.shuffle_buffer},
  };
  doc["eval"] = {
      {"threshold", c.eval_threshold},
      {"chunk_rows", c.eval_chunk_rows},
      {"baseline_blocks", c.eval_baseline_blocks},
  };
  return doc;
}

}  // namespace ssae
