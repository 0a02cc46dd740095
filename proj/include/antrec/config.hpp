#pragma once

// Engine configuration: one flat JSON document holding every stage's
// hyperparameters under their usual symbol names, plus a nested "synth"
// object for the generator. Unknown keys are rejected.

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "antrec/adaptation.hpp"
#include "antrec/dataio.hpp"
#include "antrec/digest.hpp"
#include "antrec/eval.hpp"
#include "antrec/probe.hpp"
#include "antrec/training.hpp"

namespace antrec {

struct EngineConfig {
  IrlConfig irl;
  IntentConfig intent;
  TrainConfig train;
  /// Adaptation epochs; the pre-training budget is train.n_epochs.
  std::size_t adapt_epochs = 30;
  std::size_t select_k = 10;
  std::optional<double> adapt_beta;
  std::vector<std::size_t> k_values{10, 50};
  bool include_validation = true;
  std::size_t probe_max_epochs = 500;
  double probe_learning_rate = 0.1;
  bool probe_nonlinear = false;
  std::size_t probe_hidden = 32;
  RoutingMode probe_routing = RoutingMode::mean;
  bool probe_any_stage = false;
  bool raw_mode = false;
  std::size_t min_interactions = 5;
  SynthConfig synth;

  EngineConfig() { intent.d = irl.d; }

  void validate() const {
    irl.validate();
    IntentConfig ic = intent;
    ic.d = irl.d;
    ic.validate();
    train.validate();
    synth.validate();
    if (select_k < 1) throw ConfigError("select_k must be >= 1");
    if (k_values.empty()) throw ConfigError("k_values must not be empty");
    for (auto k : k_values)
      if (k < 1) throw ConfigError("k_values entries must be >= 1");
    if (adapt_beta && !(*adapt_beta > 0.0 && *adapt_beta < 1.0)) throw ConfigError("adapt_beta must lie in (0,1)");
    if (!(probe_learning_rate > 0.0)) throw ConfigError("probe_learning_rate must be > 0");
    if (probe_hidden < 1) throw ConfigError("probe_hidden must be >= 1");
  }

  AdaptSpec adapt_spec(AdaptMode mode, Variant variant) const {
    AdaptSpec s;
    s.mode = mode;
    s.variant = variant;
    s.train = train;
    s.train.n_epochs = adapt_epochs;
    s.beta = adapt_beta;
    s.irl = irl;
    s.intent = intent;
    s.select_k = select_k;
    return s;
  }

  ProbeOptions probe_options() const {
    ProbeOptions o;
    o.seed = train.seed;
    o.max_epochs = probe_max_epochs;
    o.learning_rate = probe_learning_rate;
    o.nonlinear = probe_nonlinear;
    o.hidden = probe_hidden;
    o.routing = probe_routing;
    o.allow_any_stage = probe_any_stage;
    return o;
  }

  LoadOptions load_options() const {
    LoadOptions o;
    o.max_seq_len = intent.max_seq_len;
    o.raw_mode = raw_mode;
    o.min_interactions = min_interactions;
    return o;
  }
};

namespace detail {

using json = nlohmann::ordered_json;

template <class T>
T json_as(const json& v, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("");
    }
    return v.get<T>();
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type: " + v.dump());
  }
}

/// A key bound to a field: reads a JSON value into it and writes it back.
template <class C>
struct Field {
  std::string key;
  std::function<void(C&, const json&)> read;
  std::function<json(const C&)> write;
};

template <class C, class T>
Field<C> field(std::string key, T C::*member) {
  return {key, [member, key](C& c, const json& v) { c.*member = json_as<T>(v, key); },
          [member](const C& c) { return json(c.*member); }};
}

template <class C, class S, class T>
Field<C> nested(std::string key, S C::*outer, T S::*member) {
  return {key, [outer, member, key](C& c, const json& v) { c.*outer.*member = json_as<T>(v, key); },
          [outer, member](const C& c) { return json(c.*outer.*member); }};
}

template <class C, class S, class E>
Field<C> nested_enum(std::string key, S C::*outer, E S::*member, E (*parse)(const std::string&)) {
  return {key, [=](C& c, const json& v) { c.*outer.*member = parse(json_as<std::string>(v, key)); },
          [=](const C& c) { return json(to_string(c.*outer.*member)); }};
}

inline const std::vector<Field<SynthConfig>>& synth_fields() {
  static const std::vector<Field<SynthConfig>> f{
      field("n_tasks", &SynthConfig::n_tasks),
      field("n_items_per_task", &SynthConfig::n_items_per_task),
      field("n_users_per_task", &SynthConfig::n_users_per_task),
      field("latent_dim", &SynthConfig::latent_dim),
      field("shared_structure", &SynthConfig::shared_structure),
      field("seq_len_min", &SynthConfig::seq_len_min),
      field("seq_len_max", &SynthConfig::seq_len_max),
      field("d_text", &SynthConfig::d_text),
      field("d_image", &SynthConfig::d_image),
      field("noise_scale", &SynthConfig::noise_scale),
      field("seed", &SynthConfig::seed),
      field("n_clusters", &SynthConfig::n_clusters),
      field("item_spread", &SynthConfig::item_spread),
      field("follow_prob", &SynthConfig::follow_prob),
  };
  return f;
}

inline const std::vector<Field<EngineConfig>>& engine_fields() {
  using C = EngineConfig;
  static const std::vector<Field<C>> f{
      nested("d", &C::irl, &IrlConfig::d),
      nested("n_h", &C::irl, &IrlConfig::n_h),
      nested("d_p", &C::irl, &IrlConfig::d_p),
      nested("omega", &C::irl, &IrlConfig::omega),
      nested("beta", &C::irl, &IrlConfig::beta),
      nested("price_norm_max", &C::irl, &IrlConfig::price_norm_max),
      nested("zero_text", &C::irl, &IrlConfig::zero_text),
      nested("zero_image", &C::irl, &IrlConfig::zero_image),
      nested("zero_price", &C::irl, &IrlConfig::zero_price),
      nested("zero_fusion", &C::irl, &IrlConfig::zero_fusion),
      nested("linear_routing", &C::irl, &IrlConfig::linear_routing),
      nested("n_layers", &C::intent, &IntentConfig::n_layers),
      nested("n_heads", &C::intent, &IntentConfig::n_heads),
      nested("max_seq_len", &C::intent, &IntentConfig::max_seq_len),
      nested("pre_norm", &C::intent, &IntentConfig::pre_norm),
      nested("ln_eps", &C::intent, &IntentConfig::ln_eps),
      nested("learning_rate", &C::train, &TrainConfig::learning_rate),
      nested("batch_size", &C::train, &TrainConfig::batch_size),
      nested("n_epochs", &C::train, &TrainConfig::n_epochs),
      nested("tau", &C::train, &TrainConfig::tau),
      nested("lambda", &C::train, &TrainConfig::lambda),
      nested("seed", &C::train, &TrainConfig::seed),
      nested("adam_beta1", &C::train, &TrainConfig::adam_beta1),
      nested("adam_beta2", &C::train, &TrainConfig::adam_beta2),
      nested("adam_eps", &C::train, &TrainConfig::adam_eps),
      nested("dropout", &C::train, &TrainConfig::dropout),
      nested("gradcheck_tolerance", &C::train, &TrainConfig::gradcheck_tolerance),
      nested_enum("routing", &C::train, &TrainConfig::routing, &parse_routing),
      nested("multi_position", &C::train, &TrainConfig::multi_position),
      nested_enum("candidates", &C::train, &TrainConfig::candidates, &parse_candidates),
      nested_enum("precision", &C::train, &TrainConfig::precision, &parse_precision),
      field("adapt_epochs", &C::adapt_epochs),
      field("select_k", &C::select_k),
      {"adapt_beta",
       [](C& c, const json& v) {
         if (v.is_null())
           c.adapt_beta.reset();
         else
           c.adapt_beta = json_as<double>(v, "adapt_beta");
       },
       [](const C& c) { return c.adapt_beta ? json(*c.adapt_beta) : json(nullptr); }},
      {"k_values",
       [](C& c, const json& v) {
         if (!v.is_array()) throw ConfigError("config key 'k_values' must be an array");
         c.k_values.clear();
         for (const auto& k : v) c.k_values.push_back(json_as<std::size_t>(k, "k_values"));
       },
       [](const C& c) { return json(c.k_values); }},
      field("include_validation", &C::include_validation),
      field("probe_max_epochs", &C::probe_max_epochs),
      field("probe_learning_rate", &C::probe_learning_rate),
      field("probe_nonlinear", &C::probe_nonlinear),
      field("probe_hidden", &C::probe_hidden),
      {"probe_routing", [](C& c, const json& v) { c.probe_routing = parse_routing(json_as<std::string>(v, "probe_routing")); },
       [](const C& c) { return json(to_string(c.probe_routing)); }},
      field("probe_any_stage", &C::probe_any_stage),
      field("raw_mode", &C::raw_mode),
      field("min_interactions", &C::min_interactions),
  };
  return f;
}

template <class C>
void apply_fields(C& c, const json& j, const std::vector<Field<C>>& fields, const std::string& where,
                  const std::function<bool(C&, const std::string&, const json&)>& extra = {}) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    auto f = std::find_if(fields.begin(), fields.end(), [&](const auto& x) { return x.key == it.key(); });
    if (f != fields.end()) {
      f->read(c, it.value());
    } else if (!(extra && extra(c, it.key(), it.value()))) {
      throw ConfigError("unknown " + where + " key '" + it.key() + "'");
    }
  }
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const EngineConfig& c) {
  nlohmann::ordered_json j;
  for (const auto& f : detail::engine_fields()) j[f.key] = f.write(c);
  nlohmann::ordered_json s;
  for (const auto& f : detail::synth_fields()) s[f.key] = f.write(c.synth);
  j["synth"] = std::move(s);
  return j;
}

/// Overlays `j` onto `base`; keys absent from `j` keep their base value.
inline EngineConfig apply_config(EngineConfig base, const nlohmann::ordered_json& j) {
  detail::apply_fields<EngineConfig>(base, j, detail::engine_fields(), "config",
                                     [](EngineConfig& c, const std::string& key, const nlohmann::ordered_json& v) {
                                       if (key != "synth") return false;
                                       detail::apply_fields<SynthConfig>(c.synth, v, detail::synth_fields(), "synth");
                                       return true;
                                     });
  base.intent.d = base.irl.d;
  base.validate();
  return base;
}

inline EngineConfig config_from_json(const nlohmann::ordered_json& j) { return apply_config(EngineConfig{}, j); }

inline EngineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(ss.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

/// `key=value` override; the value is read as JSON, or as a bare string if it
/// does not parse. Dotted keys reach into "synth".
inline EngineConfig apply_override(const EngineConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::ordered_json value;
  try {
    value = nlohmann::ordered_json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  nlohmann::ordered_json patch;
  if (key.starts_with("synth."))
    patch["synth"][key.substr(6)] = value;
  else
    patch[key] = value;
  return apply_config(c, patch);
}

inline Digest config_hash(const EngineConfig& c) { return sha256(to_json(c).dump()); }

}  // namespace antrec
