#pragma once

// Experiment configuration: every tunable in one place, addressable by flat
// dotted keys ("train.lr", "synth.noise", ...) from a JSON file or --set.

#include <functional>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "calg/datakit.hpp"
#include "calg/errors.hpp"
#include "calg/evalkit.hpp"
#include "calg/primitives.hpp"
#include "calg/training.hpp"

namespace calg {

struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::size_t threads = 1;
  SyntheticConfig synth;
  SplitConfig split;
  BankConfig bank;
  PlattConfig platt;
  TrainConfig train;
  SweepConfig sweep;
  std::string pooling = "global";  // or "per_expression"
  bool run_finetune = true;
  bool run_sweep = true;

  Pooling pooling_mode() const {
    if (pooling == "global") return Pooling::Global;
    if (pooling == "per_expression") return Pooling::PerExpression;
    throw Error(ErrorCode::Usage, "unknown pooling '" + pooling + "'");
  }

  /// Propagates shared settings into the module configs.
  void sync() {
    synth.seed = seed;
    train.threads = threads;
    (void)pooling_mode();
  }
};

struct ConfigKey {
  std::string name;
  std::function<nlohmann::json(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const nlohmann::json&)> set;
};

namespace detail {

template <typename T>
T coerce(const nlohmann::json& v, const std::string& key) {
  auto bad = [&] {
    return Error(ErrorCode::Usage, "bad value for " + key + ": " + v.dump());
  };
  if constexpr (std::is_same_v<T, bool>) {
    if (v.is_boolean()) return v.get<bool>();
    if (v.is_string() && (v == "true" || v == "false")) return v == "true";
    throw bad();
  } else if constexpr (std::is_integral_v<T>) {
    if (v.is_number_unsigned()) return v.get<T>();
    if (v.is_number_integer() && v.get<long long>() >= 0) return static_cast<T>(v.get<long long>());
    throw bad();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (v.is_number()) return v.get<T>();
    throw bad();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (v.is_string()) return v.get<std::string>();
    throw bad();
  } else {
    // vector<string>, vector<size_t>, vector<double>: JSON array or comma list
    using E = typename T::value_type;
    T out;
    if (v.is_array()) {
      for (const auto& x : v) out.push_back(coerce<E>(x, key));
      return out;
    }
    if (!v.is_string()) throw bad();
    const std::string s = v.get<std::string>();
    std::size_t start = 0;
    while (start <= s.size() && !s.empty()) {
      const std::size_t comma = std::min(s.find(',', start), s.size());
      const std::string item = s.substr(start, comma - start);
      if constexpr (std::is_same_v<E, std::string>) {
        out.push_back(item);
      } else {
        const auto parsed = nlohmann::json::parse(item, nullptr, false);
        if (parsed.is_discarded()) throw bad();
        out.push_back(coerce<E>(parsed, key));
      }
      start = comma + 1;
    }
    return out;
  }
}

template <typename Ref>
ConfigKey make_key(std::string name, Ref ref) {
  return {name,
          [ref](const ExperimentConfig& c) { return nlohmann::json(ref(c)); },
          [ref, name](ExperimentConfig& c, const nlohmann::json& v) {
            using T = std::remove_cvref_t<decltype(ref(c))>;
            ref(c) = coerce<T>(v, name);
          }};
}

}  // namespace detail

inline const std::vector<ConfigKey>& config_keys() {
  using detail::make_key;
  static const std::vector<ConfigKey> keys{
      make_key("seed", [](auto& c) -> auto& { return c.seed; }),
      make_key("threads", [](auto& c) -> auto& { return c.threads; }),
      make_key("pooling", [](auto& c) -> auto& { return c.pooling; }),
      make_key("run.finetune", [](auto& c) -> auto& { return c.run_finetune; }),
      make_key("run.sweep", [](auto& c) -> auto& { return c.run_sweep; }),

      make_key("synth.primitives", [](auto& c) -> auto& { return c.synth.primitives; }),
      make_key("synth.dim", [](auto& c) -> auto& { return c.synth.dim; }),
      make_key("synth.images", [](auto& c) -> auto& { return c.synth.images; }),
      make_key("synth.blocks", [](auto& c) -> auto& { return c.synth.blocks; }),
      make_key("synth.block_size", [](auto& c) -> auto& { return c.synth.block_size; }),
      make_key("synth.block_rho", [](auto& c) -> auto& { return c.synth.block_rho; }),
      make_key("synth.tau_min", [](auto& c) -> auto& { return c.synth.tau_min; }),
      make_key("synth.tau_max", [](auto& c) -> auto& { return c.synth.tau_max; }),
      make_key("synth.noise", [](auto& c) -> auto& { return c.synth.noise; }),
      make_key("synth.identity_projection",
               [](auto& c) -> auto& { return c.synth.identity_projection; }),
      make_key("synth.correlation", [](auto& c) -> auto& { return c.synth.correlation; }),
      make_key("synth.names", [](auto& c) -> auto& { return c.synth.names; }),

      make_key("split.train_frac", [](auto& c) -> auto& { return c.split.train_frac; }),
      make_key("split.val_frac", [](auto& c) -> auto& { return c.split.val_frac; }),
      make_key("split.min_pos_frac", [](auto& c) -> auto& { return c.split.min_pos_frac; }),
      make_key("split.min_count", [](auto& c) -> auto& { return c.split.min_count; }),
      make_key("split.expr_train_ratio", [](auto& c) -> auto& { return c.split.expr_train_ratio; }),
      make_key("split.calib_frac", [](auto& c) -> auto& { return c.split.calib_frac; }),
      make_key("split.prefilter_margin", [](auto& c) -> auto& { return c.split.prefilter_margin; }),
      make_key("split.max_attempts", [](auto& c) -> auto& { return c.split.max_attempts; }),
      make_key("split.use_and", [](auto& c) -> auto& { return c.split.use_and; }),
      make_key("split.use_or", [](auto& c) -> auto& { return c.split.use_or; }),

      make_key("svm.lambda", [](auto& c) -> auto& { return c.bank.svm.lambda; }),
      make_key("svm.epochs", [](auto& c) -> auto& { return c.bank.svm.epochs; }),
      make_key("svm.step_offset", [](auto& c) -> auto& { return c.bank.svm.step_offset; }),
      make_key("bank.min_pos", [](auto& c) -> auto& { return c.bank.min_pos; }),
      make_key("bank.min_neg", [](auto& c) -> auto& { return c.bank.min_neg; }),
      make_key("platt.max_iterations", [](auto& c) -> auto& { return c.platt.max_iterations; }),
      make_key("platt.gradient_tolerance",
               [](auto& c) -> auto& { return c.platt.gradient_tolerance; }),

      make_key("train.alpha1", [](auto& c) -> auto& { return c.train.alpha1; }),
      make_key("train.alpha2", [](auto& c) -> auto& { return c.train.alpha2; }),
      make_key("train.alpha3", [](auto& c) -> auto& { return c.train.alpha3; }),
      make_key("train.lr", [](auto& c) -> auto& { return c.train.lr; }),
      make_key("train.epochs_main", [](auto& c) -> auto& { return c.train.epochs_main; }),
      make_key("train.epochs_finetune", [](auto& c) -> auto& { return c.train.epochs_finetune; }),
      make_key("train.batch_expressions",
               [](auto& c) -> auto& { return c.train.batch_expressions; }),
      make_key("train.pos_per_expr", [](auto& c) -> auto& { return c.train.pos_per_expr; }),
      make_key("train.neg_per_expr", [](auto& c) -> auto& { return c.train.neg_per_expr; }),
      make_key("train.freeze_primitives",
               [](auto& c) -> auto& { return c.train.freeze_primitives; }),
      make_key("train.validate", [](auto& c) -> auto& { return c.train.validate; }),
      make_key("train.select_best_val", [](auto& c) -> auto& { return c.train.select_best_val; }),
      make_key("train.slope", [](auto& c) -> auto& { return c.train.slope; }),
      make_key("train.learn_disjunction",
               [](auto& c) -> auto& { return c.train.learn_disjunction; }),
      make_key("train.unit_norm", [](auto& c) -> auto& { return c.train.unit_norm; }),
      make_key("train.finetune_expressions",
               [](auto& c) -> auto& { return c.train.finetune_expressions; }),
      make_key("train.finetune_complexity",
               [](auto& c) -> auto& { return c.train.finetune_complexity; }),

      make_key("sweep.complexities", [](auto& c) -> auto& { return c.sweep.complexities; }),
      make_key("sweep.per_complexity", [](auto& c) -> auto& { return c.sweep.per_complexity; }),
      make_key("sweep.max_attempts_factor",
               [](auto& c) -> auto& { return c.sweep.max_attempts_factor; }),
  };
  return keys;
}

inline const ConfigKey& config_key(std::string_view name) {
  for (const auto& k : config_keys()) {
    if (k.name == name) return k;
  }
  throw Error(ErrorCode::Usage, "unknown config key '" + std::string(name) + "'");
}

inline void set_config_value(ExperimentConfig& cfg, std::string_view key,
                             const nlohmann::json& value) {
  config_key(key).set(cfg, value);
}

/// Applies "key=value". The value is read as JSON when it parses, otherwise
/// as a bare string.
inline void apply_override(ExperimentConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw Error(ErrorCode::Usage, "expected key=value, got '" + std::string(assignment) + "'");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  auto value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  set_config_value(cfg, key, value);
}

/// Flat {key: value} object with every key.
inline nlohmann::json to_json(const ExperimentConfig& cfg) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& k : config_keys()) out[k.name] = k.get(cfg);
  return out;
}

/// Accepts a flat object of dotted keys, or nested objects whose paths form
/// dotted keys ({"train": {"lr": 0.01}}).
inline void apply_json(ExperimentConfig& cfg, const nlohmann::json& doc,
                       const std::string& prefix = "") {
  if (!doc.is_object()) throw Error(ErrorCode::Usage, "config must be a JSON object");
  for (const auto& [k, v] : doc.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) {
      apply_json(cfg, v, key);
    } else {
      set_config_value(cfg, key, v);
    }
  }
}

inline ExperimentConfig config_from_json(const nlohmann::json& doc) {
  ExperimentConfig cfg;
  apply_json(cfg, doc);
  cfg.sync();
  return cfg;
}

/// Digest over the keys whose names start with any of `prefixes` (all keys
/// when empty).
inline std::string config_digest(const ExperimentConfig& cfg,
                                 const std::vector<std::string>& prefixes = {}) {
  nlohmann::json sel = nlohmann::json::object();
  for (const auto& k : config_keys()) {
    bool keep = prefixes.empty();
    for (const auto& p : prefixes) keep = keep || k.name.rfind(p, 0) == 0;
    if (keep) sel[k.name] = k.get(cfg);
  }
  return hex_digest(fnv1a64(sel.dump()));
}

}  // namespace calg
