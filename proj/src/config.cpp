#include "dear/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dear/errors.hpp"

namespace dear {

using nlohmann::json;

namespace {

// Reads typed fields out of one JSON object and rejects keys nobody asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + " must be an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  const json& child(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void read(const char* key, double& out) {
    if (!take(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(where(key) + " must be a number");
    out = v.get<double>();
  }

  void read(const char* key, int& out) {
    if (!take(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer()) throw ConfigError(where(key) + " must be an integer");
    out = v.get<int>();
  }

  void read(const char* key, std::size_t& out) {
    if (!take(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0)
      throw ConfigError(where(key) + " must be a non-negative integer");
    out = v.get<std::size_t>();
  }

  void read(const char* key, std::uint64_t& out, int) {
    if (!take(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0))
      throw ConfigError(where(key) + " must be a non-negative integer");
    out = v.get<std::uint64_t>();
  }

  void read(const char* key, bool& out) {
    if (!take(key)) return;
    const json& v = j_.at(key);
    if (!v.is_boolean()) throw ConfigError(where(key) + " must be a boolean");
    out = v.get<bool>();
  }

  void read(const char* key, std::string& out) {
    if (!take(key)) return;
    const json& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(where(key) + " must be a string");
    out = v.get<std::string>();
  }

  void read(const char* key, std::vector<std::string>& out) {
    if (!take(key)) return;
    const json& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(where(key) + " must be an array of strings");
    out.clear();
    for (const auto& e : v) {
      if (!e.is_string()) throw ConfigError(where(key) + " must be an array of strings");
      out.push_back(e.get<std::string>());
    }
  }

  void read(const char* key, std::map<int, std::string>& out) {
    if (!take(key)) return;
    const json& v = j_.at(key);
    if (!v.is_object()) throw ConfigError(where(key) + " must map cluster ids to attribute labels");
    out.clear();
    for (const auto& [k, label] : v.items()) {
      std::size_t used = 0;
      int id = -1;
      try {
        id = std::stoi(k, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != k.size() || id < 0 || !label.is_string())
        throw ConfigError(where(key) + ": entry '" + k + "' must be a non-negative cluster id mapped to a label");
      out[id] = label.get<std::string>();
    }
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + where(k.c_str()) + "'");
  }

 private:
  bool take(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  std::string where(const char* key) const {
    if (path_.empty()) return key;
    return *key ? path_ + "." + key : path_;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename Fn>
void section(Section& parent, const char* key, Fn&& fn) {
  if (!parent.has(key)) return;
  Section s(parent.child(key), key);
  fn(s);
  s.finish();
}

}  // namespace

std::string mode_name(EvalMode m) { return m == EvalMode::kFused ? "fused" : "decoupled"; }

EvalMode mode_from_name(const std::string& name) {
  if (name == "fused") return EvalMode::kFused;
  if (name == "decoupled") return EvalMode::kDecoupled;
  throw ConfigError("unknown mode '" + name + "' (expected fused, decoupled)");
}

void RunConfig::validate() const {
  model.validate();
  prompt.validate(model.layers);
  if (prompt.text_prompts < 1) throw ConfigError("prompt.text_prompts must be >= 1");
  if (!(loss.lambda_reg >= 0.0)) throw ConfigError("loss.lambda_reg must be >= 0");
  if (!(loss.lambda_fusion >= 0.0)) throw ConfigError("loss.lambda_fusion must be >= 0");
  if (!(loss.tau > 0.0)) throw ConfigError("loss.tau must be > 0");
  if (!(optim.lr >= 0.0) || !(optim.warmup_lr >= 0.0)) throw ConfigError("optim learning rates must be >= 0");
  if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0) || !(optim.beta2 >= 0.0 && optim.beta2 < 1.0))
    throw ConfigError("optim betas must lie in [0, 1)");
  if (!(optim.eps > 0.0)) throw ConfigError("optim.eps must be > 0");
  if (!(optim.weight_decay >= 0.0)) throw ConfigError("optim.weight_decay must be >= 0");
  if (optim.epochs < 1) throw ConfigError("optim.epochs must be >= 1");
  if (optim.warmup_epochs < 0 || optim.warmup_epochs > optim.epochs)
    throw ConfigError("optim.warmup_epochs must lie in [0, epochs]");
  if (optim.batch_size < 1) throw ConfigError("optim.batch_size must be >= 1");
  if (optim.fusion_freeze_epochs < 0) throw ConfigError("optim.fusion_freeze_epochs must be >= 0");
  if (pretrain.steps < 0) throw ConfigError("pretrain.steps must be >= 0");
  if (pretrain.batch_size < 2) throw ConfigError("pretrain.batch_size must be >= 2");
  if (!(pretrain.lr >= 0.0) || !(pretrain.noise >= 0.0) || !(pretrain.tau > 0.0))
    throw ConfigError("pretrain: lr and noise must be >= 0, tau > 0");
  if (!(analysis.q_low > 0.0 && analysis.q_low < analysis.q_high && analysis.q_high < 1.0))
    throw ConfigError("analysis quantiles must satisfy 0 < q_low < q_high < 1");
  if (analysis.min_cluster_size < 2) throw ConfigError("analysis.min_cluster_size must be >= 2");
  for (const auto& [id, label] : analysis.core_attribute_map)
    if (std::find(prompt.attributes.begin(), prompt.attributes.end(), label) == prompt.attributes.end())
      throw ConfigError("analysis.core_attribute_map: '" + label + "' is not a configured attribute");
  if (analysis.min_samples < 1) throw ConfigError("analysis.min_samples must be >= 1");
  task.validate();
  if (task.patches != model.patches || task.patch_dim != model.patch_dim)
    throw ConfigError("task patch grid does not match the model");
  if (task.factors != prompt.attributes.size())
    throw ConfigError("task.factors (" + std::to_string(task.factors) + ") must equal the attribute count (" +
                      std::to_string(prompt.attributes.size()) + ")");
  if (task.vocab_needed() > model.vocab_size)
    throw ConfigError("model.vocab_size " + std::to_string(model.vocab_size) + " is too small for the task (needs " +
                      std::to_string(task.vocab_needed()) + ")");
  if (task.factors + 3 + prompt.text_prompts > model.max_text_len)
    throw ConfigError("captions plus prompts exceed model.max_text_len");
}

RunConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  Section root(j, "");
  section(root, "model", [&](Section& s) {
    s.read("layers", c.model.layers);
    s.read("heads", c.model.heads);
    s.read("width", c.model.width);
    s.read("patches", c.model.patches);
    s.read("patch_dim", c.model.patch_dim);
    s.read("text_width", c.model.text_width);
    s.read("text_heads", c.model.text_heads);
    s.read("vocab_size", c.model.vocab_size);
    s.read("max_text_len", c.model.max_text_len);
    s.read("embed_dim", c.model.embed_dim);
    s.read("mlp_ratio", c.model.mlp_ratio);
    s.read("init_std", c.model.init_std);
    s.read("ln_eps", c.model.ln_eps);
  });
  section(root, "prompt", [&](Section& s) {
    s.read("injection_layer", c.prompt.injection_layer);
    s.read("beta", c.prompt.beta);
    s.read("text_prompts", c.prompt.text_prompts);
    s.read("attributes", c.prompt.attributes);
  });
  section(root, "loss", [&](Section& s) {
    s.read("lambda_reg", c.loss.lambda_reg);
    s.read("lambda_fusion", c.loss.lambda_fusion);
    s.read("tau", c.loss.tau);
  });
  section(root, "optim", [&](Section& s) {
    s.read("lr", c.optim.lr);
    s.read("warmup_lr", c.optim.warmup_lr);
    s.read("beta1", c.optim.beta1);
    s.read("beta2", c.optim.beta2);
    s.read("eps", c.optim.eps);
    s.read("weight_decay", c.optim.weight_decay);
    s.read("epochs", c.optim.epochs);
    s.read("warmup_epochs", c.optim.warmup_epochs);
    s.read("batch_size", c.optim.batch_size);
    s.read("fusion_freeze_epochs", c.optim.fusion_freeze_epochs);
  });
  section(root, "pretrain", [&](Section& s) {
    s.read("steps", c.pretrain.steps);
    s.read("batch_size", c.pretrain.batch_size);
    s.read("lr", c.pretrain.lr);
    s.read("noise", c.pretrain.noise);
    s.read("tau", c.pretrain.tau);
  });
  section(root, "task", [&](Section& s) {
    s.read("n_base", c.task.n_base);
    s.read("n_novel", c.task.n_novel);
    s.read("shots", c.task.shots);
    s.read("test_per_class", c.task.test_per_class);
    s.read("values_per_factor", c.task.values_per_factor);
    s.read("noise", c.task.noise);
  });
  section(root, "analysis", [&](Section& s) {
    s.read("q_low", c.analysis.q_low);
    s.read("q_high", c.analysis.q_high);
    s.read("min_cluster_size", c.analysis.min_cluster_size);
    s.read("min_samples", c.analysis.min_samples);
    s.read("exact_count", c.analysis.exact_count);
    s.read("core_attribute_map", c.analysis.core_attribute_map);
    s.read("cluster_labels", c.analysis.cluster_labels);
  });
  section(root, "paths", [&](Section& s) {
    s.read("phrases", c.paths.phrases);
    s.read("roles", c.paths.roles);
    s.read("checkpoint", c.paths.checkpoint);
    s.read("metrics", c.paths.metrics);
  });
  root.read("seed", c.seed, 0);
  std::string ablation = ablation_name(c.ablation);
  std::string mode = mode_name(c.mode);
  root.read("ablation", ablation);
  root.read("mode", mode);
  root.finish();
  c.ablation = ablation_from_name(ablation);
  c.mode = mode_from_name(mode);
  c.task.factors = c.prompt.attributes.size();
  c.task.patches = c.model.patches;
  c.task.patch_dim = c.model.patch_dim;
  c.validate();
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_json(const RunConfig& c) {
  json j;
  j["model"] = {{"layers", c.model.layers},
                {"heads", c.model.heads},
                {"width", c.model.width},
                {"patches", c.model.patches},
                {"patch_dim", c.model.patch_dim},
                {"text_width", c.model.text_width},
                {"text_heads", c.model.text_heads},
                {"vocab_size", c.model.vocab_size},
                {"max_text_len", c.model.max_text_len},
                {"embed_dim", c.model.embed_dim},
                {"mlp_ratio", c.model.mlp_ratio},
                {"init_std", c.model.init_std},
                {"ln_eps", c.model.ln_eps}};
  j["prompt"] = {{"injection_layer", c.prompt.injection_layer},
                 {"beta", c.prompt.beta},
                 {"text_prompts", c.prompt.text_prompts},
                 {"attributes", c.prompt.attributes}};
  j["loss"] = {{"lambda_reg", c.loss.lambda_reg}, {"lambda_fusion", c.loss.lambda_fusion}, {"tau", c.loss.tau}};
  j["optim"] = {{"lr", c.optim.lr},
                {"warmup_lr", c.optim.warmup_lr},
                {"beta1", c.optim.beta1},
                {"beta2", c.optim.beta2},
                {"eps", c.optim.eps},
                {"weight_decay", c.optim.weight_decay},
                {"epochs", c.optim.epochs},
                {"warmup_epochs", c.optim.warmup_epochs},
                {"batch_size", c.optim.batch_size},
                {"fusion_freeze_epochs", c.optim.fusion_freeze_epochs}};
  j["pretrain"] = {{"steps", c.pretrain.steps},
                   {"batch_size", c.pretrain.batch_size},
                   {"lr", c.pretrain.lr},
                   {"noise", c.pretrain.noise},
                   {"tau", c.pretrain.tau}};
  j["task"] = {{"n_base", c.task.n_base},
               {"n_novel", c.task.n_novel},
               {"shots", c.task.shots},
               {"test_per_class", c.task.test_per_class},
               {"values_per_factor", c.task.values_per_factor},
               {"noise", c.task.noise}};
  json core_map = json::object();
  for (const auto& [id, label] : c.analysis.core_attribute_map) core_map[std::to_string(id)] = label;
  json labels = json::object();
  for (const auto& [id, label] : c.analysis.cluster_labels) labels[std::to_string(id)] = label;
  j["analysis"] = {{"q_low", c.analysis.q_low},
                   {"q_high", c.analysis.q_high},
                   {"min_cluster_size", c.analysis.min_cluster_size},
                   {"min_samples", c.analysis.min_samples},
                   {"exact_count", c.analysis.exact_count},
                   {"core_attribute_map", core_map},
                   {"cluster_labels", labels}};
  j["paths"] = {{"phrases", c.paths.phrases},
                {"roles", c.paths.roles},
                {"checkpoint", c.paths.checkpoint},
                {"metrics", c.paths.metrics}};
  j["seed"] = c.seed;
  j["ablation"] = ablation_name(c.ablation);
  j["mode"] = mode_name(c.mode);
  return j.dump(2);
}

}  // namespace dear
