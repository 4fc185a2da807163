// dear: command-line driver for role analysis, masked prompt training and
// base/novel evaluation on the synthetic task.
//
// Exit codes: 0 success, 1 validation error or bad usage, 2 runtime failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "dear/checkpoint.hpp"
#include "dear/concept_analysis.hpp"
#include "dear/config.hpp"
#include "dear/errors.hpp"
#include "dear/gradcheck.hpp"
#include "dear/log.hpp"
#include "dear/trainer.hpp"

using nlohmann::json;
using namespace dear;

namespace {

struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> ablation;
  std::optional<std::string> mode;
};

RunConfig resolve(const GlobalFlags& g, const std::string& fallback_json = "") {
  RunConfig cfg;
  if (!g.config.empty())
    cfg = load_config(g.config);
  else if (!fallback_json.empty())
    cfg = parse_config(fallback_json);
  else
    cfg = parse_config("{}");
  if (g.seed) cfg.seed = *g.seed;
  if (g.ablation) cfg.ablation = ablation_from_name(*g.ablation);
  if (g.mode) cfg.mode = mode_from_name(*g.mode);
  return cfg;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out << text;
}

std::shared_ptr<const RoleMap> load_roles(const RunConfig& cfg, const std::string& path) {
  const int first = cfg.prompt.injection_layer;
  const int last = cfg.model.layers;
  RoleMap roles;
  if (path.empty()) {
    logger().info("no roles file given; using the built-in role layout for layers {}..{}", first, last);
    roles = default_role_map(first, last, cfg.model.heads, cfg.prompt.attributes);
  } else {
    roles = role_map_from_json(read_file(path));
  }
  roles.require_coverage(first, last, cfg.model.heads);
  return std::make_shared<const RoleMap>(std::move(roles));
}

MaskCache make_masks(const RunConfig& cfg, std::shared_ptr<const RoleMap> roles) {
  return MaskCache(std::move(roles), TokenPartition::vision(cfg.model.patches, cfg.prompt.attributes), cfg.model.heads);
}

// Model dims come from the config; weights from the checkpoint.
Model load_model(const RunConfig& cfg, const Checkpoint& ckpt) {
  Model model = Model::init(cfg.model, cfg.prompt, cfg.seed);
  apply_checkpoint(model, ckpt);
  return model;
}

int cmd_analyze(const std::string& phrases, const std::string& out, const RunConfig& cfg,
                std::optional<std::pair<int, int>> layers, std::optional<int> heads) {
  std::ifstream in(phrases);
  if (!in) throw ConfigError("cannot read phrases file " + phrases);
  std::optional<HeadGrid> grid;
  if (layers && heads) grid = HeadGrid{layers->first, layers->second, *heads};
  const PhraseCorpus corpus = ingest_phrases(in, grid);
  AnalysisOptions opts;
  opts.min_cluster_size = cfg.analysis.min_cluster_size;
  opts.min_samples = cfg.analysis.min_samples;
  opts.rules.q_low = cfg.analysis.q_low;
  opts.rules.q_high = cfg.analysis.q_high;
  opts.rules.exact_count = cfg.analysis.exact_count;
  opts.rules.attributes = cfg.prompt.attributes;
  opts.rules.core_attribute_map = cfg.analysis.core_attribute_map;
  opts.cluster_labels = cfg.analysis.cluster_labels;
  opts.grid = grid;
  const AnalysisReport report = analyze(corpus, opts);
  for (const auto& w : report.warnings) logger().warn("{}", w);
  const std::string text = roles_to_json(report);
  if (out.empty() || out == "-")
    std::cout << text << "\n";
  else
    write_file(out, text + "\n");
  logger().info("analyzed {} phrases over {} heads", corpus.records.size(), report.profiles.size());
  return 0;
}

int cmd_mask_inspect(const RunConfig& cfg, const std::string& roles_path, int layer) {
  auto roles = load_roles(cfg, roles_path);
  const TokenPartition p = TokenPartition::vision(cfg.model.patches, cfg.prompt.attributes);
  json heads = json::array();
  for (const HeadMask& hm : masks_for_layer(*roles, layer, cfg.model.heads, p, cfg.ablation)) {
    const RoleEntry* e = roles->find({hm.layer, hm.head});
    json rows = json::array();
    for (std::size_t i = 0; i < hm.blocked.rows(); ++i) {
      std::string r;
      for (std::size_t j = 0; j < hm.blocked.cols(); ++j) r += hm.blocked.blocked(i, j) ? 'x' : '.';
      rows.push_back(r);
    }
    const MaskPolicy policy = policy_for(e->role, cfg.ablation);
    json head = {{"layer", hm.layer},
                 {"head", hm.head},
                 {"role", role_name(e->role.kind)},
                 {"attribute", e->role.attribute.empty() ? json(nullptr) : json(e->role.attribute)},
                 {"policy", policy_name(policy)},
                 {"blocked_count", hm.blocked.blocked_count()},
                 {"blocked_row_uniform", rows_uniform(hm.blocked)},
                 {"rows", rows}};
    if (policy.kind == PolicyKind::kAttributeChannel)
      head["note"] = "row-uniform channel: attribute tokens other than '" + policy.attribute +
                     "' still read the original tokens through this head";
    heads.push_back(std::move(head));
  }
  json out = {{"layer", layer}, {"ablation", ablation_name(cfg.ablation)}, {"seq_len", p.seq_len}, {"heads", heads}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& roles_path, const std::string& out_path) {
  auto roles = load_roles(cfg, roles_path);
  MaskCache masks = make_masks(cfg, roles);
  const Dataset data = generate_synthetic_task(cfg.task, cfg.seed);
  Model model = Model::init(cfg.model, cfg.prompt, cfg.seed);
  if (cfg.pretrain.steps > 0) {
    logger().info("pretraining the backbone for {} steps", cfg.pretrain.steps);
    pretrain_backbone(model, cfg.pretrain, data, cfg.seed);
  }
  const std::uint64_t fingerprint = model.frozen_fingerprint();
  const auto logs = train(model, cfg, masks, data);
  if (model.frozen_fingerprint() != fingerprint) throw ContractError("frozen backbone changed during training");
  save_checkpoint(out_path, checkpoint_from_model(model, config_to_json(cfg)));
  logger().info("mask cache: {} hits, {} misses", masks.hits(), masks.misses());

  json epochs = json::array();
  for (const auto& l : logs)
    epochs.push_back({{"epoch", l.epoch},
                      {"lr", l.lr},
                      {"ce", l.mean.ce},
                      {"reg_v", l.mean.reg_v},
                      {"reg_t", l.mean.reg_t},
                      {"fusion", l.mean.fusion},
                      {"total", l.mean.total}});
  char fp[32];
  std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(fingerprint));
  std::cout << json{{"checkpoint", out_path}, {"frozen_fingerprint", fp}, {"epochs", epochs}}.dump(2) << "\n";
  return 0;
}

int cmd_eval(const GlobalFlags& g, const std::string& ckpt_path, const std::string& roles_path,
             const std::string& metrics_path) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const RunConfig cfg = resolve(g, ckpt.config_json);
  const Model model = load_model(cfg, ckpt);
  auto roles = load_roles(cfg, roles_path.empty() ? cfg.paths.roles : roles_path);
  MaskCache masks = make_masks(cfg, roles);
  const Dataset data = generate_synthetic_task(cfg.task, cfg.seed);
  const Metrics m = evaluate(model, data, masks, cfg.ablation, cfg.mode, cfg.loss.tau);
  logger().info("mask cache: {} hits, {} misses", masks.hits(), masks.misses());
  const json out = {{"base_acc", m.base_acc}, {"novel_acc", m.novel_acc}, {"hm", m.hm},
                    {"mode", mode_name(cfg.mode)}, {"ablation", ablation_name(cfg.ablation)}, {"seed", cfg.seed}};
  const std::string path = metrics_path.empty() ? cfg.paths.metrics : metrics_path;
  write_file(path, out.dump(2) + "\n");
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_fuse_inspect(const GlobalFlags& g, const std::string& ckpt_path) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const RunConfig cfg = resolve(g, ckpt.config_json);
  const Model model = load_model(cfg, ckpt);
  const Tensor alpha = fusion_weights(model.injected.fusion_w);
  json a, w;
  a["cls"] = alpha[0];
  w["cls"] = model.injected.fusion_w[0];
  for (std::size_t k = 0; k < cfg.prompt.attributes.size(); ++k) {
    a[cfg.prompt.attributes[k]] = alpha[k + 1];
    w[cfg.prompt.attributes[k]] = model.injected.fusion_w[k + 1];
  }
  std::cout << json{{"alpha", a}, {"w", w}}.dump(2) << "\n";
  return 0;
}

int cmd_gradcheck(const RunConfig& cfg, int layers) {
  const GradcheckReport r = run_gradcheck(cfg, layers);
  json leaves = json::object();
  for (const auto& l : r.leaves) leaves[l.name] = {{"max_rel_err", l.max_rel_err}, {"max_abs_err", l.max_abs_err}, {"numel", l.numel}};
  const bool ok = r.max_rel_err < 1e-4 && r.frozen_with_grad.empty();
  std::cout << json{{"loss", r.loss},
                    {"max_rel_err", r.max_rel_err},
                    {"leaves", leaves},
                    {"frozen_with_grad", r.frozen_with_grad},
                    {"pass", ok}}
                   .dump(2)
            << "\n";
  if (!ok) {
    logger().error("gradcheck failed: max relative error {:.3e}, {} frozen leaves with gradients", r.max_rel_err,
                   r.frozen_with_grad.size());
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dear: role-aware attribute-token prompting on a toy dual encoder"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand all help");

  GlobalFlags g;
  app.add_option("--config", g.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Run seed");
  app.add_option("--ablation", g.ablation, "Mask ablation")
      ->check(CLI::IsMember({"none", "all-generalization", "all-mixed"}));
  app.add_option("--mode", g.mode, "Evaluation mode")->check(CLI::IsMember({"fused", "decoupled"}));

  std::string phrases, roles_out = "roles.json";
  std::optional<int> grid_heads;
  std::vector<int> grid_layers;
  auto* analyze = app.add_subcommand("analyze", "Cluster head phrases and assign head roles");
  analyze->add_option("phrases", phrases, "phrases.jsonl")->required();
  analyze->add_option("-o,--out", roles_out, "Output roles.json ('-' for stdout)");
  analyze->add_option("--layers", grid_layers, "Expected layer range: FIRST LAST")->expected(2);
  analyze->add_option("--heads", grid_heads, "Expected heads per layer");

  std::string roles_path;
  int mask_layer = 0;
  auto* mask = app.add_subcommand("mask", "Mask utilities");
  mask->require_subcommand(1);
  auto* inspect = mask->add_subcommand("inspect", "Print the per-head masks of one layer");
  inspect->add_option("--roles", roles_path, "roles.json (built-in layout when omitted)");
  inspect->add_option("--layer", mask_layer, "Layer to inspect")->required();

  std::string ckpt_path;
  auto* train_cmd = app.add_subcommand("train", "Train the injected parameters on the synthetic task");
  train_cmd->add_option("--roles", roles_path, "roles.json (built-in layout when omitted)");
  train_cmd->add_option("-o,--out", ckpt_path, "Checkpoint path");

  std::string metrics_path;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on base and novel classes");
  eval_cmd->add_option("--checkpoint", ckpt_path, "Checkpoint path");
  eval_cmd->add_option("--roles", roles_path, "roles.json (built-in layout when omitted)");
  eval_cmd->add_option("--metrics", metrics_path, "metrics.json output path");

  auto* fuse = app.add_subcommand("fuse", "Fusion utilities");
  fuse->require_subcommand(1);
  auto* fuse_inspect = fuse->add_subcommand("inspect", "Print learned fusion weights");
  fuse_inspect->add_option("--checkpoint", ckpt_path, "Checkpoint path");

  int gc_layers = 2;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every trainable gradient");
  gradcheck->add_option("--layers", gc_layers, "Layers of the checked model")->check(CLI::Range(1, 24));

  auto* print_config = app.add_subcommand("print-config", "Print the resolved configuration");

  for (auto* sub : {analyze, mask, inspect, train_cmd, eval_cmd, fuse, fuse_inspect, gradcheck, print_config})
    sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*print_config) {
      std::cout << config_to_json(resolve(g)) << "\n";
      return 0;
    }
    if (*analyze) {
      const RunConfig cfg = resolve(g);
      std::optional<std::pair<int, int>> layers;
      if (grid_layers.size() == 2) layers = std::make_pair(grid_layers[0], grid_layers[1]);
      if (layers.has_value() != grid_heads.has_value())
        throw ConfigError("--layers and --heads must be given together");
      return cmd_analyze(phrases, roles_out, cfg, layers, grid_heads);
    }
    if (*inspect) {
      const RunConfig cfg = resolve(g);
      return cmd_mask_inspect(cfg, roles_path.empty() ? cfg.paths.roles : roles_path, mask_layer);
    }
    if (*train_cmd) {
      const RunConfig cfg = resolve(g);
      return cmd_train(cfg, roles_path.empty() ? cfg.paths.roles : roles_path,
                       ckpt_path.empty() ? cfg.paths.checkpoint : ckpt_path);
    }
    if (*eval_cmd) return cmd_eval(g, ckpt_path.empty() ? resolve(g).paths.checkpoint : ckpt_path, roles_path, metrics_path);
    if (*fuse_inspect) return cmd_fuse_inspect(g, ckpt_path.empty() ? resolve(g).paths.checkpoint : ckpt_path);
    if (*gradcheck) return cmd_gradcheck(resolve(g), gc_layers);
  } catch (const ValidationError& e) {
    logger().error("{}", e.what());
    return 1;
  } catch (const std::exception& e) {
    logger().error("{}", e.what());
    return 2;
  }
  return 0;
}
