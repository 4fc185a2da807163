#include "dear/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "dear/rng.hpp"
#include "dear/trainer.hpp"

namespace dear {

GradcheckReport run_gradcheck(const RunConfig& base, int layers, double h) {
  RunConfig cfg = base;
  cfg.model.layers = layers;
  cfg.prompt.injection_layer = 1;
  cfg.task.n_base = 3;
  cfg.task.n_novel = 1;
  cfg.task.shots = 1;
  cfg.task.test_per_class = 1;
  cfg.validate();

  Model model = Model::init(cfg.model, cfg.prompt, cfg.seed);
  // Move every trainable leaf off its structured initial value so no
  // symmetry hides a wrong gradient.
  CounterRng rng = CounterRng(cfg.seed).split(0x6772616);
  for (Tensor* t : model.trainable())
    for (double& v : t->mutable_data()) v += 0.1 * rng.normal() * (t == &model.injected.attr_proj ? 0.1 : 1.0);

  const Dataset data = generate_synthetic_task(cfg.task, cfg.seed);
  std::vector<std::vector<std::size_t>> captions(data.captions.begin(),
                                                 data.captions.begin() + static_cast<std::ptrdiff_t>(data.n_base));
  auto roles = std::make_shared<const RoleMap>(
      default_role_map(1, cfg.model.layers, cfg.model.heads, cfg.prompt.attributes));
  MaskCache masks(roles, TokenPartition::vision(cfg.model.patches, cfg.prompt.attributes), cfg.model.heads);

  Tensor f_t_orig;
  std::vector<Tensor> f_cls_orig;
  {
    NoGradGuard no_grad;
    f_t_orig = text_features(model, captions, false);
    for (const Sample& s : data.train)
      f_cls_orig.push_back(project_cls(frozen_vision_forward(model, s.image).cls, model.vision.ln_post_g,
                                       model.vision.ln_post_b, model.vision.proj, cfg.model.ln_eps));
  }

  auto loss = [&]() {
    const Tensor f_t = text_features(model, captions, true);
    std::vector<Tensor> totals;
    for (std::size_t i = 0; i < data.train.size(); ++i) {
      const Sample& s = data.train[i];
      const ImageLogits lg = image_logits(model, s.image, f_t, masks, cfg.ablation, cfg.loss.tau);
      const auto [reg_v, reg_t] = loss_reg(lg.f_cls, f_cls_orig[i], f_t, f_t_orig);
      totals.push_back(loss_total(loss_ce(lg.fused, s.label), reg_v, reg_t, loss_fusion(lg.alpha),
                                  cfg.loss.lambda_reg, cfg.loss.lambda_fusion)
                           .total);
    }
    return scale(sum(stack(totals)), 1.0 / static_cast<double>(totals.size()));
  };

  GradcheckReport report;
  const Tensor l = loss();
  report.loss = l.item();
  backward(l);

  for (auto& [name, t] : model.named_tensors()) {
    if (name.rfind("injected.", 0) == 0) continue;
    if (t->has_grad()) report.frozen_with_grad.push_back(name);
  }

  std::vector<std::pair<std::string, Tensor*>> leaves;
  model.injected.visit([&](const std::string& name, Tensor& t) { leaves.emplace_back(name, &t); });
  for (auto& [name, t] : leaves) {
    const std::vector<double> analytic = t->has_grad() ? std::vector<double>(t->grad().begin(), t->grad().end())
                                                       : std::vector<double>(t->numel(), 0.0);
    const std::vector<double> numeric = finite_diff_grad_inplace(
        [&] {
          NoGradGuard no_grad;
          return loss().item();
        },
        *t, h);
    GradcheckLeaf leaf{name, t->numel(), 0.0, 0.0};
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      const double abs_err = std::abs(analytic[i] - numeric[i]);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), kGradcheckFloor});
      leaf.max_abs_err = std::max(leaf.max_abs_err, abs_err);
      leaf.max_rel_err = std::max(leaf.max_rel_err, abs_err / denom);
    }
    report.max_rel_err = std::max(report.max_rel_err, leaf.max_rel_err);
    report.leaves.push_back(leaf);
  }
  for (Tensor* t : model.trainable()) t->clear_grad();
  return report;
}

}  // namespace dear
