#include "dear/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numbers>

#include "dear/errors.hpp"
#include "dear/log.hpp"
#include "dear/rng.hpp"

namespace dear {

double learning_rate(const OptimConfig& cfg, int epoch) {
  if (epoch < cfg.warmup_epochs) return cfg.warmup_lr;
  return 0.5 * cfg.lr * (1.0 + std::cos(std::numbers::pi * epoch / cfg.epochs));
}

AdamW::AdamW(std::vector<Tensor*> params, const OptimConfig& cfg)
    : params_(std::move(params)), beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.eps), wd_(cfg.weight_decay) {
  for (Tensor* p : params_) {
    m_.emplace_back(p->numel(), 0.0);
    v_.emplace_back(p->numel(), 0.0);
  }
}

void AdamW::step(double lr, const std::vector<bool>& active) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = *params_[i];
    if (!p.has_grad() || (!active.empty() && !active[i])) continue;
    auto w = p.mutable_data();
    auto g = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      const double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
      w[j] -= lr * (update + wd_ * w[j]);
    }
  }
}

Tensor text_features(const Model& model, const std::vector<std::vector<std::size_t>>& captions, bool prompted) {
  const Tensor beta = Tensor::scalar(model.prompt.beta);
  const Tensor prompts = prompted ? model.injected.prompts : Tensor();
  std::vector<Tensor> rows;
  rows.reserve(captions.size());
  for (const auto& ids : captions) {
    const Tensor eot = text_forward(model, ids, prompts, beta);
    rows.push_back(matmul(layer_norm(eot, model.text.ln_final_g, model.text.ln_final_b, model.config.ln_eps),
                          model.text.proj));
  }
  return concat_rows(rows);
}

void pretrain_backbone(Model& model, const PretrainConfig& cfg, const Dataset& world, std::uint64_t seed) {
  if (cfg.steps <= 0) return;
  const std::size_t factors = world.prototypes.size();
  const std::size_t values = world.values_per_factor;
  std::size_t combos = 1;
  for (std::size_t f = 0; f < factors; ++f) combos *= values;
  const std::size_t batch = std::min(cfg.batch_size, combos);

  std::vector<Tensor*> params = model.frozen();
  for (Tensor* p : params) p->set_requires_grad(true);
  OptimConfig opt_cfg;
  opt_cfg.lr = cfg.lr;
  AdamW opt(params, opt_cfg);
  CounterRng rng = CounterRng(seed).split(0x50524554);
  const auto& v = model.vision;

  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<std::size_t> codes;
    while (codes.size() < batch) {
      const std::size_t c = rng.below(combos);
      if (std::find(codes.begin(), codes.end(), c) == codes.end()) codes.push_back(c);
    }
    std::vector<std::vector<std::size_t>> captions;
    std::vector<Tensor> img_rows;
    for (std::size_t code : codes) {
      std::vector<std::size_t> vals(factors);
      for (std::size_t f = 0, c = code; f < factors; ++f, c /= values) vals[f] = c % values;
      captions.push_back(caption_tokens(vals, values));
      const Tensor img = render_image(world, vals, cfg.noise, rng);
      img_rows.push_back(
          project_cls(frozen_vision_forward(model, img).cls, v.ln_post_g, v.ln_post_b, v.proj, model.config.ln_eps));
    }
    const Tensor fi = normalize_rows(concat_rows(img_rows));
    const Tensor ft = normalize_rows(text_features(model, captions, false));
    const Tensor s = scale(matmul(fi, transpose(ft)), cfg.tau);
    const Tensor st = transpose(s);
    std::vector<Tensor> terms;
    for (std::size_t i = 0; i < batch; ++i) {
      terms.push_back(cross_entropy(reshape(slice_rows(s, i, i + 1), {batch}), i));
      terms.push_back(cross_entropy(reshape(slice_rows(st, i, i + 1), {batch}), i));
    }
    const Tensor loss = scale(sum(stack(terms)), 1.0 / static_cast<double>(terms.size()));
    if (!std::isfinite(loss.item())) throw NumericError("non-finite pretraining loss at step " + std::to_string(step));
    backward(loss);
    opt.step(cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * step / cfg.steps)));
    for (Tensor* p : params) p->clear_grad();
    if (step % 50 == 0 || step + 1 == cfg.steps) logger().debug("pretrain step {} loss {:.4f}", step, loss.item());
  }
  for (Tensor* p : params) p->set_requires_grad(false);
  std::ranges::copy(model.vision.proj.data(), model.injected.attr_proj.mutable_data().begin());
}

ImageLogits image_logits(const Model& model, const Tensor& image, const Tensor& f_t, MaskCache& masks,
                         Ablation ablation, double tau) {
  const VisionOutput out = vision_forward(model, image, masks, ablation);
  const auto& v = model.vision;
  const double eps = model.config.ln_eps;
  ImageLogits r;
  r.f_cls = project_cls(out.cls, v.ln_post_g, v.ln_post_b, v.proj, eps);
  r.s_cls = similarity_logits(r.f_cls, f_t, tau);
  const Tensor f_attr = project_attr(out.attr, v.ln_post_g, v.ln_post_b, model.injected.attr_proj, eps);
  for (std::size_t k = 0; k < f_attr.rows(); ++k) r.s_attr.push_back(similarity_logits(slice_rows(f_attr, k, k + 1), f_t, tau));
  r.alpha = fusion_weights(model.injected.fusion_w);
  r.fused = fused_logits(r.s_cls, r.s_attr, r.alpha);
  return r;
}

RoleMap default_role_map(int first_layer, int last_layer, int heads, const std::vector<std::string>& attributes) {
  RoleMap map;
  std::size_t next_attr = 0;
  for (int l = first_layer; l <= last_layer; ++l) {
    for (int h = 0; h < heads; ++h) {
      RoleEntry e;
      e.profile.key = {l, h};
      if (h == 0) {
        e.role.kind = RoleKind::kGeneralization;
      } else if (h == heads - 1 || attributes.empty()) {
        e.role.kind = RoleKind::kMixed;
      } else {
        e.role.kind = RoleKind::kCoreAttribute;
        e.role.attribute = attributes[next_attr++ % attributes.size()];
      }
      map.set({l, h}, std::move(e));
    }
  }
  return map;
}

namespace {

void check_finite(double v, const char* component, int epoch, std::size_t batch) {
  if (!std::isfinite(v))
    throw NumericError("non-finite " + std::string(component) + " loss at epoch " + std::to_string(epoch) + ", batch " +
                       std::to_string(batch));
}

std::vector<std::vector<std::size_t>> captions_range(const Dataset& d, std::size_t begin, std::size_t end) {
  return {d.captions.begin() + static_cast<std::ptrdiff_t>(begin), d.captions.begin() + static_cast<std::ptrdiff_t>(end)};
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

std::vector<EpochLog> train(Model& model, const RunConfig& cfg, MaskCache& masks, const Dataset& data,
                            const TrainOptions& options) {
  if (data.train.empty()) throw ConfigError("train: empty training split");
  const auto base_captions = captions_range(data, 0, data.n_base);

  // Frozen-model targets for the regularizer; they never change.
  Tensor f_t_orig;
  std::vector<Tensor> f_cls_orig;
  {
    NoGradGuard no_grad;
    f_t_orig = text_features(model, base_captions, false);
    for (const Sample& s : data.train) {
      const VisionOutput out = frozen_vision_forward(model, s.image);
      f_cls_orig.push_back(
          project_cls(out.cls, model.vision.ln_post_g, model.vision.ln_post_b, model.vision.proj, model.config.ln_eps));
    }
  }

  std::vector<Tensor*> params = model.trainable();
  AdamW opt(params, cfg.optim);
  const CounterRng order_rng = CounterRng(cfg.seed).split(0x0BA7C4);
  std::vector<std::size_t> order(data.train.size());
  std::vector<EpochLog> logs;

  for (int epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
    const double lr = learning_rate(cfg.optim, epoch);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    CounterRng rng = order_rng.split(static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    std::vector<bool> active(params.size(), true);
    if (epoch < cfg.optim.fusion_freeze_epochs) active.back() = false;  // fusion_w is last

    EpochLog log{epoch, lr, {}};
    log.mean.lambda_reg = cfg.loss.lambda_reg;
    log.mean.lambda_fusion = cfg.loss.lambda_fusion;
    std::size_t batch = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.optim.batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), start + cfg.optim.batch_size);
      const Tensor f_t = text_features(model, base_captions, true);
      std::vector<Tensor> totals;
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t idx = order[b];
        const Sample& s = data.train[idx];
        const ImageLogits lg = image_logits(model, s.image, f_t, masks, cfg.ablation, cfg.loss.tau);
        const Tensor ce = loss_ce(lg.fused, s.label);
        const auto [reg_v, reg_t] = loss_reg(lg.f_cls, f_cls_orig[idx], f_t, f_t_orig);
        const Tensor fusion = loss_fusion(lg.alpha);
        const Loss loss = loss_total(ce, reg_v, reg_t, fusion, cfg.loss.lambda_reg, cfg.loss.lambda_fusion);
        check_finite(loss.parts.ce, "ce", epoch, batch);
        check_finite(loss.parts.reg_v, "reg_v", epoch, batch);
        check_finite(loss.parts.reg_t, "reg_t", epoch, batch);
        check_finite(loss.parts.fusion, "fusion", epoch, batch);
        log.mean.ce += loss.parts.ce;
        log.mean.reg_v += loss.parts.reg_v;
        log.mean.reg_t += loss.parts.reg_t;
        log.mean.fusion += loss.parts.fusion;
        log.mean.total += loss.parts.total;
        totals.push_back(loss.total);
      }
      const Tensor batch_loss = scale(sum(stack(totals)), 1.0 / static_cast<double>(totals.size()));
      backward(batch_loss);
      opt.step(lr, active);
      for (Tensor* p : params) p->clear_grad();
    }
    const double n = static_cast<double>(order.size());
    log.mean.ce /= n;
    log.mean.reg_v /= n;
    log.mean.reg_t /= n;
    log.mean.fusion /= n;
    log.mean.total /= n;
    logger().info("epoch {} lr {:.3g} ce {:.4f} reg_v {:.4f} reg_t {:.4f} fusion {:.4f} total {:.4f}", epoch, lr,
                  log.mean.ce, log.mean.reg_v, log.mean.reg_t, log.mean.fusion, log.mean.total);
    if (options.on_epoch) options.on_epoch(log);
    logs.push_back(log);
  }
  return logs;
}

double harmonic_mean(double base, double novel) {
  if (base + novel <= 0.0) return 0.0;
  return 2.0 * base * novel / (base + novel);
}

namespace {

// Correct-count over one split; predictions are ranked within that split's classes.
std::size_t count_correct(const Model& model, const std::vector<Sample>& samples, const Tensor& f_t,
                          std::size_t label_offset, MaskCache& masks, Ablation ablation, EvalMode mode, double tau) {
  const long n = static_cast<long>(samples.size());
  std::size_t correct = 0;
  std::exception_ptr failure;
#pragma omp parallel for schedule(static) reduction(+ : correct)
  for (long i = 0; i < n; ++i) {
    try {
      NoGradGuard no_grad;
      const Sample& s = samples[static_cast<std::size_t>(i)];
      const ImageLogits lg = image_logits(model, s.image, f_t, masks, ablation, tau);
      const Tensor& scores = mode == EvalMode::kFused ? lg.fused : lg.s_cls;
      if (argmax(scores.data()) + label_offset == s.label) ++correct;
    } catch (...) {
#pragma omp critical(dear_eval_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return correct;
}

}  // namespace

Metrics evaluate(const Model& model, const Dataset& data, MaskCache& masks, Ablation ablation, EvalMode mode,
                 double tau) {
  if (data.captions.size() != data.n_base + data.n_novel)
    throw ConfigError("evaluate: dataset has " + std::to_string(data.captions.size()) + " captions for " +
                      std::to_string(data.n_base + data.n_novel) + " classes");
  if (model.injected.attr_tokens.rows() != model.prompt.attributes.size())
    throw ConfigError("evaluate: attribute token count does not match the configured attributes");
  Tensor f_base, f_novel;
  {
    NoGradGuard no_grad;
    f_base = text_features(model, captions_range(data, 0, data.n_base), true);
    f_novel = text_features(model, captions_range(data, data.n_base, data.n_base + data.n_novel), true);
  }
  Metrics m;
  if (!data.test_base.empty())
    m.base_acc = static_cast<double>(count_correct(model, data.test_base, f_base, 0, masks, ablation, mode, tau)) /
                 static_cast<double>(data.test_base.size());
  if (!data.test_novel.empty())
    m.novel_acc =
        static_cast<double>(count_correct(model, data.test_novel, f_novel, data.n_base, masks, ablation, mode, tau)) /
        static_cast<double>(data.test_novel.size());
  m.hm = harmonic_mean(m.base_acc, m.novel_acc);
  return m;
}

double train_cross_entropy(const Model& model, const Dataset& data, MaskCache& masks, Ablation ablation, double tau) {
  NoGradGuard no_grad;
  const Tensor f_t = text_features(model, captions_range(data, 0, data.n_base), true);
  double total = 0.0;
  for (const Sample& s : data.train)
    total += loss_ce(image_logits(model, s.image, f_t, masks, ablation, tau).fused, s.label).item();
  return total / static_cast<double>(data.train.size());
}

}  // namespace dear
