#pragma once

// Training loop (AdamW over the injected parameters with constant warmup and
// per-epoch cosine decay) and base/novel evaluation.

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "dear/config.hpp"
#include "dear/encoders.hpp"
#include "dear/fusion.hpp"
#include "dear/role_mask.hpp"
#include "dear/synthetic.hpp"

namespace dear {

/// Learning rate used throughout `epoch` (0-based): warmup_lr for the warmup
/// epochs, then 0.5 * lr * (1 + cos(pi * epoch / epochs)).
double learning_rate(const OptimConfig& cfg, int epoch);

/// Decoupled weight decay Adam over a fixed parameter list.
class AdamW {
 public:
  AdamW(std::vector<Tensor*> params, const OptimConfig& cfg);

  /// One update with learning rate `lr`. Parameters without a gradient, or
  /// masked off by `active`, are left untouched.
  void step(double lr, const std::vector<bool>& active = {});
  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor*> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_, wd_;
  std::size_t t_ = 0;
};

/// Class text features LN(eot) * text_proj for every caption (m x embed).
/// With `prompted` false the prompts are left out (the frozen text encoder).
Tensor text_features(const Model& model, const std::vector<std::vector<std::size_t>>& captions, bool prompted);

/// Contrastive (symmetric InfoNCE) training of every backbone tensor on
/// batches of distinct random factor combinations of `world`, after which
/// the backbone is frozen again and the attribute projection is reset to a
/// copy of the vision projection. No-op for zero steps.
void pretrain_backbone(Model& model, const PretrainConfig& cfg, const Dataset& world, std::uint64_t seed);

/// Every logit vector that enters the fused prediction for one image.
struct ImageLogits {
  Tensor f_cls;
  Tensor s_cls;
  std::vector<Tensor> s_attr;
  Tensor alpha;
  Tensor fused;
};

ImageLogits image_logits(const Model& model, const Tensor& image, const Tensor& f_t, MaskCache& masks,
                         Ablation ablation, double tau);

/// A role map covering layers [first_layer, last_layer] x heads, used when
/// no roles.json is supplied. Within each layer, head 0 is Generalization,
/// the last head is Mixed and the heads between rotate through the
/// attributes as CoreAttribute.
RoleMap default_role_map(int first_layer, int last_layer, int heads, const std::vector<std::string>& attributes);

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  LossBreakdown mean;  // averaged over training samples
};

struct TrainOptions {
  std::function<void(const EpochLog&)> on_epoch;
};

/// Optimizes only the injected parameters. NumericError on a non-finite loss
/// component, naming epoch, batch and component.
std::vector<EpochLog> train(Model& model, const RunConfig& cfg, MaskCache& masks, const Dataset& data,
                            const TrainOptions& options = {});

struct Metrics {
  double base_acc = 0.0;
  double novel_acc = 0.0;
  double hm = 0.0;
};

/// 2bn / (b + n), 0 when both are 0.
double harmonic_mean(double base, double novel);

/// Base test samples are ranked among base classes, novel among novel ones.
/// Fused mode takes argmax of the fused logits, decoupled mode of s_cls.
Metrics evaluate(const Model& model, const Dataset& data, MaskCache& masks, Ablation ablation, EvalMode mode,
                 double tau);

/// Mean cross-entropy of the fused logits over the training split.
double train_cross_entropy(const Model& model, const Dataset& data, MaskCache& masks, Ablation ablation, double tau);

}  // namespace dear
