#pragma once

// Feature projection, similarity logits, task-adaptive fusion and the
// three-part training objective.

#include <cstddef>
#include <utility>
#include <vector>

#include "dear/tensor.hpp"

namespace dear {

inline constexpr double kDefaultTau = 100.0;
inline constexpr double kDefaultLambdaReg = 1.0;
inline constexpr double kDefaultLambdaFusion = 0.7;

/// LN(z) * proj with the frozen post-LN and the frozen vision projection.
/// z is 1 x width (or a width vector); the result is 1 x embed.
Tensor project_cls(const Tensor& z_cls, const Tensor& ln_g, const Tensor& ln_b, const Tensor& proj,
                   double eps = 1e-5);

/// Same map applied row-wise to the K contextual attribute states with the
/// shared trainable projection. Returns K x embed.
Tensor project_attr(const Tensor& r_attr, const Tensor& ln_g, const Tensor& ln_b, const Tensor& attr_proj,
                    double eps = 1e-5);

/// tau * cos(f, t_j) for every row of f_t. ConfigError for tau <= 0,
/// ZeroNormError when any vector is (numerically) zero.
Tensor similarity_logits(const Tensor& f, const Tensor& f_t, double tau = kDefaultTau);

/// softmax(w) over [cls, attributes...].
Tensor fusion_weights(const Tensor& w);

/// alpha[0] * s_cls + sum_k alpha[k + 1] * s_attr[k]. ShapeError on length mismatch.
Tensor fused_logits(const Tensor& s_cls, const std::vector<Tensor>& s_attr, const Tensor& alpha);

/// Natural-log cross-entropy of a logit vector. DomainError for a bad label.
Tensor loss_ce(const Tensor& logits, std::size_t label);

/// (1 - cos(f_cls, f_cls_orig), mean_j (1 - cos(f_t[j], f_t_orig[j]))).
std::pair<Tensor, Tensor> loss_reg(const Tensor& f_cls, const Tensor& f_cls_orig, const Tensor& f_t,
                                   const Tensor& f_t_orig);

/// -ln(alpha[0]).
Tensor loss_fusion(const Tensor& alpha);

struct LossBreakdown {
  double ce = 0.0;
  double reg_v = 0.0;
  double reg_t = 0.0;
  double fusion = 0.0;
  double total = 0.0;
  double lambda_reg = kDefaultLambdaReg;
  double lambda_fusion = kDefaultLambdaFusion;
};

struct Loss {
  Tensor total;
  LossBreakdown parts;
};

/// ce + lambda_reg * (reg_v + reg_t) + lambda_fusion * fusion.
/// ConfigError when either lambda is negative.
Loss loss_total(const Tensor& ce, const Tensor& reg_v, const Tensor& reg_t, const Tensor& fusion,
                double lambda_reg = kDefaultLambdaReg, double lambda_fusion = kDefaultLambdaFusion);

}  // namespace dear
