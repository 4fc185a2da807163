#include "dear/fusion.hpp"

#include <cmath>
#include <string>

#include "dear/errors.hpp"

namespace dear {

namespace {

Tensor as_row(const Tensor& v) { return v.rank() == 2 ? v : reshape(v, {1, v.numel()}); }

}  // namespace

Tensor project_cls(const Tensor& z_cls, const Tensor& ln_g, const Tensor& ln_b, const Tensor& proj, double eps) {
  const Tensor z = as_row(z_cls);
  if (z.rows() != 1) throw ShapeError("project_cls: expected a single row, got " + shape_str(z_cls.shape()));
  if (z.cols() != proj.dim(0))
    throw ShapeError("project_cls: state width " + std::to_string(z.cols()) + " vs projection " + shape_str(proj.shape()));
  return matmul(layer_norm(z, ln_g, ln_b, eps), proj);
}

Tensor project_attr(const Tensor& r_attr, const Tensor& ln_g, const Tensor& ln_b, const Tensor& attr_proj,
                    double eps) {
  const Tensor r = as_row(r_attr);
  if (r.cols() != attr_proj.dim(0))
    throw ShapeError("project_attr: state width " + std::to_string(r.cols()) + " vs projection " +
                     shape_str(attr_proj.shape()));
  return matmul(layer_norm(r, ln_g, ln_b, eps), attr_proj);
}

Tensor similarity_logits(const Tensor& f, const Tensor& f_t, double tau) {
  if (!(tau > 0.0)) throw ConfigError("similarity_logits: tau must be > 0");
  const Tensor row = as_row(f);
  if (row.rows() != 1) throw ShapeError("similarity_logits: expected one feature vector");
  if (f_t.rank() != 2 || f_t.cols() != row.cols())
    throw ShapeError("similarity_logits: feature " + shape_str(f.shape()) + " vs text " + shape_str(f_t.shape()));
  const Tensor s = matmul(normalize_rows(row), transpose(normalize_rows(f_t)));
  return reshape(scale(s, tau), {f_t.rows()});
}

Tensor fusion_weights(const Tensor& w) { return softmax(reshape(w, {w.numel()})); }

Tensor fused_logits(const Tensor& s_cls, const std::vector<Tensor>& s_attr, const Tensor& alpha) {
  const std::size_t m = s_cls.numel();
  if (alpha.numel() != s_attr.size() + 1)
    throw ShapeError("fused_logits: " + std::to_string(alpha.numel()) + " weights for " +
                     std::to_string(s_attr.size() + 1) + " logit vectors");
  std::vector<Tensor> rows{reshape(s_cls, {1, m})};
  for (const Tensor& s : s_attr) {
    if (s.numel() != m)
      throw ShapeError("fused_logits: logit length " + std::to_string(s.numel()) + " vs " + std::to_string(m));
    rows.push_back(reshape(s, {1, m}));
  }
  return reshape(matmul(reshape(alpha, {1, alpha.numel()}), concat_rows(rows)), {m});
}

Tensor loss_ce(const Tensor& logits, std::size_t label) { return cross_entropy(logits, label); }

std::pair<Tensor, Tensor> loss_reg(const Tensor& f_cls, const Tensor& f_cls_orig, const Tensor& f_t,
                                   const Tensor& f_t_orig) {
  if (f_cls.numel() != f_cls_orig.numel()) throw ShapeError("loss_reg: image feature size mismatch");
  if (f_t.shape() != f_t_orig.shape()) throw ShapeError("loss_reg: text feature shape mismatch");
  const Tensor one = Tensor::scalar(1.0);
  const Tensor reg_v = sub(one, cosine_similarity(reshape(f_cls, {f_cls.numel()}), reshape(f_cls_orig, {f_cls.numel()})));
  const Tensor t = as_row(f_t);
  const double m = static_cast<double>(t.rows());
  const Tensor agreement = sum(mul(normalize_rows(t), normalize_rows(as_row(f_t_orig))));
  const Tensor reg_t = sub(one, scale(agreement, 1.0 / m));
  return {reg_v, reg_t};
}

Tensor loss_fusion(const Tensor& alpha) {
  if (!(alpha[0] > 0.0)) throw DomainError("loss_fusion: alpha_cls must be positive");
  return scale(log(element(alpha, 0)), -1.0);
}

Loss loss_total(const Tensor& ce, const Tensor& reg_v, const Tensor& reg_t, const Tensor& fusion, double lambda_reg,
                double lambda_fusion) {
  if (!(lambda_reg >= 0.0)) throw ConfigError("lambda_reg must be >= 0");
  if (!(lambda_fusion >= 0.0)) throw ConfigError("lambda_fusion must be >= 0");
  Loss out;
  out.total = add(add(ce, scale(add(reg_v, reg_t), lambda_reg)), scale(fusion, lambda_fusion));
  out.parts = {ce.item(), reg_v.item(), reg_t.item(), fusion.item(), out.total.item(), lambda_reg, lambda_fusion};
  return out;
}

}  // namespace dear
