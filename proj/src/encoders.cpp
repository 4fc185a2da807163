#include "dear/encoders.hpp"

#include <cstring>

#include "dear/errors.hpp"
#include "dear/rng.hpp"

namespace dear {

namespace {

Tensor gaussian(CounterRng& rng, Shape shape, double std) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.mutable_data()) v = std * rng.normal();
  return t;
}

BlockParams init_block(CounterRng& rng, std::size_t width, std::size_t mlp_ratio, double std) {
  const std::size_t hidden = width * mlp_ratio;
  BlockParams b;
  b.ln1_g = Tensor::full({width}, 1.0);
  b.ln1_b = Tensor::zeros({width});
  b.wq = gaussian(rng, {width, width}, std);
  b.bq = Tensor::zeros({width});
  b.wk = gaussian(rng, {width, width}, std);
  b.bk = Tensor::zeros({width});
  b.wv = gaussian(rng, {width, width}, std);
  b.bv = Tensor::zeros({width});
  b.wo = gaussian(rng, {width, width}, std);
  b.bo = Tensor::zeros({width});
  b.ln2_g = Tensor::full({width}, 1.0);
  b.ln2_b = Tensor::zeros({width});
  b.w1 = gaussian(rng, {width, hidden}, std);
  b.b1 = Tensor::zeros({hidden});
  b.w2 = gaussian(rng, {hidden, width}, std);
  b.b2 = Tensor::zeros({width});
  return b;
}

std::vector<AttentionMask> replicate(const AttentionMask& m, std::size_t heads) {
  return std::vector<AttentionMask>(heads, m);
}

void check_beta(const Tensor& beta) {
  if (beta.numel() != 1) throw ShapeError("beta must be a scalar");
  const double b = beta[0];
  if (!(b >= 0.0 && b <= 1.0)) throw ConfigError("beta " + std::to_string(b) + " outside [0, 1]");
}

}  // namespace

void ModelConfig::validate() const {
  if (layers < 1) throw ConfigError("model.layers must be >= 1");
  if (heads < 1 || width % static_cast<std::size_t>(heads) != 0)
    throw ConfigError("model.width " + std::to_string(width) + " is not divisible by model.heads " + std::to_string(heads));
  if (text_heads < 1 || text_width % static_cast<std::size_t>(text_heads) != 0)
    throw ConfigError("model.text_width " + std::to_string(text_width) + " is not divisible by model.text_heads " +
                      std::to_string(text_heads));
  if (patches < 1 || patch_dim < 1 || embed_dim < 1 || vocab_size < 2 || max_text_len < 2 || mlp_ratio < 1)
    throw ConfigError("model dimensions must be positive");
  if (!(init_std > 0.0)) throw ConfigError("model.init_std must be > 0");
  if (!(ln_eps > 0.0)) throw ConfigError("model.ln_eps must be > 0");
}

void PromptConfig::validate(int layers) const {
  if (injection_layer < 1 || injection_layer > layers)
    throw ConfigError("prompt.injection_layer " + std::to_string(injection_layer) + " outside [1, " +
                      std::to_string(layers) + "]");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("prompt.beta outside [0, 1]");
  if (attributes.empty()) throw ConfigError("prompt.attributes must not be empty");
}

void BlockParams::visit(const std::string& prefix, const std::function<void(const std::string&, Tensor&)>& fn) {
  fn(prefix + "ln1_b", ln1_b);
  fn(prefix + "ln1_g", ln1_g);
  fn(prefix + "wq", wq);
  fn(prefix + "bq", bq);
  fn(prefix + "wk", wk);
  fn(prefix + "bk", bk);
  fn(prefix + "wv", wv);
  fn(prefix + "bv", bv);
  fn(prefix + "wo", wo);
  fn(prefix + "bo", bo);
  fn(prefix + "ln2_b", ln2_b);
  fn(prefix + "ln2_g", ln2_g);
  fn(prefix + "w1", w1);
  fn(prefix + "b1", b1);
  fn(prefix + "w2", w2);
  fn(prefix + "b2", b2);
}

void VisionEncoderParams::visit(const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("vision.patch_proj", patch_proj);
  fn("vision.cls", cls);
  fn("vision.pos", pos);
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit("vision.blocks." + std::to_string(i) + ".", fn);
  fn("vision.ln_post_g", ln_post_g);
  fn("vision.ln_post_b", ln_post_b);
  fn("vision.proj", proj);
}

void TextEncoderParams::visit(const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("text.token_embedding", token_embedding);
  fn("text.pos", pos);
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit("text.blocks." + std::to_string(i) + ".", fn);
  fn("text.ln_final_g", ln_final_g);
  fn("text.ln_final_b", ln_final_b);
  fn("text.proj", proj);
}

void InjectedParams::visit(const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("injected.attr_tokens", attr_tokens);
  fn("injected.prompts", prompts);
  fn("injected.attr_proj", attr_proj);
  fn("injected.fusion_w", fusion_w);
}

Model Model::init(const ModelConfig& config, const PromptConfig& prompt, std::uint64_t seed) {
  config.validate();
  prompt.validate(config.layers);
  Model m;
  m.config = config;
  m.prompt = prompt;
  const CounterRng root(seed);
  const double s = config.init_std;

  CounterRng vr = root.split(1);
  m.vision.patch_proj = gaussian(vr, {config.patch_dim, config.width}, s);
  m.vision.cls = gaussian(vr, {config.width}, s);
  m.vision.pos = gaussian(vr, {config.patches + 1, config.width}, s);
  for (int l = 0; l < config.layers; ++l) m.vision.blocks.push_back(init_block(vr, config.width, config.mlp_ratio, s));
  m.vision.ln_post_g = Tensor::full({config.width}, 1.0);
  m.vision.ln_post_b = Tensor::zeros({config.width});
  m.vision.proj = gaussian(vr, {config.width, config.embed_dim}, s);

  CounterRng tr = root.split(2);
  m.text.token_embedding = gaussian(tr, {config.vocab_size, config.text_width}, s);
  m.text.pos = gaussian(tr, {config.max_text_len, config.text_width}, s);
  for (int l = 0; l < config.layers; ++l)
    m.text.blocks.push_back(init_block(tr, config.text_width, config.mlp_ratio, s));
  m.text.ln_final_g = Tensor::full({config.text_width}, 1.0);
  m.text.ln_final_b = Tensor::zeros({config.text_width});
  m.text.proj = gaussian(tr, {config.text_width, config.embed_dim}, s);

  CounterRng ir = root.split(3);
  m.injected.attr_tokens = gaussian(ir, {prompt.attributes.size(), config.width}, 0.02);
  m.injected.prompts = gaussian(ir, {prompt.text_prompts, config.text_width}, 0.02);
  m.injected.attr_proj = m.vision.proj.clone_leaf(false);
  m.injected.fusion_w = Tensor::zeros({prompt.attributes.size() + 1});
  for (Tensor* t : m.trainable()) t->set_requires_grad(true);
  return m;
}

std::map<std::string, Tensor*> Model::named_tensors() {
  std::map<std::string, Tensor*> out;
  auto add = [&](const std::string& name, Tensor& t) { out[name] = &t; };
  vision.visit(add);
  text.visit(add);
  injected.visit(add);
  return out;
}

std::vector<Tensor*> Model::trainable() {
  std::vector<Tensor*> out;
  injected.visit([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

std::vector<Tensor*> Model::frozen() {
  std::vector<Tensor*> out;
  auto add = [&](const std::string&, Tensor& t) { out.push_back(&t); };
  vision.visit(add);
  text.visit(add);
  return out;
}

std::uint64_t Model::frozen_fingerprint() {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (auto& [name, t] : named_tensors()) {
    if (name.rfind("injected.", 0) == 0) continue;
    feed(name.data(), name.size());
    feed(t->data().data(), t->numel() * sizeof(double));
  }
  return h;
}

Tensor patch_embed(const VisionEncoderParams& params, const Tensor& image) {
  const std::size_t n = params.pos.dim(0) - 1;
  if (image.rank() != 2 || image.dim(0) != n || image.dim(1) != params.patch_proj.dim(0))
    throw ShapeError("patch_embed: expected image [" + std::to_string(n) + "x" + std::to_string(params.patch_proj.dim(0)) +
                     "], got " + shape_str(image.shape()));
  const Tensor cls = reshape(params.cls, {1, params.cls.numel()});
  return add(concat_rows({cls, matmul(image, params.patch_proj)}), params.pos);
}

Tensor block_forward(const BlockParams& b, const Tensor& x, std::size_t heads, std::vector<AttentionMask> masks,
                     double eps) {
  const Tensor h = layer_norm(x, b.ln1_g, b.ln1_b, eps);
  const Tensor q = add_bias(matmul(h, b.wq), b.bq);
  const Tensor k = add_bias(matmul(h, b.wk), b.bk);
  const Tensor v = add_bias(matmul(h, b.wv), b.bv);
  const Tensor attn = multi_head_attention(q, k, v, heads, std::move(masks));
  const Tensor x1 = add(x, add_bias(matmul(attn, b.wo), b.bo));
  const Tensor h2 = layer_norm(x1, b.ln2_g, b.ln2_b, eps);
  const Tensor mlp = add_bias(matmul(gelu(add_bias(matmul(h2, b.w1), b.b1)), b.w2), b.b2);
  return add(x1, mlp);
}

VisionOutput vision_forward(const Model& model, const Tensor& image, const Tensor& attr_tokens,
                            const LayerMaskFn& masks, const Tensor& beta) {
  check_beta(beta);
  const auto& cfg = model.config;
  const int J = model.prompt.injection_layer;
  const auto heads = static_cast<std::size_t>(cfg.heads);
  const std::size_t k = attr_tokens.defined() ? attr_tokens.rows() : 0;

  VisionOutput out;
  Tensor x = patch_embed(model.vision, image);
  const std::size_t n0 = x.rows();
  Tensor contextual;
  for (int l = 1; l <= cfg.layers; ++l) {
    const auto& blk = model.vision.blocks[static_cast<std::size_t>(l - 1)];
    if (l < J || k == 0) {
      x = block_forward(blk, x, heads, {}, cfg.ln_eps);
      continue;
    }
    const Tensor r_in = l == J ? attr_tokens : lerp(attr_tokens, contextual, beta);
    out.attr_inputs.push_back(r_in);
    const Tensor y = block_forward(blk, concat_rows({x, r_in}), heads, masks(l), cfg.ln_eps);
    x = slice_rows(y, 0, n0);
    contextual = slice_rows(y, n0, n0 + k);
  }
  out.cls = slice_rows(x, 0, 1);
  out.patches = slice_rows(x, 1, n0);
  out.attr = contextual;
  return out;
}

VisionOutput vision_forward(const Model& model, const Tensor& image, MaskCache& masks, Ablation ablation) {
  return vision_forward(
      model, image, model.injected.attr_tokens, [&](int layer) { return masks.layer_masks(layer, ablation); },
      Tensor::scalar(model.prompt.beta));
}

VisionOutput frozen_vision_forward(const Model& model, const Tensor& image) {
  return vision_forward(model, image, Tensor(), [](int) { return std::vector<AttentionMask>{}; },
                        Tensor::scalar(model.prompt.beta));
}

Tensor text_forward(const Model& model, const std::vector<std::size_t>& ids, const Tensor& prompts,
                    const Tensor& beta, TextTrace* trace) {
  check_beta(beta);
  const auto& cfg = model.config;
  const int J = model.prompt.injection_layer;
  const auto heads = static_cast<std::size_t>(cfg.text_heads);
  const std::size_t n = ids.size();
  const std::size_t k = prompts.defined() ? prompts.rows() : 0;
  if (n == 0) throw LengthError("text_forward: empty token sequence");
  if (n + k > cfg.max_text_len)
    throw LengthError("text_forward: " + std::to_string(n) + " tokens + " + std::to_string(k) + " prompts exceed " +
                      std::to_string(cfg.max_text_len));

  Tensor x = add(gather_rows(model.text.token_embedding, ids), slice_rows(model.text.pos, 0, n));
  const auto causal_short = replicate(AttentionMask::causal(n), heads);
  const auto causal_long = replicate(AttentionMask::causal(n + k), heads);
  Tensor contextual;
  for (int l = 1; l <= cfg.layers; ++l) {
    const auto& blk = model.text.blocks[static_cast<std::size_t>(l - 1)];
    if (l < J || k == 0) {
      x = block_forward(blk, x, heads, causal_short, cfg.ln_eps);
      continue;
    }
    const Tensor p_in = l == J ? prompts : lerp(prompts, contextual, beta);
    if (trace) trace->prompt_inputs.push_back(p_in);
    std::vector<Tensor> parts{slice_rows(x, 0, 1), p_in};
    if (n > 1) parts.push_back(slice_rows(x, 1, n));
    const Tensor y = block_forward(blk, concat_rows(parts), heads, causal_long, cfg.ln_eps);
    contextual = slice_rows(y, 1, 1 + k);
    x = n > 1 ? concat_rows({slice_rows(y, 0, 1), slice_rows(y, 1 + k, n + k)}) : slice_rows(y, 0, 1);
  }
  return slice_rows(x, n - 1, n);
}

Tensor frozen_text_forward(const Model& model, const std::vector<std::size_t>& ids) {
  return text_forward(model, ids, Tensor(), Tensor::scalar(model.prompt.beta));
}

}  // namespace dear
