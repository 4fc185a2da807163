#pragma once

// Toy dual encoder: a pre-norm ViT-style vision branch with attribute-token
// injection and role-masked attention from layer J, and a causal text
// branch with prompt injection from layer J. Backbone weights are frozen;
// only the injected tokens, the attribute projection and the fusion
// scalars train.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dear/role_mask.hpp"
#include "dear/tensor.hpp"

namespace dear {

struct ModelConfig {
  int layers = 6;
  int heads = 4;
  std::size_t width = 32;  // D_v
  std::size_t patches = 16;
  std::size_t patch_dim = 16;
  std::size_t text_width = 32;
  int text_heads = 4;
  std::size_t vocab_size = 32;
  std::size_t max_text_len = 16;
  std::size_t embed_dim = 32;  // D_e
  std::size_t mlp_ratio = 4;
  double init_std = 0.02;
  double ln_eps = 1e-5;

  /// Throws ConfigError on inconsistent dimensions.
  void validate() const;
};

struct PromptConfig {
  int injection_layer = 3;  // J
  double beta = 0.9;
  std::size_t text_prompts = 5;  // K_text
  std::vector<std::string> attributes = kDefaultAttributes;

  void validate(int layers) const;
};

struct BlockParams {
  Tensor ln1_g, ln1_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_g, ln2_b;
  Tensor w1, b1, w2, b2;

  void visit(const std::string& prefix, const std::function<void(const std::string&, Tensor&)>& fn);
};

struct VisionEncoderParams {
  Tensor patch_proj;  // patch_dim x width
  Tensor cls;         // width
  Tensor pos;         // (patches + 1) x width
  std::vector<BlockParams> blocks;
  Tensor ln_post_g, ln_post_b;
  Tensor proj;  // width x embed_dim, frozen

  void visit(const std::function<void(const std::string&, Tensor&)>& fn);
};

struct TextEncoderParams {
  Tensor token_embedding;  // vocab x text_width
  Tensor pos;              // max_text_len x text_width
  std::vector<BlockParams> blocks;
  Tensor ln_final_g, ln_final_b;
  Tensor proj;  // text_width x embed_dim, frozen

  void visit(const std::function<void(const std::string&, Tensor&)>& fn);
};

struct InjectedParams {
  Tensor attr_tokens;  // K x width
  Tensor prompts;      // K_text x text_width
  Tensor attr_proj;    // width x embed_dim, shared over attributes
  Tensor fusion_w;     // 1 + K: [cls, attributes...]

  void visit(const std::function<void(const std::string&, Tensor&)>& fn);
};

struct Model {
  ModelConfig config;
  PromptConfig prompt;
  VisionEncoderParams vision;
  TextEncoderParams text;
  InjectedParams injected;

  /// Seeded Gaussian backbone (std = config.init_std), unit LN gains, zero
  /// biases. Attribute tokens and prompts draw from N(0, 0.02^2), the
  /// attribute projection starts as a copy of the vision projection and the
  /// fusion scalars start at zero.
  static Model init(const ModelConfig& config, const PromptConfig& prompt, std::uint64_t seed);

  /// Every tensor by checkpoint name ("vision.blocks.0.wq", "injected.attr_tokens", ...).
  std::map<std::string, Tensor*> named_tensors();
  std::vector<Tensor*> trainable();
  std::vector<Tensor*> frozen();

  /// FNV-1a over the bytes of every frozen tensor, in name order.
  std::uint64_t frozen_fingerprint();
};

struct VisionOutput {
  Tensor cls;      // 1 x width, z_cls^L
  Tensor patches;  // patches x width
  Tensor attr;     // K x width, contextual output of layer L (undefined for frozen runs)
  /// Attribute-token input state entering each layer J..L.
  std::vector<Tensor> attr_inputs;
};

/// [cls; image * patch_proj] + pos. ShapeError when the patch count differs.
Tensor patch_embed(const VisionEncoderParams& params, const Tensor& image);

/// Pre-norm transformer block: x + attn(LN(x)), then + MLP(LN(.)).
Tensor block_forward(const BlockParams& block, const Tensor& x, std::size_t heads, std::vector<AttentionMask> masks,
                     double eps);

/// Supplies the per-head masks used at an injected layer.
using LayerMaskFn = std::function<std::vector<AttentionMask>(int layer)>;

/// Injected forward. Layers < J run on [cls; patches]; at layer J the raw
/// attribute tokens are appended, and from then on each layer's attribute
/// input is beta * raw + (1 - beta) * previous contextual output.
VisionOutput vision_forward(const Model& model, const Tensor& image, const Tensor& attr_tokens,
                            const LayerMaskFn& masks, const Tensor& beta);
VisionOutput vision_forward(const Model& model, const Tensor& image, MaskCache& masks, Ablation ablation);

/// Plain forward of the backbone: no attribute tokens, no masks.
VisionOutput frozen_vision_forward(const Model& model, const Tensor& image);

/// Prompt-state trace for tests.
struct TextTrace {
  std::vector<Tensor> prompt_inputs;  // per layer J..L
};

/// Causal text forward returning the final [EOT] hidden state (1 x text_width).
/// Prompts are inserted after [BOT] at layer J with anchored mixing on later
/// layers. With an undefined or empty `prompts` tensor it is the frozen forward.
Tensor text_forward(const Model& model, const std::vector<std::size_t>& ids, const Tensor& prompts,
                    const Tensor& beta, TextTrace* trace = nullptr);
Tensor frozen_text_forward(const Model& model, const std::vector<std::size_t>& ids);

}  // namespace dear
