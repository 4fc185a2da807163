#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "dear/encoders.hpp"
#include "dear/errors.hpp"
#include "dear/trainer.hpp"
#include "support/oracles.hpp"

using namespace dear;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.layers = 3;
  c.heads = 2;
  c.width = 8;
  c.patches = 4;
  c.patch_dim = 5;
  c.text_width = 8;
  c.text_heads = 2;
  c.vocab_size = 12;
  c.max_text_len = 10;
  c.embed_dim = 6;
  c.mlp_ratio = 2;
  c.init_std = 0.3;
  return c;
}

PromptConfig small_prompt(int J = 2, double beta = 0.9) {
  PromptConfig p;
  p.injection_layer = J;
  p.beta = beta;
  p.text_prompts = 3;
  return p;
}

Tensor random_image(std::mt19937_64& rng, const ModelConfig& c) {
  return Tensor::from({c.patches, c.patch_dim}, oracle::random_vector(rng, c.patches * c.patch_dim));
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::shared_ptr<const RoleMap> mixed_roles(const Model& m) {
  return std::make_shared<const RoleMap>(default_role_map(m.prompt.injection_layer, m.config.layers, m.config.heads,
                                                          m.prompt.attributes));
}

}  // namespace

TEST_SUITE("encoders") {

TEST_CASE("block forward matches a hand-written reference") {
  const ModelConfig c = small_config();
  Model m = Model::init(c, small_prompt(), 1);
  std::mt19937_64 rng(2);
  const std::size_t n = 5, d = c.width, hidden = d * c.mlp_ratio, heads = 2, dh = d / heads;
  Tensor x = Tensor::from({n, d}, oracle::random_vector(rng, n * d));
  auto& b = m.vision.blocks[0];
  // give the biases and gains non-trivial values
  for (Tensor* t : {&b.ln1_g, &b.ln1_b, &b.bq, &b.bk, &b.bv, &b.bo, &b.ln2_g, &b.ln2_b, &b.b1, &b.b2})
    for (double& v : t->mutable_data()) v += 0.1 * std::normal_distribution<double>()(rng);
  AttentionMask mask0 = AttentionMask::causal(n), mask1 = AttentionMask::open(n);
  mask1.block(2, 4);
  const Tensor y = block_forward(b, x, heads, {mask0, mask1}, c.ln_eps);

  auto bias_rows = [&](std::vector<double> v, const Tensor& bias, std::size_t cols) {
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += bias[i % cols];
    return v;
  };
  const auto xv = values(x);
  auto h = oracle::layer_norm(xv, n, d, values(b.ln1_g), values(b.ln1_b), c.ln_eps);
  auto q = bias_rows(oracle::matmul(h, values(b.wq), n, d, d), b.bq, d);
  auto k = bias_rows(oracle::matmul(h, values(b.wk), n, d, d), b.bk, d);
  auto v = bias_rows(oracle::matmul(h, values(b.wv), n, d, d), b.bv, d);
  std::vector<double> attn(n * d);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    std::vector<double> qh, kh, vh;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < dh; ++t) {
        qh.push_back(q[i * d + hd * dh + t]);
        kh.push_back(k[i * d + hd * dh + t]);
        vh.push_back(v[i * d + hd * dh + t]);
      }
    const AttentionMask& mk = hd == 0 ? mask0 : mask1;
    std::vector<std::vector<bool>> blocked(n, std::vector<bool>(n));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) blocked[i][j] = mk.blocked(i, j);
    auto o = oracle::attention(qh, kh, vh, n, dh, blocked);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < dh; ++t) attn[i * d + hd * dh + t] = o[i * dh + t];
  }
  auto x1 = bias_rows(oracle::matmul(attn, values(b.wo), n, d, d), b.bo, d);
  for (std::size_t i = 0; i < x1.size(); ++i) x1[i] += xv[i];
  auto h2 = oracle::layer_norm(x1, n, d, values(b.ln2_g), values(b.ln2_b), c.ln_eps);
  auto u = bias_rows(oracle::matmul(h2, values(b.w1), n, d, hidden), b.b1, hidden);
  for (auto& e : u) e = oracle::gelu(e);
  auto out = bias_rows(oracle::matmul(u, values(b.w2), n, hidden, d), b.b2, d);
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(std::abs(y[i] - (out[i] + x1[i])) < 1e-12);
}

TEST_CASE("isolation leaves the original tokens identical to the frozen forward") {
  std::mt19937_64 rng(9);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Model m = Model::init(small_config(), small_prompt(), seed);
    for (double& v : m.injected.attr_tokens.mutable_data()) v = std::normal_distribution<double>()(rng);
    MaskCache cache(mixed_roles(m), TokenPartition::vision(m.config.patches, m.prompt.attributes), m.config.heads);
    const Tensor img = random_image(rng, m.config);
    const auto frozen = frozen_vision_forward(m, img);
    const auto iso = vision_forward(m, img, cache, Ablation::kAllGeneralization);
    for (std::size_t i = 0; i < frozen.cls.numel(); ++i) CHECK(std::abs(iso.cls[i] - frozen.cls[i]) <= 1e-9);
    for (std::size_t i = 0; i < frozen.patches.numel(); ++i) CHECK(std::abs(iso.patches[i] - frozen.patches[i]) <= 1e-9);
    // and the attribute tokens see nothing of the image
    const auto other = vision_forward(m, random_image(rng, m.config), cache, Ablation::kAllGeneralization);
    for (std::size_t i = 0; i < iso.attr.numel(); ++i) CHECK(std::abs(iso.attr[i] - other.attr[i]) <= 1e-12);
    // open masks do change the class token
    const auto open = vision_forward(m, img, cache, Ablation::kAllMixed);
    CHECK(std::abs(open.cls[0] - frozen.cls[0]) > 1e-9);
  }
}

TEST_CASE("isolation heads produce frozen attention rows at the first masked layer") {
  std::mt19937_64 rng(13);
  ModelConfig c = small_config();
  c.heads = 4;
  Model m = Model::init(c, small_prompt(2), 21);
  RoleMap roles;
  roles.set({2, 0}, RoleEntry{{RoleKind::kGeneralization, ""}, {}});
  roles.set({2, 1}, RoleEntry{{RoleKind::kCoreAttribute, "color"}, {}});
  roles.set({2, 2}, RoleEntry{{RoleKind::kOtherSpecialized, ""}, {}});
  roles.set({2, 3}, RoleEntry{{RoleKind::kMixed, ""}, {}});
  const TokenPartition part = TokenPartition::vision(c.patches, m.prompt.attributes);
  std::vector<AttentionMask> masks;
  for (auto& hm : masks_for_layer(roles, 2, 4, part, Ablation::kNone)) masks.push_back(hm.blocked);

  const Tensor img = random_image(rng, c);
  const auto& b0 = m.vision.blocks[0];
  const auto& b1 = m.vision.blocks[1];
  const Tensor x = block_forward(b0, patch_embed(m.vision, img), 4, {}, c.ln_eps);
  for (double& v : m.injected.attr_tokens.mutable_data()) v = std::normal_distribution<double>()(rng);
  auto head_outputs = [&](const Tensor& seq, std::vector<AttentionMask> mk) {
    const Tensor h = layer_norm(seq, b1.ln1_g, b1.ln1_b, c.ln_eps);
    return multi_head_attention(add_bias(matmul(h, b1.wq), b1.bq), add_bias(matmul(h, b1.wk), b1.bk),
                                add_bias(matmul(h, b1.wv), b1.bv), 4, std::move(mk));
  };
  const Tensor injected = head_outputs(concat_rows({x, m.injected.attr_tokens}), masks);
  const Tensor frozen = head_outputs(x, {});
  const std::size_t dh = c.width / 4;
  double iso_diff = 0.0, open_diff = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t hd = 0; hd < 4; ++hd)
      for (std::size_t t = 0; t < dh; ++t) {
        const double d = std::abs(injected.at(i, hd * dh + t) - frozen.at(i, hd * dh + t));
        if (hd == 0 || hd == 2) iso_diff = std::max(iso_diff, d);
        if (hd == 3) open_diff = std::max(open_diff, d);
      }
  CHECK(iso_diff < 1e-12);
  CHECK(open_diff > 1e-6);
}

TEST_CASE("outputs are differentiable in beta") {
  std::mt19937_64 rng(14);
  Model m = Model::init(small_config(), small_prompt(1), 22);
  for (double& v : m.injected.attr_tokens.mutable_data()) v = std::normal_distribution<double>()(rng);
  MaskCache cache(mixed_roles(m), TokenPartition::vision(m.config.patches, m.prompt.attributes), m.config.heads);
  const Tensor img = random_image(rng, m.config);
  const Tensor w = Tensor::from({m.prompt.attributes.size(), m.config.width},
                                oracle::random_vector(rng, m.prompt.attributes.size() * m.config.width));
  Tensor beta = Tensor::scalar(0.6, true);
  auto loss = [&] {
    const auto out = vision_forward(m, img, m.injected.attr_tokens,
                                    [&](int l) { return cache.layer_masks(l, Ablation::kNone); }, beta);
    const Tensor t = text_forward(m, {0, 4, 1}, m.injected.prompts, beta);
    return add(add(sum(mul(out.attr, w)), sum(out.cls)), sum(t));
  };
  backward(loss());
  const double analytic = beta.grad()[0];
  const auto numeric = finite_diff_grad_inplace([&] { return loss().item(); }, beta, 1e-6);
  CHECK(std::abs(analytic - numeric[0]) <= 1e-5 * std::max(1.0, std::abs(numeric[0])));
  CHECK(std::abs(analytic) > 1e-6);
}

TEST_CASE("beta = 1 feeds the raw attribute tokens to every injected layer") {
  std::mt19937_64 rng(10);
  Model m = Model::init(small_config(), small_prompt(1, 1.0), 3);
  MaskCache cache(mixed_roles(m), TokenPartition::vision(m.config.patches, m.prompt.attributes), m.config.heads);
  const auto out = vision_forward(m, random_image(rng, m.config), cache, Ablation::kNone);
  REQUIRE(out.attr_inputs.size() == 3);
  for (const auto& r : out.attr_inputs) CHECK(values(r) == values(m.injected.attr_tokens));

  TextTrace trace;
  text_forward(m, {0, 2, 5, 1}, m.injected.prompts, Tensor::scalar(1.0), &trace);
  REQUIRE(trace.prompt_inputs.size() == 3);
  for (const auto& p : trace.prompt_inputs) CHECK(values(p) == values(m.injected.prompts));
}

TEST_CASE("beta = 0 is plain sequential evolution") {
  std::mt19937_64 rng(11);
  Model m = Model::init(small_config(), small_prompt(2, 0.0), 4);
  MaskCache cache(mixed_roles(m), TokenPartition::vision(m.config.patches, m.prompt.attributes), m.config.heads);
  const Tensor img = random_image(rng, m.config);
  const auto out = vision_forward(m, img, cache, Ablation::kNone);

  // reference: carry the whole sequence through the blocks without splitting
  const auto heads = static_cast<std::size_t>(m.config.heads);
  Tensor x = patch_embed(m.vision, img);
  x = block_forward(m.vision.blocks[0], x, heads, {}, m.config.ln_eps);
  x = concat_rows({x, m.injected.attr_tokens});
  const std::size_t n0 = m.config.patches + 1;
  for (int l = 2; l <= 3; ++l) {
    CHECK(values(slice_rows(x, n0, x.rows())) == values(out.attr_inputs[static_cast<std::size_t>(l - 2)]));
    x = block_forward(m.vision.blocks[static_cast<std::size_t>(l - 1)], x, heads, cache.layer_masks(l, Ablation::kNone),
                      m.config.ln_eps);
  }
  CHECK(values(slice_rows(x, 0, 1)) == values(out.cls));
  CHECK(values(slice_rows(x, n0, x.rows())) == values(out.attr));

  TextTrace trace;
  const std::vector<std::size_t> ids = {0, 2, 7, 1};
  const Tensor eot = text_forward(m, ids, m.injected.prompts, Tensor::scalar(0.0), &trace);
  const auto th = static_cast<std::size_t>(m.config.text_heads);
  Tensor t = add(gather_rows(m.text.token_embedding, ids), slice_rows(m.text.pos, 0, ids.size()));
  t = block_forward(m.text.blocks[0], t, th, std::vector<AttentionMask>(th, AttentionMask::causal(4)), m.config.ln_eps);
  t = concat_rows({slice_rows(t, 0, 1), m.injected.prompts, slice_rows(t, 1, 4)});
  for (int l = 2; l <= 3; ++l) {
    CHECK(values(slice_rows(t, 1, 4)) == values(trace.prompt_inputs[static_cast<std::size_t>(l - 2)]));
    t = block_forward(m.text.blocks[static_cast<std::size_t>(l - 1)], t, th,
                      std::vector<AttentionMask>(th, AttentionMask::causal(7)), m.config.ln_eps);
  }
  CHECK(values(slice_rows(t, 6, 7)) == values(eot));
}

TEST_CASE("text branch: no prompts equals the frozen forward, prompts see only [BOT]") {
  Model m = Model::init(small_config(), small_prompt(), 5);
  const std::vector<std::size_t> a = {0, 2, 3, 1}, b = {0, 4, 9, 1};
  CHECK(values(text_forward(m, a, Tensor::zeros({0, m.config.text_width}), Tensor::scalar(0.5))) ==
        values(frozen_text_forward(m, a)));
  TextTrace ta, tb;
  text_forward(m, a, m.injected.prompts, Tensor::scalar(0.3), &ta);
  text_forward(m, b, m.injected.prompts, Tensor::scalar(0.3), &tb);
  for (std::size_t l = 0; l < ta.prompt_inputs.size(); ++l)
    CHECK(values(ta.prompt_inputs[l]) == values(tb.prompt_inputs[l]));
  CHECK_THROWS_AS(text_forward(m, std::vector<std::size_t>(8, 2), m.injected.prompts, Tensor::scalar(0.5)), LengthError);
  CHECK_THROWS_AS(text_forward(m, {}, Tensor(), Tensor::scalar(0.5)), LengthError);
  CHECK_THROWS_AS(text_forward(m, a, m.injected.prompts, Tensor::scalar(1.5)), ConfigError);
}

TEST_CASE("gradients reach only the injected tensors") {
  std::mt19937_64 rng(12);
  Model m = Model::init(small_config(), small_prompt(), 6);
  MaskCache cache(mixed_roles(m), TokenPartition::vision(m.config.patches, m.prompt.attributes), m.config.heads);
  const auto out = vision_forward(m, random_image(rng, m.config), cache, Ablation::kNone);
  const Tensor t = text_forward(m, {0, 3, 1}, m.injected.prompts, Tensor::scalar(0.9));
  backward(add(sum(out.attr), add(sum(out.cls), sum(t))));
  CHECK(m.injected.attr_tokens.has_grad());
  CHECK(m.injected.prompts.has_grad());
  for (auto* f : m.frozen()) CHECK_FALSE(f->has_grad());
}

TEST_CASE("init is seeded, named and fingerprinted") {
  Model a = Model::init(small_config(), small_prompt(), 7), b = Model::init(small_config(), small_prompt(), 7);
  Model c = Model::init(small_config(), small_prompt(), 8);
  CHECK(a.frozen_fingerprint() == b.frozen_fingerprint());
  CHECK(a.frozen_fingerprint() != c.frozen_fingerprint());
  auto names = a.named_tensors();
  CHECK(names.count("vision.blocks.0.wq") == 1);
  CHECK(names.count("injected.fusion_w") == 1);
  CHECK(a.trainable().size() == 4);
  CHECK(values(a.injected.attr_proj) == values(a.vision.proj));
  for (double w : a.injected.fusion_w.data()) CHECK(w == 0.0);
  const auto fp = a.frozen_fingerprint();
  a.injected.attr_tokens.mutable_data()[0] += 1.0;
  CHECK(a.frozen_fingerprint() == fp);
  a.vision.blocks[0].wq.mutable_data()[0] += 1.0;
  CHECK(a.frozen_fingerprint() != fp);
}

TEST_CASE("config validation") {
  ModelConfig c = small_config();
  c.width = 9;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  PromptConfig p = small_prompt(4);
  CHECK_THROWS_AS(p.validate(3), ConfigError);
  p = small_prompt(2, -0.1);
  CHECK_THROWS_AS(p.validate(3), ConfigError);
  Model m = Model::init(small_config(), small_prompt(), 1);
  CHECK_THROWS_AS(patch_embed(m.vision, Tensor::zeros({3, 5})), ShapeError);
}

}  // TEST_SUITE
