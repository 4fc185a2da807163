#include "dear/synthetic.hpp"

#include <algorithm>

#include "dear/errors.hpp"
#include "dear/rng.hpp"

namespace dear {

namespace {

std::size_t combos(const SyntheticTaskSpec& s) {
  std::size_t n = 1;
  for (std::size_t f = 0; f < s.factors; ++f) {
    n *= s.values_per_factor;
    if (n > 1'000'000) return n;
  }
  return n;
}

std::vector<std::size_t> decode(std::size_t code, const SyntheticTaskSpec& s) {
  std::vector<std::size_t> v(s.factors);
  for (std::size_t f = 0; f < s.factors; ++f) {
    v[f] = code % s.values_per_factor;
    code /= s.values_per_factor;
  }
  return v;
}

}  // namespace

void SyntheticTaskSpec::validate() const {
  if (n_base < 1 || n_novel < 1) throw ConfigError("task: need at least one base and one novel class");
  if (shots < 1) throw ConfigError("task.shots must be >= 1");
  if (test_per_class < 1) throw ConfigError("task.test_per_class must be >= 1");
  if (factors < 1 || values_per_factor < 2) throw ConfigError("task: need >= 1 factor with >= 2 values");
  if (!(noise >= 0.0)) throw ConfigError("task.noise must be >= 0");
  if (patches < factors) throw ConfigError("task: fewer patches than factors");
  if (combos(*this) < n_base + n_novel)
    throw ConfigError("task: " + std::to_string(n_base + n_novel) + " classes requested but only " +
                      std::to_string(combos(*this)) + " factor combinations exist");
}

Tensor render_image(const Dataset& world, const std::vector<std::size_t>& values, double noise, CounterRng& rng) {
  const std::size_t factors = world.prototypes.size();
  if (values.size() != factors) throw ShapeError("render_image: expected " + std::to_string(factors) + " factor values");
  const std::size_t dim = world.prototypes.front().cols();
  Tensor img = Tensor::zeros({world.patches, dim});
  auto out = img.mutable_data();
  for (std::size_t i = 0; i < world.patches; ++i) {
    const std::size_t f = i % factors;
    const auto proto = world.prototypes[f].data().subspan(values[f] * dim, dim);
    for (std::size_t j = 0; j < dim; ++j) out[i * dim + j] = proto[j] + noise * rng.normal();
  }
  return img;
}

std::vector<std::size_t> caption_tokens(const std::vector<std::size_t>& values, std::size_t values_per_factor) {
  std::vector<std::size_t> ids{kBotToken, kFillerToken};
  for (std::size_t f = 0; f < values.size(); ++f) ids.push_back(kFirstFactorToken + f * values_per_factor + values[f]);
  ids.push_back(kEotToken);
  return ids;
}

Dataset generate_synthetic_task(const SyntheticTaskSpec& spec, std::uint64_t seed) {
  spec.validate();
  // Keyed apart from the model-init streams that share the run seed.
  const CounterRng root = CounterRng(seed).split(0x7461736B);
  Dataset d;
  d.n_base = spec.n_base;
  d.n_novel = spec.n_novel;
  d.patches = spec.patches;
  d.values_per_factor = spec.values_per_factor;

  CounterRng proto_rng = root.split(1);
  for (std::size_t f = 0; f < spec.factors; ++f) {
    Tensor p = Tensor::zeros({spec.values_per_factor, spec.patch_dim});
    for (double& x : p.mutable_data()) x = proto_rng.normal();
    d.prototypes.push_back(std::move(p));
  }

  // Shuffle all factor combinations, take base classes from the front, then
  // novel classes whose every value already occurs among the base classes.
  CounterRng class_rng = root.split(2);
  std::vector<std::size_t> order(combos(spec));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[class_rng.below(i)]);

  std::vector<std::vector<bool>> seen(spec.factors, std::vector<bool>(spec.values_per_factor, false));
  std::size_t pos = 0;
  for (; pos < order.size() && d.classes.size() < spec.n_base; ++pos) {
    auto v = decode(order[pos], spec);
    for (std::size_t f = 0; f < spec.factors; ++f) seen[f][v[f]] = true;
    d.classes.push_back(std::move(v));
  }
  for (; pos < order.size() && d.classes.size() < spec.n_base + spec.n_novel; ++pos) {
    auto v = decode(order[pos], spec);
    bool covered = true;
    for (std::size_t f = 0; f < spec.factors; ++f) covered = covered && seen[f][v[f]];
    if (covered) d.classes.push_back(std::move(v));
  }
  if (d.classes.size() < spec.n_base + spec.n_novel)
    throw ConfigError("task: could not find " + std::to_string(spec.n_novel) +
                      " novel classes recombining base factor values; add base classes or reduce n_novel");
  for (const auto& c : d.classes) d.captions.push_back(caption_tokens(c, spec.values_per_factor));

  CounterRng img_rng = root.split(3);
  for (std::size_t c = 0; c < d.classes.size(); ++c) {
    if (c < spec.n_base)
      for (std::size_t s = 0; s < spec.shots; ++s) d.train.push_back({render_image(d, d.classes[c], spec.noise, img_rng), c});
    auto& test = c < spec.n_base ? d.test_base : d.test_novel;
    for (std::size_t s = 0; s < spec.test_per_class; ++s) test.push_back({render_image(d, d.classes[c], spec.noise, img_rng), c});
  }
  return d;
}

}  // namespace dear
