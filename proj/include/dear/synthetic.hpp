#pragma once

// Factor-structured stand-in for a few-shot base/novel benchmark. Every class
// is a tuple of latent factor values (one per attribute). An image is a grid
// of patches whose vectors are prototypes of those factor values plus
// Gaussian noise; the class "caption" is a token sequence naming the same
// values. Novel classes are unseen recombinations of values that already
// occur among the base classes.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "dear/rng.hpp"
#include "dear/tensor.hpp"

namespace dear {

inline constexpr std::size_t kBotToken = 0;
inline constexpr std::size_t kEotToken = 1;
inline constexpr std::size_t kFillerToken = 2;  // stands in for "a photo of"
inline constexpr std::size_t kFirstFactorToken = 3;

struct SyntheticTaskSpec {
  std::size_t n_base = 8;
  std::size_t n_novel = 8;
  std::size_t shots = 16;
  std::size_t test_per_class = 8;
  std::size_t factors = 5;
  std::size_t values_per_factor = 3;
  double noise = 0.5;  // sigma
  std::size_t patches = 16;
  std::size_t patch_dim = 16;

  /// ConfigError on empty splits, shots < 1 or too few factor combinations.
  void validate() const;
  std::size_t vocab_needed() const { return kFirstFactorToken + factors * values_per_factor; }
};

struct Sample {
  Tensor image;       // patches x patch_dim
  std::size_t label;  // index into Dataset::classes
};

struct Dataset {
  std::vector<std::vector<std::size_t>> classes;  // factor values; base classes first
  std::vector<std::vector<std::size_t>> captions;  // token ids per class
  std::size_t n_base = 0;
  std::size_t n_novel = 0;
  std::vector<Sample> train;      // base classes only
  std::vector<Sample> test_base;  // labels in [0, n_base)
  std::vector<Sample> test_novel;  // labels in [n_base, n_base + n_novel)
  std::vector<Tensor> prototypes;  // per factor: values_per_factor x patch_dim
  std::size_t patches = 0;
  std::size_t values_per_factor = 0;

  bool is_base(std::size_t label) const { return label < n_base; }
};

/// Token sequence [BOT, filler, value tokens..., EOT] for one class.
std::vector<std::size_t> caption_tokens(const std::vector<std::size_t>& values, std::size_t values_per_factor);

/// One image of the class with factor `values`: patch i shows the prototype
/// of factor i mod F plus noise * N(0, 1) per coordinate.
Tensor render_image(const Dataset& world, const std::vector<std::size_t>& values, double noise, CounterRng& rng);

/// Deterministic in (spec, seed).
Dataset generate_synthetic_task(const SyntheticTaskSpec& spec, std::uint64_t seed);

}  // namespace dear
