#pragma once

// Role-based per-head attention masks over a partitioned token sequence.

#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <tuple>
#include <vector>

#include "dear/attention_mask.hpp"
#include "dear/concept_analysis.hpp"

namespace dear {

struct TokenPartition {
  std::vector<std::size_t> cls_indices;
  std::vector<std::size_t> patch_indices;
  std::vector<std::size_t> attr_indices;
  std::map<std::string, std::vector<std::size_t>> attr_of;
  std::size_t seq_len = 0;

  /// [CLS] at 0, patches 1..n_patches, then one token per attribute in order.
  static TokenPartition vision(std::size_t n_patches, const std::vector<std::string>& attributes);

  /// Throws ContractError unless the index sets tile [0, seq_len) and the
  /// per-attribute subsets tile attr_indices.
  void validate() const;

  bool is_attr(std::size_t i) const;
};

struct HeadMask {
  int layer = 0;
  int head = 0;
  AttentionMask blocked;
};

enum class Ablation { kNone, kAllGeneralization, kAllMixed };

std::string ablation_name(Ablation a);
Ablation ablation_from_name(const std::string& name);

enum class PolicyKind { kIsolation, kAttributeChannel, kOpen };

struct MaskPolicy {
  PolicyKind kind = PolicyKind::kOpen;
  std::string attribute;  // kAttributeChannel only
};

std::string policy_name(const MaskPolicy& p);

/// Generalization and OtherSpecialized isolate, CoreAttribute(a) channels a,
/// Mixed is open. kAllGeneralization forces isolation and kAllMixed forces open.
MaskPolicy policy_for(const HeadRole& role, Ablation ablation);

/// Blocks every original<->attribute pair in both directions.
HeadMask build_isolation_mask(const TokenPartition& p);
/// Blocks, for every query row, the attribute columns not belonging to `attribute`.
HeadMask build_attribute_mask(const TokenPartition& p, const std::string& attribute);
HeadMask build_open_mask(const TokenPartition& p);
HeadMask build_mask(const TokenPartition& p, const MaskPolicy& policy);

/// One mask per head of `layer`; CoverageError when the role map lacks a head.
std::vector<HeadMask> masks_for_layer(const RoleMap& roles, int layer, int heads, const TokenPartition& p,
                                      Ablation ablation);

/// True when every row of the mask is identical.
bool rows_uniform(const AttentionMask& m);

/// Memoizes masks_for_layer per (layer, ablation). Bound to one role map
/// and partition; rebuild the cache when either changes.
class MaskCache {
 public:
  MaskCache(std::shared_ptr<const RoleMap> roles, TokenPartition partition, int heads);

  const std::vector<AttentionMask>& layer_masks(int layer, Ablation ablation);

  std::size_t hits() const { return hits_; }
  std::size_t misses() const { return misses_; }
  const TokenPartition& partition() const { return partition_; }

 private:
  std::shared_ptr<const RoleMap> roles_;
  TokenPartition partition_;
  int heads_;
  std::mutex mu_;
  std::map<std::pair<int, Ablation>, std::vector<AttentionMask>> cache_;
  std::size_t hits_ = 0;
  std::size_t misses_ = 0;
};

}  // namespace dear
