#include "dear/role_mask.hpp"

#include <algorithm>

#include "dear/errors.hpp"
#include "dear/log.hpp"

namespace dear {

TokenPartition TokenPartition::vision(std::size_t n_patches, const std::vector<std::string>& attributes) {
  TokenPartition p;
  p.cls_indices = {0};
  for (std::size_t i = 0; i < n_patches; ++i) p.patch_indices.push_back(1 + i);
  for (std::size_t a = 0; a < attributes.size(); ++a) {
    const std::size_t idx = 1 + n_patches + a;
    p.attr_indices.push_back(idx);
    p.attr_of[attributes[a]].push_back(idx);
  }
  p.seq_len = 1 + n_patches + attributes.size();
  return p;
}

void TokenPartition::validate() const {
  std::vector<int> owner(seq_len, 0);
  auto mark = [&](const std::vector<std::size_t>& set, const char* name) {
    for (std::size_t i : set) {
      if (i >= seq_len) throw ContractError(std::string("partition: ") + name + " index " + std::to_string(i) + " >= seq_len");
      if (owner[i]++) throw ContractError("partition: index " + std::to_string(i) + " appears in more than one set");
    }
  };
  mark(cls_indices, "cls");
  mark(patch_indices, "patch");
  mark(attr_indices, "attr");
  for (std::size_t i = 0; i < seq_len; ++i)
    if (!owner[i]) throw ContractError("partition: index " + std::to_string(i) + " is not covered");
  std::vector<int> attr_owner(seq_len, 0);
  std::size_t covered = 0;
  for (const auto& [label, idx] : attr_of) {
    for (std::size_t i : idx) {
      if (std::find(attr_indices.begin(), attr_indices.end(), i) == attr_indices.end())
        throw ContractError("partition: attribute '" + label + "' index " + std::to_string(i) + " is not an attribute token");
      if (attr_owner[i]++) throw ContractError("partition: attribute subsets overlap at " + std::to_string(i));
      ++covered;
    }
  }
  if (covered != attr_indices.size()) throw ContractError("partition: attribute subsets do not cover all attribute tokens");
}

bool TokenPartition::is_attr(std::size_t i) const {
  return std::find(attr_indices.begin(), attr_indices.end(), i) != attr_indices.end();
}

std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::kNone: return "none";
    case Ablation::kAllGeneralization: return "all-generalization";
    case Ablation::kAllMixed: return "all-mixed";
  }
  return "none";
}

Ablation ablation_from_name(const std::string& name) {
  if (name == "none") return Ablation::kNone;
  if (name == "all-generalization") return Ablation::kAllGeneralization;
  if (name == "all-mixed") return Ablation::kAllMixed;
  throw ConfigError("unknown ablation '" + name + "' (expected none, all-generalization, all-mixed)");
}

std::string policy_name(const MaskPolicy& p) {
  switch (p.kind) {
    case PolicyKind::kIsolation: return "isolation";
    case PolicyKind::kAttributeChannel: return "attribute:" + p.attribute;
    case PolicyKind::kOpen: return "open";
  }
  return "open";
}

MaskPolicy policy_for(const HeadRole& role, Ablation ablation) {
  if (ablation == Ablation::kAllGeneralization) return {PolicyKind::kIsolation, ""};
  if (ablation == Ablation::kAllMixed) return {PolicyKind::kOpen, ""};
  switch (role.kind) {
    case RoleKind::kGeneralization:
    case RoleKind::kOtherSpecialized: return {PolicyKind::kIsolation, ""};
    case RoleKind::kCoreAttribute: return {PolicyKind::kAttributeChannel, role.attribute};
    case RoleKind::kMixed: return {PolicyKind::kOpen, ""};
  }
  return {PolicyKind::kOpen, ""};
}

HeadMask build_isolation_mask(const TokenPartition& p) {
  HeadMask m{0, 0, AttentionMask(p.seq_len, p.seq_len)};
  std::vector<bool> attr(p.seq_len, false);
  for (std::size_t i : p.attr_indices) attr[i] = true;
  for (std::size_t i = 0; i < p.seq_len; ++i)
    for (std::size_t j = 0; j < p.seq_len; ++j)
      if (attr[i] != attr[j]) m.blocked.block(i, j);
  return m;
}

HeadMask build_attribute_mask(const TokenPartition& p, const std::string& attribute) {
  auto it = p.attr_of.find(attribute);
  if (it == p.attr_of.end()) throw ConfigError("attribute mask: unknown attribute '" + attribute + "'");
  HeadMask m{0, 0, AttentionMask(p.seq_len, p.seq_len)};
  for (std::size_t j : p.attr_indices) {
    if (std::find(it->second.begin(), it->second.end(), j) != it->second.end()) continue;
    for (std::size_t i = 0; i < p.seq_len; ++i) m.blocked.block(i, j);
  }
  return m;
}

HeadMask build_open_mask(const TokenPartition& p) { return {0, 0, AttentionMask(p.seq_len, p.seq_len)}; }

HeadMask build_mask(const TokenPartition& p, const MaskPolicy& policy) {
  switch (policy.kind) {
    case PolicyKind::kIsolation: return build_isolation_mask(p);
    case PolicyKind::kAttributeChannel: return build_attribute_mask(p, policy.attribute);
    case PolicyKind::kOpen: return build_open_mask(p);
  }
  return build_open_mask(p);
}

std::vector<HeadMask> masks_for_layer(const RoleMap& roles, int layer, int heads, const TokenPartition& p,
                                      Ablation ablation) {
  std::vector<HeadMask> out;
  out.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const RoleEntry* e = roles.find({layer, h});
    if (!e) throw CoverageError("masks_for_layer: no role for head (" + std::to_string(layer) + ", " + std::to_string(h) + ")");
    HeadMask m = build_mask(p, policy_for(e->role, ablation));
    m.layer = layer;
    m.head = h;
    if (m.blocked.any_row_fully_blocked())
      throw ContractError("masks_for_layer: head (" + std::to_string(layer) + ", " + std::to_string(h) + ") blocks a whole row");
    out.push_back(std::move(m));
  }
  return out;
}

bool rows_uniform(const AttentionMask& m) {
  for (std::size_t i = 1; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j)
      if (m.blocked(i, j) != m.blocked(0, j)) return false;
  return true;
}

MaskCache::MaskCache(std::shared_ptr<const RoleMap> roles, TokenPartition partition, int heads)
    : roles_(std::move(roles)), partition_(std::move(partition)), heads_(heads) {
  partition_.validate();
}

const std::vector<AttentionMask>& MaskCache::layer_masks(int layer, Ablation ablation) {
  std::lock_guard lock(mu_);
  const auto key = std::make_pair(layer, ablation);
  if (auto it = cache_.find(key); it != cache_.end()) {
    ++hits_;
    return it->second;
  }
  ++misses_;
  logger().debug("mask cache miss: layer {} ablation {}", layer, ablation_name(ablation));
  std::vector<AttentionMask> masks;
  for (auto& hm : masks_for_layer(*roles_, layer, heads_, partition_, ablation)) masks.push_back(std::move(hm.blocked));
  return cache_.emplace(key, std::move(masks)).first->second;
}

}  // namespace dear
