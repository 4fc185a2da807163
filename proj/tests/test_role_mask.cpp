#include <algorithm>
#include <memory>
#include <numeric>
#include <random>
#include <thread>
#include <vector>

#include "doctest.h"
#include "dear/errors.hpp"
#include "dear/role_mask.hpp"

using namespace dear;

namespace {

RoleEntry entry(RoleKind kind, std::string attr = "") {
  RoleEntry e;
  e.role = {kind, std::move(attr)};
  return e;
}

RoleMap four_roles(int layer) {
  RoleMap m;
  m.set({layer, 0}, entry(RoleKind::kGeneralization));
  m.set({layer, 1}, entry(RoleKind::kCoreAttribute, "shape"));
  m.set({layer, 2}, entry(RoleKind::kOtherSpecialized));
  m.set({layer, 3}, entry(RoleKind::kMixed));
  return m;
}

}  // namespace

TEST_SUITE("role_mask") {

TEST_CASE("vision partition layout") {
  auto p = TokenPartition::vision(4, kDefaultAttributes);
  CHECK(p.seq_len == 10);
  CHECK(p.cls_indices == std::vector<std::size_t>{0});
  CHECK(p.patch_indices.size() == 4);
  CHECK(p.attr_indices == std::vector<std::size_t>{5, 6, 7, 8, 9});
  CHECK(p.attr_of.at("texture") == std::vector<std::size_t>{7});
  CHECK(p.is_attr(9));
  CHECK_FALSE(p.is_attr(4));
  CHECK_NOTHROW(p.validate());
  p.patch_indices.push_back(9);
  CHECK_THROWS_AS(p.validate(), ContractError);
}

TEST_CASE("isolation mask severs both directions and nothing else") {
  const std::size_t n = 6, k = 5;
  auto p = TokenPartition::vision(n, kDefaultAttributes);
  auto m = build_isolation_mask(p).blocked;
  CHECK(m.blocked_count() == 2 * (1 + n) * k);
  for (std::size_t i = 0; i < p.seq_len; ++i)
    for (std::size_t j = 0; j < p.seq_len; ++j) CHECK(m.blocked(i, j) == (p.is_attr(i) != p.is_attr(j)));
  CHECK_FALSE(m.any_row_fully_blocked());
}

TEST_CASE("attribute channel keeps only its own attribute column") {
  const std::size_t n = 3;
  auto p = TokenPartition::vision(n, kDefaultAttributes);
  auto m = build_attribute_mask(p, "color").blocked;
  CHECK(m.blocked_count() == (kDefaultAttributes.size() - 1) * p.seq_len);
  CHECK(rows_uniform(m));
  const std::size_t color = p.attr_of.at("color")[0];
  for (std::size_t i = 0; i < p.seq_len; ++i) {
    CHECK_FALSE(m.blocked(i, color));
    CHECK_FALSE(m.blocked(i, 0));
  }
  CHECK_THROWS_AS(build_attribute_mask(p, "smell"), ConfigError);
  CHECK(build_open_mask(p).blocked.blocked_count() == 0);
}

TEST_CASE("policy table and ablations") {
  for (auto kind : {RoleKind::kCoreAttribute, RoleKind::kOtherSpecialized, RoleKind::kGeneralization, RoleKind::kMixed}) {
    HeadRole r{kind, kind == RoleKind::kCoreAttribute ? "color" : ""};
    CHECK(policy_for(r, Ablation::kAllGeneralization).kind == PolicyKind::kIsolation);
    CHECK(policy_for(r, Ablation::kAllMixed).kind == PolicyKind::kOpen);
  }
  CHECK(policy_for({RoleKind::kGeneralization, ""}, Ablation::kNone).kind == PolicyKind::kIsolation);
  CHECK(policy_for({RoleKind::kOtherSpecialized, ""}, Ablation::kNone).kind == PolicyKind::kIsolation);
  CHECK(policy_for({RoleKind::kMixed, ""}, Ablation::kNone).kind == PolicyKind::kOpen);
  auto ch = policy_for({RoleKind::kCoreAttribute, "location"}, Ablation::kNone);
  CHECK(ch.kind == PolicyKind::kAttributeChannel);
  CHECK(ch.attribute == "location");
  for (auto a : {Ablation::kNone, Ablation::kAllGeneralization, Ablation::kAllMixed})
    CHECK(ablation_from_name(ablation_name(a)) == a);
  CHECK_THROWS_AS(ablation_from_name("half"), ConfigError);
}

TEST_CASE("masks_for_layer follows the role map") {
  auto p = TokenPartition::vision(4, kDefaultAttributes);
  auto masks = masks_for_layer(four_roles(5), 5, 4, p, Ablation::kNone);
  REQUIRE(masks.size() == 4);
  CHECK(masks[0].blocked == build_isolation_mask(p).blocked);
  CHECK(masks[1].blocked == build_attribute_mask(p, "shape").blocked);
  CHECK(masks[2].blocked == build_isolation_mask(p).blocked);
  CHECK(masks[3].blocked.blocked_count() == 0);
  CHECK(masks[3].layer == 5);
  CHECK(masks[3].head == 3);
  CHECK_THROWS_AS(masks_for_layer(four_roles(5), 6, 4, p, Ablation::kNone), CoverageError);
  CHECK_THROWS_AS(masks_for_layer(four_roles(5), 5, 5, p, Ablation::kNone), CoverageError);
}

TEST_CASE("mask cache memoizes per layer and ablation, also across threads") {
  auto roles = std::make_shared<const RoleMap>(four_roles(2));
  MaskCache cache(roles, TokenPartition::vision(4, kDefaultAttributes), 4);
  const auto* first = &cache.layer_masks(2, Ablation::kNone);
  CHECK(cache.misses() == 1);
  CHECK(&cache.layer_masks(2, Ablation::kNone) == first);
  CHECK(cache.hits() == 1);
  cache.layer_masks(2, Ablation::kAllMixed);
  CHECK(cache.misses() == 2);

  std::vector<std::thread> pool;
  for (int t = 0; t < 4; ++t)
    pool.emplace_back([&] {
      for (int i = 0; i < 50; ++i) cache.layer_masks(2, Ablation::kAllGeneralization);
    });
  for (auto& t : pool) t.join();
  CHECK(cache.misses() == 3);
  CHECK(cache.hits() == 1 + 200 - 1);
}

TEST_CASE("randomized partitions: allowed column sets and no blocked rows") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n_patches = 1 + rng() % 6, k = rng() % 9;
    TokenPartition p;
    p.seq_len = 1 + n_patches + k;
    std::vector<std::size_t> perm(p.seq_len);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    p.cls_indices = {perm[0]};
    p.patch_indices.assign(perm.begin() + 1, perm.begin() + 1 + static_cast<long>(n_patches));
    p.attr_indices.assign(perm.begin() + 1 + static_cast<long>(n_patches), perm.end());
    for (std::size_t a = 0; a < k; ++a) p.attr_of["a" + std::to_string(a)] = {p.attr_indices[a]};
    REQUIRE_NOTHROW(p.validate());

    std::vector<MaskPolicy> policies = {{PolicyKind::kIsolation, ""}, {PolicyKind::kOpen, ""}};
    if (k > 0) policies.push_back({PolicyKind::kAttributeChannel, "a" + std::to_string(rng() % k)});
    for (const auto& pol : policies) {
      const auto m = build_mask(p, pol).blocked;
      CHECK_FALSE(m.any_row_fully_blocked());
      CHECK(m == build_mask(p, pol).blocked);
      for (std::size_t i = 0; i < p.seq_len; ++i)
        for (std::size_t j = 0; j < p.seq_len; ++j) {
          bool allowed = true;
          if (pol.kind == PolicyKind::kIsolation) allowed = p.is_attr(i) == p.is_attr(j);
          if (pol.kind == PolicyKind::kAttributeChannel)
            allowed = !p.is_attr(j) || p.attr_of.at(pol.attribute)[0] == j;
          CHECK(m.blocked(i, j) == !allowed);
        }
    }
  }
}

}  // TEST_SUITE
