#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "dear/concept_analysis.hpp"
#include "dear/config.hpp"
#include "dear/errors.hpp"
#include "support/oracles.hpp"
#include "support/role_oracle.hpp"

using namespace dear;

namespace {

AnalysisReport analyze_fixture(const std::string& name) {
  const std::string dir = DEAR_TEST_DATA;
  std::ifstream in(dir + "/" + name + ".jsonl");
  REQUIRE(in.good());
  const RunConfig cfg = load_config(dir + "/" + name + "_config.json");
  AnalysisOptions opts;
  opts.rules.core_attribute_map = cfg.analysis.core_attribute_map;
  opts.cluster_labels = cfg.analysis.cluster_labels;
  return analyze(ingest_phrases(in), opts);
}

std::map<int, std::string> core_map_of(const std::string& name) {
  return load_config(std::string(DEAR_TEST_DATA) + "/" + name + "_config.json").analysis.core_attribute_map;
}

PhraseRecord rec(int layer, int head, std::vector<double> e) { return {layer, head, "p", std::move(e)}; }

}  // namespace

TEST_SUITE("concept_analysis") {

TEST_CASE("entropy examples") {
  CHECK(concept_entropy(std::vector<double>{1.0, 0.0, 0.0}) == 0.0);
  CHECK(std::abs(concept_entropy(std::vector<double>(5, 0.2)) - std::log2(5.0)) <= 1e-12);
  CHECK(concept_entropy(std::vector<double>{0.6, 0.4}) == doctest::Approx(0.970951).epsilon(1e-6));
  CHECK_THROWS_AS(concept_entropy(std::vector<double>{0.5, 0.6}), DomainError);
  CHECK_THROWS_AS(concept_entropy(std::vector<double>{1.2, -0.2}), DomainError);
}

TEST_CASE("entropy bounds on random simplex points") {
  std::mt19937_64 rng(8);
  std::exponential_distribution<double> ex(1.0);
  for (int t = 0; t < 2000; ++t) {
    const std::size_t k = 1 + rng() % 12;
    std::vector<double> p(k);
    double s = 0.0;
    for (auto& v : p) s += (v = ex(rng));
    for (auto& v : p) v /= s;
    const double h = concept_entropy(p);
    CHECK(h >= 0.0);
    CHECK(h <= std::log2(static_cast<double>(k)) + 1e-12);
    CHECK(h == doctest::Approx(oracle::entropy_bits(p)).epsilon(1e-12));
  }
}

TEST_CASE("nearest rank quantile and argmax ties") {
  std::vector<double> v = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  CHECK(nearest_rank(v, 0.2) == 2);
  CHECK(nearest_rank(v, 0.8) == 8);
  CHECK(nearest_rank(v, 0.05) == 1);
  CHECK(dominant_index(std::vector<double>{0.4, 0.4, 0.2}) == 0);
  std::vector<ConceptCluster> cs(2);
  cs[0].centroid = {1, 0};
  cs[1].centroid = {0, 1};
  CHECK(categorize_phrase(std::vector<double>{0.5, 0.5}, cs) == 0);
  CHECK(categorize_phrase(std::vector<double>{0.4, 0.6}, cs) == 1);
}

TEST_CASE("36-head fixture matches the sort-and-cut oracle") {
  const auto report = analyze_fixture("phrases");
  CHECK(report.clustering.clusters.size() == 12);
  CHECK(report.roles.size() == 36);
  const auto expected = oracle::sort_and_cut(oracle::load_plan(std::string(DEAR_TEST_DATA) + "/phrases_plan.json"),
                                             0.2, 0.8, core_map_of("phrases"));
  REQUIRE(expected.size() == 36);
  for (const auto& [key, entry] : report.roles.entries()) {
    const auto& want = expected.at({key.layer, key.head});
    INFO("head L" << key.layer << "H" << key.head);
    CHECK(role_name(entry.role.kind) == want.kind);
    CHECK(entry.role.attribute == want.attribute);
  }
  const RoleEntry* color = report.roles.find({12, 10});
  REQUIRE(color);
  CHECK(color->role == HeadRole{RoleKind::kCoreAttribute, "color"});
}

TEST_CASE("toy fixture matches the oracle too") {
  const auto report = analyze_fixture("toy_phrases");
  const auto expected = oracle::sort_and_cut(
      oracle::load_plan(std::string(DEAR_TEST_DATA) + "/toy_phrases_plan.json"), 0.2, 0.8, core_map_of("toy_phrases"));
  for (const auto& [key, entry] : report.roles.entries())
    CHECK(role_name(entry.role.kind) == expected.at({key.layer, key.head}).kind);
}

TEST_CASE("roles are invariant to rescaling entropies") {
  const auto report = analyze_fixture("phrases");
  for (double c : {0.5, 2.0, 3.7, 1e-3}) {
    auto scaled = report.profiles;
    for (auto& p : scaled) p.entropy *= c;
    CHECK(assign_roles(scaled, report.rules).same_roles(report.roles));
  }
}

TEST_CASE("exact-count mode cuts ceil(q n) heads at each end") {
  std::vector<HeadProfile> profiles;
  for (int h = 0; h < 10; ++h) {
    HeadProfile p;
    p.key = {1, h};
    p.entropy = h < 5 ? 0.5 : 1.0 + h;  // five heads tied at the bottom
    p.distribution = {1.0};
    profiles.push_back(p);
  }
  RoleRules rules;
  auto tied = assign_roles(profiles, rules);
  rules.exact_count = true;
  auto exact = assign_roles(profiles, rules);
  auto count = [](const RoleMap& m, RoleKind k) {
    int n = 0;
    for (const auto& [key, e] : m.entries()) n += e.role.kind == k;
    return n;
  };
  CHECK(count(tied, RoleKind::kOtherSpecialized) == 5);
  CHECK(count(exact, RoleKind::kOtherSpecialized) == 2);
  CHECK(count(exact, RoleKind::kGeneralization) == 2);
  CHECK(exact.find({1, 0})->role.kind == RoleKind::kOtherSpecialized);
  CHECK(exact.find({1, 9})->role.kind == RoleKind::kGeneralization);
}

TEST_CASE("grid heads without phrases are Mixed with a warning") {
  std::vector<PhraseRecord> recs;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 0.02);
  for (int i = 0; i < 12; ++i) recs.push_back(rec(1, i % 2, {1 + n(rng), n(rng), n(rng)}));
  for (int i = 0; i < 12; ++i) recs.push_back(rec(1, i % 2, {n(rng), 1 + n(rng), n(rng)}));
  AnalysisOptions opts;
  opts.grid = HeadGrid{1, 1, 3};
  const auto corpus = ingest_records(recs, opts.grid);
  CHECK_FALSE(corpus.warnings.empty());
  const auto report = analyze(corpus, opts);
  CHECK(report.roles.size() == 3);
  CHECK(report.roles.find({1, 2})->role.kind == RoleKind::kMixed);
  CHECK(report.roles.find({1, 2})->profile.unassigned);
}

TEST_CASE("ingestion validates records") {
  std::istringstream bad_json("{\"layer\": 1, \"head\": 0, \"phrase\": \"x\", \"embedding\": [1, 0]\nnot json\n");
  CHECK_THROWS_AS(ingest_phrases(bad_json), FormatError);
  CHECK_THROWS_AS(ingest_records({rec(1, 0, {0, 0})}), FormatError);
  CHECK_THROWS_AS(ingest_records({rec(1, 0, {1, 0}), rec(1, 0, {1, 0, 0})}), FormatError);
  auto c = ingest_records({rec(1, 0, {3, 4})});
  CHECK(c.records[0].embedding[0] == doctest::Approx(0.6));
  CHECK_THROWS_AS(cluster_phrases(c.records, 5, 5), InsufficientDataError);
}

TEST_CASE("roles.json round trip and byte stability") {
  const auto a = analyze_fixture("phrases");
  const auto b = analyze_fixture("phrases");
  const std::string ja = roles_to_json(a);
  CHECK(ja == roles_to_json(b));
  const RoleMap back = role_map_from_json(ja);
  CHECK(back.same_roles(a.roles));
  CHECK_NOTHROW(back.require_coverage(10, 12, 12));
  CHECK_THROWS_AS(back.require_coverage(9, 12, 12), CoverageError);
}

TEST_CASE("significant-digit rounding") {
  CHECK(round_significant(0.1 + 0.2) == 0.3);
  CHECK(round_significant(1.0 / 3.0, 3) == 0.333);
  CHECK(round_significant(0.0) == 0.0);
}

}  // TEST_SUITE
