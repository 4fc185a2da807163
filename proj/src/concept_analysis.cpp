#include "dear/concept_analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dear/errors.hpp"
#include "dear/hdbscan.hpp"
#include "dear/log.hpp"
#include "dear/tensor.hpp"

namespace dear {

using nlohmann::json;

namespace {

std::string head_str(const HeadKey& k) {
  return "(" + std::to_string(k.layer) + ", " + std::to_string(k.head) + ")";
}

void normalize_in_place(std::vector<double>& v, std::size_t line) {
  double s = 0.0;
  for (double x : v) s += x * x;
  const double n = std::sqrt(s);
  if (n <= kNormFloor) throw FormatError("phrases: record " + std::to_string(line) + " has a zero-norm embedding");
  for (double& x : v) x /= n;
}

}  // namespace

// --- ingestion -------------------------------------------------------------------

PhraseCorpus ingest_records(std::vector<PhraseRecord> records, const std::optional<HeadGrid>& grid) {
  PhraseCorpus corpus;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto& r = records[i];
    if (r.layer < 1 || r.head < 0)
      throw FormatError("phrases: record " + std::to_string(i) + " has invalid head " + head_str({r.layer, r.head}));
    if (r.embedding.empty()) throw FormatError("phrases: record " + std::to_string(i) + " has an empty embedding");
    if (corpus.dim == 0) corpus.dim = r.embedding.size();
    if (r.embedding.size() != corpus.dim)
      throw FormatError("phrases: record " + std::to_string(i) + " has embedding dimension " +
                        std::to_string(r.embedding.size()) + ", expected " + std::to_string(corpus.dim));
    if (grid && !grid->contains({r.layer, r.head}))
      throw FormatError("phrases: record " + std::to_string(i) + " head " + head_str({r.layer, r.head}) +
                        " lies outside the configured grid");
    normalize_in_place(r.embedding, i);
    corpus.groups[{r.layer, r.head}].push_back(i);
  }
  corpus.records = std::move(records);
  if (grid) {
    for (int l = grid->first_layer; l <= grid->last_layer; ++l) {
      for (int h = 0; h < grid->heads; ++h) {
        if (!corpus.groups.count({l, h})) {
          corpus.warnings.push_back("head " + head_str({l, h}) + " has no phrases; it will be assigned Mixed");
          logger().warn("{}", corpus.warnings.back());
        }
      }
    }
  }
  return corpus;
}

PhraseCorpus ingest_phrases(std::istream& in, const std::optional<HeadGrid>& grid) {
  std::vector<PhraseRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      PhraseRecord r;
      r.layer = j.at("layer").get<int>();
      r.head = j.at("head").get<int>();
      r.phrase = j.at("phrase").get<std::string>();
      r.embedding = j.at("embedding").get<std::vector<double>>();
      records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw FormatError("phrases: line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return ingest_records(std::move(records), grid);
}

// --- clustering ------------------------------------------------------------------

Clustering cluster_phrases(const std::vector<PhraseRecord>& records, std::size_t min_cluster_size,
                           std::size_t min_samples) {
  const std::size_t n = records.size();
  if (n < min_cluster_size)
    throw InsufficientDataError("cluster_phrases: " + std::to_string(n) + " records, need at least " +
                                std::to_string(min_cluster_size));
  const std::size_t dim = records.front().embedding.size();
  std::vector<double> points;
  points.reserve(n * dim);
  for (const auto& r : records) points.insert(points.end(), r.embedding.begin(), r.embedding.end());

  const auto dist = hdbscan::cosine_distance_matrix(points, n, dim);
  const auto result = hdbscan::cluster(dist, n, {min_cluster_size, min_samples});

  Clustering out;
  out.labels = result.labels;
  out.clusters.resize(result.n_clusters);
  for (std::size_t c = 0; c < result.n_clusters; ++c) {
    auto& cl = out.clusters[c];
    cl.id = static_cast<int>(c);
    cl.label = "concept_" + std::to_string(c);
    cl.centroid.assign(dim, 0.0);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (result.labels[i] < 0) continue;
    auto& cl = out.clusters[static_cast<std::size_t>(result.labels[i])];
    ++cl.member_count;
    for (std::size_t k = 0; k < dim; ++k) cl.centroid[k] += points[i * dim + k];
  }
  for (auto& cl : out.clusters) {
    for (double& x : cl.centroid) x /= static_cast<double>(cl.member_count);
    double s = 0.0;
    for (double x : cl.centroid) s += x * x;
    const double nrm = std::sqrt(s);
    if (nrm > kNormFloor)
      for (double& x : cl.centroid) x /= nrm;
  }
  return out;
}

int categorize_phrase(std::span<const double> embedding, const std::vector<ConceptCluster>& clusters) {
  if (clusters.empty()) throw ContractError("categorize_phrase: no clusters");
  int best = 0;
  double best_cos = cosine(embedding, clusters[0].centroid);
  for (std::size_t c = 1; c < clusters.size(); ++c) {
    const double v = cosine(embedding, clusters[c].centroid);
    if (v > best_cos) {
      best_cos = v;
      best = static_cast<int>(c);
    }
  }
  return best;
}

HeadDistribution head_distribution(const std::vector<const PhraseRecord*>& head_records,
                                   const std::vector<bool>& noise_flags,
                                   const std::vector<ConceptCluster>& clusters) {
  HeadDistribution d;
  d.p.assign(clusters.size(), 0.0);
  std::vector<std::size_t> counts(clusters.size(), 0);
  for (std::size_t i = 0; i < head_records.size(); ++i) {
    if (i < noise_flags.size() && noise_flags[i]) {
      ++d.noise;
      continue;
    }
    ++counts[static_cast<std::size_t>(categorize_phrase(head_records[i]->embedding, clusters))];
    ++d.assigned;
  }
  if (d.assigned > 0)
    for (std::size_t c = 0; c < clusters.size(); ++c)
      d.p[c] = static_cast<double>(counts[c]) / static_cast<double>(d.assigned);
  return d;
}

double concept_entropy(std::span<const double> p) {
  double total = 0.0;
  for (double v : p) {
    if (v < 0.0) throw DomainError("concept_entropy: negative probability " + std::to_string(v));
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw DomainError("concept_entropy: probabilities sum to " + std::to_string(total));
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log2(v);
  return h;
}

int dominant_index(std::span<const double> p) {
  int best = 0;
  for (std::size_t i = 1; i < p.size(); ++i)
    if (p[i] > p[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

// --- roles -----------------------------------------------------------------------

std::string role_name(RoleKind kind) {
  switch (kind) {
    case RoleKind::kCoreAttribute: return "core_attribute";
    case RoleKind::kOtherSpecialized: return "other_specialized";
    case RoleKind::kGeneralization: return "generalization";
    case RoleKind::kMixed: return "mixed";
  }
  return "mixed";
}

RoleKind role_from_name(const std::string& name) {
  if (name == "core_attribute") return RoleKind::kCoreAttribute;
  if (name == "other_specialized") return RoleKind::kOtherSpecialized;
  if (name == "generalization") return RoleKind::kGeneralization;
  if (name == "mixed") return RoleKind::kMixed;
  throw FormatError("unknown head role '" + name + "'");
}

void RoleMap::require_coverage(int first_layer, int last_layer, int heads) const {
  for (int l = first_layer; l <= last_layer; ++l)
    for (int h = 0; h < heads; ++h)
      if (!entries_.count({l, h})) throw CoverageError("role map has no entry for head " + head_str({l, h}));
}

bool RoleMap::same_roles(const RoleMap& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (const auto& [k, e] : entries_) {
    const auto* o = other.find(k);
    if (!o || !(o->role == e.role)) return false;
  }
  return true;
}

double nearest_rank(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw ContractError("nearest_rank: empty list");
  // The epsilon keeps q * n = 2.0000000000000004 from rounding up a rank.
  const double rank = std::ceil(q * static_cast<double>(sorted.size()) - 1e-9);
  const auto idx = static_cast<std::size_t>(std::clamp(rank, 1.0, static_cast<double>(sorted.size()))) - 1;
  return sorted[idx];
}

RoleMap assign_roles(const std::vector<HeadProfile>& profiles, const RoleRules& rules) {
  if (!(rules.q_low > 0.0 && rules.q_low < rules.q_high && rules.q_high < 1.0))
    throw ConfigError("assign_roles: need 0 < q_low < q_high < 1");
  if (profiles.empty()) throw ContractError("assign_roles: no head profiles");
  for (const auto& [id, label] : rules.core_attribute_map)
    if (std::find(rules.attributes.begin(), rules.attributes.end(), label) == rules.attributes.end())
      throw ConfigError("core_attribute_map: label '" + label + "' is not in the attribute set");

  std::vector<const HeadProfile*> ranked;
  for (const auto& p : profiles)
    if (!p.unassigned) ranked.push_back(&p);
  std::sort(ranked.begin(), ranked.end(), [](const HeadProfile* a, const HeadProfile* b) {
    return std::tie(a->entropy, a->key) < std::tie(b->entropy, b->key);
  });

  std::set<HeadKey> low, high;
  if (!ranked.empty()) {
    const std::size_t n = ranked.size();
    if (rules.exact_count) {
      const auto k_low = static_cast<std::size_t>(std::ceil(rules.q_low * static_cast<double>(n) - 1e-9));
      const auto k_high = static_cast<std::size_t>(std::ceil((1.0 - rules.q_high) * static_cast<double>(n) - 1e-9));
      for (std::size_t i = 0; i < std::min(k_low, n); ++i) low.insert(ranked[i]->key);
      for (std::size_t i = 0; i < std::min(k_high, n); ++i) {
        const auto key = ranked[n - 1 - i]->key;
        if (!low.count(key)) high.insert(key);
      }
    } else {
      std::vector<double> sorted;
      for (const auto* p : ranked) sorted.push_back(p->entropy);
      const double lo = nearest_rank(sorted, rules.q_low);
      const double hi = nearest_rank(sorted, rules.q_high);
      for (const auto* p : ranked) {
        if (p->entropy <= lo) low.insert(p->key);
        else if (p->entropy >= hi) high.insert(p->key);
      }
    }
  }

  RoleMap map;
  for (const auto& p : profiles) {
    RoleEntry e;
    e.profile = p;
    if (p.unassigned) {
      e.role = {RoleKind::kMixed, ""};
    } else if (low.count(p.key)) {
      auto it = rules.core_attribute_map.find(p.dominant_cluster);
      e.role = it != rules.core_attribute_map.end() ? HeadRole{RoleKind::kCoreAttribute, it->second}
                                                    : HeadRole{RoleKind::kOtherSpecialized, ""};
    } else if (high.count(p.key)) {
      e.role = {RoleKind::kGeneralization, ""};
    } else {
      e.role = {RoleKind::kMixed, ""};
    }
    map.set(p.key, std::move(e));
  }
  return map;
}

// --- pipeline --------------------------------------------------------------------

AnalysisReport analyze(const PhraseCorpus& corpus, const AnalysisOptions& options) {
  AnalysisReport report;
  report.rules = options.rules;
  report.warnings = corpus.warnings;
  report.clustering = cluster_phrases(corpus.records, options.min_cluster_size, options.min_samples);
  auto& clusters = report.clustering.clusters;
  for (const auto& [id, label] : options.rules.core_attribute_map) {
    if (id < 0 || static_cast<std::size_t>(id) >= clusters.size())
      throw ConfigError("core_attribute_map: cluster " + std::to_string(id) + " does not exist (" +
                        std::to_string(clusters.size()) + " clusters found)");
    clusters[static_cast<std::size_t>(id)].label = label;
    clusters[static_cast<std::size_t>(id)].is_core_attribute = true;
  }
  for (const auto& [id, label] : options.cluster_labels)
    if (id >= 0 && static_cast<std::size_t>(id) < clusters.size() &&
        !clusters[static_cast<std::size_t>(id)].is_core_attribute)
      clusters[static_cast<std::size_t>(id)].label = label;
  if (clusters.empty()) throw InsufficientDataError("analyze: clustering found no concept clusters");

  std::set<HeadKey> heads;
  for (const auto& [k, idx] : corpus.groups) heads.insert(k);
  if (options.grid)
    for (int l = options.grid->first_layer; l <= options.grid->last_layer; ++l)
      for (int h = 0; h < options.grid->heads; ++h) heads.insert({l, h});

  const double max_entropy = std::log2(static_cast<double>(clusters.size()));
  for (const auto& key : heads) {
    HeadProfile prof;
    prof.key = key;
    auto it = corpus.groups.find(key);
    if (it != corpus.groups.end()) {
      std::vector<const PhraseRecord*> recs;
      std::vector<bool> noise;
      for (std::size_t i : it->second) {
        recs.push_back(&corpus.records[i]);
        noise.push_back(report.clustering.labels[i] < 0);
      }
      const auto d = head_distribution(recs, noise, clusters);
      prof.phrase_count = d.assigned;
      if (d.assigned > 0) {
        prof.distribution = d.p;
        prof.entropy = concept_entropy(d.p);
        prof.dominant_cluster = dominant_index(d.p);
      }
    }
    if (prof.phrase_count == 0) {
      // No evidence: uniform placeholder, excluded from the quantile ranking.
      prof.unassigned = true;
      prof.distribution.assign(clusters.size(), 1.0 / static_cast<double>(clusters.size()));
      prof.entropy = max_entropy;
      report.warnings.push_back("head " + head_str(key) + " has no clustered phrases; assigned Mixed");
    }
    report.profiles.push_back(std::move(prof));
  }

  report.roles = assign_roles(report.profiles, options.rules);

  report.notes.push_back("entropy computed over all " + std::to_string(clusters.size()) +
                         " discovered clusters (log base 2)");
  for (const auto& [key, entry] : report.roles.entries()) {
    const auto& label = clusters[static_cast<std::size_t>(entry.profile.dominant_cluster)].label;
    const bool generic_concept = std::find(options.generalization_concepts.begin(),
                                           options.generalization_concepts.end(),
                                           label) != options.generalization_concepts.end();
    if (generic_concept && entry.role.kind != RoleKind::kGeneralization && !entry.profile.unassigned)
      report.notes.push_back("head " + head_str(key) + " is dominated by '" + label + "' but its entropy rank gives " +
                             role_name(entry.role.kind));
  }
  return report;
}

double round_significant(double v, int digits) {
  if (!std::isfinite(v) || v == 0.0) return v;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return std::strtod(buf, nullptr);
}

std::string roles_to_json(const AnalysisReport& report) {
  json j;
  j["attributes"] = report.rules.attributes;
  j["quantiles"] = {{"low", round_significant(report.rules.q_low)}, {"high", round_significant(report.rules.q_high)}};
  json clusters = json::array();
  for (const auto& c : report.clustering.clusters)
    clusters.push_back({{"id", c.id}, {"label", c.label}, {"size", c.member_count}, {"core", c.is_core_attribute}});
  j["clusters"] = clusters;
  json heads = json::array();
  for (const auto& [key, e] : report.roles.entries()) {
    json dist = json::object();
    for (std::size_t c = 0; c < e.profile.distribution.size(); ++c)
      dist[std::to_string(c)] = round_significant(e.profile.distribution[c]);
    heads.push_back({{"layer", key.layer},
                     {"head", key.head},
                     {"role", role_name(e.role.kind)},
                     {"attribute", e.role.kind == RoleKind::kCoreAttribute ? json(e.role.attribute) : json(nullptr)},
                     {"entropy", round_significant(e.profile.entropy)},
                     {"distribution", dist}});
  }
  j["heads"] = heads;
  j["notes"] = report.notes;
  return j.dump(2) + "\n";
}

RoleMap role_map_from_json(const std::string& text) {
  RoleMap map;
  try {
    const json j = json::parse(text);
    for (const auto& h : j.at("heads")) {
      RoleEntry e;
      e.profile.key = {h.at("layer").get<int>(), h.at("head").get<int>()};
      e.role.kind = role_from_name(h.at("role").get<std::string>());
      if (e.role.kind == RoleKind::kCoreAttribute) e.role.attribute = h.at("attribute").get<std::string>();
      e.profile.entropy = h.at("entropy").get<double>();
      const auto& dist = h.at("distribution");
      e.profile.distribution.assign(dist.size(), 0.0);
      for (const auto& [k, v] : dist.items()) {
        const auto idx = static_cast<std::size_t>(std::stoul(k));
        if (idx >= e.profile.distribution.size()) throw FormatError("roles.json: distribution key " + k);
        e.profile.distribution[idx] = v.get<double>();
      }
      if (!e.profile.distribution.empty()) e.profile.dominant_cluster = dominant_index(e.profile.distribution);
      map.set(e.profile.key, std::move(e));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("roles.json: ") + e.what());
  }
  return map;
}

}  // namespace dear
