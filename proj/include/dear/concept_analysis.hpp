#pragma once

// Head-role identification: phrase ingestion, concept clustering, per-head
// concept distributions, Concept Entropy, and quantile role assignment.

#include <compare>
#include <cstddef>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dear {

inline const std::vector<std::string> kDefaultAttributes = {"color", "shape", "texture", "object", "location"};

struct HeadKey {
  int layer = 0;  // 1-based
  int head = 0;   // 0-based
  auto operator<=>(const HeadKey&) const = default;
};

struct PhraseRecord {
  int layer = 1;
  int head = 0;
  std::string phrase;
  std::vector<double> embedding;  // unit norm after ingestion
};

struct PhraseCorpus {
  std::vector<PhraseRecord> records;
  std::map<HeadKey, std::vector<std::size_t>> groups;  // record indices per head
  std::size_t dim = 0;
  std::vector<std::string> warnings;
};

/// Optional head grid: heads in layers [first_layer, last_layer] x [0, heads).
struct HeadGrid {
  int first_layer = 1;
  int last_layer = 1;
  int heads = 1;
  bool contains(const HeadKey& k) const {
    return k.layer >= first_layer && k.layer <= last_layer && k.head >= 0 && k.head < heads;
  }
};

/// Parses phrases.jsonl ({"layer", "head", "phrase", "embedding"} per line),
/// L2-normalizes embeddings and groups them by head. Grid heads without any
/// record produce a warning (they are later forced to Mixed).
PhraseCorpus ingest_phrases(std::istream& in, const std::optional<HeadGrid>& grid = std::nullopt);
PhraseCorpus ingest_records(std::vector<PhraseRecord> records, const std::optional<HeadGrid>& grid = std::nullopt);

struct ConceptCluster {
  int id = 0;
  std::string label;
  std::vector<double> centroid;  // unit-norm mean of member embeddings
  std::size_t member_count = 0;
  bool is_core_attribute = false;
};

struct Clustering {
  std::vector<ConceptCluster> clusters;
  std::vector<int> labels;  // per record, -1 = noise
};

/// HDBSCAN over cosine distance. Cluster labels default to "concept_<id>".
Clustering cluster_phrases(const std::vector<PhraseRecord>& records, std::size_t min_cluster_size,
                           std::size_t min_samples);

/// Index of the centroid with maximal cosine similarity; ties go to the lowest id.
int categorize_phrase(std::span<const double> embedding, const std::vector<ConceptCluster>& clusters);

struct HeadDistribution {
  std::vector<double> p;     // over clusters; all zeros when every phrase is noise
  std::size_t assigned = 0;  // phrases counted (noise excluded)
  std::size_t noise = 0;
};

/// Fraction of a head's non-noise phrases categorized to each cluster.
/// `noise_flags[i]` marks record i of `head_records` as clustering noise.
HeadDistribution head_distribution(const std::vector<const PhraseRecord*>& head_records,
                                   const std::vector<bool>& noise_flags,
                                   const std::vector<ConceptCluster>& clusters);

/// Shannon entropy in bits with 0 log 0 = 0. Requires sum(p) = 1 within 1e-9
/// and no negative entry (DomainError otherwise).
double concept_entropy(std::span<const double> p);

struct HeadProfile {
  HeadKey key;
  std::vector<double> distribution;
  double entropy = 0.0;
  int dominant_cluster = 0;
  std::size_t phrase_count = 0;
  bool unassigned = false;  // no phrase reached a cluster
};

/// argmax with ties resolved to the lowest index.
int dominant_index(std::span<const double> p);

enum class RoleKind { kCoreAttribute, kOtherSpecialized, kGeneralization, kMixed };

struct HeadRole {
  RoleKind kind = RoleKind::kMixed;
  std::string attribute;  // set for kCoreAttribute only
  bool operator==(const HeadRole&) const = default;
};

std::string role_name(RoleKind kind);
RoleKind role_from_name(const std::string& name);

struct RoleEntry {
  HeadRole role;
  HeadProfile profile;
};

class RoleMap {
 public:
  void set(const HeadKey& key, RoleEntry entry) { entries_[key] = std::move(entry); }
  const RoleEntry* find(const HeadKey& key) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? nullptr : &it->second;
  }
  const std::map<HeadKey, RoleEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  /// Throws CoverageError naming the first head of layers [first, last] x [0, heads) that is missing.
  void require_coverage(int first_layer, int last_layer, int heads) const;

  bool same_roles(const RoleMap& other) const;

 private:
  std::map<HeadKey, RoleEntry> entries_;
};

struct RoleRules {
  double q_low = 0.2;
  double q_high = 0.8;
  std::vector<std::string> attributes = kDefaultAttributes;
  std::map<int, std::string> core_attribute_map;  // cluster id -> attribute label
  /// When set, exactly ceil(q * n) heads are cut at each end, ordered by
  /// (entropy, layer, head); otherwise every head tied with the boundary value is included.
  bool exact_count = false;
};

/// Nearest-rank quantile of an ascending list: element ceil(q * n) - 1.
double nearest_rank(std::span<const double> sorted, double q);

/// Low-entropy heads become CoreAttribute (dominant cluster bound to an
/// attribute) or OtherSpecialized; high-entropy heads become Generalization;
/// the rest, and heads without assigned phrases, are Mixed.
RoleMap assign_roles(const std::vector<HeadProfile>& profiles, const RoleRules& rules);

struct AnalysisOptions {
  std::size_t min_cluster_size = 5;
  std::size_t min_samples = 5;
  RoleRules rules;
  std::map<int, std::string> cluster_labels;  // optional names for non-core clusters
  std::vector<std::string> generalization_concepts = {"style"};
  std::optional<HeadGrid> grid;
};

struct AnalysisReport {
  Clustering clustering;
  std::vector<HeadProfile> profiles;
  RoleMap roles;
  std::vector<std::string> warnings;
  std::vector<std::string> notes;
  RoleRules rules;
};

/// End-to-end: cluster, categorize, profile every head, assign roles.
AnalysisReport analyze(const PhraseCorpus& corpus, const AnalysisOptions& options);

/// roles.json text: sorted keys, floats rounded to 12 significant digits.
std::string roles_to_json(const AnalysisReport& report);

/// Loads the head roles back from roles.json text.
RoleMap role_map_from_json(const std::string& text);

/// Rounds to `digits` significant decimal digits (stable serialization).
double round_significant(double v, int digits = 12);

}  // namespace dear
