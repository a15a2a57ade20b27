#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bucketserve/request.hpp"

namespace bucketserve {

struct ModelConfig {
  std::int64_t layers = 40;
  std::int64_t heads = 40;
  std::int64_t head_dim = 128;
  std::int64_t bytes_per_elem = 2;
  Tokens max_seq_len = 4096;

  // 2 * L * H * D * B: KV bytes held per token of context.
  Bytes bytes_per_token() const;
  bool operator==(const ModelConfig&) const = default;
};

struct GpuConfig {
  Bytes total_mem = 40ULL << 30;
  Bytes model_mem = 26ULL << 30;
  double reserve_fraction = 0.10;
  bool operator==(const GpuConfig&) const = default;
};

// Throws ConfigError naming the offending field.
void validate(const ModelConfig& model);
void validate(const GpuConfig& gpu);

// Named approximations of common 13B-class shapes. These are not measured
// values; see README.
std::optional<ModelConfig> model_preset(const std::string& name);
std::vector<std::string> model_preset_names();

enum class MemoryAccounting { Padded, Exact };

// 2*L*H*D*S_max*B*N. Throws DomainError if s_max > L_max.
Bytes kv_footprint_padded(const ModelConfig& model, Tokens s_max,
                          std::int64_t n);

// 2*L*H*D*B*sum(lengths).
Bytes kv_footprint_exact(const ModelConfig& model, std::span<const Tokens> lengths);

// Footprint of a batch under the selected accounting mode.
Bytes kv_footprint(const ModelConfig& model, std::span<const Tokens> lengths,
                   MemoryAccounting mode);

// (S_max - S_avg) / S_max. Throws DomainError on an empty list.
double waste_ratio(std::span<const Tokens> lengths);

// floor((1 - reserve_fraction) * (total_mem - model_mem)).
Bytes safe_memory(const GpuConfig& gpu);

// floor(safe_memory / bytes_per_token).
Tokens token_budget(const ModelConfig& model, const GpuConfig& gpu);
Tokens token_budget(const ModelConfig& model, Bytes safe);

// Largest N such that the first N lengths sum to at most `budget`.
std::size_t max_safe_batch(std::span<const Tokens> lengths, Tokens budget);

// Half-open token interval [low, up).
struct TokenRange {
  Tokens low = 0;
  Tokens up = 0;
  bool contains(double s) const { return low <= s && s < up; }
  bool operator==(const TokenRange&) const = default;
};

// Empirical length distribution. Each bin [edge_i, edge_{i+1}) carries a
// count and a representative length: the bin midpoint for general bins, or
// the exact sample value for histograms built from samples.
class LengthHistogram {
 public:
  // Bins with midpoint representatives. Edges strictly increasing,
  // counts.size() == edges.size() - 1, counts >= 0.
  LengthHistogram(std::vector<double> edges, std::vector<double> counts);

  // Unit bins [s, s+1) with representative s, one per distinct sample.
  static LengthHistogram from_samples(std::span<const Tokens> samples);

  std::size_t bins() const { return counts_.size(); }
  const std::vector<double>& edges() const { return edges_; }
  const std::vector<double>& counts() const { return counts_; }
  const std::vector<double>& points() const { return points_; }
  double total() const { return total_; }

  // Empirical density at s (count / (total * bin width)); 0 outside.
  double density(double s) const;

  // Mass whose representative lies in [low, up) (or [low, up] if
  // `inclusive_up`).
  double mass(double low, double up, bool inclusive_up = false) const;

  // Conditional mean of S over representatives in [low, up) (or [low, up]).
  // Empty interval -> nullopt.
  std::optional<double> conditional_mean(double low, double up,
                                         bool inclusive_up = false) const;

 private:
  LengthHistogram() = default;

  std::vector<double> edges_;
  std::vector<double> counts_;
  std::vector<double> points_;
  double total_ = 0.0;
};

// Sum over buckets of the mass-weighted (1 - S/U_b), normalized by total
// mass. Buckets must be contiguous, disjoint and cover every point with
// positive mass; otherwise DomainError describing the gap.
double expected_waste(const LengthHistogram& hist,
                      std::span<const TokenRange> buckets);

}  // namespace bucketserve
