#include "bucketserve/memory_model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "bucketserve/errors.hpp"

namespace bucketserve {

namespace {

using Wide = unsigned __int128;

Bytes narrow(Wide v) {
  if (v > static_cast<Wide>(std::numeric_limits<Bytes>::max()))
    throw DomainError("byte count overflows 64 bits");
  return static_cast<Bytes>(v);
}

}  // namespace

Bytes ModelConfig::bytes_per_token() const {
  return narrow(Wide{2} * static_cast<Wide>(layers) * static_cast<Wide>(heads) *
                static_cast<Wide>(head_dim) * static_cast<Wide>(bytes_per_elem));
}

void validate(const ModelConfig& m) {
  if (m.layers < 1) throw ConfigError("model.layers", "must be >= 1");
  if (m.heads < 1) throw ConfigError("model.heads", "must be >= 1");
  if (m.head_dim < 1) throw ConfigError("model.head_dim", "must be >= 1");
  if (m.bytes_per_elem != 1 && m.bytes_per_elem != 2 && m.bytes_per_elem != 4)
    throw ConfigError("model.bytes_per_elem", "must be 1, 2 or 4");
  if (m.max_seq_len < 2)
    throw ConfigError("model.max_seq_len", "must be >= 2");
}

void validate(const GpuConfig& g) {
  if (g.model_mem > g.total_mem)
    throw ConfigError("gpu.model_mem", "exceeds total_mem");
  if (!(g.reserve_fraction >= 0.0 && g.reserve_fraction < 1.0))
    throw ConfigError("gpu.reserve_fraction", "must lie in [0, 1)");
}

std::optional<ModelConfig> model_preset(const std::string& name) {
  // Layer/head counts follow the public 13B architectures; max_seq_len is
  // the advertised context window.
  if (name == "llama2-13b-like") return ModelConfig{40, 40, 128, 2, 4096};
  if (name == "opt-13b-like") return ModelConfig{40, 40, 128, 2, 2048};
  return std::nullopt;
}

std::vector<std::string> model_preset_names() {
  return {"llama2-13b-like", "opt-13b-like"};
}

Bytes kv_footprint_padded(const ModelConfig& model, Tokens s_max,
                          std::int64_t n) {
  if (s_max > model.max_seq_len)
    throw DomainError("s_max " + std::to_string(s_max) + " exceeds L_max " +
                      std::to_string(model.max_seq_len));
  if (s_max < 0 || n < 0) throw DomainError("negative length or batch size");
  return narrow(static_cast<Wide>(model.bytes_per_token()) *
                static_cast<Wide>(s_max) * static_cast<Wide>(n));
}

Bytes kv_footprint_exact(const ModelConfig& model,
                         std::span<const Tokens> lengths) {
  Wide sum = 0;
  for (Tokens s : lengths) {
    if (s > model.max_seq_len)
      throw DomainError("length " + std::to_string(s) + " exceeds L_max " +
                        std::to_string(model.max_seq_len));
    if (s < 0) throw DomainError("negative length");
    sum += static_cast<Wide>(s);
  }
  return narrow(static_cast<Wide>(model.bytes_per_token()) * sum);
}

Bytes kv_footprint(const ModelConfig& model, std::span<const Tokens> lengths,
                   MemoryAccounting mode) {
  if (mode == MemoryAccounting::Exact) return kv_footprint_exact(model, lengths);
  if (lengths.empty()) return 0;
  Tokens s_max = *std::max_element(lengths.begin(), lengths.end());
  return kv_footprint_padded(model, s_max,
                             static_cast<std::int64_t>(lengths.size()));
}

double waste_ratio(std::span<const Tokens> lengths) {
  if (lengths.empty()) throw DomainError("waste_ratio of an empty batch");
  Tokens s_max = 0;
  long double sum = 0;
  for (Tokens s : lengths) {
    if (s < 1) throw DomainError("lengths must be >= 1");
    s_max = std::max(s_max, s);
    sum += s;
  }
  long double avg = sum / static_cast<long double>(lengths.size());
  return static_cast<double>((s_max - avg) / s_max);
}

Bytes safe_memory(const GpuConfig& gpu) {
  validate(gpu);
  // The kept fraction is resolved to 1e-9 so that e.g. 0.9 * 10 GiB is exact.
  constexpr std::int64_t kScale = 1'000'000'000;
  auto kept = static_cast<std::int64_t>(
      std::llround((1.0 - gpu.reserve_fraction) * static_cast<double>(kScale)));
  Wide remain = gpu.total_mem - gpu.model_mem;
  return narrow(remain * static_cast<Wide>(kept) / static_cast<Wide>(kScale));
}

Tokens token_budget(const ModelConfig& model, Bytes safe) {
  return static_cast<Tokens>(safe / model.bytes_per_token());
}

Tokens token_budget(const ModelConfig& model, const GpuConfig& gpu) {
  return token_budget(model, safe_memory(gpu));
}

std::size_t max_safe_batch(std::span<const Tokens> lengths, Tokens budget) {
  Tokens sum = 0;
  std::size_t n = 0;
  for (Tokens s : lengths) {
    if (sum + s > budget) break;
    sum += s;
    ++n;
  }
  return n;
}

LengthHistogram::LengthHistogram(std::vector<double> edges,
                                 std::vector<double> counts)
    : edges_(std::move(edges)), counts_(std::move(counts)) {
  if (edges_.size() < 2 || counts_.size() != edges_.size() - 1)
    throw DomainError("histogram needs edges.size() == counts.size() + 1 >= 2");
  for (std::size_t i = 0; i + 1 < edges_.size(); ++i)
    if (!(edges_[i] < edges_[i + 1]))
      throw DomainError("histogram edges must be strictly increasing");
  points_.resize(counts_.size());
  for (std::size_t i = 0; i < counts_.size(); ++i) {
    if (!(counts_[i] >= 0)) throw DomainError("histogram counts must be >= 0");
    points_[i] = 0.5 * (edges_[i] + edges_[i + 1]);
    total_ += counts_[i];
  }
}

LengthHistogram LengthHistogram::from_samples(std::span<const Tokens> samples) {
  if (samples.empty()) throw DomainError("histogram from an empty sample");
  std::map<Tokens, double> tally;
  for (Tokens s : samples) tally[s] += 1.0;
  LengthHistogram h;
  for (auto& [value, count] : tally) {
    h.edges_.push_back(static_cast<double>(value));
    h.points_.push_back(static_cast<double>(value));
    h.counts_.push_back(count);
    h.total_ += count;
  }
  h.edges_.push_back(h.edges_.back() + 1.0);
  return h;
}

double LengthHistogram::density(double s) const {
  if (total_ <= 0 || s < edges_.front() || s >= edges_.back()) return 0.0;
  auto it = std::upper_bound(edges_.begin(), edges_.end(), s);
  std::size_t i = static_cast<std::size_t>(it - edges_.begin()) - 1;
  return counts_[i] / (total_ * (edges_[i + 1] - edges_[i]));
}

double LengthHistogram::mass(double low, double up, bool inclusive_up) const {
  double m = 0.0;
  for (std::size_t i = 0; i < points_.size(); ++i) {
    double p = points_[i];
    if (p >= low && (p < up || (inclusive_up && p == up))) m += counts_[i];
  }
  return m;
}

std::optional<double> LengthHistogram::conditional_mean(double low, double up,
                                                        bool inclusive_up) const {
  double m = 0.0, first = 0.0;
  for (std::size_t i = 0; i < points_.size(); ++i) {
    double p = points_[i];
    if (p >= low && (p < up || (inclusive_up && p == up))) {
      m += counts_[i];
      first += counts_[i] * p;
    }
  }
  if (m <= 0) return std::nullopt;
  return first / m;
}

double expected_waste(const LengthHistogram& hist,
                      std::span<const TokenRange> buckets) {
  if (hist.total() <= 0) throw DomainError("histogram has no mass");
  if (buckets.empty()) throw DomainError("no buckets");
  for (std::size_t i = 0; i < buckets.size(); ++i) {
    if (buckets[i].low >= buckets[i].up)
      throw DomainError("empty bucket [" + std::to_string(buckets[i].low) +
                        ", " + std::to_string(buckets[i].up) + ")");
    if (i + 1 < buckets.size() && buckets[i].up != buckets[i + 1].low)
      throw DomainError("buckets not contiguous: gap or overlap at [" +
                        std::to_string(buckets[i].up) + ", " +
                        std::to_string(buckets[i + 1].low) + ")");
  }
  const auto& pts = hist.points();
  const auto& counts = hist.counts();
  double acc = 0.0;
  std::size_t b = 0;
  // Points are sorted, so the bucket cursor only moves forward.
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (counts[i] <= 0) continue;
    double s = pts[i];
    if (s < buckets.front().low || s >= buckets.back().up)
      throw DomainError("support not covered: mass at length " +
                        std::to_string(s) + " outside [" +
                        std::to_string(buckets.front().low) + ", " +
                        std::to_string(buckets.back().up) + ")");
    while (!buckets[b].contains(s)) ++b;
    acc += counts[i] * (1.0 - s / static_cast<double>(buckets[b].up));
  }
  return acc / hist.total();
}

}  // namespace bucketserve
