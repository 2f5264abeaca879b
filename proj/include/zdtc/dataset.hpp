#pragma once

#include "zdtc/linalg.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace zdtc {

inline constexpr int kDefaultMtu = 1500;

enum class Proto { TCP, UDP };

/// Fixed model input length: first 100 packets for TCP, 10 for UDP.
constexpr int series_cap(Proto proto) { return proto == Proto::TCP ? 100 : 10; }

std::string_view to_string(Proto proto);
Proto parse_proto(std::string_view text);

struct FlowRecord {
  std::string flow_id;
  Proto proto = Proto::TCP;
  /// 1..K for known classes; 0 marks a zero-day flow in evaluation sets.
  int label = 0;
  /// Signed packet sizes (+ upstream, - downstream), zero-padded to series_cap(proto).
  std::vector<int> series;
  /// Number of real packets before the padding.
  int series_len = 0;
  /// Class the flow was drawn from; equals label for known flows.
  int origin_class = 0;
};

struct DatasetSplit {
  std::vector<FlowRecord> train;
  std::vector<FlowRecord> test_known;
  std::vector<FlowRecord> test_unknown;
  int known_classes = 0;
  int unknown_classes = 0;

  /// Throws DataError when the split breaks the known/unknown contract.
  void validate() const;
};

struct GeneratorConfig {
  int class_count = 10;
  int unknown_class_count = 10;
  int modes_per_class = 2;
  double jitter_sigma = 100.0;
  double zipf_exponent = 0.5;
  int flows_per_class_base = 500;
  std::uint64_t seed = 42;
  /// Fraction of classes carried over TCP.
  double proto_mix = 1.0;
  int mtu = kDefaultMtu;
  /// Share of each known class held out into test_known.
  double test_fraction = 0.3;
  /// Shared protocol skeletons that class prototypes are derived from.
  int archetype_count = 4;
  /// Share of zero-day classes built on skeletons no known class uses.
  double novel_share = 0.5;
  /// Fraction of packet positions a class re-draws away from its archetype.
  double class_divergence = 0.2;
  /// Fraction of positions a mode re-draws away from its class base.
  double mode_divergence = 0.15;
  /// Each flow keeps a uniform fraction in [1 - length_spread, 1] of its
  /// prototype's packets; the remainder is padding.
  double length_spread = 0.5;
  /// Each flow is delayed by a uniform 0..shift_max leading control-sized packets.
  int shift_max = 12;
  int min_flows_per_class = 20;

  void validate() const;
};

/// Affine map s -> (s/mtu + 1)/2; padding 0 lands on 0.5.
Vector normalize(std::span<const int> series, int mtu = kDefaultMtu);

/// Inverse of normalize, rounding to the nearest integer size.
std::vector<int> denormalize(const Eigen::Ref<const Vector>& values, int mtu = kDefaultMtu);

/// Rows are normalized series; all records must share one protocol.
Matrix feature_matrix(std::span<const FlowRecord> records, int mtu = kDefaultMtu);

std::vector<FlowRecord> read_flow_log(std::istream& in, int mtu = kDefaultMtu);
std::vector<FlowRecord> load_flow_log(const std::filesystem::path& path, int mtu = kDefaultMtu);

/// Writes the flow-log CSV; the header carries max series_cap over the records.
void write_flow_log(std::ostream& out, std::span<const FlowRecord> records);
void save_flow_log(const std::filesystem::path& path, std::span<const FlowRecord> records);

DatasetSplit generate(const GeneratorConfig& cfg);

/// Fresh known-class flows from the same class prototypes as generate(cfg),
/// drawn from an independent stream and spread by the same Zipf weights.
std::vector<FlowRecord> generate_known_holdout(const GeneratorConfig& cfg, int flows);

/// 1 - sqrt(2K / (2K + U)).
double openness(int known, int unknown);

}  // namespace zdtc
