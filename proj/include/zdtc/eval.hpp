#pragma once

#include "zdtc/gbt.hpp"
#include "zdtc/linalg.hpp"
#include "zdtc/nn.hpp"
#include "zdtc/openset.hpp"

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace zdtc {

// --------------------------------------------------------------------- ROC

struct RocPoint {
  double epsilon = 0.0;
  double tpr = 0.0;  // unknown flows rejected
  double fpr = 0.0;  // known flows rejected
  double tnr = 0.0;
  double fnr = 0.0;
};

/// Points sorted by epsilon, from the -inf sentinel to the +inf sentinel.
struct RocCurve {
  std::vector<RocPoint> points;
  double auc = 0.0;
};

RocCurve roc(std::span<const double> scores_known, std::span<const double> scores_unknown, Direction direction);

/// `epsilon,tpr,fpr,tnr,fnr` with a header row.
void write_roc_csv(std::ostream& out, const RocCurve& curve);

// ------------------------------------------------------------ fixed tuning

struct FixedTuning {
  double flow_tpr = 0.0;
  double class_tpr = 0.0;  // classes with at least one rejected flow / U
  double fpr = 0.0;        // NaN when no known flows were given
  int unknown_flows = 0;
  int unknown_classes = 0;
  int detected_classes = 0;
};

FixedTuning fixed_tuning_report(const std::vector<bool>& rejected_unknown, std::span<const int> unknown_origin,
                                const std::vector<bool>& rejected_known = {});

// ----------------------------------------------------------- unknown level

inline constexpr double kBhattacharyyaSaturation = 50.0;

struct UnknownLevelReport {
  std::vector<double> hist_known;
  std::vector<double> hist_unknown;
  double intersection = 0.0;
  double bhattacharyya = 0.0;  // kBhattacharyyaSaturation when the supports are disjoint
  int bins = 0;
  double lo = 0.0;
  double hi = 0.0;
};

/// Equal-width histograms over the union range of both samples.
UnknownLevelReport unknown_level_report(std::span<const double> ul_known, std::span<const double> ul_unknown,
                                        int bins = 50);

// -------------------------------------------------------- cluster quality

/// Sum over clusters of the dominant label count, over N.
double purity(std::span<const int> assignments, std::span<const int> labels);

/// Mean silhouette; a point alone in its cluster has a = 0 and scores 1.
/// When N exceeds sample_cap, a seeded sample of sample_cap points is scored
/// (distances still run against every point).
double silhouette(const Matrix& points, std::span<const int> assignments, int sample_cap = 2000,
                  std::uint64_t seed = 0);

struct ClusterQuality {
  double purity = 0.0;
  double silhouette = 0.0;
};

// -------------------------------------------------------------------- cost

struct CostEntry {
  std::string detector;
  double bootstrap_seconds = 0.0;
  double inference_micros = 0.0;  // median per-sample scoring latency
  int samples = 0;
};

struct CostReport {
  std::vector<CostEntry> entries;

  const CostEntry& at(std::string_view detector) const;
};

inline constexpr int kMinBenchSamples = 1000;

/// Times decision_score alone (the classifier forward pass is shared by every
/// detector and excluded). All detectors see the same stream, cycled to n.
CostReport bench_detectors(std::span<const CalibratedDetector> detectors, const ClassifierRef& classifier,
                           std::span<const Observation> stream, int n);

// -------------------------------------------------------------- complexity

struct ComplexityReport {
  long w_dl = 0;
  int k_dl = 0;
  double w_dl_per_class = 0.0;
  long w_ml = 0;
  int k_ml = 0;
  double w_ml_per_class = 0.0;
};

ComplexityReport complexity_report(const CnnModel* cnn, const GbtModel* gbt);

// ------------------------------------------------------------ serialization

nlohmann::json to_json(const RocCurve& curve);
nlohmann::json to_json(const FixedTuning& report);
nlohmann::json to_json(const UnknownLevelReport& report);
nlohmann::json to_json(const ClusterQuality& quality);
nlohmann::json to_json(const CostReport& report);
nlohmann::json to_json(const ComplexityReport& report);

}  // namespace zdtc
