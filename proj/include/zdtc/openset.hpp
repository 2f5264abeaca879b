#pragma once

#include "zdtc/gbt.hpp"
#include "zdtc/linalg.hpp"
#include "zdtc/nn.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

namespace zdtc {

enum class DetectorKind { InputCluster, FvCluster, SoftMax, OpenMax, GradBPL1, GradBPL2 };

enum class Direction { RejectIfAbove, RejectIfBelow };

enum class FeatureSpace { Input, Fv };

/// Which delta GradBP measures: the feature layer (delta^{L-1}) or the logits (delta^L).
enum class GradLayer { Feature, Output };

std::string_view to_string(DetectorKind kind);
DetectorKind parse_detector_kind(std::string_view name);
Direction direction_of(DetectorKind kind);

// ---------------------------------------------------------------- clustering

/// K-means centroids stored one per column (dim x C).
struct ClusterBank {
  FeatureSpace space = FeatureSpace::Input;
  Matrix centroids;
  double inertia = 0.0;
  double seed_inertia = 0.0;
  int iterations = 0;

  int size() const { return static_cast<int>(centroids.cols()); }
  int dim() const { return static_cast<int>(centroids.rows()); }
};

/// Lloyd iterations from k-means++ seeding; stops after 100 iterations or
/// when no centroid moves more than 1e-6. points has one sample per row.
ClusterBank fit_clusters(const Matrix& points, int clusters, std::uint64_t seed,
                         FeatureSpace space = FeatureSpace::Input);

/// Euclidean distance to the closest centroid.
double nearest_centroid_distance(const ClusterBank& bank, const Eigen::Ref<const Vector>& point);
int nearest_centroid(const ClusterBank& bank, const Eigen::Ref<const Vector>& point);

double score_input_cluster(const ClusterBank& bank, const Eigen::Ref<const Vector>& x);
double score_fv_cluster(const ClusterBank& bank, const ActivationTrace& trace);

// ------------------------------------------------------------------ softmax

/// Unknown level -max_k P(y=k|x), in [-1, -1/K].
double score_softmax(const ActivationTrace& trace);

// ------------------------------------------------------------------ openmax

struct Weibull {
  double shape = 1.0;
  double scale = 1.0;
  double location = 0.0;

  double cdf(double x) const;
};

/// Maximum-likelihood shape and scale with the location pinned at 0.
Weibull fit_weibull(std::span<const double> samples);

struct WeibullBank {
  std::vector<Vector> mav;     // mean logit vector of correctly classified samples, per class
  std::vector<Weibull> tails;  // fit on the tail_size largest distances to the mav
  int tail_size = 20;
  int alpha = 10;

  int classes() const { return static_cast<int>(mav.size()); }
};

/// logits: one row per training sample; labels are 1-based.
WeibullBank fit_weibull_bank(const Matrix& logits, std::span<const int> labels, int classes, int tail_size = 20,
                             int alpha = 10);

struct OpenMaxRevision {
  Vector v_hat;
  double v_hat0 = 0.0;
  Vector probs_prime;  // length K + 1; entry 0 is the synthetic unknown class
};

OpenMaxRevision openmax_revise(const WeibullBank& bank, const ActivationTrace& trace);

struct OpenMaxScore {
  bool reject_hint = false;
  double ul = 0.0;        // v_hat0
  int top_class = 0;      // argmax over P', 0 = unknown
  double top_prob = 0.0;  // P'(y = top_class | x)
};

OpenMaxScore score_openmax(const WeibullBank& bank, const ActivationTrace& trace, double epsilon = 0.0);

// ------------------------------------------------------------------- gradbp

/// Norm of the shadow backpropagation delta taken against the predicted label.
double score_gradbp(const CnnModel& model, const ActivationTrace& trace, NormKind norm = NormKind::L2,
                    GradLayer layer = GradLayer::Feature);

// -------------------------------------------------------------- calibration

using DetectorState = std::variant<std::monostate, ClusterBank, WeibullBank>;

struct CalibratedDetector {
  DetectorKind kind = DetectorKind::SoftMax;
  double epsilon = 0.0;
  Direction direction = Direction::RejectIfBelow;
  DetectorState state;
  GradLayer grad_layer = GradLayer::Feature;
  double target_fpr = 0.0;
  /// Wall time of bank fitting plus calibration; not serialized.
  double bootstrap_seconds = 0.0;

  /// OpenMax decisions below zero mean the unknown class won; those always reject.
  bool rejects(double decision) const {
    if (kind == DetectorKind::OpenMax && decision < 0.0) return true;
    return direction == Direction::RejectIfAbove ? decision > epsilon : decision < epsilon;
  }
};

/// Linear-interpolation quantile, q in [0, 1].
double quantile(std::span<const double> values, double q);

/// Threshold at the (1 - target_fpr) quantile for reject-if-above kinds and
/// the target_fpr quantile for reject-if-below kinds.
CalibratedDetector calibrate(DetectorKind kind, std::span<const double> scores, double target_fpr,
                             DetectorState state = {});

// --------------------------------------------------------------- detection

using ClassifierRef = std::variant<const CnnModel*, const GbtModel*>;

/// Everything a detector may read about one input.
struct Observation {
  Vector x;
  Vector probs;
  std::optional<ActivationTrace> trace;  // present for CNN classifiers
};

Observation observe(const ClassifierRef& classifier, Vector x);

/// Throws std::invalid_argument naming the mismatch (e.g. GradBP over GBT).
void check_compatible(DetectorKind kind, const ClassifierRef& classifier);

/// Score in the detector's own direction. SoftMax: max probability. OpenMax:
/// P'(c') when c' is a known class, -1 when the unknown class wins.
/// Cluster and GradBP kinds: the distance or norm.
double decision_score(DetectorKind kind, const DetectorState& state, const ClassifierRef& classifier,
                      const Observation& obs, GradLayer layer = GradLayer::Feature);

struct Detection {
  int label = 0;  // 1-based class, 0 when rejected
  bool rejected = false;
};

Detection detect(const CalibratedDetector& detector, const ClassifierRef& classifier, const Observation& obs);
Detection detect(const CalibratedDetector& detector, const ClassifierRef& classifier,
                 const Eigen::Ref<const Vector>& x);

struct DetectorFitOptions {
  int clusters_per_class = 5;
  int tail_size = 20;
  int openmax_alpha = 10;
  std::uint64_t seed = 42;
  GradLayer grad_layer = GradLayer::Feature;
};

/// Fits whatever state the kind needs on known training observations.
DetectorState fit_detector_state(DetectorKind kind, const ClassifierRef& classifier,
                                 std::span<const Observation> train, std::span<const int> labels,
                                 const DetectorFitOptions& options);

/// Fits, scores the same observations, and calibrates. Every label must be a
/// known class (>= 1); zero-day flows never reach calibration.
CalibratedDetector fit_detector(DetectorKind kind, const ClassifierRef& classifier,
                                std::span<const Observation> train, std::span<const int> labels,
                                double target_fpr, const DetectorFitOptions& options);

/// Fits the state on train and sets the threshold from scores on a separate
/// known-only calibration set.
CalibratedDetector fit_detector(DetectorKind kind, const ClassifierRef& classifier,
                                std::span<const Observation> train, std::span<const int> labels,
                                std::span<const Observation> calibration, double target_fpr,
                                const DetectorFitOptions& options);

nlohmann::json detector_to_json(const CalibratedDetector& detector);
CalibratedDetector detector_from_json(const nlohmann::json& doc);

}  // namespace zdtc
