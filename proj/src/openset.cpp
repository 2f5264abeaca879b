#include "zdtc/openset.hpp"

#include "zdtc/error.hpp"
#include "zdtc/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace zdtc {

namespace {

constexpr int kMaxLloydIterations = 100;
constexpr double kCentroidTolerance = 1e-6;
constexpr double kUnknownWins = -1.0;

double squared_inertia(const Matrix& points, const Matrix& centroids, std::vector<int>* assignment) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    Eigen::Index best = 0;
    const double d2 = (centroids.colwise() - points.row(i).transpose()).colwise().squaredNorm().minCoeff(&best);
    total += d2;
    if (assignment) (*assignment)[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return total;
}

}  // namespace

std::string_view to_string(DetectorKind kind) {
  switch (kind) {
    case DetectorKind::InputCluster: return "InputCluster";
    case DetectorKind::FvCluster: return "FvCluster";
    case DetectorKind::SoftMax: return "SoftMax";
    case DetectorKind::OpenMax: return "OpenMax";
    case DetectorKind::GradBPL1: return "GradBP_L1";
    case DetectorKind::GradBPL2: return "GradBP_L2";
  }
  return "?";
}

DetectorKind parse_detector_kind(std::string_view name) {
  for (auto kind : {DetectorKind::InputCluster, DetectorKind::FvCluster, DetectorKind::SoftMax, DetectorKind::OpenMax,
                    DetectorKind::GradBPL1, DetectorKind::GradBPL2}) {
    if (name == to_string(kind)) return kind;
  }
  throw UsageError("unknown detector '" + std::string(name) +
                   "' (expected InputCluster, FvCluster, SoftMax, OpenMax, GradBP_L1 or GradBP_L2)");
}

Direction direction_of(DetectorKind kind) {
  switch (kind) {
    case DetectorKind::SoftMax:
    case DetectorKind::OpenMax:
      return Direction::RejectIfBelow;
    default:
      return Direction::RejectIfAbove;
  }
}

ClusterBank fit_clusters(const Matrix& points, int clusters, std::uint64_t seed, FeatureSpace space) {
  const auto n = points.rows();
  if (clusters < 1) throw std::invalid_argument("fit_clusters: need at least one cluster");
  if (clusters > n) {
    throw std::invalid_argument("fit_clusters: " + std::to_string(clusters) + " clusters but only " +
                                std::to_string(n) + " points");
  }
  Rng rng(seed);
  ClusterBank bank;
  bank.space = space;
  Matrix centroids(points.cols(), clusters);

  // k-means++ seeding.
  std::vector<char> chosen(static_cast<std::size_t>(n), 0);
  Eigen::Index first = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
  centroids.col(0) = points.row(first).transpose();
  chosen[static_cast<std::size_t>(first)] = 1;
  Vector d2 = (points.rowwise() - points.row(first)).rowwise().squaredNorm();
  for (int c = 1; c < clusters; ++c) {
    const double total = d2.sum();
    Eigen::Index pick = -1;
    if (total > 0.0) {
      double target = rng.uniform() * total;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        pick = i;
        target -= d2[i];
        if (target < 0.0) break;
      }
    } else {
      // Every remaining point coincides with a centroid; take the next unused one.
      for (Eigen::Index i = 0; i < n && pick < 0; ++i)
        if (!chosen[static_cast<std::size_t>(i)]) pick = i;
    }
    centroids.col(c) = points.row(pick).transpose();
    chosen[static_cast<std::size_t>(pick)] = 1;
    d2 = d2.cwiseMin((points.rowwise() - points.row(pick)).rowwise().squaredNorm());
  }

  std::vector<int> assignment(static_cast<std::size_t>(n));
  bank.seed_inertia = squared_inertia(points, centroids, &assignment);
  for (int iter = 0; iter < kMaxLloydIterations; ++iter) {
    Matrix sums = Matrix::Zero(points.cols(), clusters);
    std::vector<int> counts(static_cast<std::size_t>(clusters), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int c = assignment[static_cast<std::size_t>(i)];
      sums.col(c) += points.row(i).transpose();
      ++counts[static_cast<std::size_t>(c)];
    }
    double shift = 0.0;
    for (int c = 0; c < clusters; ++c) {
      // Empty clusters keep their previous centroid.
      if (counts[static_cast<std::size_t>(c)] == 0) continue;
      const Vector next = sums.col(c) / counts[static_cast<std::size_t>(c)];
      shift = std::max(shift, (next - centroids.col(c)).norm());
      centroids.col(c) = next;
    }
    bank.iterations = iter + 1;
    bank.inertia = squared_inertia(points, centroids, &assignment);
    if (shift < kCentroidTolerance) break;
  }
  if (bank.iterations == 0) bank.inertia = bank.seed_inertia;
  bank.centroids = std::move(centroids);
  return bank;
}

int nearest_centroid(const ClusterBank& bank, const Eigen::Ref<const Vector>& point) {
  if (point.size() != bank.dim()) {
    throw std::invalid_argument("cluster score: point has dimension " + std::to_string(point.size()) +
                                ", centroids have " + std::to_string(bank.dim()));
  }
  Eigen::Index best = 0;
  (bank.centroids.colwise() - point).colwise().squaredNorm().minCoeff(&best);
  return static_cast<int>(best);
}

double nearest_centroid_distance(const ClusterBank& bank, const Eigen::Ref<const Vector>& point) {
  if (point.size() != bank.dim()) {
    throw std::invalid_argument("cluster score: point has dimension " + std::to_string(point.size()) +
                                ", centroids have " + std::to_string(bank.dim()));
  }
  return std::sqrt((bank.centroids.colwise() - point).colwise().squaredNorm().minCoeff());
}

double score_input_cluster(const ClusterBank& bank, const Eigen::Ref<const Vector>& x) {
  if (bank.space != FeatureSpace::Input) throw std::invalid_argument("score_input_cluster: bank is not in input space");
  return nearest_centroid_distance(bank, x);
}

double score_fv_cluster(const ClusterBank& bank, const ActivationTrace& trace) {
  if (bank.space != FeatureSpace::Fv) throw std::invalid_argument("score_fv_cluster: bank is not in FV space");
  return nearest_centroid_distance(bank, trace.fv);
}

double score_softmax(const ActivationTrace& trace) { return -trace.probs.maxCoeff(); }

double Weibull::cdf(double x) const {
  const double z = x - location;
  if (z <= 0.0) return 0.0;
  return 1.0 - std::exp(-std::pow(z / scale, shape));
}

Weibull fit_weibull(std::span<const double> samples) {
  if (samples.empty()) throw std::invalid_argument("fit_weibull: no samples");
  constexpr double floor = 1e-12;
  const double peak = std::max(floor, *std::max_element(samples.begin(), samples.end()));
  if (samples.size() == 1) return {1.0, peak, 0.0};

  // Work on x / max so that x^k stays in (0, 1].
  std::vector<double> y, log_y;
  for (double s : samples) {
    y.push_back(std::max(s, floor) / peak);
    log_y.push_back(std::log(y.back()));
  }
  const double mean_log = std::accumulate(log_y.begin(), log_y.end(), 0.0) / static_cast<double>(y.size());
  // Profile-likelihood equation for the shape; increasing in k.
  auto equation = [&](double k) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double p = std::pow(y[i], k);
      num += p * log_y[i];
      den += p;
    }
    return num / den - 1.0 / k - mean_log;
  };
  double lo = std::log(1e-3), hi = std::log(1e3);
  double shape = std::exp(hi);
  if (equation(shape) > 0.0) {
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (equation(std::exp(mid)) > 0.0) hi = mid; else lo = mid;
    }
    shape = std::exp(0.5 * (lo + hi));
  }
  double mean_pow = 0.0;
  for (double v : y) mean_pow += std::pow(v, shape);
  mean_pow /= static_cast<double>(y.size());
  return {shape, peak * std::pow(mean_pow, 1.0 / shape), 0.0};
}

WeibullBank fit_weibull_bank(const Matrix& logits, std::span<const int> labels, int classes, int tail_size,
                             int alpha) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size()) {
    throw std::invalid_argument("fit_weibull_bank: logits and labels differ in length");
  }
  if (logits.cols() != classes) throw std::invalid_argument("fit_weibull_bank: logit width differs from K");
  if (tail_size < 1 || alpha < 1) throw std::invalid_argument("fit_weibull_bank: tail_size and alpha must be positive");
  WeibullBank bank;
  bank.tail_size = tail_size;
  bank.alpha = std::min(alpha, classes);
  for (int k = 1; k <= classes; ++k) {
    std::vector<Eigen::Index> rows, correct;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      if (labels[static_cast<std::size_t>(i)] != k) continue;
      rows.push_back(i);
      if (argmax(logits.row(i).transpose()) == k - 1) correct.push_back(i);
    }
    // Fall back to every sample of the class when none is classified correctly.
    const auto& use = correct.empty() ? rows : correct;
    if (use.empty()) throw DataError("fit_weibull_bank: class " + std::to_string(k) + " has no training samples");
    Vector mav = Vector::Zero(classes);
    for (auto i : use) mav += logits.row(i).transpose();
    mav /= static_cast<double>(use.size());
    std::vector<double> dist;
    for (auto i : use) dist.push_back((logits.row(i).transpose() - mav).norm());
    std::sort(dist.begin(), dist.end(), std::greater<>());
    dist.resize(std::min(dist.size(), static_cast<std::size_t>(tail_size)));
    bank.mav.push_back(std::move(mav));
    bank.tails.push_back(fit_weibull(dist));
  }
  return bank;
}

OpenMaxRevision openmax_revise(const WeibullBank& bank, const ActivationTrace& trace) {
  const Eigen::Index k = trace.v.size();
  if (bank.classes() != k) {
    throw std::invalid_argument("openmax: bank fitted for " + std::to_string(bank.classes()) +
                                " classes, trace has " + std::to_string(k));
  }
  // Revise the alpha classes with the largest activations.
  std::vector<int> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), 0);
  const auto alpha = static_cast<std::size_t>(std::min<Eigen::Index>(bank.alpha, k));
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(alpha), order.end(),
                    [&](int a, int b) { return trace.v[a] > trace.v[b] || (trace.v[a] == trace.v[b] && a < b); });
  Vector w = Vector::Ones(k);
  for (std::size_t r = 0; r < alpha; ++r) {
    const auto c = static_cast<std::size_t>(order[r]);
    w[order[r]] = 1.0 - bank.tails[c].cdf((trace.v - bank.mav[c]).norm());
  }
  OpenMaxRevision rev;
  rev.v_hat = trace.v.cwiseProduct(w);
  rev.v_hat0 = trace.v.dot((Vector::Ones(k) - w));
  Vector extended(k + 1);
  extended[0] = rev.v_hat0;
  extended.tail(k) = rev.v_hat;
  rev.probs_prime = softmax(extended);
  return rev;
}

OpenMaxScore score_openmax(const WeibullBank& bank, const ActivationTrace& trace, double epsilon) {
  const auto rev = openmax_revise(bank, trace);
  OpenMaxScore s;
  s.ul = rev.v_hat0;
  s.top_class = argmax(rev.probs_prime);
  s.top_prob = rev.probs_prime[s.top_class];
  s.reject_hint = s.top_class == 0 || s.top_prob < epsilon;
  return s;
}

double score_gradbp(const CnnModel& model, const ActivationTrace& trace, NormKind norm_kind, GradLayer layer) {
  if (trace.probs.size() != model.out.weight.rows() || trace.pre_fc1.size() != model.out.weight.cols()) {
    throw std::invalid_argument("score_gradbp: trace does not match the model");
  }
  // Same deltas as head_gradient() against the predicted label, without the
  // intermediate allocations; this runs once per scored flow.
  Vector delta = trace.probs;
  delta[argmax(trace.probs)] -= 1.0;
  if (layer == GradLayer::Output) return norm(delta, norm_kind);
  const Vector back = matvec_t(model.out.weight, delta);
  return norm(back.cwiseProduct((trace.pre_fc1.array() > 0.0).cast<double>().matrix()), norm_kind);
}

double quantile(std::span<const double> values, double q) {
  if (values.empty()) throw std::invalid_argument("quantile: no values");
  if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("quantile: q outside [0,1]");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

CalibratedDetector calibrate(DetectorKind kind, std::span<const double> scores, double target_fpr, DetectorState state) {
  if (scores.empty()) throw std::invalid_argument("calibrate: no calibration scores");
  if (!(target_fpr > 0.0 && target_fpr < 1.0)) throw std::invalid_argument("calibrate: target_fpr must lie in (0,1)");
  CalibratedDetector det;
  det.kind = kind;
  det.direction = direction_of(kind);
  det.target_fpr = target_fpr;
  det.epsilon = quantile(scores, det.direction == Direction::RejectIfAbove ? 1.0 - target_fpr : target_fpr);
  det.state = std::move(state);
  return det;
}

Observation observe(const ClassifierRef& classifier, Vector x) {
  Observation obs;
  obs.x = std::move(x);
  if (const auto* cnn = std::get_if<const CnnModel*>(&classifier)) {
    obs.trace = forward(**cnn, obs.x);
    obs.probs = obs.trace->probs;
  } else {
    obs.probs = gbt_predict(*std::get<const GbtModel*>(classifier), obs.x);
  }
  return obs;
}

void check_compatible(DetectorKind kind, const ClassifierRef& classifier) {
  const bool is_cnn = std::holds_alternative<const CnnModel*>(classifier);
  if (is_cnn || kind == DetectorKind::InputCluster || kind == DetectorKind::SoftMax) return;
  throw std::invalid_argument("detector " + std::string(to_string(kind)) +
                              " needs a CNN classifier (feature vectors / logits / gradients); a GBT model "
                              "only supports InputCluster and SoftMax");
}

double decision_score(DetectorKind kind, const DetectorState& state, const ClassifierRef& classifier,
                      const Observation& obs, GradLayer layer) {
  auto trace = [&]() -> const ActivationTrace& {
    if (!obs.trace) throw std::invalid_argument("detector " + std::string(to_string(kind)) + " needs an activation trace");
    return *obs.trace;
  };
  switch (kind) {
    case DetectorKind::InputCluster:
      return score_input_cluster(std::get<ClusterBank>(state), obs.x);
    case DetectorKind::FvCluster:
      return score_fv_cluster(std::get<ClusterBank>(state), trace());
    case DetectorKind::SoftMax:
      return obs.probs.maxCoeff();
    case DetectorKind::OpenMax: {
      const auto s = score_openmax(std::get<WeibullBank>(state), trace());
      return s.top_class == 0 ? kUnknownWins : s.top_prob;
    }
    case DetectorKind::GradBPL1:
    case DetectorKind::GradBPL2: {
      check_compatible(kind, classifier);
      const auto norm_kind = kind == DetectorKind::GradBPL1 ? NormKind::L1Max : NormKind::L2;
      return score_gradbp(*std::get<const CnnModel*>(classifier), trace(), norm_kind, layer);
    }
  }
  return 0.0;
}

Detection detect(const CalibratedDetector& detector, const ClassifierRef& classifier, const Observation& obs) {
  check_compatible(detector.kind, classifier);
  const double s = decision_score(detector.kind, detector.state, classifier, obs, detector.grad_layer);
  Detection d;
  d.rejected = detector.rejects(s);
  d.label = d.rejected ? 0 : argmax(obs.probs) + 1;
  return d;
}

Detection detect(const CalibratedDetector& detector, const ClassifierRef& classifier,
                 const Eigen::Ref<const Vector>& x) {
  return detect(detector, classifier, observe(classifier, x));
}

DetectorState fit_detector_state(DetectorKind kind, const ClassifierRef& classifier,
                                 std::span<const Observation> train, std::span<const int> labels,
                                 const DetectorFitOptions& options) {
  check_compatible(kind, classifier);
  if (train.empty()) throw DataError("detector fit: no training observations");
  int classes = 0;
  for (int y : labels) classes = std::max(classes, y);
  if (const auto* cnn = std::get_if<const CnnModel*>(&classifier)) classes = (*cnn)->hyper.classes;
  if (const auto* gbt = std::get_if<const GbtModel*>(&classifier)) classes = (*gbt)->classes;
  const int n = static_cast<int>(train.size());

  switch (kind) {
    case DetectorKind::InputCluster:
    case DetectorKind::FvCluster: {
      const bool input = kind == DetectorKind::InputCluster;
      const Eigen::Index dim = input ? train[0].x.size() : train[0].trace->fv.size();
      Matrix points(n, dim);
      for (int i = 0; i < n; ++i) points.row(i) = (input ? train[static_cast<std::size_t>(i)].x
                                                         : train[static_cast<std::size_t>(i)].trace->fv).transpose();
      const int c = std::min(n, options.clusters_per_class * classes);
      return fit_clusters(points, c, options.seed, input ? FeatureSpace::Input : FeatureSpace::Fv);
    }
    case DetectorKind::OpenMax: {
      Matrix logits(n, classes);
      for (int i = 0; i < n; ++i) logits.row(i) = train[static_cast<std::size_t>(i)].trace->v.transpose();
      return fit_weibull_bank(logits, labels, classes, options.tail_size, options.openmax_alpha);
    }
    default:
      return std::monostate{};
  }
}

CalibratedDetector fit_detector(DetectorKind kind, const ClassifierRef& classifier,
                                std::span<const Observation> train, std::span<const int> labels,
                                double target_fpr, const DetectorFitOptions& options) {
  return fit_detector(kind, classifier, train, labels, train, target_fpr, options);
}

CalibratedDetector fit_detector(DetectorKind kind, const ClassifierRef& classifier,
                                std::span<const Observation> train, std::span<const int> labels,
                                std::span<const Observation> calibration, double target_fpr,
                                const DetectorFitOptions& options) {
  if (train.size() != labels.size()) throw std::invalid_argument("fit_detector: observations and labels differ");
  for (int y : labels) {
    if (y < 1) throw DataError("fit_detector: zero-day (label 0) flows must not reach calibration");
  }
  if (calibration.empty()) throw DataError("fit_detector: empty calibration set");
  const auto start = std::chrono::steady_clock::now();
  DetectorState state = fit_detector_state(kind, classifier, train, labels, options);
  std::vector<double> scores;
  scores.reserve(calibration.size());
  for (const auto& obs : calibration) scores.push_back(decision_score(kind, state, classifier, obs, options.grad_layer));
  CalibratedDetector det = calibrate(kind, scores, target_fpr, std::move(state));
  det.grad_layer = options.grad_layer;
  det.bootstrap_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return det;
}

nlohmann::json detector_to_json(const CalibratedDetector& det) {
  nlohmann::json doc;
  doc["kind"] = to_string(det.kind);
  doc["epsilon"] = det.epsilon;
  doc["direction"] = det.direction == Direction::RejectIfAbove ? "reject_if_above" : "reject_if_below";
  doc["target_fpr"] = det.target_fpr;
  doc["grad_layer"] = det.grad_layer == GradLayer::Feature ? "fv" : "output";
  if (const auto* bank = std::get_if<ClusterBank>(&det.state)) {
    doc["space"] = bank->space == FeatureSpace::Input ? "input" : "fv";
    auto rows = nlohmann::json::array();
    for (Eigen::Index c = 0; c < bank->centroids.cols(); ++c) {
      rows.push_back(std::vector<double>(bank->centroids.col(c).begin(), bank->centroids.col(c).end()));
    }
    doc["centroids"] = std::move(rows);
  } else if (const auto* wb = std::get_if<WeibullBank>(&det.state)) {
    nlohmann::json w;
    w["tail_size"] = wb->tail_size;
    w["alpha"] = wb->alpha;
    auto classes = nlohmann::json::array();
    for (int k = 0; k < wb->classes(); ++k) {
      const auto& t = wb->tails[static_cast<std::size_t>(k)];
      const auto& mav = wb->mav[static_cast<std::size_t>(k)];
      classes.push_back({{"mav", std::vector<double>(mav.begin(), mav.end())},
                         {"shape", t.shape},
                         {"scale", t.scale},
                         {"location", t.location}});
    }
    w["classes"] = std::move(classes);
    doc["weibull"] = std::move(w);
  }
  return doc;
}

CalibratedDetector detector_from_json(const nlohmann::json& doc) {
  try {
    CalibratedDetector det;
    det.kind = parse_detector_kind(doc.at("kind").get<std::string>());
    det.epsilon = doc.at("epsilon").get<double>();
    const auto dir = doc.at("direction").get<std::string>();
    det.direction = dir == "reject_if_above" ? Direction::RejectIfAbove : Direction::RejectIfBelow;
    if (det.direction != direction_of(det.kind)) throw DataError("detector direction does not match its kind");
    det.target_fpr = doc.value("target_fpr", 0.0);
    det.grad_layer = doc.value("grad_layer", std::string("fv")) == "output" ? GradLayer::Output : GradLayer::Feature;
    if (doc.contains("centroids")) {
      ClusterBank bank;
      bank.space = doc.at("space").get<std::string>() == "fv" ? FeatureSpace::Fv : FeatureSpace::Input;
      const auto rows = doc.at("centroids").get<std::vector<std::vector<double>>>();
      if (rows.empty()) throw DataError("detector: empty centroid list");
      bank.centroids.resize(static_cast<Eigen::Index>(rows.front().size()), static_cast<Eigen::Index>(rows.size()));
      for (std::size_t c = 0; c < rows.size(); ++c) {
        if (rows[c].size() != rows.front().size()) throw DataError("detector: ragged centroids");
        bank.centroids.col(static_cast<Eigen::Index>(c)) =
            Eigen::Map<const Vector>(rows[c].data(), static_cast<Eigen::Index>(rows[c].size()));
      }
      det.state = std::move(bank);
    } else if (doc.contains("weibull")) {
      const auto& w = doc.at("weibull");
      WeibullBank bank;
      bank.tail_size = w.at("tail_size").get<int>();
      bank.alpha = w.at("alpha").get<int>();
      for (const auto& c : w.at("classes")) {
        const auto mav = c.at("mav").get<std::vector<double>>();
        bank.mav.push_back(Eigen::Map<const Vector>(mav.data(), static_cast<Eigen::Index>(mav.size())));
        Weibull t{c.at("shape").get<double>(), c.at("scale").get<double>(), c.at("location").get<double>()};
        if (!(t.shape > 0.0 && t.scale > 0.0)) throw DataError("detector: Weibull shape and scale must be positive");
        bank.tails.push_back(t);
      }
      det.state = std::move(bank);
    }
    return det;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed detector document: ") + e.what());
  } catch (const UsageError& e) {
    throw DataError(e.what());
  }
}

}  // namespace zdtc
