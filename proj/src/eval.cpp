#include "zdtc/eval.hpp"

#include "zdtc/error.hpp"
#include "zdtc/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <set>

namespace zdtc {

RocCurve roc(std::span<const double> scores_known, std::span<const double> scores_unknown, Direction direction) {
  if (scores_known.empty() || scores_unknown.empty()) throw std::invalid_argument("roc: empty score list");
  std::vector<double> known(scores_known.begin(), scores_known.end());
  std::vector<double> unknown(scores_unknown.begin(), scores_unknown.end());
  std::sort(known.begin(), known.end());
  std::sort(unknown.begin(), unknown.end());
  std::vector<double> thresholds;
  thresholds.reserve(known.size() + unknown.size() + 2);
  thresholds.push_back(-std::numeric_limits<double>::infinity());
  std::merge(known.begin(), known.end(), unknown.begin(), unknown.end(), std::back_inserter(thresholds));
  thresholds.push_back(std::numeric_limits<double>::infinity());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  const auto nk = static_cast<double>(known.size());
  const auto nu = static_cast<double>(unknown.size());
  auto rejected = [&](const std::vector<double>& sorted, double eps) -> double {
    if (direction == Direction::RejectIfAbove) {
      return static_cast<double>(sorted.end() - std::upper_bound(sorted.begin(), sorted.end(), eps));
    }
    return static_cast<double>(std::lower_bound(sorted.begin(), sorted.end(), eps) - sorted.begin());
  };

  RocCurve curve;
  curve.points.reserve(thresholds.size());
  for (double eps : thresholds) {
    RocPoint p;
    p.epsilon = eps;
    p.tpr = rejected(unknown, eps) / nu;
    p.fpr = rejected(known, eps) / nk;
    p.tnr = 1.0 - p.fpr;
    p.fnr = 1.0 - p.tpr;
    curve.points.push_back(p);
  }
  // tpr and fpr move together along the sweep, so consecutive points trace the curve.
  double auc = 0.0;
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    const auto& a = curve.points[i - 1];
    const auto& b = curve.points[i];
    auc += std::abs(b.fpr - a.fpr) * 0.5 * (a.tpr + b.tpr);
  }
  curve.auc = auc;
  return curve;
}

void write_roc_csv(std::ostream& out, const RocCurve& curve) {
  out << "epsilon,tpr,fpr,tnr,fnr\n";
  char buf[256];
  for (const auto& p : curve.points) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g\n", p.epsilon, p.tpr, p.fpr, p.tnr, p.fnr);
    out << buf;
  }
}

FixedTuning fixed_tuning_report(const std::vector<bool>& rejected_unknown, std::span<const int> unknown_origin,
                                const std::vector<bool>& rejected_known) {
  if (rejected_unknown.empty()) throw std::invalid_argument("fixed_tuning_report: no zero-day flows");
  if (rejected_unknown.size() != unknown_origin.size()) {
    throw std::invalid_argument("fixed_tuning_report: rejection flags and origins differ in length");
  }
  FixedTuning r;
  r.unknown_flows = static_cast<int>(rejected_unknown.size());
  std::map<int, bool> detected;
  int hits = 0;
  for (std::size_t i = 0; i < rejected_unknown.size(); ++i) {
    auto& d = detected[unknown_origin[i]];
    if (rejected_unknown[i]) {
      ++hits;
      d = true;
    }
  }
  r.flow_tpr = static_cast<double>(hits) / r.unknown_flows;
  r.unknown_classes = static_cast<int>(detected.size());
  for (const auto& [cls, hit] : detected) r.detected_classes += hit ? 1 : 0;
  r.class_tpr = static_cast<double>(r.detected_classes) / r.unknown_classes;
  if (rejected_known.empty()) {
    r.fpr = std::numeric_limits<double>::quiet_NaN();
  } else {
    r.fpr = static_cast<double>(std::count(rejected_known.begin(), rejected_known.end(), true)) /
            static_cast<double>(rejected_known.size());
  }
  return r;
}

UnknownLevelReport unknown_level_report(std::span<const double> ul_known, std::span<const double> ul_unknown,
                                        int bins) {
  if (ul_known.empty() || ul_unknown.empty()) throw std::invalid_argument("unknown_level_report: empty sample");
  if (bins < 2) throw std::invalid_argument("unknown_level_report: need at least two bins");
  UnknownLevelReport r;
  const auto [kmin, kmax] = std::minmax_element(ul_known.begin(), ul_known.end());
  const auto [umin, umax] = std::minmax_element(ul_unknown.begin(), ul_unknown.end());
  r.lo = std::min(*kmin, *umin);
  r.hi = std::max(*kmax, *umax);
  if (!(r.hi > r.lo)) {
    r.bins = 1;
    r.hist_known = {1.0};
    r.hist_unknown = {1.0};
    r.intersection = 1.0;
    r.bhattacharyya = 0.0;
    return r;
  }
  r.bins = bins;
  auto histogram = [&](std::span<const double> xs) {
    std::vector<double> h(static_cast<std::size_t>(bins), 0.0);
    for (double x : xs) {
      auto b = static_cast<long>(std::floor((x - r.lo) / (r.hi - r.lo) * bins));
      b = std::clamp(b, 0L, static_cast<long>(bins) - 1);
      h[static_cast<std::size_t>(b)] += 1.0;
    }
    for (double& v : h) v /= static_cast<double>(xs.size());
    return h;
  };
  r.hist_known = histogram(ul_known);
  r.hist_unknown = histogram(ul_unknown);
  double inter = 0.0, coeff = 0.0;
  for (int b = 0; b < bins; ++b) {
    const double hk = r.hist_known[static_cast<std::size_t>(b)];
    const double hu = r.hist_unknown[static_cast<std::size_t>(b)];
    inter += std::min(hk, hu);
    coeff += std::sqrt(hk * hu);
  }
  r.intersection = std::clamp(inter, 0.0, 1.0);
  r.bhattacharyya = coeff > 0.0 ? std::max(0.0, -std::log(coeff)) : kBhattacharyyaSaturation;
  return r;
}

double purity(std::span<const int> assignments, std::span<const int> labels) {
  if (assignments.empty()) throw std::invalid_argument("purity: empty input");
  if (assignments.size() != labels.size()) throw std::invalid_argument("purity: length mismatch");
  std::map<int, std::map<int, int>> counts;
  for (std::size_t i = 0; i < assignments.size(); ++i) ++counts[assignments[i]][labels[i]];
  long dominant = 0;
  for (const auto& [cluster, by_label] : counts) {
    int best = 0;
    for (const auto& [label, n] : by_label) best = std::max(best, n);
    dominant += best;
  }
  return static_cast<double>(dominant) / static_cast<double>(assignments.size());
}

double silhouette(const Matrix& points, std::span<const int> assignments, int sample_cap, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(points.rows());
  if (n == 0 || assignments.size() != n) throw std::invalid_argument("silhouette: points and assignments differ");
  if (sample_cap < 1) throw std::invalid_argument("silhouette: sample_cap must be positive");
  std::map<int, int> ids;
  for (int a : assignments) ids.emplace(a, 0);
  if (ids.size() < 2) throw std::invalid_argument("silhouette: all points are in one cluster");
  int next = 0;
  for (auto& [id, idx] : ids) idx = next++;
  std::vector<int> cluster(n);
  std::vector<int> size(ids.size(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    cluster[i] = ids.at(assignments[i]);
    ++size[static_cast<std::size_t>(cluster[i])];
  }

  std::vector<std::size_t> sample(n);
  std::iota(sample.begin(), sample.end(), std::size_t{0});
  if (n > static_cast<std::size_t>(sample_cap)) {
    Rng rng(seed);
    rng.shuffle(std::span<std::size_t>(sample));
    sample.resize(static_cast<std::size_t>(sample_cap));
    std::sort(sample.begin(), sample.end());
  }

  double total = 0.0;
  std::vector<double> sums(ids.size());
  for (std::size_t i : sample) {
    std::fill(sums.begin(), sums.end(), 0.0);
    const Vector dist = (points.rowwise() - points.row(static_cast<Eigen::Index>(i))).rowwise().norm();
    for (std::size_t j = 0; j < n; ++j) sums[static_cast<std::size_t>(cluster[j])] += dist[static_cast<Eigen::Index>(j)];
    const auto own = static_cast<std::size_t>(cluster[i]);
    const double a = size[own] > 1 ? sums[own] / (size[own] - 1) : 0.0;
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < sums.size(); ++c) {
      if (c != own) b = std::min(b, sums[c] / size[c]);
    }
    const double denom = std::max(a, b);
    total += denom > 0.0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(sample.size());
}

const CostEntry& CostReport::at(std::string_view detector) const {
  for (const auto& e : entries)
    if (e.detector == detector) return e;
  throw std::out_of_range("cost report has no entry for " + std::string(detector));
}

CostReport bench_detectors(std::span<const CalibratedDetector> detectors, const ClassifierRef& classifier,
                           std::span<const Observation> stream, int n) {
  if (n < kMinBenchSamples) {
    throw UsageError("bench: need at least " + std::to_string(kMinBenchSamples) + " samples, got " + std::to_string(n));
  }
  if (stream.empty()) throw std::invalid_argument("bench: empty sample stream");
  for (const auto& det : detectors) check_compatible(det.kind, classifier);
  using clock = std::chrono::steady_clock;
  // Detectors take turns on each sample so load spikes hit all of them alike.
  std::vector<std::vector<double>> micros(detectors.size(), std::vector<double>(static_cast<std::size_t>(n)));
  volatile double sink = 0.0;
  for (int i = 0; i < n; ++i) {
    // Untimed copy: the detector sees a trace that is still in cache, as it
    // would right after the forward pass that produced it.
    const Observation obs = stream[static_cast<std::size_t>(i) % stream.size()];
    for (std::size_t d = 0; d < detectors.size(); ++d) {
      const auto& det = detectors[d];
      const auto t0 = clock::now();
      sink = sink + decision_score(det.kind, det.state, classifier, obs, det.grad_layer);
      const auto t1 = clock::now();
      micros[d][static_cast<std::size_t>(i)] = std::chrono::duration<double, std::micro>(t1 - t0).count();
    }
  }
  CostReport report;
  for (std::size_t d = 0; d < detectors.size(); ++d) {
    auto& m = micros[d];
    auto mid = m.begin() + static_cast<std::ptrdiff_t>(m.size() / 2);
    std::nth_element(m.begin(), mid, m.end());
    CostEntry e;
    e.detector = std::string(to_string(detectors[d].kind));
    e.bootstrap_seconds = detectors[d].bootstrap_seconds;
    e.inference_micros = *mid;
    e.samples = n;
    report.entries.push_back(e);
  }
  return report;
}

ComplexityReport complexity_report(const CnnModel* cnn, const GbtModel* gbt) {
  ComplexityReport r;
  if (cnn) {
    r.w_dl = count_params(*cnn);
    r.k_dl = cnn->hyper.classes;
    r.w_dl_per_class = static_cast<double>(r.w_dl) / r.k_dl;
  }
  if (gbt) {
    r.w_ml = gbt_count_nodes(*gbt);
    r.k_ml = gbt->classes;
    r.w_ml_per_class = r.k_ml > 0 ? static_cast<double>(r.w_ml) / r.k_ml : 0.0;
  }
  return r;
}

nlohmann::json to_json(const RocCurve& curve) {
  return {{"auc", curve.auc}, {"points", curve.points.size()}};
}

nlohmann::json to_json(const FixedTuning& r) {
  nlohmann::json doc{{"flow_tpr", r.flow_tpr},
                     {"class_tpr", r.class_tpr},
                     {"unknown_flows", r.unknown_flows},
                     {"unknown_classes", r.unknown_classes},
                     {"detected_classes", r.detected_classes}};
  doc["fpr"] = std::isnan(r.fpr) ? nlohmann::json(nullptr) : nlohmann::json(r.fpr);
  return doc;
}

nlohmann::json to_json(const UnknownLevelReport& r) {
  return {{"intersection", r.intersection}, {"bhattacharyya", r.bhattacharyya}, {"bins", r.bins},
          {"lo", r.lo},                     {"hi", r.hi},                       {"hist_known", r.hist_known},
          {"hist_unknown", r.hist_unknown}};
}

nlohmann::json to_json(const ClusterQuality& q) { return {{"purity", q.purity}, {"silhouette", q.silhouette}}; }

nlohmann::json to_json(const CostReport& report) {
  auto arr = nlohmann::json::array();
  for (const auto& e : report.entries) {
    arr.push_back({{"detector", e.detector},
                   {"bootstrap_seconds", e.bootstrap_seconds},
                   {"inference_micros_per_sample", e.inference_micros},
                   {"samples", e.samples}});
  }
  return arr;
}

nlohmann::json to_json(const ComplexityReport& r) {
  return {{"W_DL", r.w_dl}, {"K_DL", r.k_dl}, {"W_DL_per_class", r.w_dl_per_class},
          {"W_ML", r.w_ml}, {"K_ML", r.k_ml}, {"W_ML_per_class", r.w_ml_per_class}};
}

}  // namespace zdtc
