#include <doctest.h>

#include "zdtc/error.hpp"
#include "zdtc/eval.hpp"
#include "zdtc/rng.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <sstream>

using namespace zdtc;

namespace {

std::vector<double> normals(Rng& rng, int n, double mean = 0.0) {
  std::vector<double> out;
  for (int i = 0; i < n; ++i) out.push_back(mean + rng.normal());
  return out;
}

void check_complements(const RocCurve& c) {
  for (const auto& p : c.points) {
    CHECK(std::abs(p.tnr + p.fpr - 1.0) <= 1e-12);
    CHECK(std::abs(p.fnr + p.tpr - 1.0) <= 1e-12);
  }
}

// O(N^2) silhouette straight from the definition.
double silhouette_oracle(const Matrix& pts, const std::vector<int>& assign) {
  const auto n = static_cast<std::size_t>(pts.rows());
  std::map<int, int> sizes;
  for (int a : assign) ++sizes[a];
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::map<int, double> sum;
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      sum[assign[j]] += (pts.row(static_cast<Eigen::Index>(i)) - pts.row(static_cast<Eigen::Index>(j))).norm();
    }
    if (sizes[assign[i]] == 1) {
      total += 1.0;
      continue;
    }
    const double a = sum[assign[i]] / (sizes[assign[i]] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [c, s] : sizes)
      if (c != assign[i]) b = std::min(b, sum[c] / s);
    total += (b - a) / std::max(a, b);
  }
  return total / static_cast<double>(n);
}

}  // namespace

// --------------------------------------------------------------------- ROC

TEST_CASE("perfect separation") {
  const std::vector<double> known{0.1, 0.2, 0.3}, unknown{0.7, 0.8};
  const auto c = roc(known, unknown, Direction::RejectIfAbove);
  CHECK(c.auc == doctest::Approx(1.0));
  bool corner = false;
  for (const auto& p : c.points) corner |= p.tpr == 1.0 && p.fpr == 0.0;
  CHECK(corner);
  check_complements(c);
}

TEST_CASE("sweep endpoints") {
  const std::vector<double> known{1, 2, 3}, unknown{2, 5};
  const auto c = roc(known, unknown, Direction::RejectIfAbove);
  CHECK(std::isinf(c.points.front().epsilon));
  CHECK(c.points.front().epsilon < 0);
  CHECK(c.points.front().tpr == 1.0);
  CHECK(c.points.front().fpr == 1.0);
  CHECK(c.points.back().tpr == 0.0);
  CHECK(c.points.back().fpr == 0.0);
  for (std::size_t i = 1; i < c.points.size(); ++i) {
    CHECK(c.points[i].epsilon >= c.points[i - 1].epsilon);
    CHECK(c.points[i].tpr <= c.points[i - 1].tpr);
    CHECK(c.points[i].fpr <= c.points[i - 1].fpr);
  }
}

TEST_CASE("identical distributions give AUC near one half") {
  Rng rng(1);
  const auto a = normals(rng, 1000), b = normals(rng, 1000);
  const auto c = roc(a, b, Direction::RejectIfAbove);
  CHECK(std::abs(c.auc - 0.5) < 0.05);
  check_complements(c);
}

TEST_CASE("AUC matches the Mann-Whitney count and flips with direction") {
  Rng rng(2);
  const auto known = normals(rng, 150), unknown = normals(rng, 120, 0.8);
  double wins = 0.0;
  for (double u : unknown)
    for (double k : known) wins += u > k ? 1.0 : (u == k ? 0.5 : 0.0);
  const auto above = roc(known, unknown, Direction::RejectIfAbove);
  CHECK(above.auc == doctest::Approx(wins / (150.0 * 120.0)).epsilon(1e-12));
  const auto below = roc(known, unknown, Direction::RejectIfBelow);
  CHECK(below.auc == doctest::Approx(1.0 - above.auc).epsilon(1e-12));
  check_complements(below);
  CHECK_THROWS_AS(roc(std::vector<double>{}, unknown, Direction::RejectIfAbove), std::invalid_argument);
}

TEST_CASE("ROC CSV layout") {
  const std::vector<double> known{0.1}, unknown{0.9};
  std::ostringstream out;
  write_roc_csv(out, roc(known, unknown, Direction::RejectIfAbove));
  const std::string text = out.str();
  CHECK(text.rfind("epsilon,tpr,fpr,tnr,fnr\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 5);
}

// ------------------------------------------------------------ fixed tuning

TEST_CASE("fixed tuning rates") {
  const std::vector<int> origin{11, 11, 12, 12};
  const auto all = fixed_tuning_report({true, true, true, true}, origin, {true, true});
  CHECK(all.flow_tpr == 1.0);
  CHECK(all.class_tpr == 1.0);
  CHECK(all.fpr == 1.0);
  const auto none = fixed_tuning_report({false, false, false, false}, origin, {false, false});
  CHECK(none.flow_tpr == 0.0);
  CHECK(none.class_tpr == 0.0);
  CHECK(none.fpr == 0.0);
  const auto one = fixed_tuning_report({true, false, false, false}, origin);
  CHECK(one.flow_tpr == 0.25);
  CHECK(one.class_tpr == 0.5);
  CHECK(one.detected_classes == 1);
  CHECK(std::isnan(one.fpr));
  CHECK_THROWS_AS(fixed_tuning_report({}, std::vector<int>{}), std::invalid_argument);
}

// ----------------------------------------------------------- unknown level

TEST_CASE("histogram overlap identities") {
  Rng rng(3);
  const auto a = normals(rng, 500);
  const auto same = unknown_level_report(a, a, 50);
  CHECK(same.intersection == doctest::Approx(1.0));
  CHECK(same.bhattacharyya == doctest::Approx(0.0).epsilon(1e-12));
  double sk = 0, su = 0;
  for (double h : same.hist_known) sk += h;
  for (double h : same.hist_unknown) su += h;
  CHECK(std::abs(sk - 1.0) < 1e-9);
  CHECK(std::abs(su - 1.0) < 1e-9);

  const std::vector<double> lo{0.0, 0.1, 0.2}, hi{5.0, 5.1};
  const auto apart = unknown_level_report(lo, hi, 50);
  CHECK(apart.intersection == 0.0);
  CHECK(apart.bhattacharyya == kBhattacharyyaSaturation);

  const std::vector<double> flat{2.0, 2.0, 2.0};
  const auto degenerate = unknown_level_report(flat, flat, 50);
  CHECK(degenerate.intersection == 1.0);
  CHECK(degenerate.bhattacharyya == 0.0);
}

TEST_CASE("half-overlapping uniforms intersect at one half") {
  std::vector<double> a, b;
  for (int i = 0; i < 1000; ++i) {
    a.push_back((i + 0.5) / 1000.0);
    b.push_back(0.5 + (i + 0.5) / 1000.0);
  }
  const auto r = unknown_level_report(a, b, 30);
  CHECK(r.intersection == doctest::Approx(0.5).epsilon(0.02));
}

TEST_CASE("overlap falls as Gaussians separate") {
  Rng rng(4);
  const auto base = normals(rng, 4000);
  double prev_i = 2.0, prev_d = -1.0;
  for (int step = 0; step < 5; ++step) {
    std::vector<double> shifted;
    for (double v : base) shifted.push_back(v + 0.75 * step);
    const auto r = unknown_level_report(base, shifted, 50);
    CHECK(r.intersection < prev_i);
    CHECK(r.bhattacharyya > prev_d);
    prev_i = r.intersection;
    prev_d = r.bhattacharyya;
  }
}

// -------------------------------------------------------- cluster quality

TEST_CASE("purity") {
  const std::vector<int> a{0, 0, 1, 1}, pure{1, 1, 2, 2}, mixed{1, 2, 1, 2};
  CHECK(purity(a, pure) == 1.0);
  CHECK(purity(a, mixed) == 0.5);
  // Cluster 0: labels 1,1,2 -> 2; cluster 1: 3,3 -> 2; cluster 2: 1,2,3,3 -> 2.
  const std::vector<int> c{0, 0, 0, 1, 1, 2, 2, 2, 2}, l{1, 1, 2, 3, 3, 1, 2, 3, 3};
  CHECK(purity(c, l) == doctest::Approx(6.0 / 9.0));
  CHECK(purity(c, l) >= 1.0 / 3.0);
  CHECK_THROWS_AS(purity(std::vector<int>{}, std::vector<int>{}), std::invalid_argument);
}

TEST_CASE("silhouette") {
  Rng rng(5);
  Matrix tight(40, 2);
  std::vector<int> assign;
  for (int i = 0; i < 40; ++i) {
    tight(i, 0) = (i % 2 ? 100.0 : 0.0) + 0.1 * rng.normal();
    tight(i, 1) = 0.1 * rng.normal();
    assign.push_back(i % 2);
  }
  CHECK(silhouette(tight, assign) > 0.9);

  Matrix pts(60, 3);
  std::vector<int> random_assign;
  for (int i = 0; i < 60; ++i) {
    for (int j = 0; j < 3; ++j) pts(i, j) = rng.normal();
    random_assign.push_back(static_cast<int>(rng.below(3)));
  }
  CHECK(silhouette(pts, random_assign) == doctest::Approx(silhouette_oracle(pts, random_assign)).epsilon(1e-12));
  CHECK(std::abs(silhouette(pts, random_assign)) < 0.1);

  // A singleton cluster scores 1.
  auto with_single = random_assign;
  with_single[0] = 7;
  CHECK(silhouette(pts, with_single) == doctest::Approx(silhouette_oracle(pts, with_single)).epsilon(1e-12));

  const std::vector<int> one(60, 0);
  CHECK_THROWS_AS(silhouette(pts, one), std::invalid_argument);

  // Sampling is seeded.
  CHECK(silhouette(pts, random_assign, 20, 3) == silhouette(pts, random_assign, 20, 3));
}

// -------------------------------------------------------------------- cost

TEST_CASE("bench reports positive medians and rejects small runs") {
  const auto m = init_cnn(CnnHyper::for_proto(Proto::TCP, 10), 1);
  const ClassifierRef clf = &m;
  Rng rng(6);
  std::vector<Observation> stream;
  std::vector<int> labels;
  for (int i = 0; i < 400; ++i) {
    Vector x(100);
    for (auto& v : x) v = rng.uniform();
    stream.push_back(observe(clf, x));
    labels.push_back(1 + i % 10);
  }
  DetectorFitOptions small, big;
  small.clusters_per_class = 3;
  big.clusters_per_class = 12;
  std::vector<CalibratedDetector> dets{
      fit_detector(DetectorKind::FvCluster, clf, stream, labels, 0.01, small),
      fit_detector(DetectorKind::FvCluster, clf, stream, labels, 0.01, big),
      fit_detector(DetectorKind::GradBPL2, clf, stream, labels, 0.01, small)};
  const auto report = bench_detectors(dets, clf, stream, 2000);
  REQUIRE(report.entries.size() == 3u);
  for (const auto& e : report.entries) {
    CHECK(e.inference_micros > 0.0);
    CHECK(e.bootstrap_seconds > 0.0);
    CHECK(e.samples == 2000);
  }
  CHECK(report.entries[1].inference_micros > report.entries[0].inference_micros);
  CHECK(report.at("GradBP_L2").detector == "GradBP_L2");
  CHECK_THROWS_AS(bench_detectors(dets, clf, stream, 1), UsageError);
}

// -------------------------------------------------------------- complexity

TEST_CASE("complexity accounting") {
  CnnHyper h;
  h.filters = 2;
  h.fv_dim = 4;
  h.classes = 3;
  h.input_len = 8;
  const CnnModel m(h);
  // conv0 2*3+2, conv1 2*6+2, conv2 2*6+2, fc1 4*2+4, out 3*4+3
  const long hand = 8 + 14 + 14 + 12 + 15;
  GbtModel g;
  g.classes = 2;
  g.features = 8;
  g.trees = {Tree{{0, 0.5, 1, 2, 0.0}, {-1, 0.0, -1, -1, 1.0}, {-1, 0.0, -1, -1, -1.0}}, Tree{{-1, 0.0, -1, -1, 0.0}}};
  const auto r = complexity_report(&m, &g);
  CHECK(r.w_dl == hand);
  CHECK(r.k_dl == 3);
  CHECK(r.w_dl_per_class == doctest::Approx(hand / 3.0));
  CHECK(r.w_ml == 4);
  CHECK(r.w_ml_per_class == 2.0);

  g.classes = 4;
  CHECK(complexity_report(nullptr, &g).w_ml_per_class == 1.0);
  const auto j = to_json(r);
  CHECK(j.at("W_DL").get<long>() == hand);
}
