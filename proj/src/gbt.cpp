#include "zdtc/gbt.hpp"

#include "zdtc/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

namespace zdtc {

namespace {

constexpr int kFormatVersion = 1;
constexpr double kMinGain = 1e-12;
constexpr double kMinHessian = 1e-16;

struct SplitCandidate {
  double gain = kMinGain;
  int feature = -1;
  double threshold = 0.0;
};

double leaf_score(double g, double h, double lambda) { return g * g / (h + lambda); }

/// Exact greedy, level-wise growth. Returns the tree and leaves the final
/// leaf index of every sample in node_of.
Tree fit_tree(const Matrix& x, const std::vector<std::vector<int>>& sorted, const Vector& grad,
              const Vector& hess, const GbtParams& params, std::vector<int>& node_of) {
  const auto n = static_cast<std::size_t>(x.rows());
  const int features = static_cast<int>(x.cols());
  const double lambda = params.l2_reg;
  Tree tree(1);
  std::vector<double> node_g{grad.sum()}, node_h{hess.sum()};
  std::fill(node_of.begin(), node_of.end(), 0);

  std::vector<int> frontier{0};
  for (int depth = 0; depth < params.max_depth && !frontier.empty(); ++depth) {
    std::vector<int> slot(tree.size(), -1);
    for (std::size_t s = 0; s < frontier.size(); ++s) slot[static_cast<std::size_t>(frontier[s])] = static_cast<int>(s);
    std::vector<SplitCandidate> best(frontier.size());
    std::vector<double> acc_g(frontier.size()), acc_h(frontier.size()), last(frontier.size());
    std::vector<char> seen(frontier.size());

    for (int f = 0; f < features; ++f) {
      std::fill(acc_g.begin(), acc_g.end(), 0.0);
      std::fill(acc_h.begin(), acc_h.end(), 0.0);
      std::fill(seen.begin(), seen.end(), 0);
      for (int i : sorted[static_cast<std::size_t>(f)]) {
        const int s = slot[static_cast<std::size_t>(node_of[static_cast<std::size_t>(i)])];
        if (s < 0) continue;
        const auto us = static_cast<std::size_t>(s);
        const double value = x(i, f);
        if (seen[us] && value != last[us]) {
          const int node = frontier[us];
          const double gl = acc_g[us], hl = acc_h[us];
          const double gr = node_g[static_cast<std::size_t>(node)] - gl;
          const double hr = node_h[static_cast<std::size_t>(node)] - hl;
          const double gain = 0.5 * (leaf_score(gl, hl, lambda) + leaf_score(gr, hr, lambda) -
                                     leaf_score(node_g[static_cast<std::size_t>(node)],
                                                node_h[static_cast<std::size_t>(node)], lambda));
          if (gain > best[us].gain) {
            double threshold = 0.5 * (last[us] + value);
            if (!(last[us] < threshold)) threshold = value;
            best[us] = {gain, f, threshold};
          }
        }
        acc_g[us] += grad[i];
        acc_h[us] += hess[i];
        last[us] = value;
        seen[us] = 1;
      }
    }

    std::vector<int> next;
    for (std::size_t s = 0; s < frontier.size(); ++s) {
      if (best[s].feature < 0) continue;
      const int node = frontier[s];
      const int left = static_cast<int>(tree.size());
      tree.emplace_back();
      tree.emplace_back();
      node_g.resize(tree.size(), 0.0);
      node_h.resize(tree.size(), 0.0);
      auto& parent = tree[static_cast<std::size_t>(node)];
      parent.feature = best[s].feature;
      parent.threshold = best[s].threshold;
      parent.left = left;
      parent.right = left + 1;
      next.push_back(left);
      next.push_back(left + 1);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto& node = tree[static_cast<std::size_t>(node_of[i])];
      if (node.is_leaf()) continue;
      // Only nodes split at this level have children; deeper routing is not needed.
      const int child = x(static_cast<Eigen::Index>(i), node.feature) < node.threshold ? node.left : node.right;
      node_of[i] = child;
      node_g[static_cast<std::size_t>(child)] += grad[static_cast<Eigen::Index>(i)];
      node_h[static_cast<std::size_t>(child)] += hess[static_cast<Eigen::Index>(i)];
    }
    frontier = std::move(next);
  }

  for (std::size_t k = 0; k < tree.size(); ++k) {
    if (tree[k].is_leaf()) tree[k].leaf_value = -node_g[k] / (node_h[k] + lambda);
  }
  return tree;
}

double tree_value(const Tree& tree, const Eigen::Ref<const Vector>& x) {
  std::size_t k = 0;
  while (!tree[k].is_leaf()) {
    k = static_cast<std::size_t>(x[tree[k].feature] < tree[k].threshold ? tree[k].left : tree[k].right);
  }
  return tree[k].leaf_value;
}

double log_loss(const Matrix& scores, std::span<const int> labels) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    const double m = scores.row(i).maxCoeff();
    const double lse = m + std::log((scores.row(i).array() - m).exp().sum());
    total += lse - scores(i, labels[static_cast<std::size_t>(i)] - 1);
  }
  return total / static_cast<double>(scores.rows());
}

int depth_from(const Tree& tree, std::size_t k) {
  if (tree[k].is_leaf()) return 0;
  return 1 + std::max(depth_from(tree, static_cast<std::size_t>(tree[k].left)),
                      depth_from(tree, static_cast<std::size_t>(tree[k].right)));
}

}  // namespace

void GbtParams::validate() const {
  if (rounds < 0) throw UsageError("gbt: rounds must be non-negative");
  if (max_depth < 1) throw UsageError("gbt: max_depth must be positive");
  if (!(learning_rate > 0.0)) throw UsageError("gbt: learning_rate must be positive");
  if (!(l2_reg >= 0.0)) throw UsageError("gbt: l2_reg must be non-negative");
}

GbtModel gbt_train(const Matrix& features, std::span<const int> labels, int classes, const GbtParams& params) {
  params.validate();
  if (features.rows() == 0) throw DataError("gbt_train: empty training set");
  if (static_cast<std::size_t>(features.rows()) != labels.size()) {
    throw std::invalid_argument("gbt_train: feature rows and labels differ in length");
  }
  if (classes < 2) throw std::invalid_argument("gbt_train: need at least two classes");
  for (int y : labels) {
    if (y < 1 || y > classes) throw DataError("gbt_train: label " + std::to_string(y) + " out of range");
  }

  GbtModel model;
  model.classes = classes;
  model.features = static_cast<int>(features.cols());
  model.params = params;

  const auto n = static_cast<std::size_t>(features.rows());
  std::vector<std::vector<int>> sorted(static_cast<std::size_t>(features.cols()));
  for (Eigen::Index f = 0; f < features.cols(); ++f) {
    auto& order = sorted[static_cast<std::size_t>(f)];
    order.resize(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return features(a, f) < features(b, f); });
  }

  Matrix scores = Matrix::Zero(features.rows(), classes);
  std::vector<int> node_of(n);
  model.train_loss.push_back(log_loss(scores, labels));
  for (int round = 0; round < params.rounds; ++round) {
    Matrix probs(scores.rows(), classes);
    for (Eigen::Index i = 0; i < scores.rows(); ++i) probs.row(i) = softmax(scores.row(i).transpose()).transpose();
    for (int k = 0; k < classes; ++k) {
      Vector grad = probs.col(k);
      for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] == k + 1) grad[static_cast<Eigen::Index>(i)] -= 1.0;
      }
      const Vector hess =
          (2.0 * probs.col(k).array() * (1.0 - probs.col(k).array())).max(kMinHessian).matrix();
      Tree tree = fit_tree(features, sorted, grad, hess, params, node_of);
      for (std::size_t i = 0; i < n; ++i) {
        scores(static_cast<Eigen::Index>(i), k) +=
            params.learning_rate * tree[static_cast<std::size_t>(node_of[i])].leaf_value;
      }
      model.trees.push_back(std::move(tree));
    }
    model.train_loss.push_back(log_loss(scores, labels));
  }
  return model;
}

Vector gbt_raw_scores(const GbtModel& model, const Eigen::Ref<const Vector>& x) {
  if (x.size() != model.features) {
    throw std::invalid_argument("gbt_predict: input has " + std::to_string(x.size()) + " features, model expects " +
                                std::to_string(model.features));
  }
  Vector raw = Vector::Zero(model.classes);
  for (std::size_t t = 0; t < model.trees.size(); ++t) {
    raw[static_cast<Eigen::Index>(t % static_cast<std::size_t>(model.classes))] +=
        model.params.learning_rate * tree_value(model.trees[t], x);
  }
  return raw;
}

Vector gbt_predict(const GbtModel& model, const Eigen::Ref<const Vector>& x) {
  return softmax(gbt_raw_scores(model, x));
}

long gbt_count_nodes(const GbtModel& model) {
  long total = 0;
  for (const auto& tree : model.trees) total += static_cast<long>(tree.size());
  return total;
}

int tree_depth(const Tree& tree) { return tree.empty() ? 0 : depth_from(tree, 0); }

nlohmann::json gbt_to_json(const GbtModel& model) {
  nlohmann::json doc;
  doc["format_version"] = kFormatVersion;
  doc["classes"] = model.classes;
  doc["features"] = model.features;
  doc["params"] = {{"rounds", model.params.rounds},
                   {"max_depth", model.params.max_depth},
                   {"learning_rate", model.params.learning_rate},
                   {"l2_reg", model.params.l2_reg},
                   {"seed", model.params.seed}};
  auto trees = nlohmann::json::array();
  for (const auto& tree : model.trees) {
    auto nodes = nlohmann::json::array();
    for (const auto& node : tree) {
      nodes.push_back({{"feature_index", node.feature},
                       {"threshold", node.threshold},
                       {"left", node.left},
                       {"right", node.right},
                       {"leaf_value", node.leaf_value}});
    }
    trees.push_back(std::move(nodes));
  }
  doc["trees"] = std::move(trees);
  doc["train_loss"] = model.train_loss;
  return doc;
}

GbtModel gbt_from_json(const nlohmann::json& doc) {
  try {
    if (doc.at("format_version").get<int>() != kFormatVersion) throw DataError("unsupported gbt format_version");
    GbtModel model;
    model.classes = doc.at("classes").get<int>();
    model.features = doc.at("features").get<int>();
    const auto& p = doc.at("params");
    model.params.rounds = p.at("rounds").get<int>();
    model.params.max_depth = p.at("max_depth").get<int>();
    model.params.learning_rate = p.at("learning_rate").get<double>();
    model.params.l2_reg = p.at("l2_reg").get<double>();
    model.params.seed = p.at("seed").get<std::uint64_t>();
    for (const auto& nodes : doc.at("trees")) {
      Tree tree;
      for (const auto& node : nodes) {
        TreeNode t;
        t.feature = node.at("feature_index").get<int>();
        t.threshold = node.at("threshold").get<double>();
        t.left = node.at("left").get<int>();
        t.right = node.at("right").get<int>();
        t.leaf_value = node.at("leaf_value").get<double>();
        tree.push_back(t);
      }
      const auto size = static_cast<int>(tree.size());
      for (const auto& t : tree) {
        if (!t.is_leaf() && (t.right >= size || t.left >= size || t.feature < 0 || t.feature >= model.features)) {
          throw DataError("gbt model: node references out of range");
        }
      }
      if (tree.empty()) throw DataError("gbt model: empty tree");
      model.trees.push_back(std::move(tree));
    }
    if (model.classes < 2 || model.trees.size() % static_cast<std::size_t>(model.classes) != 0) {
      throw DataError("gbt model: tree count is not a multiple of the class count");
    }
    if (doc.contains("train_loss")) model.train_loss = doc["train_loss"].get<std::vector<double>>();
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed gbt document: ") + e.what());
  }
}

void save_gbt(const std::filesystem::path& path, const GbtModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write model " + path.string());
  out << gbt_to_json(model).dump() << '\n';
}

GbtModel load_gbt(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open model " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("model " + path.string() + ": " + e.what());
  }
  return gbt_from_json(doc);
}

}  // namespace zdtc
