#pragma once

#include "zdtc/linalg.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

namespace zdtc {

/// One node of a regression tree. Internal nodes route x[feature] < threshold left.
struct TreeNode {
  int feature = -1;
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double leaf_value = 0.0;

  bool is_leaf() const { return left < 0; }
};

/// Nodes in creation order; index 0 is the root.
using Tree = std::vector<TreeNode>;

struct GbtParams {
  int rounds = 100;
  int max_depth = 4;
  double learning_rate = 0.3;
  double l2_reg = 1.0;
  /// Unused by exact greedy search; kept so runs record their seed.
  std::uint64_t seed = 0;

  void validate() const;
};

struct GbtModel {
  int classes = 0;
  int features = 0;
  GbtParams params;
  /// trees[round * classes + k] scores class k + 1.
  std::vector<Tree> trees;
  /// Training multi-class log-loss before round 0 and after every round.
  std::vector<double> train_loss;

  int rounds() const { return classes == 0 ? 0 : static_cast<int>(trees.size()) / classes; }
};

/// features: one row per sample; labels are 1-based.
GbtModel gbt_train(const Matrix& features, std::span<const int> labels, int classes, const GbtParams& params);

/// Sum over rounds of learning_rate * tree_k(x), per class.
Vector gbt_raw_scores(const GbtModel& model, const Eigen::Ref<const Vector>& x);
Vector gbt_predict(const GbtModel& model, const Eigen::Ref<const Vector>& x);

/// Internal plus leaf nodes over every tree.
long gbt_count_nodes(const GbtModel& model);

/// Edges on the longest root-to-leaf path; a lone leaf has depth 0.
int tree_depth(const Tree& tree);

nlohmann::json gbt_to_json(const GbtModel& model);
GbtModel gbt_from_json(const nlohmann::json& doc);
void save_gbt(const std::filesystem::path& path, const GbtModel& model);
GbtModel load_gbt(const std::filesystem::path& path);

}  // namespace zdtc
