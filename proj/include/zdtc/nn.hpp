#pragma once

#include "zdtc/dataset.hpp"
#include "zdtc/linalg.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

namespace zdtc {

inline constexpr int kConvBlocks = 3;
inline constexpr int kConvKernel = 3;

struct CnnHyper {
  int filters = 32;
  int fv_dim = 128;
  int classes = 2;
  int input_len = 100;

  /// TCP: 32 filters, 128-wide feature layer. UDP: 16 and 64.
  static CnnHyper for_proto(Proto proto, int classes);

  void validate() const;
  friend bool operator==(const CnnHyper&, const CnnHyper&) = default;
};

/// Same-padded 1x3 convolution, ReLU, then max-pool of size 2 stride 2.
/// weight is filters x (in_channels * 3); column c*3 + k is tap k of channel c.
struct ConvBlock {
  Matrix weight;
  Vector bias;
};

/// weight is out x in.
struct DenseLayer {
  Matrix weight;
  Vector bias;
};

struct CnnModel {
  CnnHyper hyper;
  std::array<ConvBlock, kConvBlocks> conv;
  DenseLayer fc1;  // feature-vector layer, ReLU
  DenseLayer out;  // logits, SoftMax applied in forward()

  /// All weights zero.
  explicit CnnModel(const CnnHyper& hyper);

  /// Sequence length leaving conv block `block` (after pooling).
  int pooled_len(int block) const;
  int flat_len() const;
};

/// He-uniform for the ReLU layers, Glorot-uniform for the logit layer, zero biases.
CnnModel init_cnn(const CnnHyper& hyper, std::uint64_t seed);

/// Exact number of kernel and bias elements.
long count_params(const CnnModel& model);

struct ActivationTrace {
  Vector fv;       // ReLU(pre_fc1)
  Vector v;        // logits
  Vector probs;    // SoftMax(v)
  Vector pre_fc1;  // fc1 pre-activation
};

struct ConvCache {
  Matrix cols;          // im2col of the block input, (in_channels*3) x len
  Matrix pre;           // pre-activation, filters x len
  Eigen::MatrixXi arg;  // pooled position -> winning input position
};

struct ForwardPass {
  ActivationTrace trace;
  std::array<ConvCache, kConvBlocks> conv;
  Vector flat;
};

ActivationTrace forward(const CnnModel& model, const Eigen::Ref<const Vector>& x);
ForwardPass forward_full(const CnnModel& model, const Eigen::Ref<const Vector>& x);

/// delta^L = probs - onehot(target) and delta^{L-1} = (W_out^T delta^L) * ReLU'(pre_fc1).
struct HeadGradient {
  Vector output;
  Vector fv;
};

/// target is 1-based. Reads the trace only; the model is never modified.
HeadGradient head_gradient(const CnnModel& model, const ActivationTrace& trace, int target);

struct CnnGradients {
  HeadGradient head;
  std::array<ConvBlock, kConvBlocks> conv;
  DenseLayer fc1;
  DenseLayer out;
};

/// Cross-entropy gradients for every weight and bias of the model.
CnnGradients backward(const CnnModel& model, const ForwardPass& pass, int target);

/// Adds the weight gradients of one sample into acc (shaped like the model);
/// acc.head receives this sample's head gradient.
void accumulate_backward(const CnnModel& model, const ForwardPass& pass, int target, CnnGradients& acc);

/// Gradient container shaped like the model, all zeros.
CnnGradients zero_gradients(const CnnModel& model);

/// -ln P(y = target | x).
double cross_entropy(const ActivationTrace& trace, int target);

/// Flat views used by the optimizer and gradient checks. Order: conv blocks,
/// fc1, out; weight before bias; column-major within each matrix.
Vector flatten_params(const CnnModel& model);
void unflatten_params(CnnModel& model, const Eigen::Ref<const Vector>& flat);
Vector flatten_gradients(const CnnGradients& grads);

enum class Optimizer { SGD, Adam };

struct TrainConfig {
  int epochs = 30;
  int batch_size = 128;
  double learning_rate = 1e-3;
  std::uint64_t seed = 42;
  Optimizer optimizer = Optimizer::Adam;

  void validate() const;
};

struct TrainResult {
  CnnModel model;
  /// Mean cross-entropy over each epoch's mini-batches, measured before each update.
  std::vector<double> loss_history;
};

/// labels are 1-based class indices.
TrainResult train(const CnnModel& init, std::span<const Vector> inputs, std::span<const int> labels,
                  const TrainConfig& cfg);

/// Uses record labels directly; every record must have label in [1, K].
TrainResult train(const CnnModel& init, std::span<const FlowRecord> records, const TrainConfig& cfg,
                  int mtu = kDefaultMtu);

double mean_loss(const CnnModel& model, std::span<const Vector> inputs, std::span<const int> labels);

nlohmann::json cnn_to_json(const CnnModel& model);
CnnModel cnn_from_json(const nlohmann::json& doc);
void save_cnn(const std::filesystem::path& path, const CnnModel& model);
CnnModel load_cnn(const std::filesystem::path& path);

}  // namespace zdtc
