#include "zdtc/nn.hpp"

#include "zdtc/error.hpp"
#include "zdtc/rng.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

namespace zdtc {

namespace {

constexpr int kFormatVersion = 1;

int in_channels(const CnnHyper& hyper, int block) { return block == 0 ? 1 : hyper.filters; }

void fill_uniform(Matrix& m, double limit, Rng& rng) {
  // Row-major fill so the draw order matches the serialized layout.
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.uniform(-limit, limit);
}

Matrix im2col(const Matrix& input) {
  const Eigen::Index channels = input.rows(), len = input.cols();
  Matrix cols = Matrix::Zero(channels * kConvKernel, len);
  for (Eigen::Index c = 0; c < channels; ++c) {
    for (int k = 0; k < kConvKernel; ++k) {
      for (Eigen::Index t = 0; t < len; ++t) {
        const Eigen::Index src = t + k - 1;
        if (src >= 0 && src < len) cols(c * kConvKernel + k, t) = input(c, src);
      }
    }
  }
  return cols;
}

Matrix col2im(const Matrix& cols, Eigen::Index channels) {
  const Eigen::Index len = cols.cols();
  Matrix out = Matrix::Zero(channels, len);
  for (Eigen::Index c = 0; c < channels; ++c) {
    for (int k = 0; k < kConvKernel; ++k) {
      for (Eigen::Index t = 0; t < len; ++t) {
        const Eigen::Index dst = t + k - 1;
        if (dst >= 0 && dst < len) out(c, dst) += cols(c * kConvKernel + k, t);
      }
    }
  }
  return out;
}

template <typename Fn>
void for_each_tensor(const CnnModel& model, Fn&& fn) {
  for (const auto& block : model.conv) {
    fn(block.weight);
    fn(block.bias);
  }
  fn(model.fc1.weight);
  fn(model.fc1.bias);
  fn(model.out.weight);
  fn(model.out.bias);
}

template <typename Fn>
void for_each_tensor(CnnModel& model, Fn&& fn) {
  for (auto& block : model.conv) {
    fn(block.weight);
    fn(block.bias);
  }
  fn(model.fc1.weight);
  fn(model.fc1.bias);
  fn(model.out.weight);
  fn(model.out.bias);
}

void check_target(const CnnModel& model, int target) {
  if (target < 1 || target > model.hyper.classes) {
    throw std::invalid_argument("target class " + std::to_string(target) + " outside [1," +
                                std::to_string(model.hyper.classes) + "]");
  }
}

nlohmann::json matrix_to_json(const Matrix& m) {
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) flat.push_back(m(r, c));
  return flat;
}

void matrix_from_json(const nlohmann::json& arr, Matrix& m, const std::string& name) {
  if (!arr.is_array() || static_cast<Eigen::Index>(arr.size()) != m.size()) {
    throw DataError("model layer " + name + ": expected " + std::to_string(m.size()) + " weights");
  }
  std::size_t i = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = arr[i++].get<double>();
  require_finite(m, "model layer " + name);
}

void vector_from_json(const nlohmann::json& arr, Vector& v, const std::string& name) {
  if (!arr.is_array() || static_cast<Eigen::Index>(arr.size()) != v.size()) {
    throw DataError("model layer " + name + ": expected " + std::to_string(v.size()) + " biases");
  }
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = arr[static_cast<std::size_t>(i)].get<double>();
  require_finite(v, "model layer " + name);
}

}  // namespace

CnnHyper CnnHyper::for_proto(Proto proto, int classes) {
  CnnHyper h;
  h.classes = classes;
  h.input_len = series_cap(proto);
  if (proto == Proto::TCP) {
    h.filters = 32;
    h.fv_dim = 128;
  } else {
    h.filters = 16;
    h.fv_dim = 64;
  }
  return h;
}

void CnnHyper::validate() const {
  if (filters < 1 || fv_dim < 1) throw std::invalid_argument("cnn: filters and fv_dim must be positive");
  if (classes < 2) throw std::invalid_argument("cnn: need at least two classes");
  // Three halvings must leave at least one position.
  if (input_len < 8) throw std::invalid_argument("cnn: input_len must be at least 8");
}

CnnModel::CnnModel(const CnnHyper& h) : hyper(h) {
  hyper.validate();
  for (int b = 0; b < kConvBlocks; ++b) {
    conv[b].weight = Matrix::Zero(hyper.filters, in_channels(hyper, b) * kConvKernel);
    conv[b].bias = Vector::Zero(hyper.filters);
  }
  fc1.weight = Matrix::Zero(hyper.fv_dim, flat_len());
  fc1.bias = Vector::Zero(hyper.fv_dim);
  out.weight = Matrix::Zero(hyper.classes, hyper.fv_dim);
  out.bias = Vector::Zero(hyper.classes);
}

int CnnModel::pooled_len(int block) const {
  int len = hyper.input_len;
  for (int b = 0; b <= block; ++b) len /= 2;
  return len;
}

int CnnModel::flat_len() const { return hyper.filters * pooled_len(kConvBlocks - 1); }

CnnModel init_cnn(const CnnHyper& hyper, std::uint64_t seed) {
  CnnModel model(hyper);
  Rng rng(seed);
  for (int b = 0; b < kConvBlocks; ++b) {
    const double fan_in = in_channels(hyper, b) * kConvKernel;
    fill_uniform(model.conv[b].weight, std::sqrt(6.0 / fan_in), rng);
  }
  fill_uniform(model.fc1.weight, std::sqrt(6.0 / model.flat_len()), rng);
  fill_uniform(model.out.weight, std::sqrt(6.0 / (hyper.fv_dim + hyper.classes)), rng);
  return model;
}

long count_params(const CnnModel& model) {
  long total = 0;
  for_each_tensor(model, [&](const auto& t) { total += static_cast<long>(t.size()); });
  return total;
}

ForwardPass forward_full(const CnnModel& model, const Eigen::Ref<const Vector>& x) {
  if (x.size() != model.hyper.input_len) {
    throw std::invalid_argument("forward: input length " + std::to_string(x.size()) + " but model expects " +
                                std::to_string(model.hyper.input_len));
  }
  ForwardPass pass;
  Matrix act = x.transpose();  // 1 x input_len
  for (int b = 0; b < kConvBlocks; ++b) {
    auto& cache = pass.conv[b];
    cache.cols = im2col(act);
    cache.pre = model.conv[b].weight * cache.cols;
    cache.pre.colwise() += model.conv[b].bias;
    const Eigen::Index pooled = cache.pre.cols() / 2;
    Matrix next(cache.pre.rows(), pooled);
    cache.arg.resize(cache.pre.rows(), pooled);
    for (Eigen::Index f = 0; f < cache.pre.rows(); ++f) {
      for (Eigen::Index j = 0; j < pooled; ++j) {
        const double a = std::max(cache.pre(f, 2 * j), 0.0);
        const double c = std::max(cache.pre(f, 2 * j + 1), 0.0);
        // Ties go to the left position.
        const bool left = a >= c;
        next(f, j) = left ? a : c;
        cache.arg(f, j) = static_cast<int>(left ? 2 * j : 2 * j + 1);
      }
    }
    act = std::move(next);
  }
  const Eigen::Index len = act.cols();
  pass.flat.resize(act.size());
  for (Eigen::Index f = 0; f < act.rows(); ++f)
    for (Eigen::Index j = 0; j < len; ++j) pass.flat[f * len + j] = act(f, j);

  auto& tr = pass.trace;
  tr.pre_fc1 = model.fc1.weight * pass.flat + model.fc1.bias;
  tr.fv = tr.pre_fc1.cwiseMax(0.0);
  tr.v = model.out.weight * tr.fv + model.out.bias;
  tr.probs = softmax(tr.v);
  return pass;
}

ActivationTrace forward(const CnnModel& model, const Eigen::Ref<const Vector>& x) {
  return forward_full(model, x).trace;
}

HeadGradient head_gradient(const CnnModel& model, const ActivationTrace& trace, int target) {
  check_target(model, target);
  HeadGradient g;
  g.output = trace.probs;
  g.output[target - 1] -= 1.0;
  const Vector relu_grad = (trace.pre_fc1.array() > 0.0).cast<double>().matrix();
  g.fv = hadamard(matvec_t(model.out.weight, g.output), relu_grad);
  return g;
}

CnnGradients zero_gradients(const CnnModel& model) {
  CnnGradients g;
  for (int b = 0; b < kConvBlocks; ++b) {
    g.conv[b].weight = Matrix::Zero(model.conv[b].weight.rows(), model.conv[b].weight.cols());
    g.conv[b].bias = Vector::Zero(model.conv[b].bias.size());
  }
  g.fc1.weight = Matrix::Zero(model.fc1.weight.rows(), model.fc1.weight.cols());
  g.fc1.bias = Vector::Zero(model.fc1.bias.size());
  g.out.weight = Matrix::Zero(model.out.weight.rows(), model.out.weight.cols());
  g.out.bias = Vector::Zero(model.out.bias.size());
  return g;
}

void accumulate_backward(const CnnModel& model, const ForwardPass& pass, int target, CnnGradients& acc) {
  acc.head = head_gradient(model, pass.trace, target);
  const auto& head = acc.head;
  acc.out.weight.noalias() += head.output * pass.trace.fv.transpose();
  acc.out.bias += head.output;
  acc.fc1.weight.noalias() += head.fv * pass.flat.transpose();
  acc.fc1.bias += head.fv;

  const Vector dflat = matvec_t(model.fc1.weight, head.fv);
  const Eigen::Index len3 = model.pooled_len(kConvBlocks - 1);
  Matrix dpooled(model.hyper.filters, len3);
  for (Eigen::Index f = 0; f < dpooled.rows(); ++f)
    for (Eigen::Index j = 0; j < len3; ++j) dpooled(f, j) = dflat[f * len3 + j];

  for (int b = kConvBlocks - 1; b >= 0; --b) {
    const auto& cache = pass.conv[b];
    Matrix dpre = Matrix::Zero(cache.pre.rows(), cache.pre.cols());
    for (Eigen::Index f = 0; f < dpooled.rows(); ++f) {
      for (Eigen::Index j = 0; j < dpooled.cols(); ++j) {
        const int t = cache.arg(f, j);
        if (cache.pre(f, t) > 0.0) dpre(f, t) += dpooled(f, j);
      }
    }
    acc.conv[b].weight.noalias() += dpre * cache.cols.transpose();
    acc.conv[b].bias += dpre.rowwise().sum();
    if (b > 0) {
      const Matrix dcols = model.conv[b].weight.transpose() * dpre;
      dpooled = col2im(dcols, in_channels(model.hyper, b));
    }
  }
}

CnnGradients backward(const CnnModel& model, const ForwardPass& pass, int target) {
  CnnGradients g = zero_gradients(model);
  accumulate_backward(model, pass, target, g);
  return g;
}

double cross_entropy(const ActivationTrace& trace, int target) {
  if (target < 1 || target > trace.probs.size()) throw std::invalid_argument("cross_entropy: target out of range");
  // log-sum-exp form stays finite when probs underflows.
  const double m = trace.v.maxCoeff();
  const double lse = m + std::log((trace.v.array() - m).exp().sum());
  return lse - trace.v[target - 1];
}

Vector flatten_params(const CnnModel& model) {
  Vector flat(count_params(model));
  Eigen::Index pos = 0;
  for_each_tensor(model, [&](const auto& t) {
    flat.segment(pos, t.size()) = Eigen::Map<const Vector>(t.data(), t.size());
    pos += t.size();
  });
  return flat;
}

void unflatten_params(CnnModel& model, const Eigen::Ref<const Vector>& flat) {
  if (flat.size() != count_params(model)) throw std::invalid_argument("unflatten_params: size mismatch");
  Eigen::Index pos = 0;
  for_each_tensor(model, [&](auto& t) {
    Eigen::Map<Vector>(t.data(), t.size()) = flat.segment(pos, t.size());
    pos += t.size();
  });
}

Vector flatten_gradients(const CnnGradients& grads) {
  Eigen::Index total = 0;
  auto visit = [&](auto&& fn) {
    for (const auto& block : grads.conv) {
      fn(block.weight);
      fn(block.bias);
    }
    fn(grads.fc1.weight);
    fn(grads.fc1.bias);
    fn(grads.out.weight);
    fn(grads.out.bias);
  };
  visit([&](const auto& t) { total += t.size(); });
  Vector flat(total);
  Eigen::Index pos = 0;
  visit([&](const auto& t) {
    flat.segment(pos, t.size()) = Eigen::Map<const Vector>(t.data(), t.size());
    pos += t.size();
  });
  return flat;
}

void TrainConfig::validate() const {
  if (epochs < 1 || batch_size < 1 || !(learning_rate > 0.0)) {
    throw UsageError("train config: epochs, batch_size and learning_rate must be positive");
  }
}

TrainResult train(const CnnModel& init, std::span<const Vector> inputs, std::span<const int> labels,
                  const TrainConfig& cfg) {
  cfg.validate();
  if (inputs.empty()) throw DataError("train: empty training set");
  if (inputs.size() != labels.size()) throw std::invalid_argument("train: inputs and labels differ in length");
  for (int y : labels) {
    if (y < 1 || y > init.hyper.classes) {
      throw DataError("train: label " + std::to_string(y) + " outside [1," + std::to_string(init.hyper.classes) + "]");
    }
  }

  TrainResult result{init, {}};
  CnnModel& model = result.model;
  Vector params = flatten_params(model);
  Vector m1 = Vector::Zero(params.size());
  Vector m2 = Vector::Zero(params.size());
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long step = 0;

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(inputs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      CnnGradients acc = zero_gradients(model);
      for (std::size_t i = start; i < stop; ++i) {
        const std::size_t idx = order[i];
        const ForwardPass pass = forward_full(model, inputs[idx]);
        epoch_loss += cross_entropy(pass.trace, labels[idx]);
        accumulate_backward(model, pass, labels[idx], acc);
      }
      const Vector grad = flatten_gradients(acc) / static_cast<double>(stop - start);
      if (cfg.optimizer == Optimizer::SGD) {
        params -= cfg.learning_rate * grad;
      } else {
        ++step;
        m1 = beta1 * m1 + (1.0 - beta1) * grad;
        m2 = beta2 * m2 + (1.0 - beta2) * grad.cwiseAbs2();
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
        params.array() -= cfg.learning_rate * (m1.array() / c1) / ((m2.array() / c2).sqrt() + eps);
      }
      unflatten_params(model, params);
    }
    result.loss_history.push_back(epoch_loss / static_cast<double>(order.size()));
  }
  return result;
}

TrainResult train(const CnnModel& init, std::span<const FlowRecord> records, const TrainConfig& cfg, int mtu) {
  std::vector<Vector> inputs;
  std::vector<int> labels;
  inputs.reserve(records.size());
  labels.reserve(records.size());
  for (const auto& r : records) {
    inputs.push_back(normalize(r.series, mtu));
    labels.push_back(r.label);
  }
  return train(init, inputs, labels, cfg);
}

double mean_loss(const CnnModel& model, std::span<const Vector> inputs, std::span<const int> labels) {
  if (inputs.empty() || inputs.size() != labels.size()) throw std::invalid_argument("mean_loss: bad inputs");
  double total = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) total += cross_entropy(forward(model, inputs[i]), labels[i]);
  return total / static_cast<double>(inputs.size());
}

nlohmann::json cnn_to_json(const CnnModel& model) {
  nlohmann::json doc;
  doc["format_version"] = kFormatVersion;
  doc["hyper"] = {{"filters", model.hyper.filters},
                  {"fv_dim", model.hyper.fv_dim},
                  {"classes", model.hyper.classes},
                  {"input_len", model.hyper.input_len}};
  auto layers = nlohmann::json::array();
  for (int b = 0; b < kConvBlocks; ++b) {
    layers.push_back({{"name", "conv" + std::to_string(b + 1)},
                      {"shape", {model.hyper.filters, in_channels(model.hyper, b), kConvKernel}},
                      {"weights", matrix_to_json(model.conv[b].weight)},
                      {"bias", std::vector<double>(model.conv[b].bias.begin(), model.conv[b].bias.end())}});
  }
  auto dense = [](const char* name, const DenseLayer& layer) {
    return nlohmann::json{{"name", name},
                          {"shape", {layer.weight.rows(), layer.weight.cols()}},
                          {"weights", matrix_to_json(layer.weight)},
                          {"bias", std::vector<double>(layer.bias.begin(), layer.bias.end())}};
  };
  layers.push_back(dense("fc1", model.fc1));
  layers.push_back(dense("output", model.out));
  doc["layers"] = std::move(layers);
  return doc;
}

CnnModel cnn_from_json(const nlohmann::json& doc) {
  try {
    if (doc.at("format_version").get<int>() != kFormatVersion) throw DataError("unsupported model format_version");
    CnnHyper h;
    const auto& hj = doc.at("hyper");
    h.filters = hj.at("filters").get<int>();
    h.fv_dim = hj.at("fv_dim").get<int>();
    h.classes = hj.at("classes").get<int>();
    h.input_len = hj.at("input_len").get<int>();
    try {
      h.validate();
    } catch (const std::invalid_argument& e) {
      throw DataError(std::string("model hyper: ") + e.what());
    }
    CnnModel model(h);
    const auto& layers = doc.at("layers");
    if (!layers.is_array() || layers.size() != kConvBlocks + 2) throw DataError("model: expected 5 layers");
    auto load = [&](std::size_t i, Matrix& w, Vector& b, std::vector<long> shape) {
      const auto& layer = layers[i];
      const auto name = layer.at("name").get<std::string>();
      if (layer.at("shape").get<std::vector<long>>() != shape) {
        throw DataError("model layer " + name + ": shape disagrees with hyper");
      }
      matrix_from_json(layer.at("weights"), w, name);
      vector_from_json(layer.at("bias"), b, name);
    };
    for (int b = 0; b < kConvBlocks; ++b) {
      load(static_cast<std::size_t>(b), model.conv[b].weight, model.conv[b].bias,
           {h.filters, in_channels(h, b), kConvKernel});
    }
    load(3, model.fc1.weight, model.fc1.bias, {h.fv_dim, model.flat_len()});
    load(4, model.out.weight, model.out.bias, {h.classes, h.fv_dim});
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed model document: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("malformed model document: ") + e.what());
  }
}

void save_cnn(const std::filesystem::path& path, const CnnModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write model " + path.string());
  out << cnn_to_json(model).dump() << '\n';
}

CnnModel load_cnn(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open model " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("model " + path.string() + ": " + e.what());
  }
  return cnn_from_json(doc);
}

}  // namespace zdtc
