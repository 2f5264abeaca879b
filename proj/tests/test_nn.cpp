#include <doctest.h>

#include "zdtc/error.hpp"
#include "zdtc/nn.hpp"
#include "zdtc/rng.hpp"

#include <cmath>
#include <filesystem>
#include <numeric>

using namespace zdtc;

namespace {

Vector random_input(Rng& rng, int n) {
  Vector x(n);
  for (int i = 0; i < n; ++i) x[i] = rng.uniform();
  return x;
}

double checksum(const CnnModel& m) { return flatten_params(m).sum(); }

// Identity tap for every conv block except the first, which uses `first`.
CnnModel toy_model(const Vector& first) {
  CnnHyper h;
  h.filters = 1;
  h.fv_dim = 1;
  h.classes = 2;
  h.input_len = 8;
  CnnModel m(h);
  m.conv[0].weight.row(0) = first.transpose();
  m.conv[1].weight(0, 1) = 1.0;
  m.conv[2].weight(0, 1) = 1.0;
  m.fc1.weight(0, 0) = 1.0;
  m.out.weight(0, 0) = 1.0;
  m.out.weight(1, 0) = -1.0;
  return m;
}

}  // namespace

TEST_CASE("zero weights give uniform probabilities") {
  CnnHyper h;
  h.filters = 4;
  h.fv_dim = 6;
  h.classes = 4;
  h.input_len = 16;
  const CnnModel m(h);
  Rng rng(1);
  const auto tr = forward(m, random_input(rng, 16));
  for (int k = 0; k < 4; ++k) CHECK(tr.probs[k] == doctest::Approx(0.25));
}

TEST_CASE("forward on a hand-built toy net") {
  // First tap reads x[t-1]; with identity taps after it the three pooling
  // stages reduce to max(x[0..6]); x[7] is shifted out of the window.
  Vector tap(3);
  tap << 1, 0, 0;
  const CnnModel m = toy_model(tap);
  Vector x(8);
  x << 0.1, 0.9, 0.2, 0.3, 0.4, 0.5, 0.6, 1.0;
  const auto tr = forward(m, x);
  CHECK(tr.fv[0] == doctest::Approx(0.9));
  CHECK(tr.v[0] == doctest::Approx(0.9));
  CHECK(tr.v[1] == doctest::Approx(-0.9));
  const double e = std::exp(1.8);
  CHECK(tr.probs[0] == doctest::Approx(e / (e + 1.0)));

  // Tap on x[t+1]: window becomes x[1..7].
  tap << 0, 0, 1;
  CHECK(forward(toy_model(tap), x).v[0] == doctest::Approx(1.0));
}

TEST_CASE("trace invariants") {
  Rng rng(2);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto m = init_cnn(CnnHyper::for_proto(seed % 2 ? Proto::UDP : Proto::TCP, 5), seed);
    const auto tr = forward(m, random_input(rng, m.hyper.input_len));
    CHECK(std::abs(tr.probs.sum() - 1.0) < 1e-9);
    Eigen::Index a = 0, b = 0;
    tr.probs.maxCoeff(&a);
    tr.v.maxCoeff(&b);
    CHECK(a == b);
    CHECK(tr.fv.size() == m.hyper.fv_dim);
  }
}

TEST_CASE("forward rejects a wrong input length") {
  const auto m = init_cnn(CnnHyper::for_proto(Proto::UDP, 3), 1);
  CHECK_THROWS_AS(forward(m, Vector::Zero(11)), std::invalid_argument);
}

TEST_CASE("parameter counts") {
  CnnHyper h = CnnHyper::for_proto(Proto::TCP, 200);
  const CnnModel m(h);
  CHECK(m.flat_len() == 32 * 12);
  CHECK(m.out.weight.size() + m.out.bias.size() == 25800);
  CHECK(m.conv[0].weight.size() + m.conv[0].bias.size() == 128);
  // conv 128 + 2 * (32*96 + 32) + fc1 (384*128 + 128) + out (128*200 + 200)
  CHECK(count_params(m) == 128 + 2 * 3104 + 49280 + 25800);

  // Only the output layer depends on K.
  const CnnModel m50(CnnHyper::for_proto(Proto::TCP, 50));
  CHECK(count_params(m) - count_params(m50) == 128 * 150 + 150);
}

TEST_CASE("head gradient sign convention") {
  CnnHyper h;
  h.filters = 1;
  h.fv_dim = 3;
  h.classes = 2;
  h.input_len = 8;
  CnnModel m(h);
  m.out.weight << 1, 2, 3, -1, 0, 4;
  ActivationTrace tr;
  tr.probs = Vector::Constant(2, 0.5);
  tr.v = Vector::Zero(2);
  tr.fv = Vector::Ones(3);
  tr.pre_fc1 = Vector(3);
  tr.pre_fc1 << 1.0, -1.0, 2.0;
  const auto g = head_gradient(m, tr, 1);
  CHECK(g.output[0] == -0.5);
  CHECK(g.output[1] == 0.5);
  // W^T delta = (-1, -1, 0.5), masked by pre_fc1 > 0.
  CHECK(g.fv[0] == doctest::Approx(-1.0));
  CHECK(g.fv[1] == 0.0);
  CHECK(g.fv[2] == doctest::Approx(0.5));

  tr.probs << 1.0, 0.0;
  const auto z = head_gradient(m, tr, 1);
  CHECK(z.output.isZero(0.0));
  CHECK(z.fv.isZero(0.0));
  CHECK_THROWS_AS(head_gradient(m, tr, 3), std::invalid_argument);
}

TEST_CASE("weight gradients match central differences") {
  Rng rng(77);
  for (int trial = 0; trial < 3; ++trial) {
    CnnHyper h;
    h.filters = 3;
    h.fv_dim = 5;
    h.classes = 3;
    h.input_len = 12;
    CnnModel m = init_cnn(h, 100 + trial);
    const Vector x = random_input(rng, 12);
    const int target = 1 + trial % 3;
    const Vector analytic = flatten_gradients(backward(m, forward_full(m, x), target));
    const Vector theta = flatten_params(m);
    REQUIRE(analytic.size() == theta.size());
    int checked = 0;
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      Vector t = theta;
      t[i] += 1e-5;
      unflatten_params(m, t);
      const double up = cross_entropy(forward(m, x), target);
      t[i] -= 2e-5;
      unflatten_params(m, t);
      const double down = cross_entropy(forward(m, x), target);
      const double numeric = (up - down) / 2e-5;
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-6});
      CHECK(std::abs(numeric - analytic[i]) / denom < 1e-4);
      ++checked;
    }
    unflatten_params(m, theta);
    CHECK(checked == count_params(m));
  }
}

TEST_CASE("backward leaves the weights untouched") {
  const auto m = init_cnn(CnnHyper::for_proto(Proto::UDP, 4), 3);
  Rng rng(4);
  const double before = checksum(m);
  backward(m, forward_full(m, random_input(rng, 10)), 2);
  CHECK(checksum(m) == before);
}

TEST_CASE("flatten and unflatten are inverse") {
  auto m = init_cnn(CnnHyper::for_proto(Proto::UDP, 4), 9);
  const Vector flat = flatten_params(m);
  CHECK(flat.size() == count_params(m));
  CnnModel copy(m.hyper);
  unflatten_params(copy, flat);
  CHECK(flatten_params(copy) == flat);
}

namespace {

// Two classes told apart by the sign of the first half of the series.
void separable_set(Rng& rng, int n, std::vector<Vector>& xs, std::vector<int>& ys) {
  for (int i = 0; i < n; ++i) {
    const int y = 1 + i % 2;
    Vector x(10);
    for (int j = 0; j < 10; ++j) {
      const double base = j < 5 ? (y == 1 ? 0.85 : 0.15) : 0.5;
      x[j] = std::clamp(base + 0.05 * rng.normal(), 0.0, 1.0);
    }
    xs.push_back(x);
    ys.push_back(y);
  }
}

}  // namespace

TEST_CASE("training separates a linearly separable set") {
  Rng rng(5);
  std::vector<Vector> xs;
  std::vector<int> ys;
  separable_set(rng, 200, xs, ys);
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 32;
  const auto init = init_cnn(CnnHyper::for_proto(Proto::UDP, 2), 1);
  CHECK(mean_loss(init, xs, ys) == doctest::Approx(std::log(2.0)).epsilon(0.15));
  const auto result = train(init, xs, ys, cfg);
  int correct = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) correct += argmax(forward(result.model, xs[i]).probs) + 1 == ys[i];
  CHECK(static_cast<double>(correct) / xs.size() >= 0.99);
  CHECK(result.loss_history.size() == 20u);
  CHECK(result.loss_history.back() < result.loss_history.front());

  const auto again = train(init, xs, ys, cfg);
  CHECK(again.loss_history == result.loss_history);
}

TEST_CASE("initial loss is near ln K") {
  Rng rng(6);
  std::vector<Vector> xs;
  std::vector<int> ys;
  for (int i = 0; i < 200; ++i) {
    xs.push_back(random_input(rng, 100));
    ys.push_back(1 + i % 10);
  }
  const auto m = init_cnn(CnnHyper::for_proto(Proto::TCP, 10), 2);
  // Labels are independent of the inputs, so the loss is ln K plus about half
  // the mean logit variance; the second-order term stays small at init.
  double spread = 0.0;
  for (const auto& x : xs) {
    const Vector v = forward(m, x).v;
    spread += 0.5 * (v.array() - v.mean()).square().mean() / xs.size();
  }
  const double loss = mean_loss(m, xs, ys);
  CHECK(spread < 0.5);
  CHECK(loss == doctest::Approx(std::log(10.0) + spread).epsilon(0.05));
}

TEST_CASE("full-batch gradient descent with a small step never raises the loss") {
  Rng rng(8);
  std::vector<Vector> xs;
  std::vector<int> ys;
  separable_set(rng, 64, xs, ys);
  TrainConfig cfg;
  cfg.epochs = 15;
  cfg.batch_size = 64;
  cfg.learning_rate = 1e-4;
  cfg.optimizer = Optimizer::SGD;
  const auto result = train(init_cnn(CnnHyper::for_proto(Proto::UDP, 2), 3), xs, ys, cfg);
  for (std::size_t e = 1; e < result.loss_history.size(); ++e) {
    CHECK(result.loss_history[e] <= result.loss_history[e - 1] + 1e-12);
  }
}

TEST_CASE("training input validation") {
  const auto m = init_cnn(CnnHyper::for_proto(Proto::UDP, 2), 1);
  std::vector<Vector> xs{Vector::Zero(10)};
  std::vector<int> bad{3};
  CHECK_THROWS(train(m, xs, bad, TrainConfig{}));
  CHECK_THROWS_AS(train(m, std::vector<Vector>{}, std::vector<int>{}, TrainConfig{}), DataError);
}

TEST_CASE("model serialization round trip") {
  const auto m = init_cnn(CnnHyper::for_proto(Proto::TCP, 7), 12);
  const auto path = std::filesystem::temp_directory_path() / "zdtc_nn_roundtrip.json";
  save_cnn(path, m);
  const auto back = load_cnn(path);
  std::filesystem::remove(path);
  CHECK(back.hyper == m.hyper);
  Rng rng(3);
  for (int i = 0; i < 5; ++i) {
    const Vector x = random_input(rng, 100);
    CHECK(forward(back, x).probs == forward(m, x).probs);
  }

  auto doc = cnn_to_json(m);
  doc["hyper"]["fv_dim"] = 64;
  CHECK_THROWS_AS(cnn_from_json(doc), DataError);
}
