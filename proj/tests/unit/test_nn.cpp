// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "foldkit/error.hpp"
#include "foldkit/nn.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace foldkit;

namespace {

Tensor random_batch(const Network& net, std::size_t batch, std::mt19937_64& rng) {
  Shape s{batch};
  s.insert(s.end(), net.input_shape.begin(), net.input_shape.end());
  return oracle::random_tensor(s, rng);
}

}  // namespace

TEST_CASE("identity dense layer followed by relu") {
  Network net;
  net.input_shape = {2};
  net.class_count = 2;
  net.blocks.push_back(make_dense(2, 2));
  net.blocks.push_back(make_relu());
  auto& d = net.blocks[0].as<Dense>();
  d.weight = Tensor({2, 2}, {1, 0, 0, 1});
  const Tensor y = forward(net, Tensor({1, 2}, {1.0, -1.0}));
  CHECK(y[0] == 1.0);
  CHECK(y[1] == 0.0);
}

TEST_CASE("unit batchnorm is the identity up to epsilon") {
  Network net;
  net.input_shape = {3};
  net.class_count = 3;
  net.blocks.push_back(make_batchnorm(3, 1e-5));
  auto& bn = net.blocks[0].as<BatchNorm>();
  bn.gamma = Tensor({3}, 1.0);
  bn.running_var = Tensor({3}, 1.0);
  std::mt19937_64 rng(1);
  // The epsilon shrink is |x| * 5e-6, so inputs are kept within 0.1.
  Tensor x = random_batch(net, 5, rng);
  for (auto& v : x.values) v = std::clamp(0.03 * v, -0.1, 0.1);
  const Tensor y = forward(net, x);
  CHECK(oracle::max_abs_diff(y, x) <= 1e-6);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(y[i] - x[i] / std::sqrt(1.0 + 1e-5)) <= 1e-15);
}

TEST_CASE("forward matches the loop oracle on every catalog shape") {
  std::mt19937_64 rng(2);
  for (int rep = 0; rep < 10; ++rep) {
    const std::vector<Network> nets{
        oracle::random_mlp(5, {7, 4}, 3, false, rng), oracle::random_mlp(5, {6, 6}, 4, true, rng),
        oracle::random_conv_net(2, 4, 3, 2, 3, rng), oracle::random_residual_net(4, 5, 3, 3, rep % 2 == 0, rng)};
    for (const auto& net : nets) {
      validate(net);
      const Tensor x = random_batch(net, 4, rng);
      CHECK(oracle::max_abs_diff(forward(net, x), oracle::forward(net, x)) <= 1e-12);
    }
  }
}

TEST_CASE("strided conv without padding matches the loop oracle") {
  std::mt19937_64 rng(3);
  Network net;
  net.input_shape = {2, 7, 6};
  net.class_count = 3 * 3 * 2;
  net.blocks.push_back(make_conv(2, 3, 3, 2, 0));
  net.blocks.push_back(make_flatten());
  oracle::randomize(net, rng);
  const Tensor x = random_batch(net, 2, rng);
  CHECK(oracle::max_abs_diff(forward(net, x), oracle::forward(net, x)) <= 1e-12);
}

TEST_CASE("forward is bit-identical across runs") {
  std::mt19937_64 rng(4);
  const Network net = oracle::random_conv_net(1, 4, 4, 3, 5, rng);
  const Tensor x = random_batch(net, 6, rng);
  CHECK(forward(net, x) == forward(net, x));
}

TEST_CASE("channel statistics") {
  SUBCASE("constant batch has zero variance") {
    const ChannelStats s = channel_stats(Tensor({4, 3}, 2.5));
    for (double v : s.var) CHECK(v == 0.0);
    for (double m : s.mean) CHECK(m == 2.5);
  }
  SUBCASE("x and -x through a linear layer have zero mean") {
    std::mt19937_64 rng(5);
    Network net = oracle::random_mlp(4, {}, 3, false, rng);
    net.blocks[0].as<Dense>().bias = Tensor({3}, 0.0);
    const Tensor x = random_batch(net, 1, rng);
    Tensor pair({2, 4});
    for (std::size_t i = 0; i < 4; ++i) {
      pair[i] = x[i];
      pair[4 + i] = -x[i];
    }
    for (double m : channel_stats(forward(net, pair)).mean) CHECK(std::abs(m) <= 1e-15);
  }
  SUBCASE("two-pass oracle on random activations") {
    std::mt19937_64 rng(6);
    for (const Shape& s : {Shape{50, 7}, Shape{9, 4, 3, 5}}) {
      Tensor x = oracle::random_tensor(s, rng, 3.0);
      for (auto& v : x.values) v += 100.0;
      const auto expect = oracle::two_pass_variance(x);
      const auto got = channel_stats(x).var;
      for (std::size_t c = 0; c < expect.size(); ++c) CHECK(std::abs(got[c] - expect[c]) <= 1e-10);
    }
  }
}

TEST_CASE("forward_trace agrees with forward at traced sites") {
  std::mt19937_64 rng(7);
  const Network net = oracle::random_mlp(6, {8, 5}, 3, true, rng);
  const Tensor x = random_batch(net, 10, rng);
  const auto sites = activation_sites(net);
  REQUIRE(sites == std::vector<std::size_t>{2, 5});
  const ForwardTrace tr = forward_trace(net, x, sites, true);
  CHECK(tr.logits == forward(net, x));
  for (const auto& site : tr.sites) {
    Network prefix = net;
    prefix.blocks.resize(site.site + 1);
    const Tensor expect = oracle::forward(prefix, x);
    REQUIRE(site.activations.has_value());
    CHECK(*site.activations == forward_observed(prefix, x, {}));
    CHECK(oracle::max_abs_diff(*site.activations, expect) <= 1e-12);
    const auto var = oracle::two_pass_variance(expect);
    for (std::size_t c = 0; c < var.size(); ++c) CHECK(std::abs(site.stats.var[c] - var[c]) <= 1e-12);
  }
  CHECK(activation_sites(net, SitePosition::PreActivation) == std::vector<std::size_t>{1, 4});
}

TEST_CASE("batchnorm with batch moments standardizes its input") {
  std::mt19937_64 rng(8);
  Network net;
  net.input_shape = {4};
  net.class_count = 4;
  net.blocks.push_back(make_batchnorm(4));
  auto& bn = net.blocks[0].as<BatchNorm>();
  bn.gamma = Tensor({4}, 1.0);
  Tensor x = random_batch(net, 200, rng);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 3.0 * x[i] + static_cast<double>(i % 4);
  const ChannelStats s = channel_stats(x);
  bn.running_mean = Tensor({4}, s.mean);
  bn.running_var = Tensor({4}, s.var);
  const ChannelStats out = channel_stats(forward(net, x));
  for (std::size_t c = 0; c < 4; ++c) {
    CHECK(std::abs(out.mean[c]) <= 1e-12);
    CHECK(std::abs(out.var[c] - s.var[c] / (s.var[c] + bn.epsilon)) <= 1e-12);
    CHECK(std::abs(out.var[c] - 1.0) <= 1e-5);
  }
}

TEST_CASE("input gradient of a half squared norm through an identity network is the input") {
  Network net;
  net.input_shape = {5};
  net.class_count = 5;
  net.blocks.push_back(make_dense(5, 5));
  auto& d = net.blocks[0].as<Dense>();
  for (std::size_t i = 0; i < 5; ++i) d.weight[i * 5 + i] = 1.0;
  std::mt19937_64 rng(9);
  const Tensor x = random_batch(net, 3, rng);
  LossSpec spec;
  spec.l2_weight = 0.5;
  const auto g = input_gradient(net, x, spec);
  CHECK(g.gradient == x);
  double half = 0.0;
  for (double v : x.values) half += 0.5 * v * v;
  CHECK(std::abs(g.loss.total - half) <= 1e-12);
}

TEST_CASE("total variation of a constant image has zero gradient") {
  Tensor x({2, 3, 4, 5}, 1.75);
  Tensor grad(x.shape);
  CHECK(total_variation(x, &grad) == 0.0);
  for (double v : grad.values) CHECK(v == 0.0);
}

TEST_CASE("cross entropy of uniform logits is log of the class count") {
  const Tensor logits({2, 4}, 0.3);
  const std::vector<std::size_t> t{0, 3};
  Tensor g;
  CHECK(std::abs(cross_entropy(logits, t, &g) - std::log(4.0)) <= 1e-15);
  CHECK(std::abs(g[0] - (0.25 - 1.0) / 2.0) <= 1e-15);
  CHECK(std::abs(g[1] - 0.25 / 2.0) <= 1e-15);
}

TEST_CASE("input gradients match central differences for every block kind") {
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    std::mt19937_64 rng(seed);
    LossSpec spec;
    spec.targets = {0, 1, 2};
    spec.bn_weight = 0.7;
    spec.l2_weight = 0.01;
    spec.tv_weight = 0.02;
    const std::vector<Network> nets{oracle::random_mlp(5, {6, 4}, 3, true, rng),
                                    oracle::random_conv_net(1, 4, 3, 2, 3, rng),
                                    oracle::random_residual_net(4, 5, 3, 3, seed % 2 == 1, rng)};
    for (const auto& net : nets) {
      const Tensor x = random_batch(net, 3, rng);
      const auto r = oracle::check_input_gradient(net, x, spec);
      CHECK(r.norm > 0.0);
      CHECK(r.relative_error < 1e-5);
    }
  }
}

TEST_CASE("parameter gradients match central differences") {
  std::mt19937_64 rng(10);
  Network net = oracle::random_conv_net(1, 4, 2, 2, 3, rng);
  const Tensor x = random_batch(net, 4, rng);
  const std::vector<std::size_t> targets{0, 1, 2, 1};
  for (BnMode mode : {BnMode::Inference, BnMode::Training}) {
    auto loss = [&](Network n) {
      Tape tape;
      const Tensor logits = forward_recorded(n, x, mode, tape, 0.0);
      return cross_entropy(logits, targets, nullptr);
    };
    Network work = net;
    Tape tape;
    const Tensor logits = forward_recorded(work, x, mode, tape, 0.0);
    Tensor gl;
    cross_entropy(logits, targets, &gl);
    Network grads = zeros_like(net);
    backward(work, tape, gl, &grads);

    std::vector<double> analytic;
    for_each_parameter(grads, [&](Tensor& t) { analytic.insert(analytic.end(), t.values.begin(), t.values.end()); });
    std::vector<Tensor*> params;
    Network probe = net;
    for_each_parameter(probe, [&](Tensor& t) { params.push_back(&t); });
    std::size_t idx = 0;
    double diff = 0.0, norm = 0.0;
    for (Tensor* p : params)
      for (std::size_t i = 0; i < p->size(); ++i, ++idx) {
        const double keep = (*p)[i];
        (*p)[i] = keep + 1e-5;
        const double fp = loss(probe);
        (*p)[i] = keep - 1e-5;
        const double fm = loss(probe);
        (*p)[i] = keep;
        const double fd = (fp - fm) / 2e-5;
        diff += (fd - analytic[idx]) * (fd - analytic[idx]);
        norm += analytic[idx] * analytic[idx];
      }
    CHECK(std::sqrt(diff / norm) < 1e-5);
  }
}

TEST_CASE("recalibration stores the empirical moments of one batch") {
  std::mt19937_64 rng(11);
  Network net = oracle::random_mlp(4, {3}, 2, true, rng);
  const Tensor x = random_batch(net, 32, rng);
  Network pre = net;
  pre.blocks.resize(1);
  const ChannelStats s = channel_stats(oracle::forward(pre, x));
  const std::vector<Tensor> batches{x};
  const Network r = bn_recalibrate(net, batches);
  const auto& bn = r.blocks[1].as<BatchNorm>();
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(std::abs(bn.running_mean[c] - s.mean[c]) <= 1e-10);
    CHECK(std::abs(bn.running_var[c] - s.var[c]) <= 1e-10);
  }
  CHECK(net.blocks[1].as<BatchNorm>().running_mean != bn.running_mean);
}

TEST_CASE("recalibration of a dead channel clamps its variance") {
  std::mt19937_64 rng(12);
  Network net = oracle::random_mlp(4, {3}, 2, true, rng);
  auto& d = net.blocks[0].as<Dense>();
  for (std::size_t i = 0; i < 4; ++i) d.weight[4 + i] = 0.0;
  const std::vector<Tensor> batches{random_batch(net, 16, rng)};
  const Network r = bn_recalibrate(net, batches);
  CHECK(r.blocks[1].as<BatchNorm>().running_var[1] == kMinRunningVar);
  CHECK(std::abs(r.blocks[1].as<BatchNorm>().running_mean[1] - d.bias[1]) <= 1e-15);
}

TEST_CASE("recalibration is a fixed point for running stats equal to the data moments") {
  std::mt19937_64 rng(13);
  Network net = oracle::random_mlp(4, {5, 5}, 3, true, rng);
  const std::vector<Tensor> batches{random_batch(net, 64, rng), random_batch(net, 64, rng)};
  const Network once = bn_recalibrate(net, batches);
  const Network twice = bn_recalibrate(once, batches);
  const Tensor x = random_batch(net, 8, rng);
  CHECK(oracle::max_abs_diff(forward(once, x), forward(twice, x)) <= 1e-10);
}

TEST_CASE("errors carry their kind") {
  std::mt19937_64 rng(14);
  const Network net = oracle::random_mlp(4, {3}, 2, false, rng);
  try {
    forward(net, Tensor({2, 5}));
    FAIL("expected a shape error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Shape);
  }
  LossSpec spec;
  spec.bn_weight = 1.0;
  CHECK_THROWS_AS(input_gradient(net, Tensor({2, 4}), spec), Error);
  const std::vector<Tensor> none;
  CHECK_THROWS_AS(bn_recalibrate(net, none), Error);
}

TEST_CASE("concat and slice are inverse") {
  std::mt19937_64 rng(15);
  const Tensor a = oracle::random_tensor({3, 2, 2}, rng), b = oracle::random_tensor({2, 2, 2}, rng);
  const std::vector<Tensor> parts{a, b};
  const Tensor all = concat_batches(parts);
  CHECK(all.shape == Shape{5, 2, 2});
  CHECK(slice_batch(all, 0, 3) == a);
  CHECK(slice_batch(all, 3, 5) == b);
}
