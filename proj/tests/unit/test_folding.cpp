// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <numeric>
#include <random>

#include "doctest.h"
#include "foldkit/error.hpp"
#include "foldkit/folding.hpp"
#include "foldkit/nn.hpp"
#include "oracles.hpp"

using namespace foldkit;

namespace {

Tensor tensor_of(Shape shape, std::vector<double> v) { return Tensor(std::move(shape), std::move(v)); }

// Every hidden axis holds pairs of identical channels: producer rows, bias, BN
// entries and consumer slices all repeat, so the fold matrix has duplicate rows.
Network duplicated_mlp(std::size_t in, const std::vector<std::size_t>& half_widths, std::size_t classes,
                       std::mt19937_64& rng) {
  std::vector<std::size_t> widths;
  for (auto w : half_widths) widths.push_back(2 * w);
  Network net = oracle::random_mlp(in, widths, classes, true, rng);
  std::size_t prev_half = 0;  // 0 for the raw input
  for (auto& b : net.blocks) {
    if (b.is<Dense>()) {
      auto& d = b.as<Dense>();
      const std::size_t out = d.out_features(), inp = d.in_features();
      const bool dup_out = out != classes;
      for (std::size_t o = 0; o < out; ++o)
        for (std::size_t i = 0; i < inp; ++i) {
          const std::size_t so = dup_out ? o % (out / 2) : o;
          const std::size_t si = prev_half ? i % prev_half : i;
          d.weight[o * inp + i] = d.weight[so * inp + si];
        }
      for (std::size_t o = 0; o < out; ++o) d.bias[o] = d.bias[dup_out ? o % (out / 2) : o];
      prev_half = dup_out ? out / 2 : 0;
    } else if (b.is<BatchNorm>()) {
      auto& bn = b.as<BatchNorm>();
      const std::size_t h = bn.channels() / 2;
      for (Tensor* t : {&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var})
        for (std::size_t c = h; c < 2 * h; ++c) (*t)[c] = (*t)[c - h];
    }
  }
  return net;
}

FoldPlan random_plan(const Network& net, Coupling coupling, std::mt19937_64& rng) {
  FoldPlan plan;
  plan.coupling = coupling;
  plan.seed = rng();
  for (const auto& g : discover_groups(net)) plan.k.push_back(oracle::pick(rng, 1, g.channels));
  return plan;
}

double dense_c_cost(const Matrix& m, const Assignment& a, std::size_t begin, std::size_t end) {
  const oracle::Mat c = oracle::projection(a);
  oracle::Mat x(m.rows(), end - begin);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t t = begin; t < end; ++t) x.v[i * x.c + (t - begin)] = m(i, t);
  return oracle::frobenius_sq(oracle::sub(x, oracle::matmul(c, x)));
}

std::vector<std::size_t> argmax(const Tensor& y) {
  const std::size_t c = y.dim(1);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < y.dim(0); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (y[i * c + j] > y[i * c + best]) best = j;
    out.push_back(best);
  }
  return out;
}

Tensor input_for(const Network& net, std::size_t batch, std::mt19937_64& rng) {
  Shape s{batch};
  s.insert(s.end(), net.input_shape.begin(), net.input_shape.end());
  return oracle::random_tensor(s, rng);
}

}  // namespace

TEST_CASE("producer flattening") {
  Block d = make_dense(2, 3);
  d.as<Dense>().weight = tensor_of({3, 2}, {1, 2, 3, 4, 5, 6});
  d.as<Dense>().bias = tensor_of({3}, {7, 8, 9});
  const Matrix rows = flatten_producer_rows(d);
  CHECK(rows == Matrix(3, 3, {1, 2, 7, 3, 4, 8, 5, 6, 9}));

  Block c = make_conv(1, 2, 2);
  c.as<Conv2D>().weight = tensor_of({2, 1, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  c.as<Conv2D>().bias = tensor_of({2}, {-1, -2});
  CHECK(flatten_producer_rows(c) == Matrix(2, 5, {1, 2, 3, 4, -1, 5, 6, 7, 8, -2}));

  std::mt19937_64 rng(1);
  Block r = make_conv(3, 4, 3);
  oracle::randomize_block(r, rng);
  Block back = make_conv(3, 4, 3);
  unflatten_producer_rows(back, flatten_producer_rows(r));
  CHECK(back.as<Conv2D>().weight == r.as<Conv2D>().weight);
  CHECK(back.as<Conv2D>().bias == r.as<Conv2D>().bias);

  CHECK_THROWS_AS(flatten_producer_rows(make_relu()), Error);
}

TEST_CASE("consumer flattening") {
  Block d = make_dense(3, 2);
  d.as<Dense>().weight = tensor_of({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(flatten_consumer_cols(d) == Matrix(3, 2, {1, 4, 2, 5, 3, 6}));

  Block c = make_conv(3, 4, 1);
  std::mt19937_64 rng(2);
  oracle::randomize_block(c, rng);
  const Matrix m = flatten_consumer_cols(c);
  CHECK(m.rows() == 3);
  CHECK(m.cols() == 4);

  SUBCASE("index-by-index oracle") {
    for (int rep = 0; rep < 20; ++rep) {
      const std::size_t o = oracle::pick(rng, 1, 4), i = oracle::pick(rng, 1, 4), k = oracle::pick(rng, 1, 3);
      Block b = make_conv(i, o, k);
      oracle::randomize_block(b, rng);
      const Tensor& w = b.as<Conv2D>().weight;
      const Matrix got = flatten_consumer_cols(b);
      REQUIRE(got.rows() == i);
      REQUIRE(got.cols() == o * k * k);
      for (std::size_t ch = 0; ch < i; ++ch)
        for (std::size_t oo = 0; oo < o; ++oo)
          for (std::size_t t = 0; t < k * k; ++t) CHECK(got(ch, oo * k * k + t) == w[(oo * i + ch) * k * k + t]);

      const std::size_t spatial = oracle::pick(rng, 1, 4);
      Block dn = make_dense(i * spatial, o);
      oracle::randomize_block(dn, rng);
      const Tensor& dw = dn.as<Dense>().weight;
      const Matrix dm = flatten_consumer_cols(dn, spatial);
      REQUIRE(dm.rows() == i);
      REQUIRE(dm.cols() == o * spatial);
      for (std::size_t ch = 0; ch < i; ++ch)
        for (std::size_t oo = 0; oo < o; ++oo)
          for (std::size_t s = 0; s < spatial; ++s)
            CHECK(dm(ch, oo * spatial + s) == dw[(oo * i + ch) * spatial + s]);
    }
  }
}

TEST_CASE("fold matrix layouts") {
  SUBCASE("plain dense pair") {
    Network net;
    net.input_shape = {2};
    net.class_count = 2;
    net.blocks = {make_dense(2, 2), make_relu(), make_dense(2, 2)};
    net.blocks[0].as<Dense>().weight = tensor_of({2, 2}, {1, 2, 3, 4});
    net.blocks[0].as<Dense>().bias = tensor_of({2}, {5, 6});
    net.blocks[2].as<Dense>().weight = tensor_of({2, 2}, {7, 8, 9, 10});
    const auto groups = discover_groups(net);
    REQUIRE(groups.size() == 1);
    const FoldMatrix fm = build_fold_matrix(net, groups[0], Coupling::Plain);
    CHECK(fm.matrix == Matrix(2, 5, {1, 2, 5, 7, 9, 3, 4, 6, 8, 10}));
    REQUIRE(fm.columns.size() == 2);
    CHECK(fm.columns[0].begin == 0);
    CHECK(fm.columns[0].end == 3);
    CHECK(fm.columns[1].end == 5);
    CHECK_THROWS_AS(build_fold_matrix(net, groups[0], Coupling::BnAr), Error);
    CHECK_THROWS_AS(build_fold_matrix(net, groups[0], Coupling::BnDir), Error);
  }

  SUBCASE("unit variance leaves the normalized weights unchanged") {
    std::mt19937_64 rng(3);
    Network net = oracle::random_mlp(3, {2}, 2, true, rng);
    auto& bn = net.blocks[1].as<BatchNorm>();
    bn.epsilon = 0.0;
    bn.running_var = tensor_of({2}, {1, 1});
    bn.running_mean = tensor_of({2}, {0, 0});
    bn.gamma = tensor_of({2}, {2, 2});
    const auto groups = discover_groups(net);
    const FoldMatrix fm = build_fold_matrix(net, groups[0], Coupling::BnAr);
    const Matrix rows = flatten_producer_rows(net.blocks[0]);
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t t = 0; t < 4; ++t) CHECK(fm.matrix(i, t) == rows(i, t));
      CHECK(fm.matrix(i, 4) == 2.0);
    }
  }

  SUBCASE("manual concatenation on random groups") {
    std::mt19937_64 rng(4);
    for (int rep = 0; rep < 10; ++rep) {
      Network net = oracle::random_mlp(4, {5, 3}, 3, true, rng);
      const auto groups = discover_groups(net);
      REQUIRE(groups.size() == 2);
      for (const auto& g : groups) {
        REQUIRE(g.producers.size() == 1);
        REQUIRE(g.producers[0].batchnorm.has_value());
        const Matrix w = flatten_producer_rows(net.at(g.producers[0].block));
        const auto& bn = net.at(*g.producers[0].batchnorm).as<BatchNorm>();
        const Matrix q = flatten_consumer_cols(net.at(g.consumers[0].block));
        const std::size_t n = g.channels, f = w.cols() - 1;

        std::vector<std::vector<double>> ar(n), dir(n);
        for (std::size_t i = 0; i < n; ++i) {
          const double sn = 1.0 / std::sqrt(bn.running_var[i] + bn.epsilon);
          for (std::size_t t = 0; t < f; ++t) ar[i].push_back(sn * w(i, t));
          ar[i].push_back(sn * (w(i, f) - bn.running_mean[i]));
          ar[i].push_back(bn.gamma[i]);
          for (std::size_t t = 0; t < q.cols(); ++t) ar[i].push_back(q(i, t));

          for (std::size_t t = 0; t < q.cols(); ++t) dir[i].push_back(q(i, t));
          for (std::size_t t = 0; t <= f; ++t) dir[i].push_back(w(i, t));
          dir[i].push_back(bn.gamma[i]);
          dir[i].push_back(sn);
        }
        const Matrix got_ar = build_fold_matrix(net, g, Coupling::BnAr).matrix;
        const Matrix got_dir = build_fold_matrix(net, g, Coupling::BnDir).matrix;
        REQUIRE(got_ar.cols() == ar[0].size());
        REQUIRE(got_dir.cols() == dir[0].size());
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t t = 0; t < ar[i].size(); ++t) CHECK(got_ar(i, t) == doctest::Approx(ar[i][t]).epsilon(1e-15));
          for (std::size_t t = 0; t < dir[i].size(); ++t)
            CHECK(got_dir(i, t) == doctest::Approx(dir[i][t]).epsilon(1e-15));
        }
        const Matrix plain = build_fold_matrix(net, g, Coupling::Plain).matrix;
        CHECK(plain == Matrix::hcat(std::vector<Matrix>{w, q}));
      }
    }
  }
}

TEST_CASE("sparsity to k") {
  CHECK(sparsity_to_k(64, 0.5) == 32);
  CHECK(sparsity_to_k(64, 0.0) == 64);
  CHECK(sparsity_to_k(3, 0.9) == 1);
  CHECK(sparsity_to_k(1, 0.99) == 1);
  CHECK_THROWS_AS(sparsity_to_k(8, 1.0), Error);
  CHECK_THROWS_AS(sparsity_to_k(8, -0.1), Error);
}

TEST_CASE("group discovery") {
  std::mt19937_64 rng(5);
  SUBCASE("mlp") {
    const Network net = oracle::random_mlp(4, {5, 6}, 3, true, rng);
    const auto groups = discover_groups(net);
    REQUIRE(groups.size() == 2);
    CHECK(groups[0].channels == 5);
    CHECK(groups[1].channels == 6);
    CHECK(groups[0].producers[0].block == BlockRef{0});
    CHECK(*groups[0].producers[0].batchnorm == BlockRef{1});
    REQUIRE(groups[0].consumers.size() == 1);
    CHECK(groups[0].consumers[0].block == BlockRef{3});
    CHECK(groups[1].consumers[0].block == BlockRef{6});
    CHECK(!groups[0].residual);
  }
  SUBCASE("conv into flatten") {
    const Network net = oracle::random_conv_net(2, 4, 3, 5, 2, rng);
    const auto groups = discover_groups(net);
    REQUIRE(groups.size() == 2);
    CHECK(groups[0].has_batchnorm());
    CHECK(!groups[1].has_batchnorm());
    REQUIRE(groups[1].consumers.size() == 1);
    CHECK(groups[1].consumers[0].block == BlockRef{7});
    CHECK(groups[1].consumers[0].spatial == 4);
  }
  SUBCASE("residual") {
    for (bool shortcut : {false, true}) {
      CAPTURE(shortcut);
      const Network net = oracle::random_residual_net(4, 6, 3, 2, shortcut, rng);
      const auto groups = discover_groups(net);
      REQUIRE(groups.size() == (shortcut ? 3 : 2));
      std::size_t shared = 0;
      for (const auto& g : groups) {
        if (!g.residual) continue;
        ++shared;
        CHECK(g.channels == 6);
        std::vector<BlockRef> prods;
        for (const auto& p : g.producers) prods.push_back(p.block);
        CHECK(std::find(prods.begin(), prods.end(), BlockRef{3, Branch::Main, 3}) != prods.end());
        if (!shortcut) CHECK(std::find(prods.begin(), prods.end(), BlockRef{0}) != prods.end());
        else CHECK(std::find(prods.begin(), prods.end(), BlockRef{3, Branch::Shortcut, 0}) != prods.end());
      }
      CHECK(shared == 1);
      for (const auto& g : groups) {
        std::vector<BlockRef> seen;
        for (const auto& c : g.consumers) seen.push_back(c.block);
        std::sort(seen.begin(), seen.end());
        CHECK(std::adjacent_find(seen.begin(), seen.end()) == seen.end());
      }
    }
  }
}

TEST_CASE("folded forward equals the dense-C oracle") {
  std::mt19937_64 rng(6);
  auto check = [&](const Network& net, Coupling coupling) {
    const FoldPlan plan = random_plan(net, coupling, rng);
    const FoldResult r = fold_network(net, plan);
    validate(r.network);
    const Network oracle_net = oracle::dense_c_network(net, r.groups, r.assignments);
    const Tensor x = input_for(net, 5, rng);
    CHECK(oracle::max_abs_diff(forward(r.network, x), oracle::forward(oracle_net, x)) <= 1e-10);
    for (std::size_t g = 0; g < r.groups.size(); ++g) {
      CHECK(r.assignments[g].k == plan.k[g]);
      const auto sizes = r.report.groups[g].cluster_sizes;
      CHECK(std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) == r.groups[g].channels);
      CHECK(r.report.groups[g].cost >= 0.0);
    }
  };
  for (int rep = 0; rep < 8; ++rep) {
    CAPTURE(rep);
    check(oracle::random_mlp(5, {6, 7}, 3, false, rng), Coupling::Plain);
    for (Coupling c : {Coupling::Plain, Coupling::BnAr, Coupling::BnDir}) {
      check(oracle::random_mlp(5, {6, 7}, 3, true, rng), c);
      check(oracle::random_conv_net(2, 4, 4, 5, 3, rng), c);
      check(oracle::random_residual_net(5, 6, 4, 3, false, rng), c);
      check(oracle::random_residual_net(5, 6, 4, 3, true, rng), c);
    }
  }
}

TEST_CASE("three-channel dense pair against the explicit formula") {
  std::mt19937_64 rng(7);
  for (int rep = 0; rep < 10; ++rep) {
    Network net = oracle::random_mlp(4, {3}, 2, false, rng);
    const auto groups = discover_groups(net);
    const Assignment a{2, oracle::random_labels(3, 2, rng)};
    Network folded = net;
    fold_group(folded, groups[0], a);

    const oracle::Mat c = oracle::projection(a);
    const auto& d1 = net.blocks[0].as<Dense>();
    const auto& d2 = net.blocks[2].as<Dense>();
    const Tensor x = oracle::random_tensor({1, 4}, rng);
    oracle::Mat h(3, 1);
    for (std::size_t o = 0; o < 3; ++o) {
      h.v[o] = d1.bias[o];
      for (std::size_t i = 0; i < 4; ++i) h.v[o] += d1.weight[o * 4 + i] * x[i];
    }
    oracle::Mat ch = oracle::matmul(c, h);
    for (auto& v : ch.v) v = oracle::relu(v);
    const oracle::Mat back = oracle::matmul(oracle::transpose(c), ch);
    const Tensor y = forward(folded, x);
    for (std::size_t o = 0; o < 2; ++o) {
      double expect = d2.bias[o];
      for (std::size_t i = 0; i < 3; ++i) expect += d2.weight[o * 3 + i] * back.v[i];
      CHECK(std::abs(y[o] - expect) <= 1e-10);
    }
  }
}

TEST_CASE("reported cost matches dense C and decomposes by column block") {
  std::mt19937_64 rng(8);
  for (Coupling coupling : {Coupling::Plain, Coupling::BnAr, Coupling::BnDir}) {
    CAPTURE(to_string(coupling));
    const Network net = oracle::random_mlp(6, {16, 12, 10}, 4, true, rng);
    const FoldPlan plan = uniform_plan(net, 0.5, coupling, 11);
    std::vector<double> dense_costs, split_costs;
    FoldHooks hooks;
    hooks.before_fold = [&](Network& partial, const FoldableGroup& g, const Assignment& a, GroupReport& rep) {
      const FoldMatrix fm = build_fold_matrix(partial, g, rep.coupling);
      dense_costs.push_back(dense_c_cost(fm.matrix, a, 0, fm.matrix.cols()));
      double split = 0.0;
      for (const auto& cb : fm.columns) split += dense_c_cost(fm.matrix, a, cb.begin, cb.end);
      split_costs.push_back(split);
    };
    const FoldResult r = fold_network(net, plan, hooks);
    REQUIRE(dense_costs.size() == r.report.groups.size());
    double total = 0.0;
    for (std::size_t g = 0; g < dense_costs.size(); ++g) {
      const GroupReport& rep = r.report.groups[g];
      CHECK(std::abs(rep.cost - dense_costs[g]) <= 1e-9 * std::max(1.0, dense_costs[g]));
      CHECK(std::abs(split_costs[g] - dense_costs[g]) <= 1e-9 * std::max(1.0, dense_costs[g]));
      double by_column = 0.0;
      for (double c : rep.column_costs) by_column += c;
      CHECK(std::abs(by_column - rep.cost) <= 1e-12 * std::max(1.0, rep.cost));
      total += rep.cost;
    }
    CHECK(std::abs(total - r.report.total_cost) <= 1e-12 * std::max(1.0, total));
  }
}

TEST_CASE("folded BN diagonals equal the dense cluster-mean operator") {
  std::mt19937_64 rng(9);
  for (int rep = 0; rep < 20; ++rep) {
    const Network net = oracle::random_mlp(3, {7}, 2, true, rng);
    const auto groups = discover_groups(net);
    const std::size_t k = oracle::pick(rng, 1, 7);
    const Assignment a{k, oracle::random_labels(7, k, rng)};
    Network folded = net;
    fold_group(folded, groups[0], a);
    const oracle::Mat u = oracle::clustering_matrix(a.labels, k);
    const oracle::Mat ut = oracle::transpose(u);
    const oracle::Mat left = oracle::matmul(oracle::inverse(oracle::matmul(ut, u)), ut);
    const auto& bn0 = net.blocks[1].as<BatchNorm>();
    const auto& bn1 = folded.blocks[1].as<BatchNorm>();
    for (auto field : {&BatchNorm::gamma, &BatchNorm::beta, &BatchNorm::running_mean, &BatchNorm::running_var}) {
      const oracle::Mat dense = oracle::matmul(oracle::matmul(left, oracle::diag((bn0.*field).values)), u);
      const auto want = oracle::diag_of(dense);
      REQUIRE((bn1.*field).size() == k);
      for (std::size_t j = 0; j < k; ++j) CHECK(std::abs((bn1.*field)[j] - want[j]) <= 1e-12);
      CHECK(oracle::max_abs(oracle::sub(dense, oracle::diag(want))) <= 1e-12);
    }
  }
}

TEST_CASE("duplicate channels fold losslessly") {
  std::mt19937_64 rng(10);
  SUBCASE("given the duplicate assignment") {
    for (int rep = 0; rep < 10; ++rep) {
      Network net = oracle::random_mlp(4, {6}, 3, true, rng);
      // Channels i and i+3 share producer row, bias and BN entries.
      auto& d = net.blocks[0].as<Dense>();
      auto& bn = net.blocks[1].as<BatchNorm>();
      for (std::size_t c = 3; c < 6; ++c) {
        for (std::size_t t = 0; t < 4; ++t) d.weight[c * 4 + t] = d.weight[(c - 3) * 4 + t];
        d.bias[c] = d.bias[c - 3];
        for (Tensor* t : {&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var}) (*t)[c] = (*t)[c - 3];
      }
      Network folded = net;
      fold_group(folded, discover_groups(net)[0], Assignment{3, {0, 1, 2, 0, 1, 2}});
      const Tensor x = oracle::random_tensor({8, 4}, rng);
      CHECK(oracle::max_abs_diff(forward(folded, x), forward(net, x)) <= 1e-8);
    }
  }
  SUBCASE("whole network at sparsity one half") {
    for (Coupling coupling : {Coupling::Plain, Coupling::BnAr, Coupling::BnDir}) {
      const Network net = duplicated_mlp(5, {4, 3}, 3, rng);
      const FoldResult r = fold_network(net, uniform_plan(net, 0.5, coupling, 3));
      CHECK(r.report.total_cost <= 1e-20);
      const Tensor x = oracle::random_tensor({32, 5}, rng);
      const Tensor y0 = forward(net, x), y1 = forward(r.network, x);
      CHECK(oracle::max_abs_diff(y0, y1) <= 1e-8);
      CHECK(argmax(y0) == argmax(y1));
    }
  }
}

TEST_CASE("zero sparsity leaves the network unchanged") {
  std::mt19937_64 rng(11);
  for (const Network& net : {oracle::random_mlp(4, {5, 6}, 3, true, rng), oracle::random_conv_net(2, 4, 3, 4, 2, rng),
                             oracle::random_residual_net(4, 5, 3, 2, true, rng)}) {
    const FoldResult r = fold_network(net, uniform_plan(net, 0.0, Coupling::BnAr));
    CHECK(r.report.total_cost == 0.0);
    const Tensor x = input_for(net, 4, rng);
    CHECK(forward(r.network, x) == forward(net, x));
    for (const auto& a : r.assignments) CHECK(a.is_identity());
  }
}

TEST_CASE("residual folding cases") {
  std::mt19937_64 rng(12);
  SUBCASE("identity dense shortcut at k=n") {
    Network net = oracle::random_residual_net(4, 5, 3, 2, true, rng);
    auto& sc = net.blocks[3].as<Residual>().shortcut[0].as<Dense>();
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) sc.weight[i * 5 + j] = i == j ? 1.0 : 0.0;
    for (std::size_t i = 0; i < 5; ++i) sc.bias[i] = 0.0;
    const FoldResult r = fold_network(net, uniform_plan(net, 0.0, Coupling::BnAr));
    const Tensor x = oracle::random_tensor({4, 4}, rng);
    CHECK(forward(r.network, x) == forward(net, x));
  }
  SUBCASE("zero main path reduces to the incoming group") {
    Network net = oracle::random_residual_net(4, 6, 3, 2, false, rng);
    auto& main = net.blocks[3].as<Residual>().main;
    for (auto& v : main[3].as<Dense>().weight.values) v = 0.0;
    for (auto& v : main[3].as<Dense>().bias.values) v = 0.0;
    auto& bn_out = main[4].as<BatchNorm>();
    for (auto& v : bn_out.gamma.values) v = 0.0;
    for (auto& v : bn_out.beta.values) v = 0.0;
    // Duplicate the incoming channels (i, i+3).
    auto& d = net.blocks[0].as<Dense>();
    auto& bn = net.blocks[1].as<BatchNorm>();
    for (std::size_t c = 3; c < 6; ++c) {
      for (std::size_t t = 0; t < 4; ++t) d.weight[c * 4 + t] = d.weight[(c - 3) * 4 + t];
      d.bias[c] = d.bias[c - 3];
      for (Tensor* t : {&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var}) (*t)[c] = (*t)[c - 3];
    }
    const auto groups = discover_groups(net);
    std::size_t shared = groups.size();
    for (std::size_t g = 0; g < groups.size(); ++g)
      if (groups[g].residual) shared = g;
    REQUIRE(shared < groups.size());
    Network folded = net;
    const Assignment a{3, {0, 1, 2, 0, 1, 2}};
    // Both branch ends are on the axis; the main-path producer is constant zero so the mean stays zero.
    fold_group(folded, groups[shared], a);
    const Tensor x = oracle::random_tensor({6, 4}, rng);
    CHECK(oracle::max_abs_diff(forward(folded, x), forward(net, x)) <= 1e-8);
  }
}

TEST_CASE("capacity: the cost never rises with k") {
  std::mt19937_64 rng(13);
  for (int rep = 0; rep < 5; ++rep) {
    const Network net = oracle::random_mlp(6, {12}, 3, true, rng);
    const auto groups = discover_groups(net);
    for (Coupling coupling : {Coupling::Plain, Coupling::BnAr, Coupling::BnDir}) {
      const Matrix m = build_fold_matrix(net, groups[0], coupling).matrix;
      FoldPlan plan;
      plan.seed = static_cast<std::uint64_t>(rep);
      double prev = INFINITY;
      for (std::size_t k = 1; k <= 12; ++k) {
        const double j = fold_cost(cluster_rows(m, k, plan, 0), m);
        CHECK(j <= prev + 1e-12);
        prev = j;
      }
      CHECK(prev == 0.0);
    }
  }
}

TEST_CASE("plan validation") {
  std::mt19937_64 rng(14);
  const Network net = oracle::random_mlp(4, {5}, 3, true, rng);
  FoldPlan plan = uniform_plan(net, 0.5, Coupling::BnAr);
  plan.k = {0};
  CHECK_THROWS_AS(fold_network(net, plan), Error);
  plan.k = {6};
  CHECK_THROWS_AS(fold_network(net, plan), Error);
  plan.k = {2, 2};
  CHECK_THROWS_AS(fold_network(net, plan), Error);
  CHECK_THROWS_AS(fold_group(const_cast<Network&>(net), discover_groups(net)[0], Assignment::identity(4)), Error);
}

TEST_CASE("report json carries every group") {
  std::mt19937_64 rng(15);
  const Network net = oracle::random_mlp(4, {6, 5}, 3, true, rng);
  const FoldResult r = fold_network(net, uniform_plan(net, 0.5, Coupling::BnAr, 1));
  const auto j = to_json(r.report);
  REQUIRE(j["groups"].size() == 2);
  CHECK(j["groups"][0]["n"] == 6);
  CHECK(j["groups"][0]["k"] == 3);
  CHECK(j["groups"][1]["k"] == 3);
  CHECK(j["groups"][0]["coupling"] == to_string(Coupling::BnAr));
}

TEST_CASE("merging") {
  std::mt19937_64 rng(16);
  SUBCASE("a network merged with itself") {
    const Network a = oracle::random_mlp(4, {6, 5}, 3, true, rng);
    const MergeResult m = merge_networks(a, a, MergeMode::Paired);
    for (const auto& p : m.pairings) {
      std::vector<std::size_t> id(p.size());
      std::iota(id.begin(), id.end(), 0);
      CHECK(p == id);
    }
    const Tensor x = oracle::random_tensor({6, 4}, rng);
    CHECK(oracle::max_abs_diff(forward(m.network, x), forward(a, x)) <= 1e-10);
  }
  SUBCASE("a channel-permuted copy") {
    for (int rep = 0; rep < 5; ++rep) {
      for (const Network& a :
           {oracle::random_mlp(4, {6, 5}, 3, true, rng), oracle::random_conv_net(2, 4, 3, 4, 2, rng)}) {
        Network b = a;
        const auto groups = discover_groups(a);
        std::vector<std::vector<std::size_t>> perms;
        for (const auto& g : groups) {
          std::vector<std::size_t> perm(g.channels);
          std::iota(perm.begin(), perm.end(), 0);
          std::shuffle(perm.begin(), perm.end(), rng);
          std::vector<std::vector<std::size_t>> sources;
          for (auto p : perm) sources.push_back({p});
          apply_channel_map(b, g, sources);
          perms.push_back(perm);
        }
        const Tensor x = input_for(a, 6, rng);
        REQUIRE(oracle::max_abs_diff(forward(b, x), forward(a, x)) <= 1e-10);
        const MergeResult m = merge_networks(a, b, MergeMode::Paired);
        REQUIRE(m.pairings.size() == perms.size());
        for (std::size_t g = 0; g < perms.size(); ++g)
          for (std::size_t j = 0; j < perms[g].size(); ++j) CHECK(m.pairings[g][perms[g][j]] == j);
        CHECK(oracle::max_abs_diff(forward(m.network, x), forward(a, x)) <= 1e-8);
      }
    }
  }
  SUBCASE("joint network averages the two outputs") {
    const Network a = oracle::random_mlp(4, {5}, 3, true, rng);
    const Network b = oracle::random_mlp(4, {5}, 3, true, rng);
    const Network j = joint_network(a, b);
    const Tensor x = oracle::random_tensor({5, 4}, rng);
    const Tensor ya = forward(a, x), yb = forward(b, x), yj = forward(j, x);
    double err = 0.0;
    for (std::size_t i = 0; i < yj.size(); ++i) err = std::max(err, std::abs(yj[i] - 0.5 * (ya[i] + yb[i])));
    CHECK(err <= 1e-12);
    CHECK(discover_groups(j)[0].channels == 10);
  }
  SUBCASE("architecture mismatch") {
    const Network a = oracle::random_mlp(4, {5}, 3, true, rng);
    const Network b = oracle::random_mlp(4, {6}, 3, true, rng);
    CHECK_THROWS_AS(merge_networks(a, b, MergeMode::Free), Error);
  }
}
