// SPDX-License-Identifier: Apache-2.0
#include "foldkit/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "foldkit/error.hpp"
#include "foldkit/nn.hpp"

namespace foldkit {

namespace {

std::mt19937_64 make_rng(std::initializer_list<std::uint64_t> parts) {
  std::vector<std::uint32_t> words;
  for (auto p : parts) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

}  // namespace

Dataset make_synthetic_dataset(const SyntheticSpec& spec, std::size_t count, std::uint64_t stream,
                               const std::string& split) {
  if (spec.classes < 2) fail(ErrorKind::Value, "synthetic data needs at least two classes");
  if (spec.dim == 0) fail(ErrorKind::Value, "synthetic data needs a positive dimension");
  std::normal_distribution<double> normal(0.0, 1.0);
  auto center_rng = make_rng({spec.seed, 0xC0FFEE});
  Matrix centers(spec.classes, spec.dim);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    double norm = 0.0;
    while (norm == 0.0) {
      for (auto& v : centers.row(c)) v = normal(center_rng);
      norm = std::sqrt(dot(centers.row(c), centers.row(c)));
    }
    for (auto& v : centers.row(c)) v *= spec.separation / norm;
  }
  auto rng = make_rng({spec.seed, stream, 0x5A});
  Dataset d;
  d.class_count = spec.classes;
  d.split = split;
  d.features = Tensor({count, spec.dim});
  d.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t c = i % spec.classes;
    d.labels[i] = c;
    for (std::size_t t = 0; t < spec.dim; ++t) d.features[i * spec.dim + t] = centers(c, t) + normal(rng);
  }
  return d;
}

SyntheticSplits make_synthetic_splits(const SyntheticSpec& spec, std::size_t train, std::size_t test,
                                      std::size_t calibration) {
  return {make_synthetic_dataset(spec, train, 1, "train"), make_synthetic_dataset(spec, test, 2, "test"),
          make_synthetic_dataset(spec, calibration, 3, "calibration")};
}

Dataset reshape_samples(const Dataset& data, const Shape& shape) {
  if (element_count(shape) != element_count(data.sample_shape())) {
    fail(ErrorKind::Shape, "cannot view samples of " + shape_string(data.sample_shape()) + " as " + shape_string(shape));
  }
  Dataset out = data;
  out.features.shape = {data.size()};
  out.features.shape.insert(out.features.shape.end(), shape.begin(), shape.end());
  return out;
}

const char* to_string(Architecture a) {
  switch (a) {
    case Architecture::MlpBn: return "mlp-bn";
    case Architecture::ConvBn: return "conv-bn";
    case Architecture::Residual: return "residual";
  }
  return "?";
}

Architecture parse_architecture(const std::string& text) {
  if (text == "mlp-bn") return Architecture::MlpBn;
  if (text == "conv-bn") return Architecture::ConvBn;
  if (text == "residual") return Architecture::Residual;
  fail(ErrorKind::Value, "unknown architecture '" + text + "' (expected mlp-bn, conv-bn or residual)");
}

Shape architecture_input(const ArchitectureSpec& spec, std::size_t dim) {
  if (spec.kind != Architecture::ConvBn) return {dim};
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(dim))));
  if (side * side != dim) fail(ErrorKind::Value, "conv-bn needs a square feature count, got " + std::to_string(dim));
  return {1, side, side};
}

Network make_network(const ArchitectureSpec& spec, const Shape& input_shape, std::size_t classes, std::uint64_t seed) {
  if (spec.width == 0) fail(ErrorKind::Value, "architecture width must be positive");
  const std::size_t w = spec.width;
  Network net;
  net.input_shape = input_shape;
  net.class_count = classes;
  auto& b = net.blocks;
  switch (spec.kind) {
    case Architecture::MlpBn: {
      if (input_shape.size() != 1) fail(ErrorKind::Shape, "mlp-bn expects flat input");
      std::size_t in = input_shape[0];
      for (int layer = 0; layer < 3; ++layer) {
        b.push_back(make_dense(in, w));
        b.push_back(make_batchnorm(w));
        b.push_back(make_relu());
        in = w;
      }
      b.push_back(make_dense(w, classes));
      break;
    }
    case Architecture::ConvBn: {
      if (input_shape.size() != 3 || input_shape[1] < 2 || input_shape[2] < 2) {
        fail(ErrorKind::Shape, "conv-bn expects a C x H x W input of at least 2 x 2");
      }
      b.push_back(make_conv(input_shape[0], w, 3, 1, 1));
      b.push_back(make_batchnorm(w));
      b.push_back(make_relu());
      b.push_back(make_conv(w, w, 3, 1, 1));
      b.push_back(make_batchnorm(w));
      b.push_back(make_relu());
      b.push_back(make_avgpool(2));
      b.push_back(make_flatten());
      b.push_back(make_dense(w * (input_shape[1] / 2) * (input_shape[2] / 2), classes));
      break;
    }
    case Architecture::Residual: {
      if (input_shape.size() != 1) fail(ErrorKind::Shape, "residual expects flat input");
      b.push_back(make_dense(input_shape[0], w));
      b.push_back(make_batchnorm(w));
      b.push_back(make_relu());
      b.push_back(make_residual({make_dense(w, w), make_batchnorm(w), make_relu(), make_dense(w, w), make_batchnorm(w)}));
      b.push_back(make_relu());
      b.push_back(make_dense(w, classes));
      break;
    }
  }
  auto rng = make_rng({seed, 0x1417});
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t last_dense = b.size() - 1;
  auto init = [&](Tensor& weight, bool classifier) {
    const double fan_in = static_cast<double>(weight.size() / weight.dim(0));
    const double sd = std::sqrt((classifier ? 1.0 : 2.0) / fan_in);
    for (auto& v : weight.values) v = sd * normal(rng);
  };
  auto init_blocks = [&](std::vector<Block>& blocks, bool top) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      if (blocks[i].is<Dense>()) init(blocks[i].as<Dense>().weight, top && i == last_dense);
      if (blocks[i].is<Conv2D>()) init(blocks[i].as<Conv2D>().weight, false);
    }
  };
  init_blocks(b, true);
  for (auto& blk : b)
    if (blk.is<Residual>()) init_blocks(blk.as<Residual>().main, false);
  validate(net);
  return net;
}

void validate(const TrainConfig& c) {
  if (c.epochs == 0 || c.batch_size < 2) fail(ErrorKind::Value, "training needs epochs >= 1 and batch size >= 2");
  if (!(c.learning_rate >= 0.0) || !(c.momentum >= 0.0) || !(c.decay_lambda >= 0.0)) {
    fail(ErrorKind::Value, "training rates must be non-negative");
  }
  if (!(c.bn_momentum > 0.0 && c.bn_momentum <= 1.0)) fail(ErrorKind::Value, "bn momentum must lie in (0, 1]");
}

namespace {

std::vector<Tensor*> parameter_list(Network& net, std::vector<bool>* is_weight = nullptr) {
  std::vector<Tensor*> out;
  for_each_parameter_tagged(net, [&](Tensor& t, bool w) {
    out.push_back(&t);
    if (is_weight) is_weight->push_back(w);
  });
  return out;
}

Tensor gather_rows(const Tensor& features, const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end) {
  Shape s = features.shape;
  s[0] = end - begin;
  const std::size_t stride = features.size() / std::max<std::size_t>(features.dim(0), 1);
  Tensor t(s);
  for (std::size_t r = begin; r < end; ++r)
    std::copy_n(features.values.begin() + static_cast<std::ptrdiff_t>(idx[r] * stride), stride,
                t.values.begin() + static_cast<std::ptrdiff_t>((r - begin) * stride));
  return t;
}

}  // namespace

Network train(const Network& init, const Dataset& data, const TrainConfig& config) {
  validate(config);
  validate(data);
  Network net = init;
  Network grads = zeros_like(net);
  Network velocity = zeros_like(net);
  std::vector<bool> is_weight;
  auto params = parameter_list(net, &is_weight);
  auto g = parameter_list(grads);
  auto v = parameter_list(velocity);
  auto rng = make_rng({config.seed, 0x7A1});
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Tape tape;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin + 2 <= order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(begin + config.batch_size, order.size());
      if (end - begin < 2) break;
      const Tensor x = gather_rows(data.features, order, begin, end);
      std::vector<std::size_t> y(end - begin);
      for (std::size_t r = begin; r < end; ++r) y[r - begin] = data.labels[order[r]];
      const Tensor logits = forward_recorded(net, x, BnMode::Training, tape, config.bn_momentum);
      Tensor grad;
      const double loss = cross_entropy(logits, y, &grad);
      if (!std::isfinite(loss)) fail(ErrorKind::Runtime, "training diverged in epoch " + std::to_string(epoch));
      for (auto* t : g) std::fill(t->values.begin(), t->values.end(), 0.0);
      backward(net, tape, grad, &grads);
      for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& w = *params[p];
        for (std::size_t i = 0; i < w.size(); ++i) {
          double gi = (*g[p])[i];
          if (is_weight[p] && config.decay == DecayKind::L2) gi += config.decay_lambda * w[i];
          if (is_weight[p] && config.decay == DecayKind::L1) gi += config.decay_lambda * ((w[i] > 0) - (w[i] < 0));
          double& vi = (*v[p])[i];
          vi = config.momentum * vi + gi;
          w[i] -= config.learning_rate * vi;
        }
      }
    }
  }
  validate(net);
  return net;
}

std::vector<std::size_t> predict(const Network& net, const Tensor& features) {
  std::vector<std::size_t> out;
  const std::size_t n = features.dim(0);
  constexpr std::size_t chunk = 1024;
  for (std::size_t begin = 0; begin < n; begin += chunk) {
    const Tensor logits = forward(net, slice_batch(features, begin, std::min(n, begin + chunk)));
    const std::size_t c = logits.dim(1);
    for (std::size_t r = 0; r < logits.dim(0); ++r) {
      const double* row = logits.data() + r * c;
      out.push_back(static_cast<std::size_t>(std::max_element(row, row + c) - row));
    }
  }
  return out;
}

double evaluate(const Network& net, const Dataset& data) {
  if (data.size() == 0) fail(ErrorKind::Value, "cannot evaluate on an empty dataset");
  const auto pred = predict(net, data.features);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == data.labels[i];
  return static_cast<double>(hit) / static_cast<double>(data.size());
}

Compression compression_of(const FoldResult& folded) { return {folded.network, folded.groups, sources_of(folded)}; }

Compression compression_of(const PruneResult& pruned) {
  Compression c{pruned.network, pruned.groups, {}};
  for (const auto& keep : pruned.kept) {
    std::vector<std::vector<std::size_t>> s;
    for (auto i : keep) s.push_back({i});
    c.sources.push_back(std::move(s));
  }
  return c;
}

Compression identity_compression(const Network& net) {
  Compression c{net, discover_groups(net), {}};
  for (const auto& g : c.groups) c.sources.push_back(Assignment::identity(g.channels).members());
  return c;
}

std::optional<std::size_t> site_group(const Network& net, const std::vector<FoldableGroup>& groups, std::size_t site) {
  if (site >= net.blocks.size()) fail(ErrorKind::Value, "unknown site " + std::to_string(site));
  std::optional<BlockRef> producer;
  for (std::size_t i = 0; i <= site; ++i) {
    const Block& b = net.blocks[i];
    if (b.is<Dense>() || b.is<Conv2D>()) producer = BlockRef{i, Branch::None, 0};
    if (b.is<Residual>()) {
      const auto& main = b.as<Residual>().main;
      for (std::size_t j = 0; j < main.size(); ++j)
        if (main[j].is<Dense>() || main[j].is<Conv2D>()) producer = BlockRef{i, Branch::Main, j};
    }
  }
  if (!producer) return std::nullopt;
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (const auto& p : groups[g].producers)
      if (p.block == *producer) return g;
  return std::nullopt;
}

VarianceReport variance_ratio(const Network& original, const Compression& compressed, const Tensor& probe,
                              const std::vector<std::size_t>& sites) {
  VarianceReport rep;
  if (sites.empty()) return rep;
  const ForwardTrace a = forward_trace(original, probe, sites);
  const ForwardTrace b = forward_trace(compressed.network, probe, sites);
  for (std::size_t s = 0; s < sites.size(); ++s) {
    const auto& vo = a.sites[s].stats.var;
    const auto& vc = b.sites[s].stats.var;
    const auto g = site_group(original, compressed.groups, sites[s]);
    std::vector<std::vector<std::size_t>> src;
    if (g && *g < compressed.sources.size()) {
      src = compressed.sources[*g];
    } else {
      src = Assignment::identity(vo.size()).members();
    }
    if (src.size() != vc.size()) fail(ErrorKind::Shape, "site " + std::to_string(sites[s]) + " channel map mismatch");
    double sum = 0.0;
    std::size_t used = 0, skipped = 0;
    for (std::size_t j = 0; j < src.size(); ++j) {
      double base = 0.0;
      for (auto i : src[j]) base += vo[i];
      base /= static_cast<double>(src[j].size());
      if (base == 0.0) {
        ++skipped;
        continue;
      }
      sum += vc[j] / base;
      ++used;
    }
    const double r = used ? sum / static_cast<double>(used) : 1.0;
    rep.sites.push_back(sites[s]);
    rep.ratio.push_back(r);
    rep.excluded.push_back(skipped);
    rep.mean_abs_dev += std::abs(1.0 - r);
  }
  rep.last = rep.ratio.back();
  rep.mean_abs_dev /= static_cast<double>(rep.ratio.size());
  return rep;
}

const char* to_string(Method m) {
  switch (m) {
    case Method::FoldNaive: return "fold-naive";
    case Method::FoldAR: return "fold-ar";
    case Method::FoldDIR: return "fold-dir";
    case Method::FoldR: return "fold-r";
    case Method::PruneL1: return "prune-l1";
    case Method::PruneL2: return "prune-l2";
  }
  return "?";
}

Method parse_method(const std::string& text) {
  for (auto m : all_methods())
    if (text == to_string(m)) return m;
  fail(ErrorKind::Value, "unknown method '" + text + "'");
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> m{Method::FoldNaive, Method::FoldAR, Method::FoldDIR,
                                     Method::FoldR,     Method::PruneL1, Method::PruneL2};
  return m;
}

MethodOutcome run_method(const Network& base, Method method, double sparsity, std::uint64_t seed,
                         const MethodContext& ctx) {
  MethodOutcome out;
  if (sparsity == 0.0) {
    out.compression = identity_compression(base);
    out.report.method = to_string(method);
    return out;
  }
  FoldPlan plan = uniform_plan(base, sparsity, Coupling::BnAr, seed);
  plan.kmeans = ctx.kmeans;
  auto take = [&](FoldResult r) {
    out.total_cost = r.report.total_cost;
    out.report = r.report;
    out.compression = compression_of(r);
  };
  switch (method) {
    case Method::FoldNaive:
      take(fold_naive(base, plan));
      break;
    case Method::FoldAR:
      take(apply_fold_ar(base, plan));
      break;
    case Method::FoldDIR: {
      if (ctx.synthetic) {
        take(fold_dir(base, plan, *ctx.synthetic));
      } else {
        DIConfig di = ctx.di;
        di.seed = seed;
        take(fold_dir(base, plan, di));
      }
      break;
    }
    case Method::FoldR: {
      if (!ctx.calibration) fail(ErrorKind::Value, "fold-r needs calibration data");
      FoldResult r = fold_naive(base, plan);
      r.network = data_repair(base, r, std::span<const Tensor>(&ctx.calibration->features, 1));
      r.report.method = "fold-r";
      take(std::move(r));
      break;
    }
    case Method::PruneL1:
    case Method::PruneL2: {
      const NormKind norm = method == Method::PruneL1 ? NormKind::L1 : NormKind::L2;
      PruneResult p = magnitude_prune(base, {{sparsity}, norm});
      // Cost analogue: squared norm of the deleted producer rows.
      for (std::size_t g = 0; g < p.groups.size(); ++g) {
        const Matrix rows = producer_matrix(base, p.groups[g]).matrix;
        std::vector<bool> kept(rows.rows(), false);
        for (auto i : p.kept[g]) kept[i] = true;
        for (std::size_t i = 0; i < rows.rows(); ++i)
          if (!kept[i]) out.total_cost += dot(rows.row(i), rows.row(i));
      }
      out.report.method = to_string(method);
      out.report.total_cost = out.total_cost;
      out.compression = compression_of(p);
      break;
    }
  }
  return out;
}

nlohmann::ordered_json to_json(const SweepConfig& c) {
  nlohmann::ordered_json j;
  j["sparsities"] = c.sparsities;
  std::vector<std::string> methods;
  for (auto m : c.methods) methods.push_back(to_string(m));
  j["methods"] = methods;
  j["seeds"] = c.seeds;
  j["probe_size"] = c.probe_size;
  j["kmeans"] = {{"restarts", c.kmeans.restarts}, {"max_iters", c.kmeans.max_iters}, {"tol", c.kmeans.tol}};
  j["deep_inversion"] = {{"batch_size", c.di.batch_size}, {"steps", c.di.steps},
                         {"learning_rate", c.di.learning_rate}, {"momentum", c.di.momentum},
                         {"bn_weight", c.di.bn_weight}, {"l2_weight", c.di.l2_weight},
                         {"tv_weight", c.di.tv_weight}, {"ce_weight", c.di.ce_weight}};
  j["variance_ratio"] = {{"sites", "post-activation ReLU outputs"},
                         {"aggregation", "cluster mean of original channel variances"},
                         {"headline", "last site"}};
  return j;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string row_key(const std::string& method, double sparsity, std::uint64_t seed) {
  return method + "," + fmt(sparsity) + "," + std::to_string(seed);
}

}  // namespace

std::vector<SweepRow> sweep(const Network& base, const Dataset& test, const Dataset* calibration,
                            const SweepConfig& config, const std::vector<SweepRow>& done) {
  for (double s : config.sparsities) sparsity_to_k(1, s);
  std::map<std::string, SweepRow> finished;
  for (const auto& r : done) finished[row_key(r.method, r.sparsity, r.seed)] = r;

  struct Point {
    Method method;
    double sparsity;
    std::uint64_t seed;
  };
  std::vector<Point> grid, todo;
  for (auto m : config.methods)
    for (double s : config.sparsities)
      for (auto seed : config.seeds) {
        grid.push_back({m, s, seed});
        if (!finished.count(row_key(to_string(m), s, seed))) todo.push_back(grid.back());
      }

  const Tensor probe = slice_batch(test.features, 0, std::min(config.probe_size, test.size()));
  const auto sites = activation_sites(base);
  const double base_accuracy = evaluate(base, test);

  // One synthetic batch per seed, shared by every sparsity.
  std::map<std::uint64_t, Tensor> synthetic;
  for (const auto& p : todo)
    if (p.method == Method::FoldDIR && p.sparsity > 0.0) synthetic.emplace(p.seed, Tensor{});
  std::vector<std::uint64_t> di_seeds;
  for (auto& [seed, t] : synthetic) di_seeds.push_back(seed);
  const int jobs = static_cast<int>(std::max<std::size_t>(config.jobs, 1));
#pragma omp parallel for schedule(dynamic, 1) num_threads(jobs)
  for (std::size_t i = 0; i < di_seeds.size(); ++i) {
    DIConfig di = config.di;
    di.seed = di_seeds[i];
    Tensor batch = deep_inversion(base, di).batch;
#pragma omp critical
    synthetic[di_seeds[i]] = std::move(batch);
  }

  std::vector<SweepRow> computed(todo.size());
  std::vector<std::string> errors(todo.size());
#pragma omp parallel for schedule(dynamic, 1) num_threads(jobs)
  for (std::size_t i = 0; i < todo.size(); ++i) {
    const Point& p = todo[i];
    try {
      MethodContext ctx;
      ctx.calibration = calibration;
      ctx.di = config.di;
      ctx.kmeans = config.kmeans;
      if (auto it = synthetic.find(p.seed); it != synthetic.end()) ctx.synthetic = &it->second;
      const MethodOutcome out = run_method(base, p.method, p.sparsity, p.seed, ctx);
      SweepRow row;
      row.method = to_string(p.method);
      row.sparsity = p.sparsity;
      row.seed = p.seed;
      row.accuracy = p.sparsity == 0.0 ? base_accuracy : evaluate(out.compression.network, test);
      const VarianceReport vr = variance_ratio(base, out.compression, probe, sites);
      row.var_ratio_last = vr.last;
      row.var_ratio_mean_abs_dev = vr.mean_abs_dev;
      row.total_cost = out.total_cost;
      computed[i] = row;
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (std::size_t i = 0; i < todo.size(); ++i) {
    if (!errors[i].empty()) {
      fail(ErrorKind::Runtime, std::string("sweep point ") + to_string(todo[i].method) + " s=" + fmt(todo[i].sparsity) +
                                   " seed=" + std::to_string(todo[i].seed) + ": " + errors[i]);
    }
    finished[row_key(computed[i].method, computed[i].sparsity, computed[i].seed)] = computed[i];
  }
  std::vector<SweepRow> rows;
  for (const auto& p : grid) rows.push_back(finished.at(row_key(to_string(p.method), p.sparsity, p.seed)));
  return rows;
}

std::string format_sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = std::string(kSweepHeader) + "\n";
  for (const auto& r : rows) {
    out += r.method + "," + fmt(r.sparsity) + "," + std::to_string(r.seed) + "," + fmt(r.accuracy) + "," +
           fmt(r.var_ratio_last) + "," + fmt(r.var_ratio_mean_abs_dev) + "," + fmt(r.total_cost) + "\n";
  }
  return out;
}

std::vector<SweepRow> parse_sweep_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kSweepHeader) fail(ErrorKind::Format, "sweep CSV has an unexpected header");
  std::vector<SweepRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 7) fail(ErrorKind::Format, "sweep CSV line " + std::to_string(lineno) + " has " +
                                                   std::to_string(f.size()) + " fields");
    try {
      SweepRow r;
      r.method = f[0];
      r.sparsity = std::stod(f[1]);
      r.seed = std::stoull(f[2]);
      r.accuracy = std::stod(f[3]);
      r.var_ratio_last = std::stod(f[4]);
      r.var_ratio_mean_abs_dev = std::stod(f[5]);
      r.total_cost = std::stod(f[6]);
      rows.push_back(r);
    } catch (const std::logic_error&) {
      fail(ErrorKind::Format, "sweep CSV line " + std::to_string(lineno) + " is malformed");
    }
  }
  return rows;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string render_sweep_report(const std::vector<SweepRow>& rows) {
  std::vector<std::string> methods;
  std::set<double> sparsities;
  std::map<std::pair<std::string, double>, std::vector<const SweepRow*>> cells;
  for (const auto& r : rows) {
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
    sparsities.insert(r.sparsity);
    cells[{r.method, r.sparsity}].push_back(&r);
  }
  auto table = [&](const std::string& title, auto value) {
    std::string out = "### " + title + "\n\n| method |";
    for (double s : sparsities) out += " s=" + fmt(s) + " |";
    out += "\n|---|";
    for (std::size_t i = 0; i < sparsities.size(); ++i) out += "---|";
    out += "\n";
    for (const auto& m : methods) {
      out += "| " + m + " |";
      for (double s : sparsities) {
        auto it = cells.find({m, s});
        if (it == cells.end()) {
          out += " - |";
          continue;
        }
        char buf[32];
        std::snprintf(buf, sizeof buf, " %.4f |", value(it->second));
        out += buf;
      }
      out += "\n";
    }
    return out + "\n";
  };
  auto mean_of = [](auto field) {
    return [field](const std::vector<const SweepRow*>& rs) {
      double s = 0.0;
      for (auto* r : rs) s += r->*field;
      return s / static_cast<double>(rs.size());
    };
  };
  auto median_of = [](auto field) {
    return [field](const std::vector<const SweepRow*>& rs) {
      std::vector<double> v;
      for (auto* r : rs) v.push_back(r->*field);
      return median(v);
    };
  };
  return table("Mean test accuracy", mean_of(&SweepRow::accuracy)) +
         table("Median last-layer variance ratio", median_of(&SweepRow::var_ratio_last)) +
         table("Mean |1 - variance ratio| over layers", mean_of(&SweepRow::var_ratio_mean_abs_dev)) +
         table("Mean total fold cost J", mean_of(&SweepRow::total_cost));
}

Matrix site_activations(const Network& net, const Tensor& probe, std::size_t site) {
  const std::size_t s[] = {site};
  const ForwardTrace t = forward_trace(net, probe, s, true);
  const Tensor& a = *t.sites[0].activations;
  const std::size_t b = a.dim(0), c = a.dim(1);
  const std::size_t sp = a.size() / std::max<std::size_t>(b * c, 1);
  Matrix m(b * sp, c);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < sp; ++p) m(i * sp + p, ch) = a[(i * c + ch) * sp + p];
  return m;
}

std::vector<LayerCorrelation> layer_correlation_report(const Network& net, const Tensor& probe) {
  std::vector<LayerCorrelation> out;
  for (std::size_t site : activation_sites(net)) {
    LayerCorrelation lc;
    lc.site = site;
    lc.correlations = self_match_correlation(site_activations(net, probe, site)).correlations;
    lc.histogram.assign(kCorrelationBins, 0);
    for (double c : lc.correlations) {
      auto bin = static_cast<std::size_t>(std::floor((c + 1.0) / 2.0 * static_cast<double>(kCorrelationBins)));
      ++lc.histogram[std::min(bin, kCorrelationBins - 1)];
    }
    lc.median = median(lc.correlations);
    out.push_back(std::move(lc));
  }
  return out;
}

}  // namespace foldkit
