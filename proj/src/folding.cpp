// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>

#include "foldkit/error.hpp"
#include "foldkit/folding.hpp"

namespace foldkit {

const char* to_string(Coupling c) {
  switch (c) {
    case Coupling::Plain: return "plain";
    case Coupling::BnAr: return "bn-ar";
    case Coupling::BnDir: return "bn-dir";
  }
  return "?";
}

namespace {

// Producer weight as [channels x fan_in].
struct ProducerView {
  Tensor* weight;
  Tensor* bias;
  std::size_t channels;
  std::size_t fan_in;
};

ProducerView producer_view(Block& block) {
  if (block.is<Dense>()) {
    auto& d = block.as<Dense>();
    return {&d.weight, &d.bias, d.out_features(), d.in_features()};
  }
  if (block.is<Conv2D>()) {
    auto& c = block.as<Conv2D>();
    return {&c.weight, &c.bias, c.out_channels(), c.weight.size() / c.out_channels()};
  }
  fail(ErrorKind::Topology, std::string("a ") + to_string(block.kind()) + " block cannot produce channels");
}

// Consumer weight as [outer x channels x inner].
struct ConsumerView {
  Tensor* weight;
  std::size_t outer;
  std::size_t channels;
  std::size_t inner;
};

ConsumerView consumer_view(Block& block, std::size_t spatial) {
  if (spatial == 0) fail(ErrorKind::Value, "consumer spatial factor must be positive");
  if (block.is<Dense>()) {
    auto& d = block.as<Dense>();
    if (d.in_features() % spatial != 0) {
      fail(ErrorKind::Shape, "dense consumer width " + std::to_string(d.in_features()) + " is not a multiple of " +
                                 std::to_string(spatial));
    }
    return {&d.weight, d.out_features(), d.in_features() / spatial, spatial};
  }
  if (block.is<Conv2D>()) {
    auto& c = block.as<Conv2D>();
    return {&c.weight, c.out_channels(), c.in_channels(), c.weight.dim(2) * c.weight.dim(3)};
  }
  fail(ErrorKind::Topology, std::string("a ") + to_string(block.kind()) + " block cannot consume channels");
}

Block& mutable_block(const Block& b) { return const_cast<Block&>(b); }

std::string label(const char* role, const BlockRef& ref, const char* part = nullptr) {
  std::string s = std::string(role) + " " + to_string(ref);
  if (part) s += std::string(" ") + part;
  return s;
}

Matrix column(const Tensor& t) { return Matrix(t.size(), 1, t.values); }

Matrix mean_rows(const Matrix& m, const std::vector<std::vector<std::size_t>>& sources) {
  Matrix out(sources.size(), m.cols());
  for (std::size_t j = 0; j < sources.size(); ++j) {
    if (sources[j].empty()) fail(ErrorKind::Value, "channel map has an empty source list");
    for (auto i : sources[j]) {
      if (i >= m.rows()) fail(ErrorKind::Value, "channel map source " + std::to_string(i) + " out of range");
      for (std::size_t t = 0; t < m.cols(); ++t) out(j, t) += m(i, t);
    }
    const double inv = 1.0 / static_cast<double>(sources[j].size());
    for (auto& v : out.row(j)) v *= inv;
  }
  return out;
}

Tensor mean_entries(const Tensor& t, const std::vector<std::vector<std::size_t>>& sources) {
  const Matrix m = mean_rows(column(t), sources);
  return Tensor({sources.size()}, m.data());
}

}  // namespace

Matrix flatten_producer_rows(const Block& block) {
  const auto v = producer_view(mutable_block(block));
  Matrix m(v.channels, v.fan_in + 1);
  for (std::size_t i = 0; i < v.channels; ++i) {
    for (std::size_t t = 0; t < v.fan_in; ++t) m(i, t) = (*v.weight)[i * v.fan_in + t];
    m(i, v.fan_in) = (*v.bias)[i];
  }
  return m;
}

void unflatten_producer_rows(Block& block, const Matrix& rows) {
  auto v = producer_view(block);
  if (rows.cols() != v.fan_in + 1) fail(ErrorKind::Shape, "producer rows have the wrong width");
  Shape ws = v.weight->shape;
  ws[0] = rows.rows();
  Tensor w(ws), b({rows.rows()});
  for (std::size_t i = 0; i < rows.rows(); ++i) {
    for (std::size_t t = 0; t < v.fan_in; ++t) w[i * v.fan_in + t] = rows(i, t);
    b[i] = rows(i, v.fan_in);
  }
  *v.weight = std::move(w);
  *v.bias = std::move(b);
}

Matrix flatten_consumer_cols(const Block& block, std::size_t spatial) {
  const auto v = consumer_view(mutable_block(block), spatial);
  Matrix m(v.channels, v.outer * v.inner);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.channels; ++i)
      for (std::size_t s = 0; s < v.inner; ++s)
        m(i, o * v.inner + s) = (*v.weight)[(o * v.channels + i) * v.inner + s];
  return m;
}

FoldMatrix build_fold_matrix(const Network& net, const FoldableGroup& group, Coupling coupling) {
  if (coupling != Coupling::Plain && !group.has_batchnorm()) {
    fail(ErrorKind::Topology, std::string(to_string(coupling)) + " coupling requested on a group without BatchNorm");
  }
  std::vector<Matrix> parts;
  std::vector<std::string> names;
  auto add = [&](Matrix m, std::string name) {
    if (m.rows() != group.channels) {
      fail(ErrorKind::Shape, name + " has " + std::to_string(m.rows()) + " channels, group has " +
                                 std::to_string(group.channels));
    }
    parts.push_back(std::move(m));
    names.push_back(std::move(name));
  };
  auto add_consumers = [&] {
    for (const auto& c : group.consumers) add(flatten_consumer_cols(net.at(c.block), c.spatial), label("consumer", c.block));
  };
  std::vector<BlockRef> attached;
  for (const auto& p : group.producers)
    if (p.batchnorm) attached.push_back(*p.batchnorm);
  auto loose_bns = [&](bool with_norm) {
    for (const auto& ref : group.batchnorms) {
      if (std::find(attached.begin(), attached.end(), ref) != attached.end()) continue;
      const auto& bn = net.at(ref).as<BatchNorm>();
      add(column(bn.gamma), label("batchnorm", ref, "gamma"));
      if (with_norm) {
        Matrix sn(bn.channels(), 1);
        for (std::size_t i = 0; i < bn.channels(); ++i) sn(i, 0) = 1.0 / std::sqrt(bn.running_var[i] + bn.epsilon);
        add(std::move(sn), label("batchnorm", ref, "norm"));
      }
    }
  };

  if (coupling == Coupling::BnDir) add_consumers();
  for (const auto& p : group.producers) {
    Matrix rows = flatten_producer_rows(net.at(p.block));
    const std::size_t fan_in = rows.cols() - 1;
    if (coupling == Coupling::Plain || !p.batchnorm) {
      add(std::move(rows), label("producer", p.block));
      continue;
    }
    const auto& bn = net.at(*p.batchnorm).as<BatchNorm>();
    Matrix gamma = column(bn.gamma);
    Matrix sn(bn.channels(), 1);
    for (std::size_t i = 0; i < bn.channels(); ++i) sn(i, 0) = 1.0 / std::sqrt(bn.running_var[i] + bn.epsilon);
    if (coupling == Coupling::BnAr) {
      Matrix w(rows.rows(), fan_in), b(rows.rows(), 1);
      for (std::size_t i = 0; i < rows.rows(); ++i) {
        for (std::size_t t = 0; t < fan_in; ++t) w(i, t) = sn(i, 0) * rows(i, t);
        b(i, 0) = sn(i, 0) * (rows(i, fan_in) - bn.running_mean[i]);
      }
      add(std::move(w), label("producer", p.block, "normalized weight"));
      add(std::move(b), label("producer", p.block, "normalized bias"));
      add(std::move(gamma), label("batchnorm", *p.batchnorm, "gamma"));
    } else {
      Matrix w(rows.rows(), fan_in), b(rows.rows(), 1);
      for (std::size_t i = 0; i < rows.rows(); ++i) {
        for (std::size_t t = 0; t < fan_in; ++t) w(i, t) = rows(i, t);
        b(i, 0) = rows(i, fan_in);
      }
      add(std::move(w), label("producer", p.block, "weight"));
      add(std::move(b), label("producer", p.block, "bias"));
      add(std::move(gamma), label("batchnorm", *p.batchnorm, "gamma"));
      add(std::move(sn), label("batchnorm", *p.batchnorm, "norm"));
    }
  }
  if (coupling != Coupling::Plain) loose_bns(coupling == Coupling::BnDir);
  if (coupling != Coupling::BnDir) add_consumers();

  FoldMatrix fm;
  fm.matrix = Matrix::hcat(parts);
  std::size_t col = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    fm.columns.push_back({names[i], col, col + parts[i].cols()});
    col += parts[i].cols();
  }
  return fm;
}

FoldMatrix producer_matrix(const Network& net, const FoldableGroup& group) {
  FoldableGroup only = group;
  only.consumers.clear();
  return build_fold_matrix(net, only, Coupling::Plain);
}

void apply_channel_map(Network& net, const FoldableGroup& group, const std::vector<std::vector<std::size_t>>& sources) {
  const std::size_t k = sources.size();
  if (k == 0) fail(ErrorKind::Value, "channel map must keep at least one channel");
  for (const auto& p : group.producers) {
    Block& b = net.at(p.block);
    unflatten_producer_rows(b, mean_rows(flatten_producer_rows(b), sources));
  }
  for (const auto& ref : group.batchnorms) {
    auto& bn = net.at(ref).as<BatchNorm>();
    bn.gamma = mean_entries(bn.gamma, sources);
    bn.beta = mean_entries(bn.beta, sources);
    bn.running_mean = mean_entries(bn.running_mean, sources);
    bn.running_var = mean_entries(bn.running_var, sources);
  }
  for (const auto& c : group.consumers) {
    auto v = consumer_view(net.at(c.block), c.spatial);
    if (v.channels != group.channels) {
      fail(ErrorKind::Shape, to_string(c.block) + " reads " + std::to_string(v.channels) + " channels, group has " +
                                 std::to_string(group.channels));
    }
    Shape ws = v.weight->shape;
    ws[1] = k * (v.weight->rank() == 2 ? v.inner : 1);
    Tensor w(ws);
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t j = 0; j < k; ++j)
        for (auto i : sources[j])
          for (std::size_t s = 0; s < v.inner; ++s)
            w[(o * k + j) * v.inner + s] += (*v.weight)[(o * v.channels + i) * v.inner + s];
    *v.weight = std::move(w);
  }
}

void fold_group(Network& net, const FoldableGroup& group, const Assignment& assignment) {
  if (assignment.n() != group.channels) {
    fail(ErrorKind::Value, "assignment covers " + std::to_string(assignment.n()) + " channels, group has " +
                               std::to_string(group.channels));
  }
  validate(assignment);
  apply_channel_map(net, group, assignment.members());
}

void select_channels(Network& net, const FoldableGroup& group, const std::vector<std::size_t>& keep) {
  std::vector<std::vector<std::size_t>> sources;
  for (auto i : keep) {
    if (i >= group.channels) fail(ErrorKind::Value, "kept channel out of range");
    sources.push_back({i});
  }
  apply_channel_map(net, group, sources);
}

std::size_t sparsity_to_k(std::size_t n, double sparsity) {
  if (!(sparsity >= 0.0 && sparsity < 1.0)) {
    fail(ErrorKind::Value, "sparsity must lie in [0, 1), got " + std::to_string(sparsity));
  }
  const auto k = static_cast<std::size_t>(std::llround((1.0 - sparsity) * static_cast<double>(n)));
  return std::max<std::size_t>(1, k);
}

FoldPlan uniform_plan(const Network& net, double sparsity, Coupling coupling, std::uint64_t seed) {
  FoldPlan plan;
  plan.coupling = coupling;
  plan.seed = seed;
  for (const auto& g : discover_groups(net)) plan.k.push_back(sparsity_to_k(g.channels, sparsity));
  return plan;
}

Assignment cluster_rows(const Matrix& rows, std::size_t k, const FoldPlan& plan, std::size_t group_index) {
  if (k == rows.rows()) return Assignment::identity(k);
  if (plan.clusterer == Clusterer::Greedy) return greedy_pair_clustering(rows, k);
  return kmeans(rows, k, plan.seed * 1000003ULL + group_index, plan.kmeans).assignment;
}

FoldResult fold_network(const Network& net, const FoldPlan& plan, const FoldHooks& hooks) {
  FoldResult out;
  out.network = net;
  out.groups = discover_groups(net);
  if (plan.k.size() != out.groups.size()) {
    fail(ErrorKind::Value, "fold plan has " + std::to_string(plan.k.size()) + " targets for " +
                               std::to_string(out.groups.size()) + " groups");
  }
  for (std::size_t gi = 0; gi < out.groups.size(); ++gi) {
    const FoldableGroup& g = out.groups[gi];
    const std::size_t k = plan.k[gi];
    if (k < 1 || k > g.channels) {
      fail(ErrorKind::Value, "group " + std::to_string(gi) + ": k=" + std::to_string(k) + " not in [1, " +
                                 std::to_string(g.channels) + "]");
    }
    const Coupling coupling = g.has_batchnorm() ? plan.coupling : Coupling::Plain;
    const FoldMatrix fm = build_fold_matrix(out.network, g, coupling);
    Assignment a = cluster_rows(fm.matrix, k, plan, gi);

    GroupReport rep;
    rep.index = gi;
    for (const auto& p : g.producers) rep.producers.push_back(p.block);
    rep.residual = g.residual;
    rep.coupling = coupling;
    rep.n = g.channels;
    rep.k = k;
    rep.cluster_sizes = a.sizes();
    rep.columns = fm.columns;
    const Matrix projected = project(a, fm.matrix);
    for (const auto& cb : fm.columns) {
      double c = 0.0;
      for (std::size_t i = 0; i < fm.matrix.rows(); ++i)
        for (std::size_t t = cb.begin; t < cb.end; ++t) {
          const double d = fm.matrix(i, t) - projected(i, t);
          c += d * d;
        }
      rep.column_costs.push_back(c);
      rep.cost += c;
    }

    if (hooks.before_fold) hooks.before_fold(out.network, g, a, rep);
    fold_group(out.network, g, a);
    if (hooks.after_fold) hooks.after_fold(out.network, g, a, rep);
    out.report.total_cost += rep.cost;
    out.report.groups.push_back(std::move(rep));
    out.assignments.push_back(std::move(a));
  }
  return out;
}

nlohmann::ordered_json to_json(const FoldReport& report) {
  using json = nlohmann::ordered_json;
  json j;
  j["method"] = report.method;
  j["total_cost"] = report.total_cost;
  json groups = json::array();
  for (const auto& g : report.groups) {
    json r;
    r["index"] = g.index;
    json prods = json::array();
    for (const auto& p : g.producers) prods.push_back(to_string(p));
    r["producers"] = prods;
    r["residual"] = g.residual;
    r["coupling"] = to_string(g.coupling);
    r["n"] = g.n;
    r["k"] = g.k;
    r["cost"] = g.cost;
    r["cluster_sizes"] = g.cluster_sizes;
    json cols = json::array();
    for (std::size_t i = 0; i < g.columns.size(); ++i) {
      cols.push_back({{"name", g.columns[i].name},
                      {"begin", g.columns[i].begin},
                      {"end", g.columns[i].end},
                      {"cost", i < g.column_costs.size() ? g.column_costs[i] : 0.0}});
    }
    r["columns"] = cols;
    if (!g.correlations.empty()) r["correlations"] = g.correlations;
    if (!g.scales.empty()) r["scales"] = g.scales;
    groups.push_back(std::move(r));
  }
  j["groups"] = groups;
  for (const auto& [key, value] : report.extra.items()) j[key] = value;
  return j;
}

}  // namespace foldkit
