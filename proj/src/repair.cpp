// SPDX-License-Identifier: Apache-2.0
#include "foldkit/repair.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "foldkit/error.hpp"

namespace foldkit {

const char* to_string(RepairMode mode) {
  switch (mode) {
    case RepairMode::Naive: return "naive";
    case RepairMode::AR: return "ar";
    case RepairMode::DIR: return "dir";
    case RepairMode::Data: return "data";
  }
  return "?";
}

RepairMode parse_repair_mode(const std::string& text) {
  if (text == "naive") return RepairMode::Naive;
  if (text == "ar") return RepairMode::AR;
  if (text == "dir") return RepairMode::DIR;
  if (text == "data") return RepairMode::Data;
  fail(ErrorKind::Value, "unknown repair mode '" + text + "' (expected naive, ar, dir or data)");
}

std::vector<ClusterCorrelation> estimate_cluster_correlation(const Matrix& rows, const Assignment& assignment) {
  if (rows.rows() != assignment.n()) fail(ErrorKind::Shape, "correlation rows do not match the assignment");
  std::vector<ClusterCorrelation> out;
  for (const auto& members : assignment.members()) {
    ClusterCorrelation c;
    c.size = members.size();
    if (c.size > 1) {
      std::vector<double> norm(c.size);
      for (std::size_t a = 0; a < c.size; ++a) {
        norm[a] = std::sqrt(dot(rows.row(members[a]), rows.row(members[a])));
        if (norm[a] == 0.0) {
          fail(ErrorKind::Value, "row " + std::to_string(members[a]) + " has zero norm inside a multi-member cluster");
        }
      }
      double sum = 0.0;
      for (std::size_t a = 0; a < c.size; ++a)
        for (std::size_t b = 0; b < c.size; ++b)
          if (a != b) sum += dot(rows.row(members[a]), rows.row(members[b])) / (norm[a] * norm[b]);
      const double nc = static_cast<double>(c.size);
      c.correlation = sum / (nc * nc - nc);
    }
    c.scale = ar_scale(c.size, c.correlation);
    out.push_back(c);
  }
  return out;
}

double ar_scale(std::size_t n, double correlation) {
  if (n == 0) fail(ErrorKind::Value, "cluster size must be positive");
  if (n == 1) return 1.0;
  const double nc = static_cast<double>(n);
  const double e = std::clamp(correlation, -1.0 / (nc - 1.0) + 1e-3, 1.0);
  return nc / std::sqrt(nc + (nc * nc - nc) * e);
}

Matrix normalized_producer_rows(const Network& net, const FoldableGroup& group) {
  std::vector<Matrix> parts;
  for (const auto& p : group.producers) {
    if (!p.batchnorm) continue;
    const Matrix rows = flatten_producer_rows(net.at(p.block));
    const auto& bn = net.at(*p.batchnorm).as<BatchNorm>();
    Matrix w(rows.rows(), rows.cols() - 1);
    for (std::size_t i = 0; i < rows.rows(); ++i) {
      const double sn = 1.0 / std::sqrt(bn.running_var[i] + bn.epsilon);
      for (std::size_t t = 0; t < w.cols(); ++t) w(i, t) = sn * rows(i, t);
    }
    parts.push_back(std::move(w));
  }
  if (parts.empty()) fail(ErrorKind::Topology, "group has no producer followed by BatchNorm");
  return Matrix::hcat(parts);
}

FoldResult fold_naive(const Network& net, FoldPlan plan) {
  plan.coupling = Coupling::BnAr;
  FoldResult r = fold_network(net, plan);
  r.report.method = "fold-naive";
  return r;
}

namespace {

// Rewrites producer + BN so the BN normalizer is the identity:
// gamma * Sn (W x + b - mu) + beta == gamma * (W' x + b') + beta.
void absorb_normalization(Network& net, const ProducerRef& p, const std::vector<bool>& channels) {
  auto& bn = net.at(*p.batchnorm).as<BatchNorm>();
  if (!(bn.epsilon < 1.0)) fail(ErrorKind::Value, "BatchNorm epsilon must be < 1 for Fold-AR");
  Block& prod = net.at(p.block);
  Matrix rows = flatten_producer_rows(prod);
  const std::size_t fan_in = rows.cols() - 1;
  for (std::size_t i = 0; i < rows.rows(); ++i) {
    if (!channels[i]) continue;
    const double sn = 1.0 / std::sqrt(bn.running_var[i] + bn.epsilon);
    for (std::size_t t = 0; t < fan_in; ++t) rows(i, t) *= sn;
    rows(i, fan_in) = sn * (rows(i, fan_in) - bn.running_mean[i]);
    bn.running_mean[i] = 0.0;
    bn.running_var[i] = 1.0 - bn.epsilon;
  }
  unflatten_producer_rows(prod, rows);
}

}  // namespace

FoldResult apply_fold_ar(const Network& net, FoldPlan plan) {
  plan.coupling = Coupling::BnAr;
  std::vector<ClusterCorrelation> pending;
  FoldHooks hooks;
  hooks.before_fold = [&](Network& cur, const FoldableGroup& g, const Assignment& a, GroupReport& rep) {
    if (!g.has_batchnorm()) {
      fail(ErrorKind::Topology, "Fold-AR needs BatchNorm on every folded group; group " + std::to_string(rep.index) +
                                    " has none");
    }
    pending = estimate_cluster_correlation(normalized_producer_rows(cur, g), a);
    std::vector<bool> shared(a.n());
    for (std::size_t i = 0; i < a.n(); ++i) shared[i] = pending[a.labels[i]].size > 1;
    for (const auto& p : g.producers)
      if (p.batchnorm) absorb_normalization(cur, p, shared);
    for (const auto& c : pending) {
      rep.correlations.push_back(c.correlation);
      rep.scales.push_back(c.scale);
    }
  };
  hooks.after_fold = [&](Network& cur, const FoldableGroup& g, const Assignment&, GroupReport&) {
    for (const auto& p : g.producers) {
      if (!p.batchnorm) continue;
      auto& bn = cur.at(*p.batchnorm).as<BatchNorm>();
      for (std::size_t j = 0; j < pending.size(); ++j) bn.gamma[j] *= pending[j].scale;
    }
  };
  FoldResult r = fold_network(net, plan, hooks);
  r.report.method = "fold-ar";
  return r;
}

ChannelSources sources_of(const FoldResult& folded) {
  ChannelSources s;
  for (const auto& a : folded.assignments) s.push_back(a.members());
  return s;
}

namespace {

ChannelStats producer_output_stats(const Network& net, const BlockRef& ref, const Tensor& data) {
  std::optional<ChannelStats> stats;
  forward_observed(net, data, [&](const BlockRef& r, const Tensor&, const Tensor& out) {
    if (r == ref) stats = channel_stats(out);
  });
  if (!stats) fail(ErrorKind::Value, "no output observed for " + to_string(ref));
  return *stats;
}

}  // namespace

Network data_repair(const Network& original, const Network& folded, const std::vector<FoldableGroup>& groups,
                    const ChannelSources& sources, std::span<const Tensor> calibration) {
  if (calibration.empty()) fail(ErrorKind::Value, "data repair needs calibration data");
  if (sources.size() != groups.size()) fail(ErrorKind::Value, "channel sources do not match the groups");
  const Tensor data = concat_batches(calibration);
  if (data.dim(0) == 0) fail(ErrorKind::Value, "data repair needs calibration data");
  Network out = folded;
  bool has_bn = false;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const FoldableGroup& g = groups[gi];
    if (g.has_batchnorm()) {
      has_bn = true;
      continue;
    }
    if (has_bn) out = bn_recalibrate(out, std::span<const Tensor>(&data, 1));
    for (const auto& p : g.producers) {
      const ChannelStats orig = producer_output_stats(original, p.block, data);
      const ChannelStats now = producer_output_stats(out, p.block, data);
      const auto& src = sources[gi];
      Block& prod = out.at(p.block);
      Matrix rows = flatten_producer_rows(prod);
      if (rows.rows() != src.size()) fail(ErrorKind::Shape, "folded group size does not match its channel sources");
      for (std::size_t j = 0; j < src.size(); ++j) {
        double target_mean = 0.0, target_std = 0.0;
        for (auto i : src[j]) {
          target_mean += orig.mean[i];
          target_std += std::sqrt(orig.var[i]);
        }
        target_mean /= static_cast<double>(src[j].size());
        target_std /= static_cast<double>(src[j].size());
        const double cur_std = std::max(std::sqrt(now.var[j]), 1e-8);
        const double a = target_std / cur_std;
        for (std::size_t t = 0; t + 1 < rows.cols(); ++t) rows(j, t) *= a;
        rows(j, rows.cols() - 1) = a * (rows(j, rows.cols() - 1) - now.mean[j]) + target_mean;
      }
      unflatten_producer_rows(prod, rows);
    }
  }
  if (has_bn) out = bn_recalibrate(out, std::span<const Tensor>(&data, 1));
  return out;
}

Network data_repair(const Network& original, const FoldResult& folded, std::span<const Tensor> calibration) {
  return data_repair(original, folded.network, folded.groups, sources_of(folded), calibration);
}

void validate(const DIConfig& c) {
  if (c.batch_size == 0) fail(ErrorKind::Value, "deep inversion batch size must be positive");
  if (c.steps == 0) fail(ErrorKind::Value, "deep inversion needs at least one step");
  for (double w : {c.bn_weight, c.l2_weight, c.tv_weight, c.ce_weight, c.learning_rate, c.momentum}) {
    if (!(w >= 0.0) || !std::isfinite(w)) fail(ErrorKind::Value, "deep inversion weights must be finite and >= 0");
  }
}

DIResult deep_inversion(const Network& net, const DIConfig& config) {
  validate(config);
  if (batchnorm_refs(net).empty()) fail(ErrorKind::Topology, "deep inversion needs a network with BatchNorm");
  DIResult res;
  Shape shape{config.batch_size};
  shape.insert(shape.end(), net.input_shape.begin(), net.input_shape.end());
  res.batch = Tensor(shape);
  std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32), 0x44u};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : res.batch.values) v = normal(rng);
  for (std::size_t i = 0; i < config.batch_size; ++i) res.targets.push_back(i % net.class_count);

  LossSpec spec;
  spec.targets = res.targets;
  spec.ce_weight = config.ce_weight;
  spec.bn_weight = config.bn_weight;
  spec.l2_weight = config.l2_weight;
  spec.tv_weight = config.tv_weight;
  std::vector<double> velocity(res.batch.size(), 0.0);
  for (std::size_t step = 0; step < config.steps; ++step) {
    const InputGradient g = input_gradient(net, res.batch, spec);
    if (!std::isfinite(g.loss.total)) {
      fail(ErrorKind::Runtime, "deep inversion diverged at step " + std::to_string(step));
    }
    res.trace.push_back(g.loss);
    for (std::size_t i = 0; i < velocity.size(); ++i) {
      velocity[i] = config.momentum * velocity[i] + g.gradient[i];
      res.batch[i] -= config.learning_rate * velocity[i];
    }
  }
  res.trace.push_back(input_gradient(net, res.batch, spec).loss);
  return res;
}

FoldResult fold_dir(const Network& net, FoldPlan plan, const Tensor& synthetic) {
  plan.coupling = Coupling::BnDir;
  FoldResult r = fold_network(net, plan);
  r.network = bn_recalibrate(r.network, std::span<const Tensor>(&synthetic, 1));
  r.report.method = "fold-dir";
  return r;
}

FoldResult fold_dir(const Network& net, FoldPlan plan, const DIConfig& config) {
  const DIResult di = deep_inversion(net, config);
  FoldResult r = fold_dir(net, std::move(plan), di.batch);
  r.report.extra["deep_inversion"] = {
      {"batch_size", config.batch_size}, {"steps", config.steps},         {"learning_rate", config.learning_rate},
      {"momentum", config.momentum},     {"bn_weight", config.bn_weight}, {"l2_weight", config.l2_weight},
      {"tv_weight", config.tv_weight},   {"ce_weight", config.ce_weight}, {"seed", config.seed},
      {"initial_loss", di.trace.front().total}, {"final_loss", di.trace.back().total}};
  return r;
}

}  // namespace foldkit
