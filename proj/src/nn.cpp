// SPDX-License-Identifier: Apache-2.0
#include "foldkit/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "foldkit/error.hpp"
#include "foldkit/kernels.hpp"

namespace foldkit {

namespace {

struct Layout {
  std::size_t batch = 0;
  std::size_t channels = 0;
  std::size_t spatial = 1;
};

Layout layout_of(const Tensor& t) {
  if (t.rank() < 2) fail(ErrorKind::Shape, "expected a batch tensor, got " + shape_string(t.shape));
  Layout l;
  l.batch = t.dim(0);
  l.channels = t.dim(1);
  for (std::size_t i = 2; i < t.rank(); ++i) l.spatial *= t.dim(i);
  return l;
}

Shape with_batch(std::size_t batch, const Shape& per_sample) {
  Shape s{batch};
  s.insert(s.end(), per_sample.begin(), per_sample.end());
  return s;
}

kernels::ConvGeometry geometry(const Conv2D& c, const Tensor& x) {
  kernels::ConvGeometry g;
  g.batch = x.dim(0);
  g.in_channels = x.dim(1);
  g.in_h = x.dim(2);
  g.in_w = x.dim(3);
  g.out_channels = c.out_channels();
  g.kernel_h = c.weight.dim(2);
  g.kernel_w = c.weight.dim(3);
  g.stride = c.stride;
  g.padding = c.padding;
  return g;
}

BlockRef make_ref(std::size_t top, Branch branch, std::size_t index) {
  if (branch == Branch::None) return BlockRef{index, Branch::None, 0};
  return BlockRef{top, branch, index};
}

class Executor {
 public:
  Executor(BnMode mode, double momentum, const BlockObserver* observer)
      : mode_(mode), momentum_(momentum), observer_(observer) {}

  Tensor run(std::vector<Block>& blocks, Tensor x, std::size_t top, Branch branch,
             std::vector<BlockRecord>* records) {
    if (records) records->resize(blocks.size());
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const BlockRef ref = make_ref(top, branch, i);
      BlockRecord* rec = records ? &(*records)[i] : nullptr;
      Tensor y = step(blocks[i], x, ref, rec);
      if (observer_ && *observer_) (*observer_)(ref, x, y);
      if (rec) {
        rec->input = std::move(x);
        rec->output = y;
      }
      x = std::move(y);
    }
    return x;
  }

 private:
  Tensor step(Block& block, const Tensor& x, const BlockRef& ref, BlockRecord* rec) {
    switch (block.kind()) {
      case BlockKind::Dense: return dense(block.as<Dense>(), x, ref);
      case BlockKind::Conv2D: return conv(block.as<Conv2D>(), x, ref);
      case BlockKind::BatchNorm: return batchnorm(block.as<BatchNorm>(), x, ref, rec);
      case BlockKind::ReLU: {
        Tensor y = x;
        for (double& v : y.values) v = v > 0.0 ? v : 0.0;
        return y;
      }
      case BlockKind::AvgPool: return avgpool(block.as<AvgPool>(), x, ref);
      case BlockKind::Flatten: {
        if (x.rank() < 2) fail(ErrorKind::Shape, to_string(ref) + ": flatten needs a batch tensor");
        Tensor y = x;
        y.shape = {x.dim(0), x.size() / std::max<std::size_t>(x.dim(0), 1)};
        if (x.dim(0) == 0) y.shape = {0, element_count(Shape(x.shape.begin() + 1, x.shape.end()))};
        return y;
      }
      case BlockKind::Residual: {
        auto& r = block.as<Residual>();
        if (ref.branch != Branch::None) fail(ErrorKind::Topology, to_string(ref) + ": nested residual");
        Tensor main = run(r.main, x, ref.top, Branch::Main, rec ? &rec->main : nullptr);
        Tensor shortcut = r.shortcut.empty() ? x : run(r.shortcut, x, ref.top, Branch::Shortcut, rec ? &rec->shortcut : nullptr);
        if (main.shape != shortcut.shape) {
          fail(ErrorKind::Shape, to_string(ref) + ": residual branch shapes " + shape_string(main.shape) + " vs " +
                                     shape_string(shortcut.shape));
        }
        for (std::size_t i = 0; i < main.size(); ++i) main[i] += shortcut[i];
        return main;
      }
    }
    fail(ErrorKind::Topology, to_string(ref) + ": unknown block");
  }

  static Tensor dense(const Dense& d, const Tensor& x, const BlockRef& ref) {
    if (x.rank() != 2 || x.dim(1) != d.in_features()) {
      fail(ErrorKind::Shape, to_string(ref) + ": dense expects [B x " + std::to_string(d.in_features()) + "], got " +
                                 shape_string(x.shape));
    }
    Tensor y({x.dim(0), d.out_features()});
    kernels::dense_forward(x.data(), d.weight.data(), d.bias.data(), y.data(), x.dim(0), d.in_features(),
                           d.out_features());
    return y;
  }

  static Tensor conv(const Conv2D& c, const Tensor& x, const BlockRef& ref) {
    if (x.rank() != 4 || x.dim(1) != c.in_channels() || x.dim(2) + 2 * c.padding < c.weight.dim(2) ||
        x.dim(3) + 2 * c.padding < c.weight.dim(3)) {
      fail(ErrorKind::Shape, to_string(ref) + ": conv expects [B x " + std::to_string(c.in_channels()) +
                                 " x H x W], got " + shape_string(x.shape));
    }
    const auto g = geometry(c, x);
    Tensor y({g.batch, g.out_channels, g.out_h(), g.out_w()});
    kernels::conv2d_forward(x.data(), c.weight.data(), c.bias.data(), y.data(), g);
    return y;
  }

  Tensor batchnorm(BatchNorm& bn, const Tensor& x, const BlockRef& ref, BlockRecord* rec) {
    if ((x.rank() != 2 && x.rank() != 4) || x.dim(1) != bn.channels()) {
      fail(ErrorKind::Shape, to_string(ref) + ": batchnorm over " + std::to_string(bn.channels()) +
                                 " channels given " + shape_string(x.shape));
    }
    const Layout l = layout_of(x);
    std::vector<double> mean(l.channels), inv_std(l.channels);
    if (mode_ == BnMode::Inference) {
      for (std::size_t c = 0; c < l.channels; ++c) {
        mean[c] = bn.running_mean[c];
        inv_std[c] = 1.0 / std::sqrt(bn.running_var[c] + bn.epsilon);
      }
    } else {
      const ChannelStats s = channel_stats(x);
      const double n = static_cast<double>(l.batch * l.spatial);
      for (std::size_t c = 0; c < l.channels; ++c) {
        mean[c] = s.mean[c];
        if (mode_ == BnMode::Training) {
          inv_std[c] = 1.0 / std::sqrt(s.var[c] + bn.epsilon);
          const double unbiased = n > 1 ? s.var[c] * n / (n - 1) : s.var[c];
          bn.running_mean[c] = (1.0 - momentum_) * bn.running_mean[c] + momentum_ * s.mean[c];
          bn.running_var[c] = (1.0 - momentum_) * bn.running_var[c] + momentum_ * unbiased;
        } else {
          bn.running_mean[c] = s.mean[c];
          bn.running_var[c] = std::max(s.var[c], kMinRunningVar);
          inv_std[c] = 1.0 / std::sqrt(bn.running_var[c] + bn.epsilon);
        }
      }
    }
    Tensor y(x.shape);
    for (std::size_t b = 0; b < l.batch; ++b) {
      for (std::size_t c = 0; c < l.channels; ++c) {
        const std::size_t base = (b * l.channels + c) * l.spatial;
        const double scale = bn.gamma[c] * inv_std[c];
        for (std::size_t s = 0; s < l.spatial; ++s) {
          y[base + s] = (x[base + s] - mean[c]) * scale + bn.beta[c];
        }
      }
    }
    if (rec) {
      rec->batch_mean = std::move(mean);
      rec->inv_std = std::move(inv_std);
    }
    return y;
  }

  static Tensor avgpool(const AvgPool& p, const Tensor& x, const BlockRef& ref) {
    if (x.rank() != 4 || p.window == 0 || x.dim(2) < p.window || x.dim(3) < p.window) {
      fail(ErrorKind::Shape, to_string(ref) + ": avgpool on " + shape_string(x.shape));
    }
    const std::size_t w = p.window, oh = x.dim(2) / w, ow = x.dim(3) / w;
    Tensor y({x.dim(0), x.dim(1), oh, ow});
    const double inv = 1.0 / static_cast<double>(w * w);
    for (std::size_t bc = 0; bc < x.dim(0) * x.dim(1); ++bc) {
      const double* xi = x.data() + bc * x.dim(2) * x.dim(3);
      double* yo = y.data() + bc * oh * ow;
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double acc = 0.0;
          for (std::size_t ky = 0; ky < w; ++ky)
            for (std::size_t kx = 0; kx < w; ++kx) acc += xi[(oy * w + ky) * x.dim(3) + ox * w + kx];
          yo[oy * ow + ox] = acc * inv;
        }
    }
    return y;
  }

  BnMode mode_;
  double momentum_;
  const BlockObserver* observer_;
};

void check_input(const Network& net, const Tensor& batch) {
  if (batch.rank() != net.input_shape.size() + 1 ||
      !std::equal(net.input_shape.begin(), net.input_shape.end(), batch.shape.begin() + 1)) {
    fail(ErrorKind::Shape, "input batch " + shape_string(batch.shape) + " does not match network input " +
                               shape_string(net.input_shape));
  }
}

// ---------------------------------------------------------------------------

class Backprop {
 public:
  Backprop(BnMode mode, const BnInputHook* hook) : mode_(mode), hook_(hook) {}

  Tensor run(const std::vector<Block>& blocks, const std::vector<BlockRecord>& recs, Tensor dy,
             std::vector<Block>* grads, std::size_t top, Branch branch) {
    for (std::size_t ii = blocks.size(); ii-- > 0;) {
      const BlockRef ref = make_ref(top, branch, ii);
      Block* g = grads ? &(*grads)[ii] : nullptr;
      dy = step(blocks[ii], recs[ii], dy, g, ref);
    }
    return dy;
  }

 private:
  Tensor step(const Block& block, const BlockRecord& rec, const Tensor& dy, Block* g, const BlockRef& ref) {
    const Tensor& x = rec.input;
    switch (block.kind()) {
      case BlockKind::Dense: {
        const auto& d = block.as<Dense>();
        Tensor dx(x.shape);
        kernels::dense_backward_input(dy.data(), d.weight.data(), dx.data(), x.dim(0), d.in_features(),
                                      d.out_features());
        if (g) {
          auto& gd = g->as<Dense>();
          kernels::dense_backward_weight(dy.data(), x.data(), gd.weight.data(), gd.bias.data(), x.dim(0),
                                         d.in_features(), d.out_features());
        }
        return dx;
      }
      case BlockKind::Conv2D: {
        const auto& c = block.as<Conv2D>();
        const auto geo = geometry(c, x);
        Tensor dx(x.shape);
        kernels::conv2d_backward_input(dy.data(), c.weight.data(), dx.data(), geo);
        if (g) {
          auto& gc = g->as<Conv2D>();
          kernels::conv2d_backward_weight(dy.data(), x.data(), gc.weight.data(), gc.bias.data(), geo);
        }
        return dx;
      }
      case BlockKind::BatchNorm: return batchnorm(block.as<BatchNorm>(), rec, dy, g, ref);
      case BlockKind::ReLU: {
        Tensor dx = dy;
        for (std::size_t i = 0; i < dx.size(); ++i) {
          if (!(x[i] > 0.0)) dx[i] = 0.0;
        }
        return dx;
      }
      case BlockKind::AvgPool: {
        const std::size_t w = block.as<AvgPool>().window;
        const std::size_t oh = dy.dim(2), ow = dy.dim(3);
        Tensor dx(x.shape);
        const double inv = 1.0 / static_cast<double>(w * w);
        for (std::size_t bc = 0; bc < x.dim(0) * x.dim(1); ++bc) {
          double* di = dx.data() + bc * x.dim(2) * x.dim(3);
          const double* go = dy.data() + bc * oh * ow;
          for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox)
              for (std::size_t ky = 0; ky < w; ++ky)
                for (std::size_t kx = 0; kx < w; ++kx) di[(oy * w + ky) * x.dim(3) + ox * w + kx] = go[oy * ow + ox] * inv;
        }
        return dx;
      }
      case BlockKind::Flatten: {
        Tensor dx = dy;
        dx.shape = x.shape;
        return dx;
      }
      case BlockKind::Residual: {
        const auto& r = block.as<Residual>();
        auto* gr = g ? &g->as<Residual>() : nullptr;
        Tensor dmain = run(r.main, rec.main, dy, gr ? &gr->main : nullptr, ref.top, Branch::Main);
        if (r.shortcut.empty()) {
          for (std::size_t i = 0; i < dmain.size(); ++i) dmain[i] += dy[i];
        } else {
          Tensor dshort = run(r.shortcut, rec.shortcut, dy, gr ? &gr->shortcut : nullptr, ref.top, Branch::Shortcut);
          for (std::size_t i = 0; i < dmain.size(); ++i) dmain[i] += dshort[i];
        }
        return dmain;
      }
    }
    fail(ErrorKind::Topology, to_string(ref) + ": unknown block");
  }

  Tensor batchnorm(const BatchNorm& bn, const BlockRecord& rec, const Tensor& dy, Block* g, const BlockRef& ref) {
    const Tensor& x = rec.input;
    const Layout l = layout_of(x);
    Tensor dx(x.shape);
    const double n = static_cast<double>(l.batch * l.spatial);
    for (std::size_t c = 0; c < l.channels; ++c) {
      const double mean = rec.batch_mean[c];
      const double inv_std = rec.inv_std[c];
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t b = 0; b < l.batch; ++b) {
        const std::size_t base = (b * l.channels + c) * l.spatial;
        for (std::size_t s = 0; s < l.spatial; ++s) {
          const double xhat = (x[base + s] - mean) * inv_std;
          sum_dy += dy[base + s];
          sum_dy_xhat += dy[base + s] * xhat;
        }
      }
      if (g) {
        auto& gb = g->as<BatchNorm>();
        gb.gamma[c] += sum_dy_xhat;
        gb.beta[c] += sum_dy;
      }
      const double gamma = bn.gamma[c];
      for (std::size_t b = 0; b < l.batch; ++b) {
        const std::size_t base = (b * l.channels + c) * l.spatial;
        for (std::size_t s = 0; s < l.spatial; ++s) {
          if (mode_ == BnMode::Training) {
            const double xhat = (x[base + s] - mean) * inv_std;
            dx[base + s] = gamma * inv_std / n * (n * dy[base + s] - sum_dy - xhat * sum_dy_xhat);
          } else {
            dx[base + s] = dy[base + s] * gamma * inv_std;
          }
        }
      }
    }
    if (hook_ && *hook_) (*hook_)(ref, bn, x, dx);
    return dx;
  }

  BnMode mode_;
  const BnInputHook* hook_;
};

}  // namespace

// ---------------------------------------------------------------------------

Tensor forward(const Network& net, const Tensor& batch) { return forward_observed(net, batch, {}); }

Tensor forward_observed(const Network& net, const Tensor& batch, const BlockObserver& observer) {
  check_input(net, batch);
  Executor ex(BnMode::Inference, 0.0, &observer);
  // Inference mode never writes to the network.
  auto& blocks = const_cast<std::vector<Block>&>(net.blocks);
  return ex.run(blocks, batch, 0, Branch::None, nullptr);
}

Tensor forward_recorded(Network& net, const Tensor& batch, BnMode mode, Tape& tape, double bn_momentum) {
  check_input(net, batch);
  tape.mode = mode;
  tape.records.clear();
  Executor ex(mode, bn_momentum, nullptr);
  return ex.run(net.blocks, batch, 0, Branch::None, &tape.records);
}

Tensor forward_recorded(const Network& net, const Tensor& batch, Tape& tape) {
  return forward_recorded(const_cast<Network&>(net), batch, BnMode::Inference, tape);
}

Tensor backward(const Network& net, const Tape& tape, const Tensor& grad_output, Network* grads,
                const BnInputHook& bn_hook) {
  if (tape.records.size() != net.blocks.size()) fail(ErrorKind::Value, "tape does not belong to this network");
  if (tape.mode == BnMode::Recalibrate) fail(ErrorKind::Value, "cannot backpropagate through recalibration");
  Backprop bp(tape.mode, &bn_hook);
  return bp.run(net.blocks, tape.records, grad_output, grads ? &grads->blocks : nullptr, 0, Branch::None);
}

ChannelStats channel_stats(const Tensor& a) {
  const Layout l = layout_of(a);
  ChannelStats s;
  s.mean.assign(l.channels, 0.0);
  s.var.assign(l.channels, 0.0);
  const double n = static_cast<double>(l.batch * l.spatial);
  if (n == 0) return s;
  for (std::size_t b = 0; b < l.batch; ++b)
    for (std::size_t c = 0; c < l.channels; ++c) {
      const std::size_t base = (b * l.channels + c) * l.spatial;
      for (std::size_t k = 0; k < l.spatial; ++k) s.mean[c] += a[base + k];
    }
  for (auto& m : s.mean) m /= n;
  for (std::size_t b = 0; b < l.batch; ++b)
    for (std::size_t c = 0; c < l.channels; ++c) {
      const std::size_t base = (b * l.channels + c) * l.spatial;
      for (std::size_t k = 0; k < l.spatial; ++k) {
        const double d = a[base + k] - s.mean[c];
        s.var[c] += d * d;
      }
    }
  for (auto& v : s.var) v /= n;
  return s;
}

std::vector<std::size_t> activation_sites(const Network& net, SitePosition position) {
  std::vector<std::size_t> sites;
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    if (!net.blocks[i].is<ReLU>()) continue;
    if (position == SitePosition::PostActivation) {
      sites.push_back(i);
    } else if (i > 0) {
      sites.push_back(i - 1);
    }
  }
  return sites;
}

ForwardTrace forward_trace(const Network& net, const Tensor& batch, std::span<const std::size_t> sites,
                           bool keep_activations) {
  for (std::size_t s : sites) {
    if (s >= net.blocks.size()) fail(ErrorKind::Value, "unknown trace site " + std::to_string(s));
  }
  ForwardTrace trace;
  std::vector<std::optional<Tensor>> captured(net.blocks.size());
  std::vector<bool> wanted(net.blocks.size(), false);
  for (std::size_t s : sites) wanted[s] = true;
  trace.logits = forward_observed(net, batch, [&](const BlockRef& ref, const Tensor&, const Tensor& out) {
    if (ref.branch == Branch::None && wanted[ref.top]) captured[ref.top] = out;
  });
  for (std::size_t s : sites) {
    SiteTrace st;
    st.site = s;
    st.stats = channel_stats(*captured[s]);
    if (keep_activations) st.activations = captured[s];
    trace.sites.push_back(std::move(st));
  }
  return trace;
}

// ---------------------------------------------------------------------------

double cross_entropy(const Tensor& logits, std::span<const std::size_t> targets, Tensor* grad) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    fail(ErrorKind::Shape, "cross_entropy: logits " + shape_string(logits.shape) + " vs " +
                               std::to_string(targets.size()) + " targets");
  }
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (grad) *grad = Tensor(logits.shape);
  double loss = 0.0;
  const double inv_b = batch ? 1.0 / static_cast<double>(batch) : 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    if (targets[b] >= classes) fail(ErrorKind::Value, "cross_entropy: target out of range");
    const double* row = logits.data() + b * classes;
    const double mx = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    const double log_z = mx + std::log(z);
    loss += log_z - row[targets[b]];
    if (grad) {
      for (std::size_t c = 0; c < classes; ++c) {
        (*grad)[b * classes + c] = (std::exp(row[c] - log_z) - (c == targets[b] ? 1.0 : 0.0)) * inv_b;
      }
    }
  }
  return loss * inv_b;
}

double total_variation(const Tensor& x, Tensor* grad, double weight) {
  double tv = 0.0;
  auto add = [&](std::size_t i, std::size_t j) {
    const double d = x[j] - x[i];
    tv += d * d;
    if (grad) {
      (*grad)[j] += weight * 2.0 * d;
      (*grad)[i] -= weight * 2.0 * d;
    }
  };
  if (x.rank() == 2) {
    const std::size_t f = x.dim(1);
    for (std::size_t b = 0; b < x.dim(0); ++b)
      for (std::size_t i = 0; i + 1 < f; ++i) add(b * f + i, b * f + i + 1);
  } else if (x.rank() == 4) {
    const std::size_t h = x.dim(2), w = x.dim(3);
    for (std::size_t bc = 0; bc < x.dim(0) * x.dim(1); ++bc) {
      const std::size_t base = bc * h * w;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) {
          if (xx + 1 < w) add(base + y * w + xx, base + y * w + xx + 1);
          if (y + 1 < h) add(base + y * w + xx, base + (y + 1) * w + xx);
        }
    }
  } else if (x.rank() != 1) {
    fail(ErrorKind::Shape, "total_variation: unsupported rank " + std::to_string(x.rank()));
  }
  return tv;
}

std::vector<BlockRef> batchnorm_refs(const Network& net) {
  std::vector<BlockRef> refs;
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    const Block& b = net.blocks[i];
    if (b.is<BatchNorm>()) refs.push_back({i, Branch::None, 0});
    if (b.is<Residual>()) {
      const auto& r = b.as<Residual>();
      for (std::size_t j = 0; j < r.main.size(); ++j)
        if (r.main[j].is<BatchNorm>()) refs.push_back({i, Branch::Main, j});
      for (std::size_t j = 0; j < r.shortcut.size(); ++j)
        if (r.shortcut[j].is<BatchNorm>()) refs.push_back({i, Branch::Shortcut, j});
    }
  }
  return refs;
}

InputGradient input_gradient(const Network& net, const Tensor& batch, const LossSpec& spec) {
  if (spec.bn_weight > 0.0 && batchnorm_refs(net).empty()) {
    fail(ErrorKind::Value, "loss spec has batch-norm statistic terms but the network has no BatchNorm blocks");
  }
  if (!spec.targets.empty() && spec.targets.size() != batch.dim(0)) {
    fail(ErrorKind::Value, "loss spec target count does not match the batch");
  }
  InputGradient out;
  Tape tape;
  const Tensor logits = forward_recorded(net, batch, tape);

  Tensor grad_logits(logits.shape);
  if (!spec.targets.empty() && spec.ce_weight != 0.0) {
    out.loss.ce = cross_entropy(logits, spec.targets, &grad_logits);
    for (double& g : grad_logits.values) g *= spec.ce_weight;
  }

  double bn_loss = 0.0;
  BnInputHook hook;
  if (spec.bn_weight != 0.0) {
    hook = [&](const BlockRef&, const BatchNorm& bn, const Tensor& input, Tensor& grad_input) {
      const ChannelStats s = channel_stats(input);
      const Layout l = layout_of(input);
      const double n = static_cast<double>(l.batch * l.spatial);
      for (std::size_t c = 0; c < l.channels; ++c) {
        const double dm = s.mean[c] - bn.running_mean[c];
        const double dv = s.var[c] - bn.running_var[c];
        bn_loss += dm * dm + dv * dv;
        // d/da (mu - m)^2 = 2 (mu - m) / n ; d/da (v - V)^2 = 2 (v - V) * 2 (a - mu) / n
        for (std::size_t b = 0; b < l.batch; ++b) {
          const std::size_t base = (b * l.channels + c) * l.spatial;
          for (std::size_t k = 0; k < l.spatial; ++k) {
            const double centered = input[base + k] - s.mean[c];
            grad_input[base + k] += spec.bn_weight * (2.0 * dm / n + 4.0 * dv * centered / n);
          }
        }
      }
    };
  }
  out.gradient = backward(net, tape, grad_logits, nullptr, hook);
  out.loss.bn = bn_loss;

  if (spec.l2_weight != 0.0) {
    for (std::size_t i = 0; i < batch.size(); ++i) {
      out.loss.l2 += batch[i] * batch[i];
      out.gradient[i] += spec.l2_weight * 2.0 * batch[i];
    }
  }
  if (spec.tv_weight != 0.0) {
    out.loss.tv = total_variation(batch, &out.gradient, spec.tv_weight);
  }
  out.loss.total = spec.ce_weight * out.loss.ce + spec.bn_weight * out.loss.bn + spec.l2_weight * out.loss.l2 +
                   spec.tv_weight * out.loss.tv;
  return out;
}

// ---------------------------------------------------------------------------

Tensor concat_batches(std::span<const Tensor> batches) {
  if (batches.empty()) fail(ErrorKind::Value, "no batches to concatenate");
  Shape per(batches.front().shape.begin() + 1, batches.front().shape.end());
  std::size_t total = 0;
  for (const auto& b : batches) {
    if (b.rank() != per.size() + 1 || !std::equal(per.begin(), per.end(), b.shape.begin() + 1)) {
      fail(ErrorKind::Shape, "batches disagree on sample shape");
    }
    total += b.dim(0);
  }
  Tensor out(with_batch(total, per));
  std::size_t off = 0;
  for (const auto& b : batches) {
    std::copy(b.values.begin(), b.values.end(), out.values.begin() + static_cast<std::ptrdiff_t>(off));
    off += b.size();
  }
  return out;
}

Tensor slice_batch(const Tensor& batch, std::size_t begin, std::size_t end) {
  if (begin > end || end > batch.dim(0)) fail(ErrorKind::Value, "slice_batch: bad range");
  Shape per(batch.shape.begin() + 1, batch.shape.end());
  const std::size_t stride = element_count(per);
  Tensor out(with_batch(end - begin, per));
  std::copy(batch.values.begin() + static_cast<std::ptrdiff_t>(begin * stride),
            batch.values.begin() + static_cast<std::ptrdiff_t>(end * stride), out.values.begin());
  return out;
}

Network bn_recalibrate(const Network& net, std::span<const Tensor> batches) {
  if (batches.empty()) fail(ErrorKind::Value, "bn_recalibrate needs at least one batch");
  Network out = net;
  const Tensor all = concat_batches(batches);
  if (all.dim(0) == 0) fail(ErrorKind::Value, "bn_recalibrate given only empty batches");
  check_input(out, all);
  // One pass over the concatenated data: each BN sets its statistics from its
  // input and then normalizes with them, so downstream layers see the
  // recalibrated upstream network.
  Executor ex(BnMode::Recalibrate, 0.0, nullptr);
  ex.run(out.blocks, all, 0, Branch::None, nullptr);
  return out;
}

}  // namespace foldkit
