// SPDX-License-Identifier: Apache-2.0
//
// Forward evaluation, activation tracing, reverse-mode gradients and batch-norm
// recalibration for foldkit networks.
#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "foldkit/network.hpp"

namespace foldkit {

enum class BnMode {
  Inference,    // normalize with stored running statistics
  Training,     // normalize with batch statistics, update running stats by EMA
  Recalibrate,  // replace running stats by the input's empirical moments, then normalize with them
};

/// Called after each executed block with its input and output batch tensors.
using BlockObserver = std::function<void(const BlockRef&, const Tensor& input, const Tensor& output)>;

/// Per-sample output logits [batch x class_count]. BatchNorm uses running
/// statistics. The batch tensor is [batch, input_shape...].
Tensor forward(const Network& net, const Tensor& batch);
Tensor forward_observed(const Network& net, const Tensor& batch, const BlockObserver& observer);

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> var;  // population variance (divide by count)
};

/// Mean and variance per channel of a [B, C] or [B, C, H, W] tensor, over the
/// batch and spatial positions. Two-pass.
ChannelStats channel_stats(const Tensor& activations);

/// Which top-level block outputs count as "activations" when a caller does not
/// pick sites explicitly.
enum class SitePosition { PostActivation, PreActivation };

/// Top-level block indices of activation sites: ReLU blocks for
/// PostActivation, the block feeding each ReLU for PreActivation.
std::vector<std::size_t> activation_sites(const Network& net,
                                          SitePosition position = SitePosition::PostActivation);

struct SiteTrace {
  std::size_t site = 0;  // top-level block index
  ChannelStats stats;
  std::optional<Tensor> activations;
};

struct ForwardTrace {
  std::vector<SiteTrace> sites;
  Tensor logits;
};

ForwardTrace forward_trace(const Network& net, const Tensor& batch, std::span<const std::size_t> sites,
                           bool keep_activations = false);

// ---------------------------------------------------------------------------
// Reverse mode.

/// Saved forward state for one block list.
struct BlockRecord {
  Tensor input;
  Tensor output;
  std::vector<double> batch_mean;  // BatchNorm in Training mode
  std::vector<double> inv_std;     // BatchNorm (both modes)
  std::vector<BlockRecord> main;
  std::vector<BlockRecord> shortcut;
};

struct Tape {
  BnMode mode = BnMode::Inference;
  std::vector<BlockRecord> records;
};

/// Forward pass that records everything backward() needs. Training and
/// Recalibrate modes write running statistics into `net`.
Tensor forward_recorded(Network& net, const Tensor& batch, BnMode mode, Tape& tape, double bn_momentum = 0.1);
Tensor forward_recorded(const Network& net, const Tensor& batch, Tape& tape);

/// Extra gradient contributed at a BatchNorm input (used by the BN statistics
/// matching loss). Receives the BN input and adds into `grad_input`.
using BnInputHook = std::function<void(const BlockRef&, const BatchNorm&, const Tensor& input, Tensor& grad_input)>;

/// Propagates dL/d(output) back to dL/d(input). When `grads` is non-null it
/// must be zeros_like(net) (or an accumulating buffer of that structure) and
/// receives parameter gradients.
Tensor backward(const Network& net, const Tape& tape, const Tensor& grad_output, Network* grads = nullptr,
                const BnInputHook& bn_hook = {});

// ---------------------------------------------------------------------------
// Input-gradient losses.

struct LossSpec {
  std::vector<std::size_t> targets;  // cross-entropy targets, one per sample; empty disables CE
  double ce_weight = 1.0;
  double bn_weight = 0.0;  // sum over BN layers of ||mu_hat - mu||^2 + ||var_hat - var||^2
  double l2_weight = 0.0;  // sum of squares of the input
  double tv_weight = 0.0;  // sum of squared neighbour differences of the input
};

struct LossBreakdown {
  double total = 0.0;
  double ce = 0.0;
  double bn = 0.0;
  double l2 = 0.0;
  double tv = 0.0;
};

struct InputGradient {
  LossBreakdown loss;
  Tensor gradient;  // same shape as the input batch
};

/// Loss value and its gradient with respect to the input batch only. The
/// network is evaluated in inference mode and never modified.
InputGradient input_gradient(const Network& net, const Tensor& batch, const LossSpec& spec);

/// Mean softmax cross-entropy and its gradient w.r.t. logits.
double cross_entropy(const Tensor& logits, std::span<const std::size_t> targets, Tensor* grad_logits);

/// Squared-difference total variation over spatial axes ([B,C,H,W]) or the
/// feature axis ([B,F]); optionally adds its gradient into `grad`.
double total_variation(const Tensor& x, Tensor* grad, double weight = 1.0);

// ---------------------------------------------------------------------------

/// Running statistics floor applied by recalibration.
inline constexpr double kMinRunningVar = 1e-8;

/// Copy of `net` whose BatchNorm running statistics are the empirical moments
/// of their inputs over all `batches`, processed front to back so each layer
/// sees already-recalibrated upstream layers.
Network bn_recalibrate(const Network& net, std::span<const Tensor> batches);

/// Concatenate batches along the first axis.
Tensor concat_batches(std::span<const Tensor> batches);

/// Rows [begin, end) of a batch tensor.
Tensor slice_batch(const Tensor& batch, std::size_t begin, std::size_t end);

/// All BatchNorm blocks in forward order.
std::vector<BlockRef> batchnorm_refs(const Network& net);

}  // namespace foldkit
