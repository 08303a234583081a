// SPDX-License-Identifier: Apache-2.0
//
// Synthetic data, the toy architecture catalog, SGD training, evaluation,
// variance-ratio probes and sparsity sweeps.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "foldkit/baselines.hpp"
#include "foldkit/dataset.hpp"
#include "foldkit/folding.hpp"
#include "foldkit/repair.hpp"
#include "json.hpp"

namespace foldkit {

struct SyntheticSpec {
  std::size_t classes = 8;
  std::size_t dim = 16;
  double separation = 4.0;
  std::uint64_t seed = 0;
};

/// Gaussian blobs: class c is centered at separation * u_c (u_c a random unit
/// vector drawn from `spec.seed`) with unit isotropic noise. `stream` selects
/// an independent sample stream for the same centers.
Dataset make_synthetic_dataset(const SyntheticSpec& spec, std::size_t count, std::uint64_t stream,
                               const std::string& split = {});

struct SyntheticSplits {
  Dataset train, test, calibration;
};

SyntheticSplits make_synthetic_splits(const SyntheticSpec& spec, std::size_t train = 4096, std::size_t test = 1024,
                                      std::size_t calibration = 512);

/// Same samples with every feature vector reshaped to `shape`.
Dataset reshape_samples(const Dataset& data, const Shape& shape);

enum class Architecture { MlpBn, ConvBn, Residual };
const char* to_string(Architecture a);
Architecture parse_architecture(const std::string& text);

struct ArchitectureSpec {
  Architecture kind = Architecture::MlpBn;
  std::size_t width = 128;
};

/// Input shape the architecture expects for `dim` features: conv nets view
/// them as a 1 x s x s image.
Shape architecture_input(const ArchitectureSpec& spec, std::size_t dim);

/// He-initialized network from the catalog.
Network make_network(const ArchitectureSpec& spec, const Shape& input_shape, std::size_t classes, std::uint64_t seed);

enum class DecayKind { None, L1, L2 };

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double learning_rate = 0.05;
  double momentum = 0.9;
  DecayKind decay = DecayKind::None;
  double decay_lambda = 0.0;
  double bn_momentum = 0.1;
  std::uint64_t seed = 0;
};

void validate(const TrainConfig& config);

/// Minibatch SGD with momentum on mean cross-entropy. BatchNorm runs in
/// training mode and keeps exponential running statistics.
Network train(const Network& init, const Dataset& data, const TrainConfig& config);

/// Argmax predictions (ties to the lower class).
std::vector<std::size_t> predict(const Network& net, const Tensor& features);
double evaluate(const Network& net, const Dataset& data);

/// What a compressed network's channels are made of.
struct Compression {
  Network network;
  std::vector<FoldableGroup> groups;  // groups of the original network
  ChannelSources sources;
};

Compression compression_of(const FoldResult& folded);
Compression compression_of(const PruneResult& pruned);
Compression identity_compression(const Network& net);

/// Group whose axis is live at the output of top-level block `site`, if any.
std::optional<std::size_t> site_group(const Network& net, const std::vector<FoldableGroup>& groups, std::size_t site);

struct VarianceReport {
  std::vector<std::size_t> sites;
  std::vector<double> ratio;          // per site
  std::vector<std::size_t> excluded;  // channels skipped for zero original variance
  double last = 1.0;                  // ratio at the last site
  double mean_abs_dev = 0.0;          // mean over sites of |1 - ratio|
};

/// Mean over compressed channels of Var(compressed) / cluster-mean Var(original).
VarianceReport variance_ratio(const Network& original, const Compression& compressed, const Tensor& probe,
                              const std::vector<std::size_t>& sites);

enum class Method { FoldNaive, FoldAR, FoldDIR, FoldR, PruneL1, PruneL2 };
const char* to_string(Method m);
Method parse_method(const std::string& text);
const std::vector<Method>& all_methods();

struct MethodContext {
  const Dataset* calibration = nullptr;     // Fold-R
  const Tensor* synthetic = nullptr;        // Fold-DIR; synthesized on demand when null
  DIConfig di;
  KMeansOptions kmeans;
};

struct MethodOutcome {
  Compression compression;
  double total_cost = 0.0;
  FoldReport report;
};

/// Apply one compression method at a uniform sparsity.
MethodOutcome run_method(const Network& base, Method method, double sparsity, std::uint64_t seed,
                         const MethodContext& context);

struct SweepRow {
  std::string method;
  double sparsity = 0.0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double var_ratio_last = 1.0;
  double var_ratio_mean_abs_dev = 0.0;
  double total_cost = 0.0;
};

struct SweepConfig {
  std::vector<double> sparsities{0.3, 0.5, 0.7};
  std::vector<Method> methods = all_methods();
  std::vector<std::uint64_t> seeds{0};
  DIConfig di;
  KMeansOptions kmeans;
  std::size_t jobs = 1;
  std::size_t probe_size = 512;  // test samples used for variance ratios
};

nlohmann::ordered_json to_json(const SweepConfig& config);

inline constexpr const char* kSweepHeader =
    "method,sparsity,seed,accuracy,var_ratio_last,var_ratio_mean_abs_dev,total_J";

/// Full grid over methods x sparsities x seeds. Rows already in `done` are
/// kept as they are. Output order is methods, then sparsities, then seeds.
std::vector<SweepRow> sweep(const Network& base, const Dataset& test, const Dataset* calibration,
                            const SweepConfig& config, const std::vector<SweepRow>& done = {});

std::string format_sweep_csv(const std::vector<SweepRow>& rows);
std::vector<SweepRow> parse_sweep_csv(const std::string& text);

/// Markdown tables of mean accuracy and variance ratio per method and sparsity.
std::string render_sweep_report(const std::vector<SweepRow>& rows);

struct LayerCorrelation {
  std::size_t site = 0;
  std::vector<double> correlations;  // best distinct partner per channel
  std::vector<std::size_t> histogram;  // 20 bins over [-1, 1]
  double median = 0.0;
};

inline constexpr std::size_t kCorrelationBins = 20;

std::vector<LayerCorrelation> layer_correlation_report(const Network& net, const Tensor& probe);

/// Per-sample activations of one top-level block as [samples x channels]
/// (spatial positions become extra samples).
Matrix site_activations(const Network& net, const Tensor& probe, std::size_t site);

double median(std::vector<double> values);

}  // namespace foldkit
