// SPDX-License-Identifier: Apache-2.0
//
// foldkit: train, compress, evaluate and sweep toy networks.
//
// Settings resolve in three layers: built-in defaults, then command-line
// flags, then the --config JSON file (which wins). The resolved settings are
// written next to every output as <output>.config.json.
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "foldkit/baselines.hpp"
#include "foldkit/error.hpp"
#include "foldkit/folding.hpp"
#include "foldkit/harness.hpp"
#include "foldkit/io.hpp"
#include "foldkit/nn.hpp"
#include "foldkit/repair.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace foldkit;

namespace {

struct Flags {
  std::vector<std::string> model;
  std::string data, calib, repair, norm, out, report, config, mode, arch;
  std::vector<double> sparsity;
  std::vector<std::uint64_t> seed;
  std::vector<std::string> methods, inputs;
  std::size_t jobs = 1, width = 0, epochs = 0, batch_size = 0, steps = 0;
  double lr = 0.0;
};

std::uint64_t default_seed() {
  if (const char* env = std::getenv("FOLDKIT_SEED")) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    fail(ErrorKind::Value, std::string("FOLDKIT_SEED is not an unsigned integer: '") + env + "'");
  }
  return 0;
}

json di_json(const DIConfig& c) {
  return {{"batch_size", c.batch_size}, {"steps", c.steps},         {"learning_rate", c.learning_rate},
          {"momentum", c.momentum},     {"bn_weight", c.bn_weight}, {"l2_weight", c.l2_weight},
          {"tv_weight", c.tv_weight},   {"ce_weight", c.ce_weight}};
}

json defaults() {
  const TrainConfig tc;
  const SyntheticSpec syn;
  const KMeansOptions km;
  json j;
  j["model"] = json::array();
  j["data"] = "";
  j["calib"] = "";
  j["sparsity"] = json::array({0.5});
  j["repair"] = "ar";
  j["norm"] = "l1";
  j["seed"] = json::array({default_seed()});
  j["out"] = "";
  j["report"] = "";
  j["jobs"] = 1;
  j["mode"] = "paired";
  j["methods"] = json::array();
  for (auto m : all_methods()) j["methods"].push_back(to_string(m));
  j["inputs"] = json::array();
  j["architecture"] = {{"kind", "mlp-bn"}, {"width", 0}};  // 0: catalog width for the kind
  j["train"] = {{"epochs", tc.epochs},       {"batch_size", tc.batch_size}, {"learning_rate", tc.learning_rate},
                {"momentum", tc.momentum},   {"decay", "none"},             {"decay_lambda", tc.decay_lambda},
                {"bn_momentum", tc.bn_momentum}};
  j["synthetic"] = {{"classes", syn.classes},
                    {"dim", syn.dim},
                    {"separation", syn.separation},
                    {"train", 4096},
                    {"test", 1024},
                    {"calibration", 512}};
  j["deep_inversion"] = di_json(DIConfig{});
  j["kmeans"] = {{"restarts", km.restarts}, {"max_iters", km.max_iters}, {"tol", km.tol}};
  j["probe_size"] = 512;
  return j;
}

json flags_json(const CLI::App& sub, const Flags& f) {
  json j = json::object();
  auto given = [&](const char* name) {
    try {
      return sub.get_option(name)->count() > 0;
    } catch (const CLI::OptionNotFound&) {
      return false;
    }
  };
  if (given("--model")) j["model"] = f.model;
  if (given("--data")) j["data"] = f.data;
  if (given("--calib")) j["calib"] = f.calib;
  if (given("--sparsity")) j["sparsity"] = f.sparsity;
  if (given("--repair")) j["repair"] = f.repair;
  if (given("--norm")) j["norm"] = f.norm;
  if (given("--seed")) j["seed"] = f.seed;
  if (given("--out")) j["out"] = f.out;
  if (given("--report")) j["report"] = f.report;
  if (given("--jobs")) j["jobs"] = f.jobs;
  if (given("--mode")) j["mode"] = f.mode;
  if (given("--method")) j["methods"] = f.methods;
  if (given("inputs")) j["inputs"] = f.inputs;
  if (given("--arch")) j["architecture"]["kind"] = f.arch;
  if (given("--width")) j["architecture"]["width"] = f.width;
  if (given("--epochs")) j["train"]["epochs"] = f.epochs;
  if (given("--batch-size")) j["train"]["batch_size"] = f.batch_size;
  if (given("--lr")) j["train"]["learning_rate"] = f.lr;
  if (given("--steps")) j["deep_inversion"]["steps"] = f.steps;
  return j;
}

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, "config " + path + ": " + e.what());
  }
  if (!j.is_object()) fail(ErrorKind::Format, "config " + path + " must hold a JSON object");
  const json known = defaults();
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) fail(ErrorKind::Value, "config " + path + ": unknown key '" + key + "'");
  return j;
}

class Settings {
 public:
  explicit Settings(json j) : j_(std::move(j)) {}
  const json& raw() const { return j_; }

  template <class T>
  T get(const std::string& key) const {
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception&) {
      fail(ErrorKind::Value, "setting '" + key + "' is missing or has the wrong type");
    }
  }
  template <class T>
  T get(const std::string& section, const std::string& key) const {
    try {
      return j_.at(section).at(key).get<T>();
    } catch (const json::exception&) {
      fail(ErrorKind::Value, "setting '" + section + "." + key + "' is missing or has the wrong type");
    }
  }
  std::string require_path(const std::string& key, const char* flag) const {
    const auto p = get<std::string>(key);
    if (p.empty()) fail(ErrorKind::Value, std::string(flag) + " is required");
    return p;
  }
  std::string model() const {
    const auto m = get<std::vector<std::string>>("model");
    if (m.empty()) fail(ErrorKind::Value, "--model is required");
    if (m.size() > 1) fail(ErrorKind::Value, "this command takes one --model");
    return m.front();
  }
  std::uint64_t seed() const {
    const auto s = get<std::vector<std::uint64_t>>("seed");
    if (s.empty()) fail(ErrorKind::Value, "at least one seed is required");
    return s.front();
  }
  DIConfig di() const {
    DIConfig c;
    c.batch_size = get<std::size_t>("deep_inversion", "batch_size");
    c.steps = get<std::size_t>("deep_inversion", "steps");
    c.learning_rate = get<double>("deep_inversion", "learning_rate");
    c.momentum = get<double>("deep_inversion", "momentum");
    c.bn_weight = get<double>("deep_inversion", "bn_weight");
    c.l2_weight = get<double>("deep_inversion", "l2_weight");
    c.tv_weight = get<double>("deep_inversion", "tv_weight");
    c.ce_weight = get<double>("deep_inversion", "ce_weight");
    c.seed = seed();
    validate(c);
    return c;
  }
  KMeansOptions kmeans() const {
    KMeansOptions k;
    k.restarts = get<std::size_t>("kmeans", "restarts");
    k.max_iters = get<std::size_t>("kmeans", "max_iters");
    k.tol = get<double>("kmeans", "tol");
    return k;
  }

 private:
  json j_;
};

void write_resolved(const Settings& s, const std::string& output) {
  if (output.empty()) return;
  write_file_atomic(output + ".config.json", s.raw().dump(2) + "\n");
}

void write_json(const std::string& path, const json& j) {
  if (!path.empty()) write_file_atomic(path, j.dump(2) + "\n");
}

// Datasets are stored flat; conv models view each sample as an image.
Dataset fit_to(const Network& net, Dataset data) {
  if (data.sample_shape() == net.input_shape) return data;
  return reshape_samples(data, net.input_shape);
}

Dataset load_for(const Network& net, const std::string& path) { return fit_to(net, load_dataset(path)); }

FoldPlan plan_for(const Network& net, const Settings& s, Coupling coupling) {
  const auto sp = s.get<std::vector<double>>("sparsity");
  const auto groups = discover_groups(net);
  if (sp.size() != 1 && sp.size() != groups.size()) {
    fail(ErrorKind::Value, "give one --sparsity or one per foldable group (" + std::to_string(groups.size()) + ")");
  }
  FoldPlan plan;
  plan.coupling = coupling;
  plan.seed = s.seed();
  plan.kmeans = s.kmeans();
  for (std::size_t g = 0; g < groups.size(); ++g) plan.k.push_back(sparsity_to_k(groups[g].channels, sp.size() == 1 ? sp[0] : sp[g]));
  return plan;
}

int cmd_train(const Settings& s) {
  const std::string out = s.require_path("out", "--out");
  const std::uint64_t seed = s.seed();
  const ArchitectureSpec arch{parse_architecture(s.get<std::string>("architecture", "kind")),
                              s.get<std::size_t>("architecture", "width")};
  Dataset train_set;
  json written = json::object();
  if (const auto data = s.get<std::string>("data"); !data.empty()) {
    train_set = load_dataset(data);
  } else {
    SyntheticSpec spec;
    spec.classes = s.get<std::size_t>("synthetic", "classes");
    spec.dim = s.get<std::size_t>("synthetic", "dim");
    spec.separation = s.get<double>("synthetic", "separation");
    spec.seed = seed;
    const SyntheticSplits splits =
        make_synthetic_splits(spec, s.get<std::size_t>("synthetic", "train"), s.get<std::size_t>("synthetic", "test"),
                              s.get<std::size_t>("synthetic", "calibration"));
    const fs::path base = fs::path(out).replace_extension();
    for (const auto& [name, d] : {std::pair<std::string, const Dataset*>{"train", &splits.train},
                                  {"test", &splits.test},
                                  {"calibration", &splits.calibration}}) {
      const fs::path p = base.string() + "." + name + ".fdst";
      save_dataset(*d, p);
      written[name] = p.string();
    }
    train_set = splits.train;
  }
  TrainConfig tc;
  tc.epochs = s.get<std::size_t>("train", "epochs");
  tc.batch_size = s.get<std::size_t>("train", "batch_size");
  tc.learning_rate = s.get<double>("train", "learning_rate");
  tc.momentum = s.get<double>("train", "momentum");
  const auto decay = s.get<std::string>("train", "decay");
  if (decay == "none") tc.decay = DecayKind::None;
  else if (decay == "l1") tc.decay = DecayKind::L1;
  else if (decay == "l2") tc.decay = DecayKind::L2;
  else fail(ErrorKind::Value, "train.decay must be none, l1 or l2");
  tc.decay_lambda = s.get<double>("train", "decay_lambda");
  tc.bn_momentum = s.get<double>("train", "bn_momentum");
  tc.seed = seed;
  validate(tc);

  const Shape input = architecture_input(arch, train_set.features.size() / std::max<std::size_t>(train_set.size(), 1));
  train_set = reshape_samples(train_set, input);
  const Network net = train(make_network(arch, input, train_set.class_count, seed), train_set, tc);
  save_model(net, out);
  write_resolved(s, out);
  json rep{{"model", out}, {"train_accuracy", evaluate(net, train_set)}, {"datasets", written}};
  write_json(s.get<std::string>("report"), rep);
  std::cout << "train_accuracy=" << rep["train_accuracy"].get<double>() << "\n";
  return 0;
}

int cmd_fold(const Settings& s) {
  const Network net = load_model(s.model());
  const std::string out = s.require_path("out", "--out");
  const RepairMode mode = parse_repair_mode(s.get<std::string>("repair"));
  FoldResult r;
  switch (mode) {
    case RepairMode::Naive:
      r = fold_naive(net, plan_for(net, s, Coupling::BnAr));
      r.report.method = "fold-naive";
      break;
    case RepairMode::AR:
      r = apply_fold_ar(net, plan_for(net, s, Coupling::BnAr));
      break;
    case RepairMode::DIR:
      r = fold_dir(net, plan_for(net, s, Coupling::BnDir), s.di());
      break;
    case RepairMode::Data: {
      const Dataset calib = load_for(net, s.require_path("calib", "--calib"));
      r = fold_naive(net, plan_for(net, s, Coupling::BnAr));
      r.network = data_repair(net, r, std::span<const Tensor>(&calib.features, 1));
      r.report.method = "fold-r";
      break;
    }
  }
  save_model(r.network, out);
  write_resolved(s, out);
  json rep = to_json(r.report);
  rep["parameters_before"] = parameter_count(net);
  rep["parameters_after"] = parameter_count(r.network);
  write_json(s.get<std::string>("report"), rep);
  return 0;
}

int cmd_prune(const Settings& s) {
  const Network net = load_model(s.model());
  const std::string out = s.require_path("out", "--out");
  const PruneResult p = magnitude_prune(net, PruneSpec{s.get<std::vector<double>>("sparsity"),
                                                       parse_norm_kind(s.get<std::string>("norm"))});
  save_model(p.network, out);
  write_resolved(s, out);
  json kept = json::array();
  for (const auto& k : p.kept) kept.push_back(k);
  write_json(s.get<std::string>("report"), json{{"method", std::string("prune-") + s.get<std::string>("norm")},
                                                {"kept", kept},
                                                {"parameters_before", parameter_count(net)},
                                                {"parameters_after", parameter_count(p.network)}});
  return 0;
}

int cmd_eval(const Settings& s) {
  const Network net = load_model(s.model());
  const Dataset data = load_for(net, s.require_path("data", "--data"));
  const double acc = evaluate(net, data);
  char line[64];
  std::snprintf(line, sizeof line, "accuracy=%.10g\n", acc);
  std::cout << line;
  write_json(s.get<std::string>("report"), json{{"accuracy", acc}, {"samples", data.size()}});
  return 0;
}

int cmd_sweep(const Settings& s) {
  const Network net = load_model(s.model());
  const Dataset test = load_for(net, s.require_path("data", "--data"));
  std::optional<Dataset> calib;
  if (const auto c = s.get<std::string>("calib"); !c.empty()) calib = load_for(net, c);
  const std::string out = s.require_path("out", "--out");

  SweepConfig cfg;
  cfg.sparsities = s.get<std::vector<double>>("sparsity");
  cfg.methods.clear();
  for (const auto& m : s.get<std::vector<std::string>>("methods")) cfg.methods.push_back(parse_method(m));
  cfg.seeds = s.get<std::vector<std::uint64_t>>("seed");
  cfg.di = s.di();
  cfg.kmeans = s.kmeans();
  cfg.jobs = s.get<std::size_t>("jobs");
  cfg.probe_size = s.get<std::size_t>("probe_size");
  for (auto m : cfg.methods)
    if (m == Method::FoldR && !calib) fail(ErrorKind::Value, "fold-r in a sweep needs --calib");

  std::vector<SweepRow> done;
  if (fs::exists(out)) done = parse_sweep_csv(read_file(out));
  const auto rows = sweep(net, test, calib ? &*calib : nullptr, cfg, done);
  write_file_atomic(out, format_sweep_csv(rows));
  write_resolved(s, out);
  json side;
  side["config"] = to_json(cfg);
  side["model"] = s.model();
  side["data"] = s.get<std::string>("data");
  side["base_accuracy"] = evaluate(net, test);
  side["rows"] = rows.size();
  side["resumed_rows"] = done.size();
  write_json(out + ".json", side);
  write_json(s.get<std::string>("report"), side);
  return 0;
}

int cmd_merge(const Settings& s) {
  const auto models = s.get<std::vector<std::string>>("model");
  if (models.size() != 2) fail(ErrorKind::Value, "merge needs --model twice");
  const std::string out = s.require_path("out", "--out");
  const std::string mode = s.get<std::string>("mode");
  if (mode != "free" && mode != "paired") fail(ErrorKind::Value, "--mode must be free or paired");
  const Network a = load_model(models[0]), b = load_model(models[1]);
  MergeResult m = merge_networks(a, b, mode == "free" ? MergeMode::Free : MergeMode::Paired, s.seed());
  if (const auto c = s.get<std::string>("calib"); !c.empty() && !batchnorm_refs(m.network).empty()) {
    const Dataset calib = load_for(m.network, c);
    m.network = bn_recalibrate(m.network, std::span<const Tensor>(&calib.features, 1));
    m.report.extra["recalibrated_on"] = c;
  }
  save_model(m.network, out);
  write_resolved(s, out);
  json rep = to_json(m.report);
  rep["pairings"] = m.pairings;
  write_json(s.get<std::string>("report"), rep);
  return 0;
}

int cmd_di(const Settings& s) {
  const Network net = load_model(s.model());
  const std::string out = s.require_path("out", "--out");
  const DIResult r = deep_inversion(net, s.di());
  Dataset d;
  d.features = r.batch;
  d.labels = r.targets;
  d.class_count = net.class_count;
  save_dataset(d, out);
  write_resolved(s, out);
  json trace = json::array();
  for (const auto& l : r.trace) trace.push_back({{"total", l.total}, {"ce", l.ce}, {"bn", l.bn}, {"l2", l.l2}, {"tv", l.tv}});
  write_json(s.get<std::string>("report"), json{{"initial_loss", r.trace.front().total},
                                                {"final_loss", r.trace.back().total},
                                                {"trace", trace}});
  return 0;
}

int cmd_report(const Settings& s) {
  const auto inputs = s.get<std::vector<std::string>>("inputs");
  if (inputs.empty()) fail(ErrorKind::Value, "report needs at least one sweep CSV");
  std::vector<SweepRow> rows;
  for (const auto& p : inputs) {
    const auto part = parse_sweep_csv(read_file(p));
    rows.insert(rows.end(), part.begin(), part.end());
  }
  const std::string md = render_sweep_report(rows);
  if (const auto out = s.get<std::string>("out"); !out.empty()) {
    write_file_atomic(out, md);
    write_resolved(s, out);
  } else {
    std::cout << md;
  }
  return 0;
}

int exit_code(ErrorKind kind) { return kind == ErrorKind::Runtime ? 2 : 1; }

void report_error(const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"foldkit: data-free model folding"};
  app.require_subcommand(1);
  Flags f;

  struct Command {
    const char* name;
    const char* help;
    int (*run)(const Settings&);
  };
  const std::vector<Command> commands{
      {"train", "train a catalog network (without --data, writes <out stem>.{train,test,calibration}.fdst)", cmd_train},
      {"fold", "fold a model at the given sparsity", cmd_fold},
      {"prune", "structured magnitude pruning", cmd_prune},
      {"eval", "print accuracy=<value> on a dataset", cmd_eval},
      {"sweep", "methods x sparsities x seeds grid to CSV", cmd_sweep},
      {"merge", "merge two models of one architecture", cmd_merge},
      {"di", "synthesize a batch by deep inversion", cmd_di},
      {"report", "render sweep CSVs as markdown tables", cmd_report},
  };
  std::vector<CLI::App*> subs;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--model", f.model, "FNETv1 model (merge takes two)");
    sub->add_option("--data", f.data, "FDSTv1 dataset");
    sub->add_option("--calib", f.calib, "FDSTv1 calibration set");
    sub->add_option("--sparsity", f.sparsity, "sparsity in [0,1); repeatable");
    sub->add_option("--repair", f.repair, "naive | ar | dir | data");
    sub->add_option("--norm", f.norm, "l1 | l2");
    sub->add_option("--seed", f.seed, "seed; repeatable");
    sub->add_option("--out", f.out, "output path");
    sub->add_option("--report", f.report, "JSON report path");
    sub->add_option("--config", f.config, "JSON settings file; overrides flags");
    sub->add_option("--jobs", f.jobs, "parallel sweep points");
    sub->add_option("--mode", f.mode, "merge mode: free | paired");
    sub->add_option("--method", f.methods, "sweep method; repeatable");
    sub->add_option("--arch", f.arch, "mlp-bn | conv-bn | residual");
    sub->add_option("--width", f.width, "catalog width");
    sub->add_option("--epochs", f.epochs, "training epochs");
    sub->add_option("--batch-size", f.batch_size, "training batch size");
    sub->add_option("--lr", f.lr, "training learning rate");
    sub->add_option("--steps", f.steps, "deep inversion steps");
    if (std::string(c.name) == "report") sub->add_option("inputs", f.inputs, "sweep CSV files");
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("usage", e.what());
    return 1;
  }

  for (std::size_t i = 0; i < commands.size(); ++i) {
    if (!subs[i]->parsed()) continue;
    try {
      json resolved = defaults();
      resolved.merge_patch(flags_json(*subs[i], f));
      resolved.merge_patch(load_config(f.config));
      resolved["command"] = commands[i].name;
      if (auto& arch = resolved["architecture"]; arch["width"] == 0 && arch["kind"].is_string()) {
        arch["width"] = parse_architecture(arch["kind"].get<std::string>()) == Architecture::ConvBn ? 16 : 128;
      }
      return commands[i].run(Settings(std::move(resolved)));
    } catch (const Error& e) {
      report_error(to_string(e.kind()), e.what());
      return exit_code(e.kind());
    } catch (const std::exception& e) {
      report_error("runtime", e.what());
      return 2;
    }
  }
  return 1;
}
