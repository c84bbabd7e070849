// molhf command-line driver: train, sample, reconstruct, optimize, resample,
// stats, gradcheck, conformance.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "molhf/conformance.hpp"
#include "molhf/generation.hpp"
#include "molhf/optimize.hpp"
#include "molhf/training.hpp"

using namespace molhf;

namespace {

struct Options {
  std::string config;
  std::string data;
  std::string out;
  std::string ckpt;
  std::size_t n = 100;
  double temperature = 0.7;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  double alpha = 0.5;
  std::optional<double> delta;
  std::string scorer = "carbon_count";
  std::vector<int> levels;
  int k = 2;
  std::string layers = "all";
};

bool is_validation(ErrorCode c) {
  switch (c) {
    case ErrorCode::UnsupportedToken:
    case ErrorCode::UnmatchedRingClosure:
    case ErrorCode::UnmatchedParenthesis:
    case ErrorCode::UnknownElement:
    case ErrorCode::DisconnectedGraph:
    case ErrorCode::TooManyAtoms:
    case ErrorCode::EmptyGraph:
    case ErrorCode::EmptyBatch:
    case ErrorCode::IndivisibleN:
    case ErrorCode::OddSplitAxis:
    case ErrorCode::OddSpatialDim:
    case ErrorCode::BadNoiseScale:
    case ErrorCode::InvalidMolecule:
    case ErrorCode::InvalidConfig:
      return true;
    default:
      return false;
  }
}

void announce(const Config& cfg, std::uint64_t seed) {
  std::cout << "config " << cfg.to_json().dump() << "\nseed " << seed << "\n";
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path);
  return os;
}

std::string out_path(const Options& o, const std::string& fallback) { return o.out.empty() ? fallback : o.out; }

Checkpoint<float> need_checkpoint(const Options& o) {
  if (o.ckpt.empty()) throw Error(ErrorCode::InvalidConfig, "--ckpt is required");
  return load_checkpoint<float>(o.ckpt);
}

Dataset<float> need_data(const Options& o, const Config& cfg) {
  if (o.data.empty()) throw Error(ErrorCode::InvalidConfig, "--data is required");
  return make_dataset<float>(read_smiles_file(o.data), cfg);
}

int cmd_train(const Options& o) {
  if (o.out.empty()) throw Error(ErrorCode::InvalidConfig, "--out is required");
  Checkpoint<float> ck;
  if (!o.ckpt.empty()) {
    ck = load_checkpoint<float>(o.ckpt);
  } else {
    Config cfg = o.config.empty() ? preset_config("toy") : load_config(o.config);
    if (o.seed) cfg.seed = *o.seed;
    ck.model = std::make_unique<FlowModel<float>>(cfg);
  }
  const Config& cfg = ck.model->config();
  announce(cfg, cfg.seed);
  const auto data = need_data(o, cfg);
  std::ofstream log = open_out(o.out + ".log.tsv");
  const int remaining = std::max(0, cfg.epochs - ck.state.epoch);
  if (ck.state.epoch > 0) log << "epoch\tstep\tnll\tseconds\n";
  train(*ck.model, data, remaining, &log, o.out, ck.state, ck.adam, [](const EpochRecord& r) {
    std::printf("epoch %d step %lld nll %.4f (%.1fs)\n", r.epoch, static_cast<long long>(r.step), r.nll, r.seconds);
    std::fflush(stdout);
  });
  if (remaining == 0) save_checkpoint(o.out, *ck.model, ck.state, ck.adam);
  std::cout << "wrote " << o.out << ".json, " << o.out << ".bin, " << o.out << ".log.tsv\n";
  return 0;
}

int cmd_sample(const Options& o) {
  auto ck = need_checkpoint(o);
  const Config& cfg = ck.model->config();
  const std::uint64_t seed = o.seed.value_or(cfg.seed);
  announce(cfg, seed);
  std::set<std::string> train_set;
  if (!o.data.empty())
    for (const auto& s : need_data(o, cfg).smiles) train_set.insert(canonical_smiles(parse_smiles(s, cfg.elements)));
  const auto rep = sample(*ck.model, o.n, o.temperature, seed, train_set, o.threads);
  const std::string path = out_path(o, "samples.tsv");
  auto os = open_out(path);
  write_samples_tsv(os, rep);
  write_metrics(std::cout, rep.metrics);
  std::cout << "wrote " << path << "\n";
  return 0;
}

int cmd_reconstruct(const Options& o) {
  auto ck = need_checkpoint(o);
  const Config& cfg = ck.model->config();
  const std::uint64_t seed = o.seed.value_or(cfg.seed);
  announce(cfg, seed);
  const auto r = reconstruct(*ck.model, need_data(o, cfg), seed, o.threads);
  std::printf("reconstruction\t%.4f\t(%zu/%zu)\n", r.fraction(), r.ok, r.total);
  return 0;
}

int cmd_optimize(const Options& o) {
  auto ck = need_checkpoint(o);
  if (!o.config.empty()) {
    const Config over = load_config(o.config);
    Config cfg = ck.model->config();
    cfg.lso_steps = over.lso_steps;
    cfg.surrogate_epochs = over.surrogate_epochs;
    cfg.surrogate_hidden = over.surrogate_hidden;
    auto model = std::make_unique<FlowModel<float>>(cfg);
    for (std::size_t i = 0; i < model->params().size(); ++i) model->params()[i].value = ck.model->params()[i].value;
    ck.model = std::move(model);
  }
  const Config& cfg = ck.model->config();
  const std::uint64_t seed = o.seed.value_or(cfg.seed);
  announce(cfg, seed);
  LsoOptions opt;
  opt.alpha = o.alpha;
  opt.steps = cfg.lso_steps;
  opt.delta = o.delta;
  const auto run = optimize_dataset(*ck.model, need_data(o, cfg), o.scorer, o.n, opt, seed, o.threads);
  const std::string path = out_path(o, "optimized.tsv");
  auto os = open_out(path);
  write_optimized_tsv(os, run.results);
  std::printf("mean_improvement\t%.4f\nsuccess\t%.4f\n", run.mean_improvement, run.success_rate);
  std::cout << "wrote " << path << "\n";
  return 0;
}

int cmd_resample(const Options& o) {
  auto ck = need_checkpoint(o);
  const Config& cfg = ck.model->config();
  const std::uint64_t seed = o.seed.value_or(cfg.seed);
  announce(cfg, seed);
  const auto data = need_data(o, cfg);
  if (data.size() == 0) throw Error(ErrorCode::EmptyBatch, "--data holds no molecule");
  auto grid = resample_hierarchy(*ck.model, data.graphs[0], o.n, o.temperature, seed);
  if (!o.levels.empty())
    std::erase_if(grid.rows, [&](const ResampleRow& r) {
      return r.level >= 0 && std::find(o.levels.begin(), o.levels.end(), r.level) == o.levels.end();
    });
  const std::string path = out_path(o, "resample_grid.tsv");
  auto os = open_out(path);
  write_resample_tsv(os, grid);
  std::cout << "original\t" << grid.original << "\nwrote " << path << "\n";
  return 0;
}

int cmd_stats(const Options& o) {
  std::vector<MolGraph> graphs;
  if (!o.ckpt.empty()) {
    auto ck = need_checkpoint(o);
    const Config& cfg = ck.model->config();
    const std::uint64_t seed = o.seed.value_or(cfg.seed);
    announce(cfg, seed);
    for (auto& s : sample(*ck.model, o.n, o.temperature, seed, {}, o.threads).samples)
      graphs.push_back(std::move(s.corrected));
  } else {
    const Config cfg = o.config.empty() ? preset_config("toy") : load_config(o.config);
    announce(cfg, o.seed.value_or(cfg.seed));
    graphs = need_data(o, cfg).graphs;
  }
  const auto table = substructure_stats(graphs, o.k);
  const std::string path = out_path(o, "substructures.tsv");
  auto os = open_out(path);
  os << "fragment\tcount\n";
  for (const auto& [frag, count] : table) os << frag << '\t' << count << '\n';
  for (std::size_t i = 0; i < std::min<std::size_t>(10, table.size()); ++i)
    std::cout << table[i].first << '\t' << table[i].second << '\n';
  std::cout << "wrote " << path << "\n";
  return 0;
}

int cmd_gradcheck(const Options& o) {
  const std::uint64_t seed = o.seed.value_or(2);
  announce(micro_config(), seed);
  const auto g = gradient_check(seed);
  const bool ok = g.parameters <= 500 && g.max_rel_error <= 1e-3;
  std::printf("parameters\t%zu\nmax_rel_error\t%.3e\nworst\t%s\n%s\n", g.parameters, g.max_rel_error, g.worst.c_str(),
              ok ? "PASS" : "FAIL");
  return ok ? 0 : 2;
}

int cmd_conformance(const Options& o) {
  const std::uint64_t seed = o.seed.value_or(1);
  std::cout << "seed " << seed << "\n";
  const auto rows = layer_conformance(seed);
  bool ok = true, any = false;
  std::printf("%-22s %12s %14s %14s %12s %s\n", "layer", "roundtrip", "logdet", "logdet_fd", "rel_err", "result");
  for (const auto& r : rows) {
    if (o.layers != "all" && ("," + o.layers + ",").find("," + r.layer + ",") == std::string::npos) continue;
    any = true;
    ok = ok && r.pass;
    std::printf("%-22s %12.3e %14.8f %14.8f %12.3e %s\n", r.layer.c_str(), r.roundtrip_error, r.logdet, r.logdet_fd,
                r.logdet_rel_error, r.pass ? "PASS" : "FAIL");
  }
  if (!any) throw Error(ErrorCode::InvalidConfig, "--layers matched no layer");
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical normalizing flows for molecular graphs"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* sc, std::initializer_list<const char*> flags) {
    for (std::string f : flags) {
      if (f == "config") sc->add_option("--config", o.config, "JSON config (preset + overrides)");
      if (f == "data") sc->add_option("--data", o.data, "SMILES file, one per line");
      if (f == "out") sc->add_option("--out", o.out, "output path or checkpoint prefix");
      if (f == "ckpt") sc->add_option("--ckpt", o.ckpt, "checkpoint prefix");
      if (f == "n") sc->add_option("--n", o.n, "count")->check(CLI::PositiveNumber);
      if (f == "temperature") sc->add_option("--temperature", o.temperature, "sampling temperature in (0, 2]");
      if (f == "seed") sc->add_option("--seed", o.seed, "random seed");
      if (f == "threads") sc->add_option("--threads", o.threads, "worker threads")->check(CLI::PositiveNumber);
      if (f == "alpha") sc->add_option("--alpha", o.alpha, "latent step size");
      if (f == "delta") sc->add_option("--delta", o.delta, "similarity threshold")->check(CLI::Range(0.0, 1.0));
      if (f == "scorer") sc->add_option("--scorer", o.scorer, "atom_count|ring_count|heteroatom_fraction|carbon_count");
      if (f == "levels") sc->add_option("--levels", o.levels, "levels to report")->delimiter(',');
      if (f == "k") sc->add_option("--k", o.k, "cluster size")->check(CLI::PositiveNumber);
      if (f == "layers") sc->add_option("--layers", o.layers, "'all' or a comma list of layer names");
    }
  };
  auto* train = app.add_subcommand("train", "train a model and write a checkpoint");
  add_common(train, {"config", "data", "out", "ckpt", "seed", "threads"});
  auto* smp = app.add_subcommand("sample", "sample molecules and report metrics");
  add_common(smp, {"ckpt", "data", "out", "n", "temperature", "seed", "threads"});
  auto* rec = app.add_subcommand("reconstruct", "reconstruction rate on a dataset");
  add_common(rec, {"ckpt", "data", "seed", "threads"});
  auto* opt = app.add_subcommand("optimize", "latent-space property optimization");
  add_common(opt, {"ckpt", "config", "data", "out", "n", "seed", "threads", "alpha", "delta", "scorer"});
  auto* res = app.add_subcommand("resample", "hierarchical resampling of the first molecule in --data");
  add_common(res, {"ckpt", "data", "out", "n", "temperature", "seed", "levels"});
  auto* st = app.add_subcommand("stats", "substructure frequencies of samples or a dataset");
  add_common(st, {"ckpt", "config", "data", "out", "n", "temperature", "seed", "threads", "k"});
  auto* gc = app.add_subcommand("gradcheck", "NLL gradient against finite differences on a micro model");
  add_common(gc, {"seed"});
  auto* cf = app.add_subcommand("conformance", "per-layer invertibility and log-determinant table");
  add_common(cf, {"layers", "seed"});

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  try {
    if (*train) return cmd_train(o);
    if (*smp) return cmd_sample(o);
    if (*rec) return cmd_reconstruct(o);
    if (*opt) return cmd_optimize(o);
    if (*res) return cmd_resample(o);
    if (*st) return cmd_stats(o);
    if (*gc) return cmd_gradcheck(o);
    if (*cf) return cmd_conformance(o);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return is_validation(e.code()) ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
