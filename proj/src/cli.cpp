#include "switch_sae/cli.hpp"

#include "switch_sae/data.hpp"
#include "switch_sae/errors.hpp"
#include "switch_sae/eval.hpp"
#include "switch_sae/gradcheck.hpp"
#include "switch_sae/model_file.hpp"
#include "switch_sae/run_config.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace ssae {
namespace {

using nlohmann::ordered_json;

std::string g17(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

void write_json(const std::filesystem::path& path, const ordered_json& doc) {
  write_text(path, doc.dump(2) + "\n");
}

std::filesystem::path with_suffix(const std::filesystem::path& base, const std::string& suffix) {
  return base.string() + suffix;
}

ordered_json vector_json(const Vectord& v) {
  ordered_json a = ordered_json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

ordered_json matrix_json(const Matrixd& m) {
  ordered_json rows = ordered_json::array();
  for (Index i = 0; i < m.rows(); ++i) rows.push_back(vector_json(m.row(i).transpose()));
  return rows;
}

// gen ----------------------------------------------------------------------

int cmd_gen(const std::string& config_path, const std::filesystem::path& out) {
  const RunConfig config = load_run_config(config_path);
  const SyntheticData data = generate_synthetic(config.data, config.data_count, config.sample_stream);
  write_activations(out, data.x);

  const auto dict_path = with_suffix(out, ".dict.bin");
  write_activations(dict_path, data.truth.features.transpose());
  ordered_json truth;
  truth["d"] = config.data.d;
  truth["num_true_features"] = config.data.num_true_features;
  truth["num_clusters"] = config.data.num_clusters;
  truth["dictionary_file"] = dict_path.filename().string();
  truth["cluster"] = data.truth.cluster;
  write_json(with_suffix(out, ".truth.json"), truth);
  write_json(with_suffix(out, ".config.json"), to_json(config));
  std::cout << "wrote " << data.x.rows() << " x " << data.x.cols() << " activations to " << out.string()
            << "\n";
  return 0;
}

// train --------------------------------------------------------------------

std::string log_csv(const std::vector<TrainLogRow>& rows, Index experts) {
  std::ostringstream os;
  os << "step,lr,recon,aux,total,dead_frac";
  for (Index i = 0; i < experts; ++i) os << ",f_" << i;
  os << "\n";
  for (const auto& r : rows) {
    os << r.step << "," << g17(r.lr) << "," << g17(r.recon) << "," << g17(r.aux) << ","
       << g17(r.total) << "," << g17(r.dead_frac);
    for (double f : r.f) os << "," << g17(f);
    os << "\n";
  }
  return os.str();
}

int cmd_train(const std::string& config_path, const std::filesystem::path& data_path,
              const std::filesystem::path& model_path, const std::filesystem::path& log_path) {
  const RunConfig config = load_run_config(config_path);
  auto reader = std::make_unique<ActivationReader>(data_path);
  if (reader->dim() != config.train.d)
    throw ConfigError("data.d", "config says " + std::to_string(config.train.d) + " but " +
                                    data_path.string() + " has d = " + std::to_string(reader->dim()));
  if (static_cast<std::uint64_t>(config.train.batch_size) > reader->count())
    throw ConfigError("train.batch_size", "exceeds the " + std::to_string(reader->count()) +
                                              " rows in " + data_path.string());
  BatchIterator batches(std::move(reader), config.train.batch_size, config.shuffle_buffer,
                        mix_seed(config.train.seed, 1));
  const TrainResult result = train(config.train, batches);
  save_model(model_path, result.model);
  write_json(with_suffix(model_path, ".config.json"), to_json(config));
  write_text(log_path, log_csv(result.log, result.model.experts()));
  const auto& last = result.log.back();
  std::cout << "trained " << to_string(config.train.arch) << " for " << config.train.steps
            << " steps; final recon " << g17(last.recon) << ", dead fraction " << g17(last.dead_frac)
            << "\n";
  return 0;
}

// eval ---------------------------------------------------------------------

int cmd_eval(const std::filesystem::path& model_path, const std::filesystem::path& data_path,
             const std::filesystem::path& out, bool topk_relu, Index chunk_rows) {
  SaeModel model = load_model(model_path);
  model.topk_relu = topk_relu;
  ActivationReader reader(data_path);
  if (reader.dim() != model.d())
    throw FormatError(data_path.string() + ": d: " + std::to_string(reader.dim()) +
                      " does not match model d = " + std::to_string(model.d()));
  const EvalReport r = reconstruction_metrics(model, reader, chunk_rows);
  ordered_json doc;
  doc["arch"] = to_string(model.kind);
  doc["samples"] = r.samples;
  doc["mse"] = r.mse;
  doc["fvu"] = r.fvu;
  doc["mean_l0"] = r.mean_l0;
  doc["dead_feature_fraction"] = r.dead_feature_fraction;
  doc["aux_loss"] = r.aux_loss;
  doc["f"] = r.f;
  write_json(out, doc);
  std::cout << "mse " << g17(r.mse) << "  fvu " << g17(r.fvu) << "  mean_l0 " << g17(r.mean_l0) << "\n";
  return 0;
}

// geometry -----------------------------------------------------------------

int cmd_geometry(const std::filesystem::path& model_path, double threshold,
                 const std::filesystem::path& out, const std::string& baseline_path, Index blocks,
                 std::uint64_t seed) {
  if (threshold < -1 || threshold > 1) throw ConfigError("--threshold", "must lie in [-1, 1]");
  const SaeModel model = load_model(model_path);
  GeometryReport g;
  g.threshold = threshold;
  g.nn = nn_cosine_stats(std::visit([](const auto& p) { return concatenated_decoder(p); }, model.params),
                         threshold);
  if (model.kind == ArchKind::Switch && model.experts() >= 2) {
    g.cross_expert = cross_expert_similarity(model.switched());
    blocks = model.experts();
  }
  if (!baseline_path.empty()) {
    const SaeModel baseline = load_model(baseline_path);
    if (baseline.kind == ArchKind::Switch)
      throw ConfigError("--baseline-model", "baseline must be a dense model");
    g.random_block_baseline = random_block_baseline(baseline.dense().w_dec, blocks, seed);
  } else if (model.kind != ArchKind::Switch) {
    g.random_block_baseline = random_block_baseline(model.dense().w_dec, blocks, seed);
  }

  ordered_json doc;
  doc["arch"] = to_string(model.kind);
  doc["threshold"] = g.threshold;
  doc["fraction_above_threshold"] = g.nn.fraction_above;
  doc["mean_nn_cosine"] = g.nn.mean_nn_cosine;
  doc["cross_expert_matrix"] = g.cross_expert ? matrix_json(*g.cross_expert) : ordered_json(nullptr);
  doc["random_block_baseline"] =
      g.random_block_baseline ? ordered_json(*g.random_block_baseline) : ordered_json(nullptr);
  doc["random_block_count"] = g.random_block_baseline ? ordered_json(blocks) : ordered_json(nullptr);
  doc["per_feature_nn_cosine"] = vector_json(g.nn.per_feature);
  write_json(out, doc);
  std::cout << "fraction(nn cos > " << threshold << ") " << g17(g.nn.fraction_above)
            << "  mean nn cos " << g17(g.nn.mean_nn_cosine) << "\n";
  return 0;
}

// flops --------------------------------------------------------------------

int cmd_flops(const std::string& config_path, bool as_json) {
  const RunConfig config = load_run_config(config_path);
  const auto& t = config.train;
  struct Row {
    std::string label;
    ArchDescriptor arch;
    FlopReport report;
  };
  std::vector<Row> rows;
  const ArchDescriptor own{t.arch, static_cast<std::uint64_t>(t.d), static_cast<std::uint64_t>(t.width),
                           static_cast<std::uint64_t>(t.experts), static_cast<std::uint64_t>(t.k)};
  rows.push_back({to_string(t.arch), own, flops_per_activation(own)});
  if (t.arch == ArchKind::Switch) {
    const ArchDescriptor width_matched{ArchKind::TopK, own.d, own.width, 1, own.k};
    const ArchDescriptor flop_matched{ArchKind::TopK, own.d, own.width / own.experts, 1, own.k};
    rows.push_back({"topk width-matched", width_matched, flops_per_activation(width_matched)});
    rows.push_back({"topk flop-matched", flop_matched, flops_per_activation(flop_matched)});
  }

  double ratio = 0.0;
  if (t.arch == ArchKind::Switch) {
    const auto& sw = rows[0].report;
    ratio = static_cast<double>(rows[1].report.encoder_flops) /
            static_cast<double>(sw.encoder_flops + sw.router_flops);
  }

  if (as_json) {
    ordered_json doc = ordered_json::array();
    for (const auto& r : rows) {
      doc.push_back({{"label", r.label},
                     {"d", r.arch.d},
                     {"M", r.arch.width},
                     {"N", r.arch.experts},
                     {"k", r.arch.k},
                     {"encoder_flops", r.report.encoder_flops},
                     {"router_flops", r.report.router_flops},
                     {"decoder_flops", r.report.decoder_flops},
                     {"bias_flops", r.report.bias_flops},
                     {"total_flops", r.report.total_flops}});
    }
    ordered_json out{{"rows", doc}};
    if (t.arch == ArchKind::Switch) out["encoder_ratio"] = ratio;
    std::cout << out.dump(2) << "\n";
    return 0;
  }

  std::printf("%-20s %6s %8s %5s %5s %14s %10s %10s %6s %14s\n", "arch", "d", "M", "N", "k",
              "encoder", "router", "decoder", "bias", "total");
  for (const auto& r : rows) {
    std::printf("%-20s %6llu %8llu %5llu %5llu %14llu %10llu %10llu %6llu %14llu\n", r.label.c_str(),
                static_cast<unsigned long long>(r.arch.d), static_cast<unsigned long long>(r.arch.width),
                static_cast<unsigned long long>(r.arch.experts), static_cast<unsigned long long>(r.arch.k),
                static_cast<unsigned long long>(r.report.encoder_flops),
                static_cast<unsigned long long>(r.report.router_flops),
                static_cast<unsigned long long>(r.report.decoder_flops),
                static_cast<unsigned long long>(r.report.bias_flops),
                static_cast<unsigned long long>(r.report.total_flops));
  }
  if (t.arch == ArchKind::Switch)
    std::printf("encoder ratio (width-matched topk encoder / switch encoder+router): %.2f\n", ratio);
  return 0;
}

// gradcheck ----------------------------------------------------------------

int cmd_gradcheck(const std::string& config_path, std::uint64_t seed, double h, double tol,
                  Index batch) {
  const RunConfig config = load_run_config(config_path);
  const auto& t = config.train;
  const ArchDescriptor arch{t.arch, static_cast<std::uint64_t>(t.d), static_cast<std::uint64_t>(t.width),
                            static_cast<std::uint64_t>(t.experts), static_cast<std::uint64_t>(t.k)};
  GradCheckOptions opts;
  opts.h = h;
  opts.batch = batch;
  opts.alpha = t.alpha;
  opts.l1_coeff = t.l1_coeff;
  const GradCheckReport report = finite_diff_check(arch, seed, opts);
  for (const auto& b : report.blocks)
    std::printf("%-18s checked %6lld  max rel err %.3e  (analytic %.6e, numeric %.6e)\n",
                b.name.c_str(), static_cast<long long>(b.checked), b.max_rel_error, b.worst_analytic,
                b.worst_numeric);
  for (const auto& s : report.skipped) std::printf("skipped %s (decision changed under perturbation)\n", s.c_str());
  std::printf("max rel err %.3e (tolerance %.1e): %s\n", report.max_rel_error, tol,
              report.passed(tol) ? "PASS" : "FAIL");
  if (!report.passed(tol)) throw NumericalError("gradient check failed");
  return 0;
}

// export-features ----------------------------------------------------------

int cmd_export(const std::filesystem::path& model_path, const std::filesystem::path& out_path) {
  const SaeModel model = load_model(model_path);
  std::ofstream out(out_path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + out_path.string() + " for writing");
  out << "kind,expert,feature";
  for (Index i = 0; i < model.d(); ++i) out << ",v_" << i;
  out << "\n";
  auto emit = [&](const char* kind, Index expert, Index feature, const auto& vec) {
    out << kind << "," << expert << "," << feature;
    for (Index i = 0; i < vec.size(); ++i) out << "," << g17(vec(i));
    out << "\n";
  };
  if (model.kind == ArchKind::Switch) {
    const auto& p = model.switched();
    for (Index e = 0; e < p.num_experts(); ++e) {
      const auto& ex = p.experts[static_cast<std::size_t>(e)];
      for (Index j = 0; j < ex.w_enc.rows(); ++j) emit("encoder", e, j, ex.w_enc.row(j));
      for (Index j = 0; j < ex.w_dec.cols(); ++j) emit("decoder", e, j, ex.w_dec.col(j));
    }
  } else {
    const auto& p = model.dense();
    for (Index j = 0; j < p.w_enc.rows(); ++j) emit("encoder", 0, j, p.w_enc.row(j));
    for (Index j = 0; j < p.w_dec.cols(); ++j) emit("decoder", 0, j, p.w_dec.col(j));
  }
  if (!out) throw IoError("write failed for " + out_path.string());
  return 0;
}

}  // namespace

int run(std::vector<std::string> args) {
  CLI::App app{"Switch sparse autoencoder training and evaluation"};
  app.require_subcommand(1);

  std::string config, out, data, model, log, baseline;
  std::uint64_t seed = 0;
  double threshold = 0.9, h = 1e-4, tol = 1e-5;
  Index blocks = 16, batch = 6, chunk = 4096;
  bool as_json = false, topk_relu = false;

  auto* gen = app.add_subcommand("gen", "generate synthetic activations");
  gen->add_option("--config", config)->required();
  gen->add_option("--out", out)->required();

  auto* trn = app.add_subcommand("train", "train a model");
  trn->add_option("--config", config)->required();
  trn->add_option("--data", data)->required();
  trn->add_option("--out", model)->required();
  trn->add_option("--log", log)->required();

  auto* evl = app.add_subcommand("eval", "reconstruction metrics on held-out data");
  evl->add_option("--model", model)->required();
  evl->add_option("--data", data)->required();
  evl->add_option("--out", out)->required();
  evl->add_option("--chunk-rows", chunk)->check(CLI::PositiveNumber);
  evl->add_flag("--topk-relu", topk_relu, "rectify TopK outputs");

  auto* geo = app.add_subcommand("geometry", "decoder feature geometry");
  geo->add_option("--model", model)->required();
  geo->add_option("--threshold", threshold);
  geo->add_option("--out", out)->required();
  geo->add_option("--baseline-model", baseline, "dense model for the random-block baseline");
  geo->add_option("--blocks", blocks, "block count for a dense model's baseline")->check(CLI::Range(2, 1 << 30));
  geo->add_option("--seed", seed);

  auto* flp = app.add_subcommand("flops", "per-activation FLOP accounting");
  flp->add_option("--config", config)->required();
  flp->add_flag("--json", as_json);

  auto* grc = app.add_subcommand("gradcheck", "finite-difference gradient check");
  grc->add_option("--config", config)->required();
  grc->add_option("--seed", seed);
  grc->add_option("--step", h, "finite-difference step")->check(CLI::PositiveNumber);
  grc->add_option("--tol", tol)->check(CLI::PositiveNumber);
  grc->add_option("--batch", batch)->check(CLI::PositiveNumber);

  auto* exp = app.add_subcommand("export-features", "encoder/decoder vectors as CSV");
  exp->add_option("--model", model)->required();
  exp->add_option("--out", out)->required();

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*gen) return cmd_gen(config, out);
    if (*trn) return cmd_train(config, data, model, log);
    if (*evl) return cmd_eval(model, data, out, topk_relu, chunk);
    if (*geo) return cmd_geometry(model, threshold, out, baseline, blocks, seed);
    if (*flp) return cmd_flops(config, as_json);
    if (*grc) return cmd_gradcheck(config, seed, h, tol, batch);
    if (*exp) return cmd_export(model, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitIo;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(std::move(args));
}

}  // namespace ssae
