#include "cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"

#include "instcal/config.hpp"
#include "instcal/harness.hpp"
#include "instcal/report.hpp"

namespace instcal::cli {
namespace {

namespace fs = std::filesystem;

struct Options {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out;
  long long seed = -1;
  std::size_t workers = 0;
  bool quiet = false;

  long long total_iters = -1;
  std::string aug;
  std::string variant;
  long long basis = -1;
  std::string checkpoint;
  std::string pretrained;
  std::string experiment = "main";
  std::string tag;
  long long n_images = -1;
  std::size_t dump_masks = 0;

  std::string report_dir;
  std::string report_out;
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + path.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string file_hash(const fs::path& path) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(read_file(path))));
  return buf;
}

// File config (or the built-in one), then INSTCAL_SEED, then --set, then
// --seed.
nlohmann::json base_config(const Options& o) {
  nlohmann::json cfg;
  if (o.config_path.empty()) {
    cfg = default_config();
  } else {
    cfg = nlohmann::json::parse(read_file(o.config_path), nullptr, false);
    if (cfg.is_discarded()) throw ConfigError("'" + o.config_path + "' is not valid JSON");
    parse_config(cfg);
  }
  if (const char* env = std::getenv("INSTCAL_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long s = std::strtoull(env, &end, 10);
    if (*end != '\0' || env[0] == '-') throw ConfigError("INSTCAL_SEED must be a non-negative integer");
    set_key(cfg, "seed", s);
  }
  for (const std::string& s : o.sets) apply_override(cfg, s);
  if (o.seed >= 0) set_key(cfg, "seed", static_cast<std::uint64_t>(o.seed));
  return cfg;
}

struct Resolved {
  nlohmann::json doc;
  PipelineConfig config;
  std::string hash;
};

Resolved resolve(const std::string& command, nlohmann::json cfg, nlohmann::json extra) {
  Resolved r;
  r.config = parse_config(cfg);
  r.doc = {{"command", command}, {"config", std::move(cfg)}};
  for (auto& [k, v] : extra.items()) r.doc[k] = v;
  r.hash = config_hash(r.doc);
  r.doc["config_hash"] = r.hash;
  return r;
}

fs::path prepare_out(const Options& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
  fs::create_directories(o.out);
  return o.out;
}

void write_resolved(const fs::path& dir, const Resolved& r) {
  write_text(dir / "resolved_config.json", r.doc.dump(2) + "\n");
}

ProgressFn progress_printer(const Options& o, std::size_t total, const std::string& stage) {
  if (o.quiet) return {};
  const std::size_t every = std::max<std::size_t>(1, total / 20);
  return [every, total, stage](const CurvePoint& p) {
    if (p.iter % every == 0 || p.iter + 1 == total) {
      std::fprintf(stderr, "[%s] iter %zu/%zu lr %.3g loss %.4f\n", stage.c_str(), p.iter + 1, total, p.lr, p.loss);
    }
  };
}

void save_model(const SegNet& model, const fs::path& path, const Resolved& r) {
  Checkpoint ck = model.to_checkpoint();
  ck.metadata["config_hash"] = r.hash;
  ck.metadata["resolved_config"] = r.doc;
  ck.save(path);
}

SegNet load_model(const std::string& path) {
  if (path.empty()) throw ConfigError("--checkpoint is required");
  if (!fs::exists(path)) throw ConfigError("checkpoint '" + path + "' does not exist");
  return SegNet::from_checkpoint(Checkpoint::load(path));
}

std::size_t eval_workers(const Options& o) {
  if (o.workers > 0) return o.workers;
  return std::max(1u, std::thread::hardware_concurrency());
}

int cmd_pretrain(const Options& o) {
  nlohmann::json cfg = base_config(o);
  if (o.total_iters >= 0) set_key(cfg, "pretrain.total_iters", o.total_iters);
  if (!o.aug.empty()) set_key(cfg, "pretrain.augmentation", o.aug);
  const Resolved r = resolve("pretrain", cfg, nlohmann::json::object());
  const fs::path dir = prepare_out(o);
  write_resolved(dir, r);
  const TrainConfig& t = r.config.pretrain;
  const TrainResult result = pretrain(r.config.model, t, r.config.scene, progress_printer(o, t.total_iters, "pretrain"));
  save_model(result.model, dir / "model.ck", r);
  write_text(dir / "curve.csv", curve_csv(result.curve, r.hash));
  if (!o.quiet) std::fprintf(stderr, "wrote %s\n", (dir / "model.ck").c_str());
  return kExitOk;
}

int cmd_train_instcal(const Options& o) {
  nlohmann::json cfg = base_config(o);
  if (o.total_iters >= 0) set_key(cfg, "instcal.total_iters", o.total_iters);
  if (!o.aug.empty()) set_key(cfg, "instcal.augmentation", o.aug);
  if (!o.variant.empty()) set_key(cfg, "instcal.variant", o.variant);
  if (o.basis >= 0) set_key(cfg, "instcal.basis_count", o.basis);
  SegNet model = load_model(o.checkpoint);
  const Resolved r = resolve("train-instcal", cfg, {{"inputs", {{"checkpoint", file_hash(o.checkpoint)}}}});
  model.convert(r.config.instcal.norm_variant(), r.config.seed);
  const fs::path dir = prepare_out(o);
  write_resolved(dir, r);
  const TrainConfig t = r.config.instcal.train_config();
  const TrainResult result =
      train_instcal(std::move(model), t, r.config.scene, progress_printer(o, t.total_iters, "train-instcal"));
  save_model(result.model, dir / "model.ck", r);
  write_text(dir / "curve.csv", curve_csv(result.curve, r.hash));
  if (!o.quiet) std::fprintf(stderr, "wrote %s\n", (dir / "model.ck").c_str());
  return kExitOk;
}

std::string with_tag(const std::string& method, const std::string& tag) {
  return tag.empty() ? method : method + "@" + tag;
}

void dump_masks(const fs::path& dir, const std::string& method, const Predictor& predictor, const EvalSettings& ev,
                std::size_t count, const std::string& hash) {
  const fs::path sub = dir / "masks" / method;
  fs::create_directories(sub);
  for (const DomainSpec& d : ev.domains) {
    for (std::size_t i = 0; i < std::min(count, ev.eval.n_images); ++i) {
      const Sample s = evaluation_sample(ev.eval, d, i);
      const Tensor logits = predictor(s.image.reshaped({1, 3, s.mask.height, s.mask.width}));
      write_ppm(sub / (d.label() + "_" + std::to_string(i) + ".ppm"), triptych(s.image, s.mask, predict(logits).labels),
                "config_hash=" + hash);
    }
  }
}

std::vector<MetricsReport> run_method(const std::string& method, const Predictor& predictor, const EvalSettings& ev,
                                      const Resolved& r, const Options& o, const fs::path& dir) {
  std::vector<MetricsReport> out;
  for (const DomainSpec& d : ev.domains) {
    out.push_back(evaluate_domain(predictor, d, ev.eval, method, r.hash));
    if (!o.quiet) std::fprintf(stderr, "[eval] %s %s miou %.4f ece %.4f\n", method.c_str(), d.label().c_str(),
                               out.back().miou, out.back().ece);
  }
  if (o.dump_masks > 0) dump_masks(dir, method, predictor, ev, o.dump_masks, r.hash);
  return out;
}

Predictor model_predictor(const SegNet& model) {
  return [&model](const Tensor& images) { return model.infer(images); };
}

int cmd_eval(const Options& o) {
  static const std::vector<std::string> experiments{"main", "sweep-m", "batch-stats", "entropy", "single"};
  if (std::find(experiments.begin(), experiments.end(), o.experiment) == experiments.end()) {
    throw ConfigError("unknown experiment '" + o.experiment + "' (main, sweep-m, batch-stats, entropy, single)");
  }
  nlohmann::json cfg = base_config(o);
  if (o.n_images >= 0) set_key(cfg, "eval.n_images", o.n_images);
  nlohmann::json inputs = {{"checkpoint", o.checkpoint.empty() ? "" : file_hash(o.checkpoint)}};
  const SegNet model = load_model(o.checkpoint);
  SegNet plain;
  if (o.experiment == "main") {
    if (o.pretrained.empty()) throw ConfigError("--experiment main needs --pretrained");
    plain = load_model(o.pretrained);
    inputs["pretrained"] = file_hash(o.pretrained);
    if (plain.converted()) throw ConfigError("--pretrained must be an unconverted checkpoint");
  }
  const Resolved r =
      resolve("eval", cfg, {{"experiment", o.experiment}, {"inputs", inputs}, {"tag", o.tag}});
  EvalSettings ev = r.config.eval;
  ev.eval.workers = eval_workers(o);
  const fs::path dir = prepare_out(o);
  write_resolved(dir, r);

  std::vector<MetricsReport> reports;
  auto append = [&](std::vector<MetricsReport> more) {
    for (MetricsReport& m : more) reports.push_back(std::move(m));
  };
  if (o.experiment == "main") {
    if (!model.converted()) throw ConfigError("--checkpoint must be a calibrated model for --experiment main");
    SegNet manual = plain;
    manual.convert(ManualM{static_cast<Real>(ev.manual_m)}, 0);
    char mname[32];
    std::snprintf(mname, sizeof mname, "manual-%g", ev.manual_m);
    append(run_method(with_tag("pretrained", o.tag), model_predictor(plain), ev, r, o, dir));
    append(run_method(with_tag(mname, o.tag), model_predictor(manual), ev, r, o, dir));
    append(run_method(with_tag(variant_name(model.variant()), o.tag), model_predictor(model), ev, r, o, dir));
  } else if (o.experiment == "single") {
    const std::string name = model.converted() ? variant_name(model.variant()) : "pretrained";
    append(run_method(with_tag(name, o.tag), model_predictor(model), ev, r, o, dir));
  } else if (o.experiment == "sweep-m") {
    if (model.converted()) throw ConfigError("--experiment sweep-m needs an unconverted checkpoint");
    for (SweepRow& row : sweep_manual_m(model, ev.domains, ev.m_values, ev.eval, r.hash)) {
      row.report.method = with_tag(row.report.method, o.tag);
      if (!o.quiet) std::fprintf(stderr, "[sweep] %s %s miou %.4f\n", row.report.method.c_str(),
                                 row.report.domain.label().c_str(), row.report.miou);
      reports.push_back(std::move(row.report));
    }
  } else if (o.experiment == "batch-stats") {
    if (!model.converted()) throw ConfigError("--experiment batch-stats needs a calibrated checkpoint");
    const auto rows = batch_stats_experiment(model, ev.domains, ev.batch_sizes, ev.eval);
    write_text(dir / "batch_stats.csv", batch_stats_csv(rows, r.hash));
    nlohmann::json doc = report_document(o.experiment, r.hash, {});
    for (const BatchStatsRow& b : rows) {
      doc["batch_stats"].push_back({{"batch_size", b.batch_size}, {"miou", b.miou}, {"ece", b.ece}});
      if (!o.quiet) std::fprintf(stderr, "[batch-stats] batch %zu miou %.4f ece %.4f\n", b.batch_size, b.miou, b.ece);
    }
    write_text(dir / "report.json", doc.dump(2) + "\n");
    return kExitOk;
  } else {
    const std::string base = variant_name(model.variant());
    append(run_method(with_tag(base, o.tag), model_predictor(model), ev, r, o, dir));
    const Predictor adapted = [&](const Tensor& images) {
      return entropy_minimize(model, images, ev.entropy_steps, ev.entropy_lr);
    };
    append(run_method(with_tag(base + "+entropy", o.tag), adapted, ev, r, o, dir));
  }
  write_text(dir / "report.csv", report_csv(reports));
  write_text(dir / "report.json", report_document(o.experiment, r.hash, reports).dump(2) + "\n");
  return kExitOk;
}

int cmd_report(const Options& o) {
  if (o.report_dir.empty()) throw ConfigError("--dir is required");
  const std::string table = markdown_table(load_reports(o.report_dir));
  const fs::path out = o.report_out.empty() ? fs::path(o.report_dir) / "summary.md" : fs::path(o.report_out);
  write_text(out, table);
  std::cout << table;
  return kExitOk;
}

int cmd_config(const Options& o) {
  nlohmann::json cfg = base_config(o);
  parse_config(cfg);
  std::cout << cfg.dump(2) << "\n";
  return kExitOk;
}

void add_common(CLI::App* app, Options& o) {
  app->add_option("--config", o.config_path, "JSON config file (complete; see `instcal config`)");
  app->add_option("--set", o.sets, "Override a dotted config key, e.g. --set pretrain.lr=0.02");
  app->add_option("--seed", o.seed, "Global seed (overrides INSTCAL_SEED)");
  app->add_flag("--quiet", o.quiet, "No progress output");
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Instance-specific BatchNorm calibration on a synthetic segmentation benchmark"};
  app.require_subcommand(1);
  Options o;
  const std::vector<std::string> augs{"default", "randcolor", "augmix", "netperturb"};

  CLI::App* pre = app.add_subcommand("pretrain", "Train a plain BatchNorm model on the source domain");
  add_common(pre, o);
  pre->add_option("--out", o.out, "Output directory")->required();
  pre->add_option("--total-iters", o.total_iters, "Training iterations")->check(CLI::NonNegativeNumber);
  pre->add_option("--aug", o.aug, "Strong augmentation during pretraining")->check(CLI::IsMember(augs));

  CLI::App* tr = app.add_subcommand("train-instcal", "Convert a pretrained model and learn its calibration");
  add_common(tr, o);
  tr->add_option("--checkpoint", o.checkpoint, "Pretrained checkpoint")->required();
  tr->add_option("--out", o.out, "Output directory")->required();
  tr->add_option("--variant", o.variant, "u (unconditional) or c (conditional)")->check(CLI::IsMember({"u", "c"}));
  tr->add_option("--aug", o.aug, "Pseudo-domain augmentation")->check(CLI::IsMember(augs));
  tr->add_option("--basis", o.basis, "Basis count for variant c")->check(CLI::PositiveNumber);
  tr->add_option("--total-iters", o.total_iters, "Training iterations")->check(CLI::NonNegativeNumber);

  CLI::App* ev = app.add_subcommand("eval", "Evaluate checkpoints on the configured domains");
  add_common(ev, o);
  ev->add_option("--experiment", o.experiment, "main, sweep-m, batch-stats, entropy or single");
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint to evaluate")->required();
  ev->add_option("--pretrained", o.pretrained, "Unconverted checkpoint (main experiment)");
  ev->add_option("--out", o.out, "Output directory")->required();
  ev->add_option("--tag", o.tag, "Suffix appended to method names as method@tag");
  ev->add_option("--n-images", o.n_images, "Images per domain")->check(CLI::PositiveNumber);
  ev->add_option("--workers", o.workers, "Evaluation threads (default: all cores)");
  ev->add_option("--dump-masks", o.dump_masks, "Write PPM triptychs for the first N images per domain");

  CLI::App* rep = app.add_subcommand("report", "Aggregate report JSONs into a markdown table");
  rep->add_option("--dir", o.report_dir, "Directory searched recursively for report JSONs")->required();
  rep->add_option("--out", o.report_out, "Markdown output (default <dir>/summary.md)");

  CLI::App* cfg = app.add_subcommand("config", "Print the resolved configuration");
  add_common(cfg, o);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (pre->parsed()) return cmd_pretrain(o);
    if (tr->parsed()) return cmd_train_instcal(o);
    if (ev->parsed()) return cmd_eval(o);
    if (rep->parsed()) return cmd_report(o);
    return cmd_config(o);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const ConversionError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const ReportError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitDiverged;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
}

}  // namespace instcal::cli
