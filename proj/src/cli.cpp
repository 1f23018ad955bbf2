#include "semdistill/cli.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>

#include <CLI11.hpp>
#include <json.hpp>

#include "semdistill/config.hpp"
#include "semdistill/evaluation.hpp"
#include "semdistill/logit_store.hpp"

namespace semdistill {

namespace {

namespace fs = std::filesystem;

std::string join_args(const std::string& prog, const std::vector<std::string>& args) {
  std::string s = prog;
  for (const std::string& a : args) {
    s += " ";
    s += a;
  }
  return s;
}

// Registers every config key as `--<key> <value>` on a subcommand so flags
// double as config keys; overlay() returns only the keys actually given.
struct KeyOptions {
  std::map<std::string, std::string> values;
  std::vector<std::pair<std::string, CLI::Option*>> options;

  void attach(CLI::App* sub, const Config& defaults) {
    for (const auto& [key, value] : defaults.entries()) {
      auto it = values.emplace(key, "").first;
      CLI::Option* opt = sub->add_option("--" + key, it->second);
      opt->default_str(value);
      options.emplace_back(key, opt);
    }
  }

  void alias(CLI::App* sub, const std::string& flag, const std::string& key) {
    options.emplace_back(key, sub->add_option(flag, values.at(key)));
  }

  Config overlay() const {
    Config c;
    for (const auto& [key, opt] : options) {
      if (opt->count() > 0) c.set(key, values.at(key));
    }
    return c;
  }
};

Config effective_config(const std::vector<std::string>& files, const KeyOptions& keys) {
  Config cfg = default_config();
  for (const std::string& f : files) cfg.merge(Config::from_file(f), /*known_only=*/true);
  cfg.merge(keys.overlay(), /*known_only=*/true);
  return cfg;
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  if (s == "teacher_pool") return Split::teacher_pool;
  throw UsageError("unknown split: " + s);
}

ValueDtype parse_dtype(const std::string& s) {
  if (s == "f32") return ValueDtype::f32;
  if (s == "f16") return ValueDtype::f16;
  throw UsageError("store.dtype expects f32 or f16, got '" + s + "'");
}

std::vector<uint64_t> seed_set(int64_t count) {
  if (count < 1) throw InvalidArgumentError("eval.seeds must be positive");
  std::vector<uint64_t> seeds;
  for (int64_t i = 1; i <= count; ++i) seeds.push_back(uint64_t(i));
  return seeds;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
}

RunManifest begin_manifest(const std::string& prog, const std::string& sub,
                           const std::vector<std::string>& args, const Config& cfg,
                           uint64_t seed) {
  RunManifest m;
  m.command_line = join_args(prog, args);
  m.subcommand = sub;
  m.config = cfg;
  m.config_hash = cfg.hash();
  m.seed = seed;
  m.started_at = utc_timestamp();
  return m;
}

void finish_manifest(RunManifest& m, const std::string& dir, std::vector<std::string> outputs) {
  m.finished_at = utc_timestamp();
  m.outputs = std::move(outputs);
  write_run_manifest(m, dir);
}

void check_teacher_alignment(const MlpTeacher& teacher, const SyntheticDataset& ds) {
  if (int64_t(teacher.class_count()) != int64_t(ds.config().class_count)) {
    throw AlignmentError("teacher predicts " + std::to_string(teacher.class_count()) +
                         " classes but the dataset has " +
                         std::to_string(ds.config().class_count));
  }
  if (teacher.input_dim() != ds.config().pixels()) {
    throw AlignmentError("teacher expects " + std::to_string(teacher.input_dim()) +
                         " input values but dataset images have " +
                         std::to_string(ds.config().pixels()));
  }
}

nlohmann::json storage_json(const AblationStorage& s) {
  return nlohmann::json{{"record_count", s.record_count},
                        {"class_count", s.class_count},
                        {"top_k", s.top_k},
                        {"store_file_bytes", s.store_file_bytes},
                        {"store_payload_bytes", s.store_payload_bytes},
                        {"dense_payload_bytes", s.dense_payload_bytes},
                        {"teacher_bytes", s.teacher_bytes},
                        {"payload_ratio", s.payload_ratio},
                        {"storage_ratio", s.storage_ratio}};
}

std::vector<EvalReport> reports_from_cells(const std::vector<EvalCell>& cells) {
  std::vector<EvalReport> reports;
  for (const EvalCell& c : cells) {
    EvalReport* rep = nullptr;
    for (EvalReport& r : reports) {
      if (r.scheme == c.scheme) rep = &r;
    }
    if (rep == nullptr) {
      reports.emplace_back();
      rep = &reports.back();
      rep->scheme = c.scheme;
    }
    rep->cells.push_back(c);
    if (std::find(rep->snr_grid.begin(), rep->snr_grid.end(), c.snr_db) == rep->snr_grid.end()) {
      rep->snr_grid.push_back(c.snr_db);
    }
    if (std::find(rep->seeds.begin(), rep->seeds.end(), c.seed) == rep->seeds.end()) {
      rep->seeds.push_back(c.seed);
    }
  }
  for (EvalReport& r : reports) std::sort(r.snr_grid.begin(), r.snr_grid.end());
  return reports;
}

int run_extract(const std::vector<std::string>& args, const Config& cfg,
                const std::string& teacher_path, const std::string& out_dir, std::ostream& out) {
  SyntheticDataset ds(dataset_from_config(cfg));
  std::unique_ptr<MlpTeacher> teacher = load_teacher(teacher_path);
  check_teacher_alignment(*teacher, ds);
  RunManifest m =
      begin_manifest("semdistill", "extract-logits", args, cfg, cfg.get_u64("dataset.seed"));
  ensure_dir(out_dir);
  const std::string store_path = (fs::path(out_dir) / "logits.fdls").string();
  auto scorer = [&](uint64_t id) { return teacher->scores(ds.get(Split::train, id).image); };
  ExtractSummary es = extract_teacher_logits(
      scorer, uint64_t(ds.size(Split::train)), teacher->class_count(),
      uint32_t(cfg.get_int("train.top_k")), cfg.get_double("loss.temperature"), store_path,
      parse_dtype(cfg.get_string("store.dtype")));
  out << nlohmann::json{{"event", "extract"},
                        {"records", es.record_count},
                        {"payload_bytes", es.payload_bytes},
                        {"file_bytes", es.file_bytes},
                        {"dense_bytes", es.dense_bytes},
                        {"compression_ratio", es.compression_ratio},
                        {"wall_ms", es.wall_ms},
                        {"store", store_path}}
             .dump()
      << "\n";
  finish_manifest(m, out_dir, {store_path});
  return 0;
}

int run_train(const std::vector<std::string>& args, const Config& cfg,
              const std::string& store_path, const std::string& out_dir, std::ostream& out) {
  SyntheticDataset ds(dataset_from_config(cfg));
  DistillConfig dcfg = distill_from_config(cfg);
  EncoderConfig mcfg = model_from_config(cfg);
  RunManifest m = begin_manifest("semdistill", "train", args, cfg, dcfg.seed);
  ensure_dir(out_dir);
  const std::string log_path = (fs::path(out_dir) / "train_log.ndjson").string();
  std::ofstream log(log_path, std::ios::binary);
  if (!log) throw IoError("cannot open for write: " + log_path);

  StudentModel model(mcfg, cfg.get_u64("model.seed"));
  TrainResult tr;
  if (dcfg.label_mode == LabelMode::teacher_soft) {
    if (store_path.empty()) {
      throw AlignmentError(
          "label_mode=teacher_soft trains from pre-stored logits aligned to the train split: "
          "pass --store <file> produced by `semdistill extract-logits` over this dataset");
    }
    tr = train_distill(dcfg, store_path, ds, model, &log);
  } else {
    tr = train_e2e_baseline(dcfg, ds, model, &log);
  }
  const std::string ckpt_path = (fs::path(out_dir) / "ckpt.bin").string();
  save_checkpoint(ckpt_path, model);
  out << nlohmann::json{{"event", "train"},
                        {"label_mode", label_mode_name(dcfg.label_mode)},
                        {"steps", tr.records.size()},
                        {"final_loss", tr.final_loss},
                        {"mean_epoch_ms", tr.mean_epoch_wall_ms},
                        {"resident_bytes", tr.resident_bytes},
                        {"ckpt", ckpt_path}}
             .dump()
      << "\n";
  finish_manifest(m, out_dir, {ckpt_path, log_path});
  return 0;
}

int run_eval(const std::vector<std::string>& args, const Config& cfg, const std::string& ckpt_path,
             const std::string& out_dir, std::ostream& out) {
  std::unique_ptr<StudentModel> model = load_checkpoint(ckpt_path);
  SyntheticDataset ds(dataset_from_config(cfg));
  const int64_t seed_count = cfg.get_int("eval.seeds");
  RunManifest m = begin_manifest("semdistill", "eval", args, cfg, uint64_t(seed_count));
  EvalReport rep = eval_accuracy_vs_snr(
      *model, ds, parse_split(cfg.get_string("eval.split")), cfg.get_double_list("eval.snr_grid"),
      seed_set(seed_count), cfg.get_string("eval.scheme"), cfg.get_int("eval.batch"),
      cfg.get_int("eval.max_samples"), cfg.get_bool("eval.adaptive"));
  ReportPaths paths = emit_report({rep}, out_dir, "accuracy_vs_snr");
  nlohmann::json grid = nlohmann::json::array();
  for (double snr : rep.snr_grid) {
    grid.push_back({{"snr_db", snr}, {"top1", rep.mean_at(snr)}});
  }
  out << nlohmann::json{{"event", "eval"},
                        {"scheme", rep.scheme},
                        {"grid", grid},
                        {"csv", paths.csv_path},
                        {"svg", paths.svg_path}}
             .dump()
      << "\n";
  finish_manifest(m, out_dir, {paths.csv_path, paths.svg_path});
  return 0;
}

int run_report(const std::vector<std::string>& args, const Config& cfg, const std::string& in_dir,
               std::ostream& out) {
  if (!fs::is_directory(in_dir)) throw IoError("--in is not a directory: " + in_dir);
  const std::string out_dir = (fs::path(in_dir) / "report").string();
  RunManifest m = begin_manifest("semdistill", "report", args, cfg, 0);

  std::vector<std::string> csv_files;
  for (const auto& entry : fs::directory_iterator(in_dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".csv") {
      csv_files.push_back(entry.path().string());
    }
  }
  std::sort(csv_files.begin(), csv_files.end());

  std::vector<std::string> outputs;
  int64_t figures = 0;
  for (const std::string& file : csv_files) {
    std::vector<EvalCell> cells;
    try {
      cells = read_eval_csv(file);
    } catch (const FormatError&) {
      continue;  // not an evaluation CSV
    }
    if (cells.empty()) continue;
    ensure_dir(out_dir);
    const std::string svg_path =
        (fs::path(out_dir) / (fs::path(file).stem().string() + ".svg")).string();
    write_accuracy_svg(reports_from_cells(cells), svg_path);
    outputs.push_back(svg_path);
    ++figures;
  }
  if (figures == 0) {
    throw DegenerateInputError("no evaluation CSVs found in " + in_dir);
  }
  out << nlohmann::json{{"event", "report"}, {"figures", figures}, {"out", out_dir}}.dump()
      << "\n";
  finish_manifest(m, out_dir, outputs);
  return 0;
}

int run_ablate(const std::vector<std::string>& args, const Config& cfg,
               const std::string& teacher_path, const std::string& out_dir, std::ostream& out) {
  SyntheticDataset ds(dataset_from_config(cfg));
  std::unique_ptr<MlpTeacher> teacher = load_teacher(teacher_path);
  check_teacher_alignment(*teacher, ds);
  DistillConfig dcfg = distill_from_config(cfg);
  EncoderConfig mcfg = model_from_config(cfg);
  RunManifest m = begin_manifest("semdistill", "ablate", args, cfg, dcfg.seed);
  ensure_dir(out_dir);
  const std::string log_path = (fs::path(out_dir) / "ablate_log.ndjson").string();
  std::ofstream log(log_path, std::ios::binary);
  if (!log) throw IoError("cannot open for write: " + log_path);

  AblationReport rep = ablation_fdm(ds, *teacher, dcfg, mcfg, out_dir, &log);

  // Storage at a language-model-like class count: a training-free prototype
  // teacher supplies wide posteriors without a wide dataset.
  const DatasetConfig& d = ds.config();
  PrototypeTeacher proto(uint32_t(cfg.get_int("ablate.wide_classes")), d.channels, d.height,
                         d.width, cfg.get_double("ablate.wide_tau"),
                         cfg.get_u64("ablate.wide_seed"));
  const double wide_noise = cfg.get_double("ablate.wide_noise");
  const std::string wide_store = (fs::path(out_dir) / "wide_store.fdls").string();
  AblationStorage wide = measure_storage_ablation(
      proto, [&](uint64_t id) { return proto.sample_image(id, wide_noise); },
      uint64_t(cfg.get_int("ablate.wide_count")), uint32_t(cfg.get_int("ablate.wide_topk")),
      cfg.get_double("loss.temperature"), wide_store);

  const std::string table_path = (fs::path(out_dir) / "ablation.csv").string();
  {
    std::ofstream table(table_path, std::ios::binary);
    if (!table) throw IoError("cannot open for write: " + table_path);
    table << rep.to_table();
  }
  const std::string json_path = (fs::path(out_dir) / "ablation.json").string();
  nlohmann::json j{{"timing",
                    {{"fdm_epoch_ms", rep.fdm_epoch_ms},
                     {"live_epoch_ms", rep.live_epoch_ms},
                     {"time_ratio", rep.time_ratio},
                     {"fdm_final_loss", rep.fdm_final_loss},
                     {"live_final_loss", rep.live_final_loss}}},
                   {"storage", storage_json(rep.storage)},
                   {"wide_storage", storage_json(wide)},
                   {"note",
                    "payload_ratio compares compressed records against dense f32 posteriors "
                    "only; whole-system ratios that also count source images and teacher "
                    "weights measure a different quantity and are not directly comparable"}};
  {
    std::ofstream jf(json_path, std::ios::binary);
    if (!jf) throw IoError("cannot open for write: " + json_path);
    jf << j.dump(2) << "\n";
  }
  out << nlohmann::json{{"event", "ablate"},
                        {"time_ratio", rep.time_ratio},
                        {"payload_ratio", rep.storage.payload_ratio},
                        {"wide_payload_ratio", wide.payload_ratio},
                        {"table", table_path},
                        {"json", json_path}}
             .dump()
      << "\n";
  finish_manifest(m, out_dir, {table_path, json_path, wide_store});
  return 0;
}

int parse_and_run(CLI::App& app, const std::vector<std::string>& args, std::ostream& out,
                  std::ostream& err, const std::function<int()>& runner) {
  std::vector<const char*> argv;
  argv.push_back(app.get_name().c_str());
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(int(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    err << "Run with --help for usage.\n";
    return int(ExitCode::usage);
  }
  try {
    return runner();
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return int(e.code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"task-oriented semantic communication workbench"};
  app.name("semdistill");
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(0, 1);
  const Config defaults = default_config();

  struct SubState {
    CLI::App* sub = nullptr;
    KeyOptions keys;
    std::vector<std::string> config_files;
    std::string teacher, store, ckpt, in_dir, out_dir;
  };
  SubState ex, tr, ev, re, ab;

  auto common = [&](SubState& s, CLI::App* sub) {
    s.sub = sub;
    sub->add_option("--config", s.config_files, "config file(s), later files win");
    s.keys.attach(sub, defaults);
  };

  common(ex, app.add_subcommand("extract-logits",
                                "store a teacher's compressed top-K probabilities"));
  ex.sub->add_option("--teacher", ex.teacher, "teacher checkpoint")->required();
  ex.sub->add_option("--out", ex.out_dir, "output directory")->required();

  common(tr, app.add_subcommand("train", "train a student (distilled or baseline)"));
  tr.sub->add_option("--store", tr.store, "pre-stored logits (teacher_soft mode)");
  tr.sub->add_option("--out", tr.out_dir, "output directory")->required();

  common(ev, app.add_subcommand("eval", "accuracy of a checkpoint across an SNR grid"));
  ev.sub->add_option("--ckpt", ev.ckpt, "student checkpoint")->required();
  ev.sub->add_option("--out", ev.out_dir, "output directory")->required();
  ev.keys.alias(ev.sub, "--snr-grid", "eval.snr_grid");
  ev.keys.alias(ev.sub, "--seeds", "eval.seeds");

  common(re, app.add_subcommand("report", "re-render plots from emitted CSVs"));
  re.sub->add_option("--in", re.in_dir, "directory holding evaluation CSVs")->required();

  common(ab, app.add_subcommand("ablate", "storage and wall-time with/without the store"));
  ab.sub->add_option("--teacher", ab.teacher, "teacher checkpoint")->required();
  ab.sub->add_option("--out", ab.out_dir, "output directory")->required();

  return parse_and_run(app, args, out, err, [&]() -> int {
    if (ex.sub->parsed()) {
      return run_extract(args, effective_config(ex.config_files, ex.keys), ex.teacher, ex.out_dir,
                         out);
    }
    if (tr.sub->parsed()) {
      return run_train(args, effective_config(tr.config_files, tr.keys), tr.store, tr.out_dir,
                       out);
    }
    if (ev.sub->parsed()) {
      return run_eval(args, effective_config(ev.config_files, ev.keys), ev.ckpt, ev.out_dir, out);
    }
    if (re.sub->parsed()) {
      return run_report(args, effective_config(re.config_files, re.keys), re.in_dir, out);
    }
    if (ab.sub->parsed()) {
      return run_ablate(args, effective_config(ab.config_files, ab.keys), ab.teacher, ab.out_dir,
                        out);
    }
    err << app.help();
    return int(ExitCode::usage);
  });
}

int teacher_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"desk teacher companion: train and inspect MLP teachers"};
  app.name("semdistill-teacher");
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(0, 1);
  const Config defaults = default_config();

  CLI::App* train_sub = app.add_subcommand("train", "train a teacher on the clean pool split");
  std::vector<std::string> train_files;
  KeyOptions train_keys;
  std::string train_out;
  train_sub->add_option("--config", train_files, "config file(s), later files win");
  train_keys.attach(train_sub, defaults);
  train_sub->add_option("--out", train_out, "output directory")->required();

  CLI::App* eval_sub = app.add_subcommand("eval", "clean-split accuracy of a teacher");
  std::vector<std::string> eval_files;
  KeyOptions eval_keys;
  std::string eval_teacher;
  eval_sub->add_option("--config", eval_files, "config file(s), later files win");
  eval_keys.attach(eval_sub, defaults);
  eval_sub->add_option("--teacher", eval_teacher, "teacher checkpoint")->required();

  return parse_and_run(app, args, out, err, [&]() -> int {
    if (train_sub->parsed()) {
      Config cfg = effective_config(train_files, train_keys);
      SyntheticDataset ds(dataset_from_config(cfg));
      TeacherTrainConfig tcfg = teacher_train_from_config(cfg);
      RunManifest m = begin_manifest("semdistill-teacher", "teacher-train", args, cfg, tcfg.seed);
      ensure_dir(train_out);
      const std::string log_path = (fs::path(train_out) / "teacher_log.ndjson").string();
      std::ofstream log(log_path, std::ios::binary);
      if (!log) throw IoError("cannot open for write: " + log_path);
      std::unique_ptr<MlpTeacher> teacher = train_desk_teacher(ds, tcfg, &log);
      const std::string ckpt_path = (fs::path(train_out) / "teacher.bin").string();
      save_teacher(*teacher, ckpt_path);
      const double acc = teacher_accuracy(*teacher, ds, Split::test);
      out << nlohmann::json{{"event", "teacher_train"},
                            {"test_accuracy", acc},
                            {"weight_bytes", teacher->weight_bytes()},
                            {"ckpt", ckpt_path}}
                 .dump()
          << "\n";
      finish_manifest(m, train_out, {ckpt_path, log_path});
      return 0;
    }
    if (eval_sub->parsed()) {
      Config cfg = effective_config(eval_files, eval_keys);
      SyntheticDataset ds(dataset_from_config(cfg));
      std::unique_ptr<MlpTeacher> teacher = load_teacher(eval_teacher);
      check_teacher_alignment(*teacher, ds);
      const double acc = teacher_accuracy(*teacher, ds, Split::test);
      out << nlohmann::json{{"event", "teacher_eval"}, {"test_accuracy", acc}}.dump() << "\n";
      return 0;
    }
    err << app.help();
    return int(ExitCode::usage);
  });
}

}  // namespace semdistill
