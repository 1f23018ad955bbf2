#include "semdistill/evaluation.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "semdistill/channel.hpp"
#include "semdistill/logit_store.hpp"

namespace semdistill {

namespace {

constexpr uint64_t kEvalCellTag = 0xeba1c311ULL;
constexpr uint64_t kSweepModelTag = 0x5feed5eedULL;
constexpr const char* kCsvHeader = "scheme,snr_db,seed,top1,n";

// Shortest decimal form that parses back to the same double.
std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s, const std::string& path) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw FormatError("bad number '" + s + "' in " + path);
  }
  return v;
}

uint64_t parse_u64(const std::string& s, const std::string& path) {
  uint64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw FormatError("bad integer '" + s + "' in " + path);
  }
  return v;
}

int64_t argmax_row(const Tensor& probs, int64_t row, int64_t classes) {
  const double* p = probs.data() + row * classes;
  int64_t best = 0;
  for (int64_t j = 1; j < classes; ++j) {
    if (p[j] > p[best]) best = j;
  }
  return best;
}

void sort_unique(std::vector<double>& v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
}

}  // namespace

double binomial_halfwidth(double top1, int64_t n) {
  if (n < 1) throw InvalidArgumentError("halfwidth needs a positive sample count");
  return 1.96 * std::sqrt(top1 * (1.0 - top1) / double(n));
}

double EvalReport::mean_at(double snr_db) const {
  double sum = 0.0;
  int64_t count = 0;
  for (const EvalCell& c : cells) {
    if (c.snr_db == snr_db) {
      sum += c.top1;
      ++count;
    }
  }
  if (count == 0) throw InvalidArgumentError("no cells at the requested snr");
  return sum / double(count);
}

double EvalReport::mean_overall() const {
  if (cells.empty()) throw InvalidArgumentError("report has no cells");
  double sum = 0.0;
  for (const EvalCell& c : cells) sum += c.top1;
  return sum / double(cells.size());
}

EvalReport eval_accuracy_vs_snr(const StudentModel& model, const SyntheticDataset& ds, Split split,
                                std::vector<double> snr_grid, std::vector<uint64_t> seeds,
                                const std::string& scheme, int64_t batch_size, int64_t max_samples,
                                bool adaptive) {
  if (snr_grid.empty()) throw InvalidArgumentError("snr grid is empty");
  if (seeds.empty()) throw InvalidArgumentError("seed set is empty");
  if (batch_size < 1) throw InvalidArgumentError("batch_size must be positive");
  const int64_t classes = model.config().class_count;
  if (classes != ds.config().class_count) {
    throw InvalidArgumentError("model predicts " + std::to_string(classes) +
                               " classes but the dataset has " +
                               std::to_string(ds.config().class_count));
  }
  int64_t total = ds.size(split);
  if (max_samples >= 0) total = std::min(total, max_samples);
  if (total == 0) throw InvalidArgumentError("evaluation split is empty");
  sort_unique(snr_grid);

  EvalReport report;
  report.scheme = scheme;
  report.snr_grid = snr_grid;
  report.seeds = seeds;
  for (double snr : snr_grid) {
    ChannelState state = awgn_state(snr);
    for (uint64_t seed : seeds) {
      Rng rng(derive_seed(seed, kEvalCellTag, std::bit_cast<uint64_t>(snr)));
      int64_t correct = 0;
      for (int64_t start = 0; start < total; start += batch_size) {
        const int64_t stop = std::min(total, start + batch_size);
        std::vector<uint64_t> idx;
        idx.reserve(size_t(stop - start));
        for (int64_t i = start; i < stop; ++i) idx.push_back(uint64_t(i));
        Tensor x = stack_images(ds, split, idx);
        StudentModel::ForwardResult fr = model.student_forward(x, snr, state, rng, adaptive);
        for (int64_t r = 0; r < stop - start; ++r) {
          if (argmax_row(fr.probs, r, classes) ==
              int64_t(ds.clean_label(split, uint64_t(start + r)))) {
            ++correct;
          }
        }
      }
      EvalCell cell;
      cell.scheme = scheme;
      cell.snr_db = snr;
      cell.seed = seed;
      cell.top1 = double(correct) / double(total);
      cell.n = total;
      report.cells.push_back(std::move(cell));
    }
  }
  return report;
}

uint64_t sweep_model_seed(uint64_t train_seed) {
  return derive_seed(train_seed, kSweepModelTag);
}

SizeSweepReport eval_vs_training_size(const DistillConfig& base_cfg, const EncoderConfig& model_cfg,
                                      const SyntheticDataset& ds, const std::string& store_path,
                                      const std::vector<double>& fractions,
                                      const std::vector<double>& snr_grid,
                                      const std::vector<uint64_t>& train_seeds, std::ostream* log,
                                      int64_t eval_max_samples) {
  if (fractions.empty()) throw InvalidArgumentError("size grid is empty");
  if (snr_grid.empty()) throw InvalidArgumentError("snr grid is empty");
  if (train_seeds.empty()) throw InvalidArgumentError("seed set is empty");
  const int64_t n_train = ds.size(Split::train);

  SizeSweepReport report;
  for (double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) {
      throw InvalidArgumentError("size fraction must lie in (0, 1], got " + fmt_double(f));
    }
    int64_t size = std::llround(f * double(n_train));
    report.sizes.push_back(std::clamp<int64_t>(size, 1, n_train));
  }
  std::sort(report.sizes.begin(), report.sizes.end());
  report.sizes.erase(std::unique(report.sizes.begin(), report.sizes.end()), report.sizes.end());

  std::vector<double> grid = snr_grid;
  sort_unique(grid);
  int64_t eval_n = ds.size(Split::test);
  if (eval_max_samples >= 0) eval_n = std::min(eval_n, eval_max_samples);

  for (int64_t size : report.sizes) {
    for (const char* arm : {kArmDistilled, kArmBaseline}) {
      const bool distilled = std::string(arm) == kArmDistilled;
      std::vector<double> pooled(grid.size(), 0.0);
      for (uint64_t seed : train_seeds) {
        DistillConfig cfg = base_cfg;
        cfg.seed = seed;
        cfg.max_train_samples = size;
        cfg.label_mode = distilled ? LabelMode::teacher_soft : LabelMode::ground_truth;
        StudentModel model(model_cfg, sweep_model_seed(seed));
        TrainResult tr = distilled ? train_distill(cfg, store_path, ds, model)
                                   : train_e2e_baseline(cfg, ds, model);
        report.runs.push_back({size, arm, seed, tr.final_loss});

        const std::string scheme = std::string(arm) + "@" + std::to_string(size);
        EvalReport er = eval_accuracy_vs_snr(model, ds, Split::test, grid, {seed}, scheme, 64,
                                             eval_max_samples, cfg.adaptive);
        for (size_t i = 0; i < grid.size(); ++i) pooled[i] += er.cells[i].top1;
        report.cells.insert(report.cells.end(), er.cells.begin(), er.cells.end());
        if (log) {
          nlohmann::json j{{"event", "sweep_run"},
                           {"size", size},
                           {"arm", arm},
                           {"seed", seed},
                           {"final_loss", tr.final_loss},
                           {"mean_top1", er.mean_overall()}};
          (*log) << j.dump() << "\n";
        }
      }
      for (size_t i = 0; i < grid.size(); ++i) {
        SizeSweepRow row;
        row.size = size;
        row.arm = arm;
        row.snr_db = grid[i];
        row.top1 = pooled[i] / double(train_seeds.size());
        row.n = eval_n * int64_t(train_seeds.size());
        report.rows.push_back(std::move(row));
      }
    }
  }
  return report;
}

AblationStorage measure_storage_ablation(const Teacher& teacher,
                                         const std::function<Tensor(uint64_t)>& image_for,
                                         uint64_t count, uint32_t top_k, double temperature,
                                         const std::string& store_path) {
  if (count == 0) throw InvalidArgumentError("storage measurement needs at least one sample");
  auto scorer = [&](uint64_t id) { return teacher.scores(image_for(id)); };
  ExtractSummary es = extract_teacher_logits(scorer, count, uint32_t(teacher.class_count()), top_k,
                                             temperature, store_path);
  AblationStorage s;
  s.record_count = es.record_count;
  s.class_count = uint32_t(teacher.class_count());
  s.top_k = top_k;
  s.store_file_bytes = es.file_bytes;
  s.store_payload_bytes = es.payload_bytes;
  s.dense_payload_bytes = es.dense_bytes;
  s.teacher_bytes = teacher.weight_bytes();
  s.payload_ratio = double(s.dense_payload_bytes) / double(s.store_payload_bytes);
  s.storage_ratio =
      double(s.teacher_bytes + s.dense_payload_bytes) / double(s.store_payload_bytes);
  return s;
}

std::string AblationReport::to_table() const {
  std::ostringstream out;
  out << "arm,storage_bytes,epoch_ms\n";
  out << "with_fdm," << storage.store_payload_bytes << "," << fmt_double(fdm_epoch_ms) << "\n";
  out << "without_fdm," << (storage.teacher_bytes + storage.dense_payload_bytes) << ","
      << fmt_double(live_epoch_ms) << "\n";
  return out.str();
}

AblationReport ablation_fdm(const SyntheticDataset& ds, const Teacher& teacher,
                            const DistillConfig& cfg, const EncoderConfig& model_cfg,
                            const std::string& work_dir, std::ostream* log) {
  DistillConfig run_cfg = cfg;
  run_cfg.label_mode = LabelMode::teacher_soft;
  run_cfg.validate(teacher.class_count());

  std::error_code ec;
  std::filesystem::create_directories(work_dir, ec);
  if (ec) throw IoError("cannot create " + work_dir + ": " + ec.message());
  const std::string store_path = (std::filesystem::path(work_dir) / "ablation_store.fdls").string();

  AblationReport report;
  // The store covers the whole train split: training draws its subset from a
  // permutation of the full index range.
  auto image_for = [&](uint64_t id) { return ds.get(Split::train, id).image; };
  report.storage = measure_storage_ablation(teacher, image_for, uint64_t(ds.size(Split::train)),
                                            run_cfg.top_k, run_cfg.temperature, store_path);

  StudentModel fdm(model_cfg, sweep_model_seed(run_cfg.seed));
  StudentModel live(model_cfg, sweep_model_seed(run_cfg.seed));
  TrainResult tf = train_distill(run_cfg, store_path, ds, fdm);
  TrainResult tl = train_with_teacher_in_loop(run_cfg, teacher, ds, live);

  report.fdm_epoch_ms = tf.mean_epoch_wall_ms;
  report.live_epoch_ms = tl.mean_epoch_wall_ms;
  report.time_ratio = tl.mean_epoch_wall_ms / tf.mean_epoch_wall_ms;
  report.fdm_final_loss = tf.final_loss;
  report.live_final_loss = tl.final_loss;
  if (log) {
    nlohmann::json j{{"event", "ablation"},
                     {"payload_ratio", report.storage.payload_ratio},
                     {"storage_ratio", report.storage.storage_ratio},
                     {"time_ratio", report.time_ratio},
                     {"fdm_final_loss", report.fdm_final_loss},
                     {"live_final_loss", report.live_final_loss}};
    (*log) << j.dump() << "\n";
  }
  return report;
}

void write_eval_csv(const std::vector<EvalCell>& cells, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for write: " + path);
  out << kCsvHeader << "\n";
  for (const EvalCell& c : cells) {
    if (c.scheme.find_first_of(",\n\r") != std::string::npos) {
      throw InvalidArgumentError("scheme name may not contain commas or newlines: " + c.scheme);
    }
    out << c.scheme << "," << fmt_double(c.snr_db) << "," << c.seed << ","
        << fmt_double(c.top1) << "," << c.n << "\n";
  }
  out.flush();
  if (!out) throw IoError("write failed: " + path);
}

std::vector<EvalCell> read_eval_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) {
    throw FormatError("missing header '" + std::string(kCsvHeader) + "' in " + path);
  }
  std::vector<EvalCell> cells;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> parts;
    size_t start = 0;
    while (true) {
      size_t comma = line.find(',', start);
      if (comma == std::string::npos) {
        parts.push_back(line.substr(start));
        break;
      }
      parts.push_back(line.substr(start, comma - start));
      start = comma + 1;
    }
    if (parts.size() != 5) {
      throw FormatError("expected 5 fields, got " + std::to_string(parts.size()) + " in " + path);
    }
    EvalCell c;
    c.scheme = parts[0];
    c.snr_db = parse_double(parts[1], path);
    c.seed = parse_u64(parts[2], path);
    c.top1 = parse_double(parts[3], path);
    c.n = int64_t(parse_u64(parts[4], path));
    cells.push_back(std::move(c));
  }
  return cells;
}

void write_accuracy_svg(const std::vector<EvalReport>& reports, const std::string& path) {
  static const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                   "#ff7f0e", "#8c564b"};
  constexpr double kW = 680, kH = 420, kLeft = 64, kRight = 170, kTop = 28, kBottom = 52;
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;

  std::vector<double> all_snr;
  for (const EvalReport& r : reports) {
    all_snr.insert(all_snr.end(), r.snr_grid.begin(), r.snr_grid.end());
  }
  sort_unique(all_snr);
  double lo = all_snr.empty() ? -1.0 : all_snr.front();
  double hi = all_snr.empty() ? 1.0 : all_snr.back();
  if (hi - lo < 1e-12) {
    lo -= 1.0;
    hi += 1.0;
  }
  auto sx = [&](double snr) { return kLeft + (snr - lo) / (hi - lo) * pw; };
  auto sy = [&](double acc) { return kTop + (1.0 - acc) * ph; };
  auto at = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return std::string(buf);
  };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
      << "\" viewBox=\"0 0 " << kW << " " << kH << "\">\n";
  svg << "<rect width=\"" << kW << "\" height=\"" << kH << "\" fill=\"#ffffff\"/>\n";
  for (double g : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    svg << "<line x1=\"" << at(kLeft) << "\" y1=\"" << at(sy(g)) << "\" x2=\"" << at(kLeft + pw)
        << "\" y2=\"" << at(sy(g)) << "\" stroke=\"#dddddd\"/>\n";
    svg << "<text x=\"" << at(kLeft - 8) << "\" y=\"" << at(sy(g) + 4)
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\">" << g
        << "</text>\n";
  }
  for (double snr : all_snr) {
    char label[32];
    std::snprintf(label, sizeof(label), "%g", snr);
    svg << "<line x1=\"" << at(sx(snr)) << "\" y1=\"" << at(kTop + ph) << "\" x2=\"" << at(sx(snr))
        << "\" y2=\"" << at(kTop + ph + 5) << "\" stroke=\"#333333\"/>\n";
    svg << "<text x=\"" << at(sx(snr)) << "\" y=\"" << at(kTop + ph + 20)
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << label
        << "</text>\n";
  }
  svg << "<line x1=\"" << at(kLeft) << "\" y1=\"" << at(kTop + ph) << "\" x2=\"" << at(kLeft + pw)
      << "\" y2=\"" << at(kTop + ph) << "\" stroke=\"#333333\"/>\n";
  svg << "<line x1=\"" << at(kLeft) << "\" y1=\"" << at(kTop) << "\" x2=\"" << at(kLeft)
      << "\" y2=\"" << at(kTop + ph) << "\" stroke=\"#333333\"/>\n";
  svg << "<text x=\"" << at(kLeft + pw / 2) << "\" y=\"" << at(kH - 12)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">SNR (dB)"
      << "</text>\n";
  svg << "<text x=\"16\" y=\"" << at(kTop + ph / 2)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" "
         "transform=\"rotate(-90 16 "
      << at(kTop + ph / 2) << ")\">top-1 accuracy</text>\n";

  for (size_t i = 0; i < reports.size(); ++i) {
    const EvalReport& r = reports[i];
    const char* color = kPalette[i % (sizeof(kPalette) / sizeof(kPalette[0]))];
    std::ostringstream points;
    for (double snr : r.snr_grid) {
      points << at(sx(snr)) << "," << at(sy(r.mean_at(snr))) << " ";
    }
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\""
        << points.str() << "\"/>\n";
    for (double snr : r.snr_grid) {
      svg << "<circle cx=\"" << at(sx(snr)) << "\" cy=\"" << at(sy(r.mean_at(snr)))
          << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    }
    const double ly = kTop + 16 + 20 * double(i);
    svg << "<rect x=\"" << at(kLeft + pw + 14) << "\" y=\"" << at(ly - 9)
        << "\" width=\"12\" height=\"12\" fill=\"" << color << "\"/>\n";
    svg << "<text x=\"" << at(kLeft + pw + 32) << "\" y=\"" << at(ly + 2)
        << "\" font-family=\"sans-serif\" font-size=\"12\">" << r.scheme << "</text>\n";
  }
  svg << "</svg>\n";

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for write: " + path);
  out << svg.str();
  out.flush();
  if (!out) throw IoError("write failed: " + path);
}

ReportPaths emit_report(const std::vector<EvalReport>& reports, const std::string& out_dir,
                        const std::string& name) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());
  ReportPaths paths;
  paths.csv_path = (std::filesystem::path(out_dir) / (name + ".csv")).string();
  paths.svg_path = (std::filesystem::path(out_dir) / (name + ".svg")).string();
  std::vector<EvalCell> cells;
  for (const EvalReport& r : reports) cells.insert(cells.end(), r.cells.begin(), r.cells.end());
  write_eval_csv(cells, paths.csv_path);
  write_accuracy_svg(reports, paths.svg_path);
  return paths;
}

}  // namespace semdistill
