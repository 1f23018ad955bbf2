#pragma once

// Result surfaces: accuracy vs. SNR, accuracy vs. training-set size, and the
// pre-stored-logits ablation (storage + wall-time), plus CSV/SVG emission.

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "semdistill/dataset.hpp"
#include "semdistill/model.hpp"
#include "semdistill/teacher.hpp"
#include "semdistill/training.hpp"

namespace semdistill {

// 95% normal-approximation halfwidth of a binomial proportion.
double binomial_halfwidth(double top1, int64_t n);

// One accuracy measurement: a (scheme, snr, seed) cell evaluated over n
// samples.
struct EvalCell {
  std::string scheme;
  double snr_db = 0.0;
  uint64_t seed = 0;
  double top1 = 0.0;
  int64_t n = 0;

  double halfwidth() const { return binomial_halfwidth(top1, n); }
};

// Accuracy-vs-SNR surface for one scheme. Cells are grouped by SNR (grid
// ascending), then by seed in the order given.
struct EvalReport {
  std::string scheme;
  std::vector<double> snr_grid;
  std::vector<uint64_t> seeds;
  std::vector<EvalCell> cells;

  // Mean top-1 over seeds at one grid point / over the whole grid.
  double mean_at(double snr_db) const;
  double mean_overall() const;
};

// Evaluates top-1 accuracy of `model` on `split` at every (snr, seed) cell.
// Each cell owns its noise stream, derived from (seed, snr bits), so adding
// grid points never perturbs existing cells. `max_samples` clips the split
// (-1 = all); `adaptive` mirrors the training-time gate setting.
EvalReport eval_accuracy_vs_snr(const StudentModel& model, const SyntheticDataset& ds, Split split,
                                std::vector<double> snr_grid, std::vector<uint64_t> seeds,
                                const std::string& scheme = "student", int64_t batch_size = 64,
                                int64_t max_samples = -1, bool adaptive = true);

// ---------------------------------------------------------------------------
// Accuracy vs. training-set size
// ---------------------------------------------------------------------------

struct SizeSweepRow {
  int64_t size = 0;  // training samples used
  std::string arm;   // "distilled" or "baseline"
  double snr_db = 0.0;
  double top1 = 0.0;  // pooled over train seeds
  int64_t n = 0;      // total predictions pooled
};

struct SizeSweepRun {
  int64_t size = 0;
  std::string arm;
  uint64_t seed = 0;
  double final_loss = 0.0;
};

struct SizeSweepReport {
  std::vector<int64_t> sizes;        // ascending; nested prefixes of one permutation
  std::vector<SizeSweepRow> rows;    // one per (size, arm, snr)
  std::vector<SizeSweepRun> runs;    // one per (size, arm, seed)
  std::vector<EvalCell> cells;       // one per (size, arm, snr, seed)
};

// Model initialization seed used for every run of a sweep with training seed
// `train_seed` (shared across arms and sizes so comparisons start from
// identical weights).
uint64_t sweep_model_seed(uint64_t train_seed);

inline constexpr const char* kArmDistilled = "distilled";
inline constexpr const char* kArmBaseline = "baseline";

// Trains a fresh model per (size, arm, seed) — distilled from `store_path`
// versus end-to-end baseline — and evaluates each on the test split over
// `snr_grid`. Sizes are fractions in (0,1] of the train split; subsets are
// nested prefixes of the dataset-keyed permutation, so fraction 1.0
// reproduces the standard run exactly.
SizeSweepReport eval_vs_training_size(const DistillConfig& base_cfg, const EncoderConfig& model_cfg,
                                      const SyntheticDataset& ds, const std::string& store_path,
                                      const std::vector<double>& fractions,
                                      const std::vector<double>& snr_grid,
                                      const std::vector<uint64_t>& train_seeds,
                                      std::ostream* log = nullptr, int64_t eval_max_samples = -1);

// ---------------------------------------------------------------------------
// Pre-stored-logits ablation
// ---------------------------------------------------------------------------

struct AblationStorage {
  uint64_t record_count = 0;
  uint32_t class_count = 0;
  uint32_t top_k = 0;
  uint64_t store_file_bytes = 0;     // header + payload on disk
  uint64_t store_payload_bytes = 0;  // record_count * (8 + 8K)
  uint64_t dense_payload_bytes = 0;  // record_count * 4C
  uint64_t teacher_bytes = 0;        // teacher weights resident without the store
  double payload_ratio = 0.0;        // dense / store payload
  double storage_ratio = 0.0;        // (teacher + dense) / store payload
};

// Extracts a top-K store for `count` images supplied by `image_for` and
// compares its payload against dense f32 logits and the resident teacher.
AblationStorage measure_storage_ablation(const Teacher& teacher,
                                         const std::function<Tensor(uint64_t)>& image_for,
                                         uint64_t count, uint32_t top_k, double temperature,
                                         const std::string& store_path);

struct AblationReport {
  AblationStorage storage;
  double fdm_epoch_ms = 0.0;
  double live_epoch_ms = 0.0;
  double time_ratio = 0.0;  // live / fdm
  double fdm_final_loss = 0.0;
  double live_final_loss = 0.0;

  // Two-row CSV table: storage bytes and per-epoch wall time for each arm.
  std::string to_table() const;
};

// Runs both training arms (pre-stored logits vs. teacher-in-the-loop) under
// one config and measures storage plus per-epoch wall time. Fresh models with
// identical initialization; the arms optimize the same objective, so their
// final losses agree and the ratios isolate the storage mechanism.
AblationReport ablation_fdm(const SyntheticDataset& ds, const Teacher& teacher,
                            const DistillConfig& cfg, const EncoderConfig& model_cfg,
                            const std::string& work_dir, std::ostream* log = nullptr);

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

// Writes one row per cell: `scheme,snr_db,seed,top1,n`, doubles in shortest
// exact form; with no cells the file holds only the header.
void write_eval_csv(const std::vector<EvalCell>& cells, const std::string& path);

// Parses a file produced by write_eval_csv; the roundtrip is bit-exact.
std::vector<EvalCell> read_eval_csv(const std::string& path);

// Renders one polyline per report (per-SNR mean over seeds) into a
// self-contained SVG.
void write_accuracy_svg(const std::vector<EvalReport>& reports, const std::string& path);

struct ReportPaths {
  std::string csv_path;
  std::string svg_path;
};

// Writes `<name>.csv` (all cells, report order) and `<name>.svg` (one series
// per report) under `out_dir`, creating the directory if needed.
ReportPaths emit_report(const std::vector<EvalReport>& reports, const std::string& out_dir,
                        const std::string& name = "accuracy_vs_snr");

}  // namespace semdistill
