#ifndef SEMDISTILL_TRAINING_HPP
#define SEMDISTILL_TRAINING_HPP

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "semdistill/channel.hpp"
#include "semdistill/dataset.hpp"
#include "semdistill/ib_loss.hpp"
#include "semdistill/model.hpp"
#include "semdistill/teacher.hpp"

namespace semdistill {

enum class LabelMode { teacher_soft, ground_truth };

const char* label_mode_name(LabelMode m);
LabelMode parse_label_mode(const std::string& s);

struct DistillConfig {
  double beta = 512.0;
  uint32_t top_k = 5;
  int64_t batch_size = 32;
  int64_t epochs = 10;
  double lr = 1e-3;
  bool cosine_schedule = true;
  SnrRange train_snr{-6.0, 14.0};
  uint64_t seed = 7;
  LabelMode label_mode = LabelMode::teacher_soft;
  // Teacher softmax temperature; the live arm compresses fresh probabilities
  // with it, mirroring whatever the store was extracted with.
  double temperature = 1.0;
  // false ablates the SNR-conditioned gate (weights pinned to one).
  bool adaptive = true;
  bool augment = true;
  // Epochs over which the rate term's weight ramps linearly 0 -> 1 (per
  // step).  0 applies the full rate weight from the first step.  Under an
  // aggressive beta the ramp lets the code form before the bottleneck
  // pressure lands, which removes the collapse basin some seeds otherwise
  // fall into.
  int64_t rate_warmup_epochs = 0;
  // Nested training subset: < 0 trains on the full split, otherwise on the
  // first n entries of a dataset-keyed permutation (smaller subsets are
  // strict prefixes of larger ones).
  int64_t max_train_samples = -1;

  void validate(uint32_t class_count) const;
};

struct TrainRecord {
  int64_t step = 0;
  int64_t epoch = 0;
  LossBreakdown loss;
  double snr_db = 0.0;
  double wall_ms = 0.0;  // cumulative run wall time when the record was cut
};

struct TrainResult {
  std::vector<TrainRecord> records;
  double final_loss = 0.0;  // mean total loss over the last epoch
  double total_wall_ms = 0.0;
  double mean_epoch_wall_ms = 0.0;
  // Resident bytes of the label source (compressed records vs. live teacher
  // weights) plus parameters and optimizer state. Graph scratch is identical
  // across arms and excluded.
  uint64_t label_source_bytes = 0;
  uint64_t resident_bytes = 0;
};

// One NDJSON object per line; loss fields serialize with shortest-roundtrip
// doubles so equal traces compare equal as text.
void append_train_record(std::ostream& os, const TrainRecord& rec);

// Distillation from the pre-extracted store. The teacher never appears in
// the signature, so this arm cannot invoke it. Store records are matched to
// dataset indices by sample_id; gaps raise AlignmentError.
TrainResult train_distill(const DistillConfig& cfg, const std::string& store_path,
                          const SyntheticDataset& ds, StudentModel& model,
                          std::ostream* log = nullptr);

// Ablation arm: identical pipeline, but teacher probabilities are computed
// fresh per sample, then top-K compressed and smoothed exactly like the
// stored path — the two arms optimize the same objective.
TrainResult train_with_teacher_in_loop(const DistillConfig& cfg, const Teacher& teacher,
                                       const SyntheticDataset& ds, StudentModel& model,
                                       std::ostream* log = nullptr);

// No-distillation baseline: one-hot dataset labels, same architecture,
// channel pipeline and rate term.
TrainResult train_e2e_baseline(const DistillConfig& cfg, const SyntheticDataset& ds,
                               StudentModel& model, std::ostream* log = nullptr);

// The nested-subset permutation shared by every arm and seed: a fixed
// shuffle of the train split keyed by the dataset seed alone.
std::vector<uint64_t> subset_order(const SyntheticDataset& ds);

// Pad-4 random crop plus horizontal flip, drawn from a stream keyed by
// (seed, epoch, dataset index) so every arm augments identically.
Tensor augment_image(const Tensor& image, Rng& rng);

}  // namespace semdistill

#endif  // SEMDISTILL_TRAINING_HPP
