#ifndef SEMDISTILL_DATASET_HPP
#define SEMDISTILL_DATASET_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "semdistill/common.hpp"
#include "semdistill/tensor.hpp"

namespace semdistill {

// Procedural image classification benchmark: each class is a smooth random
// cosine field over [channels, height, width]; a sample blends its class
// prototype with a second class, applies a gain jitter, and adds pixel
// noise. Everything is a pure function of (seed, split, index), so samples
// never need to be persisted and any subset can be regenerated exactly.
struct DatasetConfig {
  uint32_t class_count = 10;
  int64_t channels = 3;
  int64_t height = 32;
  int64_t width = 32;
  uint64_t seed = 1234;
  int64_t train_size = 4000;
  int64_t test_size = 1000;
  int64_t teacher_pool_size = 10000;
  // Cosine components per channel of each class prototype.
  int waves = 3;
  // With probability blend_prob a sample mixes in a second class at weight
  // lambda ~ U(0, blend_max); blend_max < 0.5 keeps the labeled class
  // dominant in every pixel average.
  double blend_prob = 0.5;
  double blend_max = 0.4;
  double gain_jitter = 0.15;
  double pixel_noise = 0.25;
  // Fraction of *train* labels replaced by a uniformly random wrong class.
  // Test and teacher-pool labels are always the clean dominant class.
  double label_corrupt_rate = 0.2;

  void validate() const;
  int64_t pixels() const { return channels * height * width; }
};

enum class Split { train, test, teacher_pool };

const char* split_name(Split s);

struct Sample {
  uint64_t sample_id = 0;
  Tensor image;  // [channels, height, width]
  uint32_t label = 0;
};

class SyntheticDataset {
 public:
  explicit SyntheticDataset(DatasetConfig cfg);

  const DatasetConfig& config() const { return cfg_; }
  int64_t size(Split s) const;

  // Deterministic: get(s, i) always returns the same image and label.
  Sample get(Split s, uint64_t index) const;
  // Dominant class before any label corruption.
  uint32_t clean_label(Split s, uint64_t index) const;
  // Prototype image of a class, unit RMS.
  const Tensor& prototype(uint32_t cls) const;

 private:
  struct Draw {
    uint32_t primary;
    uint32_t secondary;
    double lambda;  // 0 when no blend
    double gain;
    uint32_t label;
  };
  Draw draw_sample(Split s, uint64_t index) const;

  DatasetConfig cfg_;
  std::vector<Tensor> prototypes_;
};

// Sum of `waves` random cosine components per channel, normalized to unit
// RMS over the whole tensor. The building block of class prototypes.
Tensor random_cosine_field(int64_t channels, int64_t height, int64_t width, int waves, Rng& rng);

// Flat key=value serialization of DatasetConfig, one key per line. A dataset
// on disk is just this file; images are regenerated from it.
void save_dataset_config(const DatasetConfig& cfg, const std::string& path);
DatasetConfig load_dataset_config(const std::string& path);

// Stacks [count] samples starting at `first` into a [count, C, H, W] batch.
Tensor stack_images(const SyntheticDataset& ds, Split s, const std::vector<uint64_t>& indices);

}  // namespace semdistill

#endif  // SEMDISTILL_DATASET_HPP
