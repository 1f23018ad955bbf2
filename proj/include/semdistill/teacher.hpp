#ifndef SEMDISTILL_TEACHER_HPP
#define SEMDISTILL_TEACHER_HPP

#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "semdistill/dataset.hpp"
#include "semdistill/nn.hpp"

namespace semdistill {

// Classifier oracle queried one sample at a time. scores() must be a pure
// function of the image: the logit store is extracted through it and the
// teacher-in-loop training arm calls it live, and the two paths are expected
// to agree bit-exactly.
class Teacher {
 public:
  virtual ~Teacher() = default;
  virtual std::vector<double> scores(const Tensor& image) const = 0;
  virtual uint32_t class_count() const = 0;
  // Bytes of parameter payload a deployment would have to keep around to
  // re-run this teacher.
  virtual uint64_t weight_bytes() const = 0;
};

// Two-hidden-layer GELU MLP over flattened pixels. Big enough to make live
// teacher queries genuinely expensive next to the student step, small enough
// to train on one core in minutes.
class MlpTeacher : public Teacher {
 public:
  MlpTeacher(int64_t input_dim, int64_t hidden, uint32_t classes, uint64_t seed);

  std::vector<double> scores(const Tensor& image) const override;
  uint32_t class_count() const override { return classes_; }
  uint64_t weight_bytes() const override;

  // Batched training-time forward: [N, input_dim] rows -> [N, classes] probs.
  ad::Var forward_rows(const ad::Var& x) const;

  nn::ParamRegistry& params() { return params_; }
  const nn::ParamRegistry& params() const { return params_; }
  int64_t input_dim() const { return input_dim_; }
  int64_t hidden() const { return hidden_; }

 private:
  int64_t input_dim_ = 0;
  int64_t hidden_ = 0;
  uint32_t classes_ = 0;
  nn::ParamRegistry params_;
  nn::Dense fc1_, fc2_, fc3_;
};

struct TeacherTrainConfig {
  int64_t hidden = 384;
  int64_t epochs = 4;
  int64_t batch_size = 64;
  double lr = 1e-3;
  uint64_t seed = 99;
};

// Trains an MlpTeacher on the clean teacher_pool split (cross-entropy on
// clean labels). Optionally logs one line per epoch.
std::unique_ptr<MlpTeacher> train_desk_teacher(const SyntheticDataset& ds,
                                               const TeacherTrainConfig& cfg,
                                               std::ostream* log = nullptr);

// Top-1 accuracy against clean labels. max_samples < 0 means the full split.
double teacher_accuracy(const Teacher& teacher, const SyntheticDataset& ds, Split split,
                        int64_t max_samples = -1);

void save_teacher(const MlpTeacher& teacher, const std::string& path);
std::unique_ptr<MlpTeacher> load_teacher(const std::string& path);

// Training-free nearest-prototype classifier over an arbitrary class count:
// scores are negated squared distances to per-class cosine fields, scaled by
// tau. Used where only a deterministic wide-C oracle is needed (storage
// scaling experiments), not for accuracy claims.
class PrototypeTeacher : public Teacher {
 public:
  PrototypeTeacher(uint32_t class_count, int64_t channels, int64_t height, int64_t width,
                   double tau, uint64_t seed);

  std::vector<double> scores(const Tensor& image) const override;
  uint32_t class_count() const override { return class_count_; }
  uint64_t weight_bytes() const override;

  const Tensor& prototype(uint32_t cls) const;
  // Deterministic noisy realization of class (sample_id mod C).
  Tensor sample_image(uint64_t sample_id, double noise) const;

 private:
  uint32_t class_count_;
  int64_t channels_, height_, width_;
  double tau_;
  uint64_t seed_;
  std::vector<Tensor> prototypes_;
};

}  // namespace semdistill

#endif  // SEMDISTILL_TEACHER_HPP
