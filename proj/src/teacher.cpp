#include "semdistill/teacher.hpp"

#include <json.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "semdistill/ib_loss.hpp"

namespace semdistill {

namespace {

using nlohmann::json;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

constexpr uint64_t kTeacherInitTag = 0x7eac4e12ULL;
constexpr uint64_t kTeacherShuffleTag = 0x7eac54f1ULL;
constexpr uint64_t kProtoTeacherTag = 0x9607e0ULL;
constexpr uint64_t kProtoSampleTag = 0x9605a3ULL;
constexpr double kInvSqrt2 = 0.70710678118654752440;

// Same definition ad::gelu uses, so the per-sample path and the batched
// training graph compute identical activations.
inline double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

void dense_gemv(const Tensor& w, const Tensor& b, const Eigen::VectorXd& x, Eigen::VectorXd& y) {
  ConstMatMap wm(w.data(), w.dim(0), w.dim(1));
  ConstVecMap bv(b.data(), b.size());
  y.noalias() = wm.transpose() * x;
  y += bv;
}

void put_u64_le(std::ofstream& out, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = (unsigned char)((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<char*>(b), 8);
}

uint64_t read_u64_le(std::ifstream& in, const std::string& path) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (in.gcount() != 8) throw FormatError("truncated teacher checkpoint: " + path);
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace

MlpTeacher::MlpTeacher(int64_t input_dim, int64_t hidden, uint32_t classes, uint64_t seed)
    : input_dim_(input_dim), hidden_(hidden), classes_(classes) {
  if (input_dim < 1 || hidden < 1 || classes < 2) {
    throw InvalidArgumentError("teacher dimensions must be positive with at least 2 classes");
  }
  Rng rng(derive_seed(seed, kTeacherInitTag));
  fc1_ = nn::Dense(params_, "fc1", input_dim_, hidden_, rng);
  fc2_ = nn::Dense(params_, "fc2", hidden_, hidden_, rng);
  fc3_ = nn::Dense(params_, "fc3", hidden_, int64_t(classes_), rng);
}

std::vector<double> MlpTeacher::scores(const Tensor& image) const {
  if (image.size() != input_dim_) {
    throw ShapeError("teacher expects " + std::to_string(input_dim_) + " inputs, got " +
                     std::to_string(image.size()));
  }
  Eigen::VectorXd x = ConstVecMap(image.data(), image.size());
  Eigen::VectorXd h1, h2, s;
  dense_gemv(fc1_.w->value, fc1_.b->value, x, h1);
  for (int64_t i = 0; i < h1.size(); ++i) h1[i] = gelu_scalar(h1[i]);
  dense_gemv(fc2_.w->value, fc2_.b->value, h1, h2);
  for (int64_t i = 0; i < h2.size(); ++i) h2[i] = gelu_scalar(h2[i]);
  dense_gemv(fc3_.w->value, fc3_.b->value, h2, s);
  return std::vector<double>(s.data(), s.data() + s.size());
}

uint64_t MlpTeacher::weight_bytes() const {
  return uint64_t(params_.total_params()) * sizeof(double);
}

ad::Var MlpTeacher::forward_rows(const ad::Var& x) const {
  ad::Var h1 = ad::gelu(fc1_(x));
  ad::Var h2 = ad::gelu(fc2_(h1));
  return ad::softmax_last(fc3_(h2));
}

std::unique_ptr<MlpTeacher> train_desk_teacher(const SyntheticDataset& ds,
                                               const TeacherTrainConfig& cfg,
                                               std::ostream* log) {
  if (cfg.epochs < 1 || cfg.batch_size < 1 || cfg.lr <= 0.0) {
    throw InvalidArgumentError("teacher training needs positive epochs, batch size and lr");
  }
  const auto& dcfg = ds.config();
  const int64_t input_dim = dcfg.pixels();
  const int64_t pool = ds.size(Split::teacher_pool);
  auto teacher = std::make_unique<MlpTeacher>(input_dim, cfg.hidden, dcfg.class_count, cfg.seed);

  nn::AdamConfig optim;
  optim.lr = cfg.lr;
  optim.total_steps = cfg.epochs * ((pool + cfg.batch_size - 1) / cfg.batch_size);
  nn::Adam adam(teacher->params(), optim);

  std::vector<uint64_t> order(static_cast<size_t>(pool));
  std::iota(order.begin(), order.end(), 0);
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, kTeacherShuffleTag, uint64_t(epoch)));
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    int64_t batches = 0;
    for (int64_t start = 0; start < pool; start += cfg.batch_size) {
      int64_t n = std::min(cfg.batch_size, pool - start);
      Tensor x({n, input_dim});
      Tensor y = Tensor::zeros({n, int64_t(dcfg.class_count)});
      for (int64_t i = 0; i < n; ++i) {
        Sample smp = ds.get(Split::teacher_pool, order[size_t(start + i)]);
        std::memcpy(x.data() + i * input_dim, smp.image.data(),
                    size_t(input_dim) * sizeof(double));
        y[i * dcfg.class_count + smp.label] = 1.0;
      }
      ad::Var probs = teacher->forward_rows(ad::leaf(std::move(x)));
      ad::Var loss = soft_cross_entropy_graph(probs, y);
      epoch_loss += loss->value[0];
      ++batches;
      ad::backward(loss);
      adam.step();
    }
    if (log) {
      (*log) << "teacher epoch " << (epoch + 1) << "/" << cfg.epochs
             << " mean_ce=" << (epoch_loss / double(batches)) << "\n";
    }
  }
  return teacher;
}

double teacher_accuracy(const Teacher& teacher, const SyntheticDataset& ds, Split split,
                        int64_t max_samples) {
  int64_t n = ds.size(split);
  if (max_samples >= 0) n = std::min(n, max_samples);
  if (n < 1) throw InvalidArgumentError("teacher accuracy needs at least one sample");
  int64_t correct = 0;
  for (int64_t i = 0; i < n; ++i) {
    std::vector<double> s = teacher.scores(ds.get(split, uint64_t(i)).image);
    size_t arg = 0;
    for (size_t c = 1; c < s.size(); ++c) {
      if (s[c] > s[arg]) arg = c;
    }
    if (uint32_t(arg) == ds.clean_label(split, uint64_t(i))) ++correct;
  }
  return double(correct) / double(n);
}

void save_teacher(const MlpTeacher& teacher, const std::string& path) {
  json manifest;
  manifest["format"] = "semdistill-teacher";
  manifest["version"] = 1;
  manifest["input_dim"] = teacher.input_dim();
  manifest["hidden"] = teacher.hidden();
  manifest["classes"] = teacher.class_count();
  std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open teacher checkpoint for writing: " + path);
  put_u64_le(out, text.size());
  out.write(text.data(), std::streamsize(text.size()));
  for (const auto& [name, v] : teacher.params().items()) {
    (void)name;
    for (int64_t i = 0; i < v->value.size(); ++i) {
      uint64_t bits;
      double d = v->value[i];
      std::memcpy(&bits, &d, 8);
      put_u64_le(out, bits);
    }
  }
  if (!out) throw IoError("write failure on teacher checkpoint: " + path);
}

std::unique_ptr<MlpTeacher> load_teacher(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open teacher checkpoint: " + path);
  uint64_t len = read_u64_le(in, path);
  std::string text(len, '\0');
  in.read(text.data(), std::streamsize(len));
  if (uint64_t(in.gcount()) != len) throw FormatError("truncated teacher manifest: " + path);
  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError("unparseable teacher manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "semdistill-teacher" || manifest.value("version", 0) != 1) {
    throw FormatError("unrecognized teacher checkpoint format: " + path);
  }
  auto teacher = std::make_unique<MlpTeacher>(
      manifest.at("input_dim").get<int64_t>(), manifest.at("hidden").get<int64_t>(),
      manifest.at("classes").get<uint32_t>(), 0);
  for (const auto& [name, v] : teacher->params().items()) {
    (void)name;
    for (int64_t i = 0; i < v->value.size(); ++i) {
      uint64_t bits = read_u64_le(in, path);
      double d;
      std::memcpy(&d, &bits, 8);
      v->value[i] = d;
    }
  }
  return teacher;
}

PrototypeTeacher::PrototypeTeacher(uint32_t class_count, int64_t channels, int64_t height,
                                   int64_t width, double tau, uint64_t seed)
    : class_count_(class_count), channels_(channels), height_(height), width_(width), tau_(tau),
      seed_(seed) {
  if (class_count < 2) throw InvalidArgumentError("prototype teacher needs at least 2 classes");
  if (channels < 1 || height < 1 || width < 1) {
    throw InvalidArgumentError("prototype teacher image dimensions must be positive");
  }
  if (tau <= 0.0) throw InvalidArgumentError("prototype teacher tau must be positive");
  prototypes_.reserve(class_count_);
  for (uint32_t c = 0; c < class_count_; ++c) {
    Rng rng(derive_seed(seed_, kProtoTeacherTag, c));
    prototypes_.push_back(random_cosine_field(channels_, height_, width_, 3, rng));
  }
}

std::vector<double> PrototypeTeacher::scores(const Tensor& image) const {
  int64_t dim = channels_ * height_ * width_;
  if (image.size() != dim) {
    throw ShapeError("prototype teacher expects " + std::to_string(dim) + " inputs, got " +
                     std::to_string(image.size()));
  }
  std::vector<double> s(class_count_);
  for (uint32_t c = 0; c < class_count_; ++c) {
    const Tensor& p = prototypes_[c];
    double d2 = 0.0;
    for (int64_t i = 0; i < dim; ++i) {
      double d = image[i] - p[i];
      d2 += d * d;
    }
    s[c] = -d2 / tau_;
  }
  return s;
}

uint64_t PrototypeTeacher::weight_bytes() const {
  return uint64_t(class_count_) * uint64_t(channels_ * height_ * width_) * sizeof(double);
}

const Tensor& PrototypeTeacher::prototype(uint32_t cls) const {
  if (cls >= class_count_) throw InvalidArgumentError("prototype class out of range");
  return prototypes_[cls];
}

Tensor PrototypeTeacher::sample_image(uint64_t sample_id, double noise) const {
  const Tensor& p = prototypes_[sample_id % class_count_];
  Tensor img({channels_, height_, width_});
  Rng rng(derive_seed(seed_, kProtoSampleTag, sample_id));
  for (int64_t i = 0; i < img.size(); ++i) img[i] = p[i] + noise * rng.normal();
  return img;
}

}  // namespace semdistill
