#include "semdistill/training.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <numeric>
#include <unordered_map>

#include "semdistill/logit_store.hpp"

namespace semdistill {

namespace {

using nlohmann::json;

constexpr uint64_t kSubsetTag = 0x5b5e7ULL;
constexpr uint64_t kShuffleTag = 0x54aff1eULL;
constexpr uint64_t kAugTag = 0xa06ULL;
constexpr uint64_t kSnrTag = 0x54bULL;
constexpr uint64_t kNoiseTag = 0x401eULL;
constexpr uint64_t kEpsTag = 0xe75ULL;
constexpr int64_t kCropPad = 4;

// Dense length-C target distribution for one clean training sample. The
// three arms differ only in this hook; none of them consume rng, so every
// downstream random stream stays identical across arms.
class LabelProvider {
 public:
  virtual ~LabelProvider() = default;
  virtual std::vector<double> operator()(const Sample& clean) = 0;
  virtual uint64_t resident_bytes() const = 0;
};

class StoreLabels : public LabelProvider {
 public:
  StoreLabels(const std::string& path, const SyntheticDataset& ds, const DistillConfig& cfg) {
    LogitStoreHeader header;
    records_ = read_all(path, &header);
    class_count_ = header.class_count;
    if (header.class_count != ds.config().class_count) {
      throw AlignmentError("store was extracted for " + std::to_string(header.class_count) +
                           " classes but the dataset has " +
                           std::to_string(ds.config().class_count));
    }
    if (header.top_k != cfg.top_k) {
      throw InvalidArgumentError("store keeps top-" + std::to_string(header.top_k) +
                                 " entries but the config asks for top-" +
                                 std::to_string(cfg.top_k));
    }
    by_id_.reserve(records_.size());
    for (size_t i = 0; i < records_.size(); ++i) {
      if (!by_id_.emplace(records_[i].sample_id, i).second) {
        throw AlignmentError("duplicate sample_id " + std::to_string(records_[i].sample_id) +
                             " in logit store");
      }
    }
    payload_bytes_ = records_.size() * size_t(store_record_bytes(header.top_k,
                                                                header.value_dtype));
  }

  std::vector<double> operator()(const Sample& clean) override {
    auto it = by_id_.find(clean.sample_id);
    if (it == by_id_.end()) {
      throw AlignmentError("no stored logits for sample_id " +
                           std::to_string(clean.sample_id) +
                           "; extract-logits must cover the train split of this dataset");
    }
    return smooth(records_[it->second], class_count_);
  }

  uint64_t resident_bytes() const override { return payload_bytes_; }

 private:
  std::vector<CompressedLogits> records_;
  std::unordered_map<uint64_t, size_t> by_id_;
  uint32_t class_count_ = 0;
  uint64_t payload_bytes_ = 0;
};

class TeacherLabels : public LabelProvider {
 public:
  TeacherLabels(const Teacher& teacher, const DistillConfig& cfg)
      : teacher_(teacher), top_k_(cfg.top_k), temperature_(cfg.temperature) {}

  std::vector<double> operator()(const Sample& clean) override {
    // Fresh inference, then the same compress/smooth path the store went
    // through, so both arms see bit-identical targets.
    CompressedLogits cl =
        compress_topk(temperature_softmax(teacher_.scores(clean.image), temperature_), top_k_);
    return smooth(cl, teacher_.class_count());
  }

  uint64_t resident_bytes() const override { return teacher_.weight_bytes(); }

 private:
  const Teacher& teacher_;
  uint32_t top_k_;
  double temperature_;
};

class GroundTruthLabels : public LabelProvider {
 public:
  explicit GroundTruthLabels(uint32_t class_count) : class_count_(class_count) {}

  std::vector<double> operator()(const Sample& clean) override {
    std::vector<double> y(class_count_, 0.0);
    y[clean.label] = 1.0;
    return y;
  }

  uint64_t resident_bytes() const override { return 0; }

 private:
  uint32_t class_count_;
};

// Batch boundaries over n samples. A trailing singleton is folded into the
// previous batch: the rate term is identically zero at N = 1, so a 1-sample
// step would silently train without it.
std::vector<int64_t> batch_lengths(int64_t n, int64_t batch_size) {
  std::vector<int64_t> lens;
  for (int64_t start = 0; start < n; start += batch_size) {
    lens.push_back(std::min(batch_size, n - start));
  }
  if (lens.size() > 1 && lens.back() == 1) {
    lens.pop_back();
    lens.back() += 1;
  }
  return lens;
}

TrainResult run_training(const DistillConfig& cfg, const SyntheticDataset& ds,
                         StudentModel& model, LabelProvider& labels, std::ostream* log) {
  const auto& dcfg = ds.config();
  cfg.validate(dcfg.class_count);
  if (model.config().class_count != dcfg.class_count) {
    throw InvalidArgumentError("model expects " + std::to_string(model.config().class_count) +
                               " classes but the dataset has " +
                               std::to_string(dcfg.class_count));
  }

  std::vector<uint64_t> base = subset_order(ds);
  int64_t n_train = ds.size(Split::train);
  if (cfg.max_train_samples >= 0) n_train = std::min(n_train, cfg.max_train_samples);
  if (n_train < cfg.batch_size) {
    throw InvalidArgumentError("training subset smaller than one batch");
  }
  base.resize(size_t(n_train));

  const std::vector<int64_t> lens = batch_lengths(n_train, cfg.batch_size);
  const int64_t steps_per_epoch = int64_t(lens.size());
  nn::AdamConfig optim;
  optim.lr = cfg.lr;
  optim.total_steps = cfg.cosine_schedule ? cfg.epochs * steps_per_epoch : 0;
  nn::Adam adam(model.params(), optim);

  const int64_t pixels = dcfg.pixels();
  const int64_t classes = dcfg.class_count;
  const int64_t feat_dim = model.config().feature_dim();

  TrainResult result;
  result.label_source_bytes = labels.resident_bytes();
  result.resident_bytes =
      labels.resident_bytes() + 3ull * uint64_t(model.count_params()) * sizeof(double);

  Stopwatch run_sw;
  double epoch_ms_sum = 0.0;
  double last_epoch_loss = 0.0;
  int64_t global_step = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Stopwatch epoch_sw;
    std::vector<uint64_t> order = base;
    Rng shuffle_rng(derive_seed(cfg.seed, kShuffleTag, uint64_t(epoch)));
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    int64_t cursor = 0;
    for (int64_t step = 0; step < steps_per_epoch; ++step, ++global_step) {
      const int64_t n = lens[size_t(step)];
      Tensor images({n, dcfg.channels, dcfg.height, dcfg.width});
      Tensor y_hat({n, classes});
      for (int64_t i = 0; i < n; ++i) {
        uint64_t idx = order[size_t(cursor + i)];
        Sample clean = ds.get(Split::train, idx);
        std::vector<double> y = labels(clean);
        for (int64_t c = 0; c < classes; ++c) y_hat[i * classes + c] = y[size_t(c)];
        Tensor img = clean.image;
        if (cfg.augment) {
          Rng arng(derive_seed(cfg.seed, kAugTag, uint64_t(epoch), idx));
          img = augment_image(img, arng);
        }
        std::memcpy(images.data() + i * pixels, img.data(), size_t(pixels) * sizeof(double));
      }
      cursor += n;

      Rng snr_rng(derive_seed(cfg.seed, kSnrTag, uint64_t(global_step)));
      double snr_db = sample_snr(cfg.train_snr, snr_rng);
      ChannelState state = awgn_state(snr_db);
      Rng noise_rng(derive_seed(cfg.seed, kNoiseTag, uint64_t(global_step)));
      StudentModel::Graph g =
          model.forward_graph(images, snr_db, state, noise_rng, cfg.adaptive);

      Rng eps_rng(derive_seed(cfg.seed, kEpsTag, uint64_t(global_step)));
      Tensor eps = Tensor::randn({n, feat_dim}, eps_rng);
      ad::Var samples = reparameterize(g.x_rows, model.log_variance(), eps);
      const double warmup_steps = double(cfg.rate_warmup_epochs) * double(steps_per_epoch);
      const double rate_w =
          warmup_steps > 0.0 ? std::min(1.0, double(global_step) / warmup_steps) : 1.0;
      LossGraph lg = distillation_loss_graph(g.x_rows, samples, model.log_variance(), g.probs,
                                             y_hat, cfg.beta, rate_w);

      double total = lg.total->value[0];
      if (!std::isfinite(total)) {
        if (log) {
          json j{{"event", "abort"},
                 {"step", global_step},
                 {"epoch", epoch},
                 {"reason", "non-finite loss"},
                 {"snr_db", snr_db}};
          (*log) << j.dump() << "\n";
        }
        throw NumericError("non-finite training loss at step " + std::to_string(global_step) +
                           " (epoch " + std::to_string(epoch) + ", snr " +
                           std::to_string(snr_db) + " dB)");
      }

      ad::backward(lg.total);
      adam.step();

      TrainRecord rec;
      rec.step = global_step;
      rec.epoch = epoch;
      rec.loss = lg.breakdown(cfg.beta, rate_w);
      rec.snr_db = snr_db;
      rec.wall_ms = run_sw.elapsed_ms();
      if (log) append_train_record(*log, rec);
      result.records.push_back(rec);
      epoch_loss += total;
    }
    epoch_ms_sum += epoch_sw.elapsed_ms();
    last_epoch_loss = epoch_loss / double(steps_per_epoch);
  }

  result.final_loss = last_epoch_loss;
  result.total_wall_ms = run_sw.elapsed_ms();
  result.mean_epoch_wall_ms = epoch_ms_sum / double(cfg.epochs);
  return result;
}

}  // namespace

const char* label_mode_name(LabelMode m) {
  return m == LabelMode::teacher_soft ? "teacher_soft" : "ground_truth";
}

LabelMode parse_label_mode(const std::string& s) {
  if (s == "teacher_soft") return LabelMode::teacher_soft;
  if (s == "ground_truth") return LabelMode::ground_truth;
  throw InvalidArgumentError("unknown label_mode: " + s +
                             " (expected teacher_soft or ground_truth)");
}

void DistillConfig::validate(uint32_t class_count) const {
  if (beta < 0.0 || !std::isfinite(beta)) {
    throw InvalidArgumentError("beta must be finite and non-negative");
  }
  if (top_k < 1 || top_k >= class_count) {
    throw InvalidArgumentError("top_k must satisfy 1 <= K < C (K=" + std::to_string(top_k) +
                               ", C=" + std::to_string(class_count) + ")");
  }
  if (batch_size < 2) {
    throw InvalidArgumentError("batch_size must be at least 2: the rate estimator degenerates "
                               "on singleton batches");
  }
  if (epochs < 1) throw InvalidArgumentError("epochs must be positive");
  if (lr <= 0.0) throw InvalidArgumentError("learning rate must be positive");
  if (temperature <= 0.0) throw InvalidArgumentError("temperature must be positive");
  if (train_snr.low_db > train_snr.high_db) {
    throw InvalidArgumentError("train_snr range is inverted");
  }
  if (max_train_samples == 0) {
    throw InvalidArgumentError("max_train_samples must be negative (full split) or positive");
  }
  if (rate_warmup_epochs < 0) {
    throw InvalidArgumentError("rate_warmup_epochs must be non-negative");
  }
}

void append_train_record(std::ostream& os, const TrainRecord& rec) {
  json j{{"step", rec.step},           {"epoch", rec.epoch},
         {"rate", rec.loss.rate},      {"distortion", rec.loss.distortion},
         {"total", rec.loss.total},    {"beta", rec.loss.beta},
         {"snr_db", rec.snr_db},       {"wall_ms", rec.wall_ms}};
  os << j.dump() << "\n";
}

std::vector<uint64_t> subset_order(const SyntheticDataset& ds) {
  std::vector<uint64_t> order(static_cast<size_t>(ds.size(Split::train)));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(ds.config().seed, kSubsetTag));
  rng.shuffle(order);
  return order;
}

Tensor augment_image(const Tensor& image, Rng& rng) {
  if (image.rank() != 3) throw ShapeError("augment_image expects [C, H, W]");
  const int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const int64_t dy = int64_t(rng.uniform_int(uint64_t(2 * kCropPad + 1)));
  const int64_t dx = int64_t(rng.uniform_int(uint64_t(2 * kCropPad + 1)));
  const bool flip = rng.uniform() < 0.5;
  Tensor out({c, h, w});
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t y = 0; y < h; ++y) {
      int64_t sy = y + dy - kCropPad;
      for (int64_t x = 0; x < w; ++x) {
        int64_t sx = x + dx - kCropPad;
        double v = 0.0;
        if (sy >= 0 && sy < h && sx >= 0 && sx < w) {
          v = image[(ch * h + sy) * w + sx];
        }
        out[(ch * h + y) * w + (flip ? w - 1 - x : x)] = v;
      }
    }
  }
  return out;
}

TrainResult train_distill(const DistillConfig& cfg, const std::string& store_path,
                          const SyntheticDataset& ds, StudentModel& model, std::ostream* log) {
  if (cfg.label_mode != LabelMode::teacher_soft) {
    throw InvalidArgumentError("train_distill requires label_mode=teacher_soft");
  }
  StoreLabels labels(store_path, ds, cfg);
  return run_training(cfg, ds, model, labels, log);
}

TrainResult train_with_teacher_in_loop(const DistillConfig& cfg, const Teacher& teacher,
                                       const SyntheticDataset& ds, StudentModel& model,
                                       std::ostream* log) {
  if (cfg.label_mode != LabelMode::teacher_soft) {
    throw InvalidArgumentError("train_with_teacher_in_loop requires label_mode=teacher_soft");
  }
  if (teacher.class_count() != ds.config().class_count) {
    throw AlignmentError("teacher emits " + std::to_string(teacher.class_count()) +
                         " classes but the dataset has " +
                         std::to_string(ds.config().class_count));
  }
  TeacherLabels labels(teacher, cfg);
  return run_training(cfg, ds, model, labels, log);
}

TrainResult train_e2e_baseline(const DistillConfig& cfg, const SyntheticDataset& ds,
                               StudentModel& model, std::ostream* log) {
  if (cfg.label_mode != LabelMode::ground_truth) {
    throw InvalidArgumentError("train_e2e_baseline requires label_mode=ground_truth");
  }
  GroundTruthLabels labels(ds.config().class_count);
  return run_training(cfg, ds, model, labels, log);
}

}  // namespace semdistill
