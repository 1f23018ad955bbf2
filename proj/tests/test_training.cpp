#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>

#include "semdistill/logit_store.hpp"
#include "semdistill/training.hpp"

using namespace semdistill;

namespace {

DatasetConfig micro_dataset() {
  DatasetConfig cfg;
  cfg.class_count = 10;
  cfg.channels = 3;
  cfg.height = 16;
  cfg.width = 16;
  cfg.seed = 4242;
  cfg.train_size = 64;
  cfg.test_size = 40;
  cfg.teacher_pool_size = 40;
  cfg.label_corrupt_rate = 0.2;
  return cfg;
}

EncoderConfig micro_model() {
  EncoderConfig cfg;
  cfg.in_channels = 3;
  cfg.in_h = 16;
  cfg.in_w = 16;
  cfg.stage_widths = {8, 8, 8, 8};
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.decoder_hidden = 16;
  cfg.class_count = 10;
  return cfg;
}

DistillConfig micro_config(LabelMode mode) {
  DistillConfig cfg;
  cfg.beta = 32.0;
  cfg.top_k = 3;
  cfg.batch_size = 8;
  cfg.epochs = 2;
  cfg.lr = 1e-3;
  cfg.seed = 11;
  cfg.label_mode = mode;
  return cfg;
}

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) : path("/tmp/semdistill_train_" + name) {}
  ~TempFile() { std::remove(path.c_str()); }
};

bool params_identical(const StudentModel& a, const StudentModel& b) {
  const auto& ia = a.params().items();
  const auto& ib = b.params().items();
  if (ia.size() != ib.size()) return false;
  for (size_t i = 0; i < ia.size(); ++i) {
    const Tensor& ta = ia[i].second->value;
    const Tensor& tb = ib[i].second->value;
    if (!ta.same_shape(tb)) return false;
    if (std::memcmp(ta.data(), tb.data(), size_t(ta.size()) * sizeof(double)) != 0) return false;
  }
  return true;
}

void extract_store(const SyntheticDataset& ds, const Teacher& teacher, uint32_t k,
                   double temperature, const std::string& path) {
  auto scorer = [&](uint64_t id) { return teacher.scores(ds.get(Split::train, id).image); };
  extract_teacher_logits(scorer, uint64_t(ds.size(Split::train)), teacher.class_count(), k,
                         temperature, path);
}

}  // namespace

TEST_CASE("config validation") {
  DistillConfig cfg = micro_config(LabelMode::teacher_soft);
  CHECK_NOTHROW(cfg.validate(10));
  cfg.batch_size = 1;
  CHECK_THROWS_AS(cfg.validate(10), InvalidArgumentError);
  cfg = micro_config(LabelMode::teacher_soft);
  cfg.top_k = 10;
  CHECK_THROWS_AS(cfg.validate(10), InvalidArgumentError);
  cfg = micro_config(LabelMode::teacher_soft);
  cfg.beta = -1.0;
  CHECK_THROWS_AS(cfg.validate(10), InvalidArgumentError);
  cfg = micro_config(LabelMode::teacher_soft);
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(10), InvalidArgumentError);
  cfg = micro_config(LabelMode::teacher_soft);
  cfg.max_train_samples = 0;
  CHECK_THROWS_AS(cfg.validate(10), InvalidArgumentError);
  cfg = micro_config(LabelMode::teacher_soft);
  cfg.temperature = 0.0;
  CHECK_THROWS_AS(cfg.validate(10), InvalidArgumentError);

  CHECK(std::string(label_mode_name(LabelMode::teacher_soft)) == "teacher_soft");
  CHECK(parse_label_mode("ground_truth") == LabelMode::ground_truth);
  CHECK_THROWS_AS(parse_label_mode("soft"), InvalidArgumentError);
}

TEST_CASE("same seed reproduces the loss trace bit for bit") {
  SyntheticDataset ds(micro_dataset());
  DistillConfig cfg = micro_config(LabelMode::ground_truth);
  StudentModel m1(micro_model(), 5), m2(micro_model(), 5);
  TrainResult r1 = train_e2e_baseline(cfg, ds, m1);
  TrainResult r2 = train_e2e_baseline(cfg, ds, m2);
  REQUIRE(r1.records.size() == r2.records.size());
  REQUIRE(r1.records.size() >= 10);
  for (size_t i = 0; i < r1.records.size(); ++i) {
    CHECK(r1.records[i].loss.total == r2.records[i].loss.total);
    CHECK(r1.records[i].loss.rate == r2.records[i].loss.rate);
    CHECK(r1.records[i].loss.distortion == r2.records[i].loss.distortion);
    CHECK(r1.records[i].snr_db == r2.records[i].snr_db);
  }
  CHECK(params_identical(m1, m2));
  // Different seed diverges.
  DistillConfig cfg3 = cfg;
  cfg3.seed = 12;
  StudentModel m3(micro_model(), 5);
  TrainResult r3 = train_e2e_baseline(cfg3, ds, m3);
  CHECK(r3.records[0].loss.total != r1.records[0].loss.total);
}

TEST_CASE("stored and live teacher arms take identical steps") {
  SyntheticDataset ds(micro_dataset());
  MlpTeacher teacher(ds.config().pixels(), 24, 10, 77);
  DistillConfig cfg = micro_config(LabelMode::teacher_soft);
  TempFile store("equiv.fdls");
  extract_store(ds, teacher, cfg.top_k, cfg.temperature, store.path);

  StudentModel fdm(micro_model(), 5), live(micro_model(), 5);
  TrainResult rf = train_distill(cfg, store.path, ds, fdm);
  TrainResult rl = train_with_teacher_in_loop(cfg, teacher, ds, live);
  REQUIRE(rf.records.size() == rl.records.size());
  for (size_t i = 0; i < rf.records.size(); ++i) {
    CHECK(rf.records[i].loss.total == rl.records[i].loss.total);
  }
  CHECK(params_identical(fdm, live));
  CHECK(std::abs(rf.final_loss - rl.final_loss) < 1e-5);

  // The live arm must hold the full teacher resident; the stored arm only
  // the compressed payload.
  CHECK(rl.label_source_bytes == teacher.weight_bytes());
  CHECK(rf.label_source_bytes <
        uint64_t(ds.size(Split::train)) * uint64_t(store_record_bytes(cfg.top_k,
                                                                      ValueDtype::f32)) + 1);
  CHECK(rl.resident_bytes > rf.resident_bytes);
}

TEST_CASE("a one-hot store makes distillation coincide with the baseline") {
  SyntheticDataset ds(micro_dataset());
  DistillConfig soft = micro_config(LabelMode::teacher_soft);
  DistillConfig hard = micro_config(LabelMode::ground_truth);

  // Store holding the dataset's own (possibly corrupted) train labels as
  // exact one-hot vectors.
  TempFile store("onehot.fdls");
  {
    std::vector<CompressedLogits> records;
    for (int64_t i = 0; i < ds.size(Split::train); ++i) {
      Sample s = ds.get(Split::train, uint64_t(i));
      std::vector<double> onehot(10, 0.0);
      onehot[s.label] = 1.0;
      CompressedLogits cl = compress_topk(onehot, soft.top_k);
      cl.sample_id = uint64_t(i);
      records.push_back(cl);
    }
    LogitStoreHeader header;
    header.class_count = 10;
    header.top_k = soft.top_k;
    write_store(store.path, header, records);
  }

  StudentModel a(micro_model(), 5), b(micro_model(), 5);
  train_distill(soft, store.path, ds, a);
  train_e2e_baseline(hard, ds, b);
  CHECK(params_identical(a, b));
}

TEST_CASE("misaligned or mismatched stores are rejected") {
  SyntheticDataset ds(micro_dataset());
  DistillConfig cfg = micro_config(LabelMode::teacher_soft);
  MlpTeacher teacher(ds.config().pixels(), 24, 10, 77);

  // sample_ids outside the train split.
  TempFile shifted("shifted.fdls");
  {
    std::vector<CompressedLogits> records;
    for (int64_t i = 0; i < ds.size(Split::train); ++i) {
      std::vector<double> probs = temperature_softmax(
          teacher.scores(ds.get(Split::train, uint64_t(i)).image), 1.0);
      CompressedLogits cl = compress_topk(probs, cfg.top_k);
      cl.sample_id = uint64_t(i) + 100000;
      records.push_back(cl);
    }
    LogitStoreHeader header;
    header.class_count = 10;
    header.top_k = cfg.top_k;
    write_store(shifted.path, header, records);
  }
  {
    StudentModel m(micro_model(), 5);
    CHECK_THROWS_AS(train_distill(cfg, shifted.path, ds, m), AlignmentError);
  }

  // Wrong class count in the header.
  TempFile narrow("narrow.fdls");
  {
    std::vector<CompressedLogits> records;
    CompressedLogits cl;
    cl.sample_id = 0;
    cl.indices = {0, 1, 2};
    cl.values = {0.5f, 0.2f, 0.1f};
    records.push_back(cl);
    LogitStoreHeader header;
    header.class_count = 7;
    header.top_k = 3;
    write_store(narrow.path, header, records);
  }
  {
    StudentModel m(micro_model(), 5);
    CHECK_THROWS_AS(train_distill(cfg, narrow.path, ds, m), AlignmentError);
  }

  // K disagreement between store and config.
  TempFile widek("widek.fdls");
  extract_store(ds, teacher, 4, 1.0, widek.path);
  {
    StudentModel m(micro_model(), 5);
    CHECK_THROWS_AS(train_distill(cfg, widek.path, ds, m), InvalidArgumentError);
  }
}

TEST_CASE("non-finite loss aborts with a diagnostic record") {
  SyntheticDataset ds(micro_dataset());
  DistillConfig cfg = micro_config(LabelMode::ground_truth);
  StudentModel m(micro_model(), 5);
  ad::Var w = m.params().find("patch1.w");
  REQUIRE(w);
  w->value[0] = std::numeric_limits<double>::quiet_NaN();
  std::ostringstream log;
  CHECK_THROWS_AS(train_e2e_baseline(cfg, ds, m, &log), NumericError);
  CHECK(log.str().find("abort") != std::string::npos);
  CHECK(log.str().find("non-finite") != std::string::npos);
}

TEST_CASE("ablating the gate freezes its parameters and changes the run") {
  SyntheticDataset ds(micro_dataset());
  DistillConfig cfg = micro_config(LabelMode::ground_truth);
  cfg.adaptive = false;
  StudentModel fixed(micro_model(), 5), reference(micro_model(), 5);
  train_e2e_baseline(cfg, ds, fixed);
  // Gate parameters keep their initialization bit-exactly.
  for (const char* name : {"adapt.fc1.w", "adapt.fc1.b", "adapt.fc2.w", "adapt.fc2.b"}) {
    ad::Var trained = fixed.params().find(name);
    ad::Var init = reference.params().find(name);
    REQUIRE(trained);
    REQUIRE(init);
    CHECK(std::memcmp(trained->value.data(), init->value.data(),
                      size_t(trained->value.size()) * sizeof(double)) == 0);
  }
  // And the arm genuinely trains differently from the adaptive one.
  DistillConfig on = micro_config(LabelMode::ground_truth);
  StudentModel adaptive(micro_model(), 5);
  train_e2e_baseline(on, ds, adaptive);
  CHECK(!params_identical(fixed, adaptive));
}

TEST_CASE("augmentation is a deterministic pad-crop-flip") {
  Rng img_rng(31);
  Tensor img = Tensor::randn({3, 16, 16}, img_rng);
  Rng r1(99), r2(99);
  Tensor a = augment_image(img, r1);
  Tensor b = augment_image(img, r2);
  REQUIRE(a.same_shape(img));
  for (int64_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

  // The output must be explainable by exactly one (dy, dx, flip) choice.
  int matches = 0;
  for (int64_t dy = 0; dy <= 8; ++dy) {
    for (int64_t dx = 0; dx <= 8; ++dx) {
      for (int flip = 0; flip < 2; ++flip) {
        bool ok = true;
        for (int64_t ch = 0; ch < 3 && ok; ++ch) {
          for (int64_t y = 0; y < 16 && ok; ++y) {
            for (int64_t x = 0; x < 16 && ok; ++x) {
              int64_t sy = y + dy - 4, sx = x + dx - 4;
              double v = (sy >= 0 && sy < 16 && sx >= 0 && sx < 16)
                             ? img[(ch * 16 + sy) * 16 + sx]
                             : 0.0;
              int64_t ox = flip ? 15 - x : x;
              if (a[(ch * 16 + y) * 16 + ox] != v) ok = false;
            }
          }
        }
        if (ok) ++matches;
      }
    }
  }
  CHECK(matches == 1);

  CHECK_THROWS_AS(augment_image(Tensor::zeros({16, 16}), r1), ShapeError);
}

TEST_CASE("subset order is a stable dataset-keyed permutation") {
  SyntheticDataset ds(micro_dataset());
  std::vector<uint64_t> a = subset_order(ds);
  std::vector<uint64_t> b = subset_order(ds);
  CHECK(a == b);
  REQUIRE(int64_t(a.size()) == ds.size(Split::train));
  std::vector<uint64_t> sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (uint64_t i = 0; i < sorted.size(); ++i) CHECK(sorted[size_t(i)] == i);
  // Not the identity: it must actually mix classes (which are index mod C).
  CHECK(a != sorted);

  // Prefix training runs: a 32-sample run touches exactly the first 32
  // entries; verify via the loss trace of a run on a dataset oversized by
  // construction matching a manual subset run. Covered indirectly: the
  // permutation is shared, so it suffices that max_train_samples clips it.
  DistillConfig cfg = micro_config(LabelMode::ground_truth);
  cfg.max_train_samples = 32;
  cfg.epochs = 1;
  StudentModel m(micro_model(), 5);
  TrainResult r = train_e2e_baseline(cfg, ds, m);
  CHECK(r.records.size() == 4);
}

TEST_CASE("train records are monotone, finite and serialize to ndjson") {
  SyntheticDataset ds(micro_dataset());
  DistillConfig cfg = micro_config(LabelMode::ground_truth);
  StudentModel m(micro_model(), 5);
  std::ostringstream log;
  TrainResult r = train_e2e_baseline(cfg, ds, m, &log);
  REQUIRE(!r.records.empty());
  double prev_wall = -1.0;
  for (size_t i = 0; i < r.records.size(); ++i) {
    const TrainRecord& rec = r.records[i];
    CHECK(rec.step == int64_t(i));
    CHECK(std::isfinite(rec.loss.total));
    CHECK(std::isfinite(rec.loss.rate));
    CHECK(std::isfinite(rec.loss.distortion));
    CHECK(rec.loss.beta == cfg.beta);
    CHECK(rec.loss.total ==
          doctest::Approx(rec.loss.rate + rec.loss.beta * rec.loss.distortion).epsilon(1e-9));
    CHECK(rec.wall_ms >= prev_wall);
    prev_wall = rec.wall_ms;
    CHECK(rec.snr_db >= cfg.train_snr.low_db);
    CHECK(rec.snr_db <= cfg.train_snr.high_db);
  }
  CHECK(r.final_loss == doctest::Approx([&] {
          double s = 0.0;
          int64_t steps_per_epoch = int64_t(r.records.size()) / cfg.epochs;
          for (size_t i = r.records.size() - size_t(steps_per_epoch); i < r.records.size(); ++i)
            s += r.records[i].loss.total;
          return s / double(steps_per_epoch);
        }()).epsilon(1e-12));

  // One parseable object per line with the full field set.
  std::istringstream lines(log.str());
  std::string line;
  size_t count = 0;
  while (std::getline(lines, line)) {
    auto j = nlohmann::json::parse(line);
    for (const char* key : {"step", "epoch", "rate", "distortion", "total", "beta", "snr_db",
                            "wall_ms"}) {
      CHECK(j.contains(key));
    }
    if (count < r.records.size()) {
      CHECK(j["total"].get<double>() == r.records[count].loss.total);
    }
    ++count;
  }
  CHECK(count == r.records.size());
}
