#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>

#include "semdistill/logit_store.hpp"
#include "semdistill/teacher.hpp"

using namespace semdistill;

namespace {

DatasetConfig teacher_config() {
  DatasetConfig cfg;
  cfg.class_count = 10;
  cfg.channels = 3;
  cfg.height = 16;
  cfg.width = 16;
  cfg.seed = 808;
  cfg.train_size = 600;
  cfg.test_size = 300;
  cfg.teacher_pool_size = 1500;
  return cfg;
}

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) : path("/tmp/semdistill_teach_" + name) {}
  ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("per-sample scores match the batched training graph") {
  MlpTeacher t(48, 16, 5, 21);
  Rng rng(22);
  Tensor img = Tensor::randn({3, 4, 4}, rng);
  std::vector<double> s = t.scores(img);
  REQUIRE(s.size() == 5);
  std::vector<double> p = temperature_softmax(s, 1.0);

  ad::Var rows = ad::leaf(img.reshaped({1, 48}));
  ad::Var probs = t.forward_rows(rows);
  for (size_t c = 0; c < 5; ++c) {
    CHECK(probs->value[int64_t(c)] == doctest::Approx(p[c]).epsilon(1e-12));
  }

  // Repeat call is bit-identical.
  std::vector<double> s2 = t.scores(img);
  for (size_t c = 0; c < 5; ++c) CHECK(s[c] == s2[c]);

  CHECK_THROWS_AS(t.scores(Tensor::zeros({47})), ShapeError);
}

TEST_CASE("desk teacher reaches high clean accuracy on a small pool") {
  SyntheticDataset ds(teacher_config());
  TeacherTrainConfig tc;
  tc.hidden = 64;
  tc.epochs = 3;
  tc.batch_size = 50;
  tc.seed = 7;
  auto teacher = train_desk_teacher(ds, tc);
  double acc = teacher_accuracy(*teacher, ds, Split::test);
  CHECK(acc >= 0.85);

  // Retraining with the same seed reproduces the weights bit-exactly.
  auto teacher2 = train_desk_teacher(ds, tc);
  const auto& items1 = teacher->params().items();
  const auto& items2 = teacher2->params().items();
  REQUIRE(items1.size() == items2.size());
  for (size_t i = 0; i < items1.size(); ++i) {
    for (int64_t t = 0; t < items1[i].second->value.size(); ++t) {
      CHECK(items1[i].second->value[t] == items2[i].second->value[t]);
    }
  }
}

TEST_CASE("teacher checkpoint roundtrip preserves scores bit-exactly") {
  MlpTeacher t(27, 12, 4, 31);
  TempFile f("ckpt");
  save_teacher(t, f.path);
  auto back = load_teacher(f.path);
  CHECK(back->input_dim() == 27);
  CHECK(back->hidden() == 12);
  CHECK(back->class_count() == 4);
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor img = Tensor::randn({27}, rng);
    std::vector<double> a = t.scores(img);
    std::vector<double> b = back->scores(img);
    for (size_t c = 0; c < a.size(); ++c) CHECK(a[c] == b[c]);
  }

  CHECK_THROWS_AS(load_teacher("/tmp/semdistill_teach_missing"), IoError);
  TempFile junk("junk");
  {
    std::ofstream out(junk.path, std::ios::binary);
    const char zeros[16] = {};
    out.write(zeros, sizeof zeros);
  }
  CHECK_THROWS_AS(load_teacher(junk.path), FormatError);
}

TEST_CASE("prototype teacher classifies its own noisy samples") {
  PrototypeTeacher t(50, 3, 8, 8, 2.0, 99);
  for (uint64_t id : {0ull, 17ull, 49ull, 123ull}) {
    Tensor img = t.sample_image(id, 0.3);
    std::vector<double> s = t.scores(img);
    size_t arg = 0;
    for (size_t c = 1; c < s.size(); ++c) {
      if (s[c] > s[arg]) arg = c;
    }
    CHECK(uint64_t(arg) == id % 50);
  }
  CHECK(t.weight_bytes() == 50ull * 3 * 8 * 8 * 8);
  CHECK_THROWS_AS(t.scores(Tensor::zeros({10})), ShapeError);
  CHECK_THROWS_AS(PrototypeTeacher(1, 3, 8, 8, 1.0, 0), InvalidArgumentError);
  CHECK_THROWS_AS(PrototypeTeacher(5, 3, 8, 8, 0.0, 0), InvalidArgumentError);
}

TEST_CASE("extraction and the live compress path agree bit-exactly") {
  SyntheticDataset ds(teacher_config());
  MlpTeacher teacher(ds.config().pixels(), 32, 10, 3);  // untrained weights suffice
  const uint64_t n = 40;
  const uint32_t k = 4;
  TempFile f("store");
  auto scorer = [&](uint64_t id) { return teacher.scores(ds.get(Split::train, id).image); };
  extract_teacher_logits(scorer, n, 10, k, 2.0, f.path);

  auto records = read_all(f.path);
  REQUIRE(records.size() == n);
  for (uint64_t i = 0; i < n; ++i) {
    // Live path: fresh scores, same temperature, same compression.
    CompressedLogits live =
        compress_topk(temperature_softmax(teacher.scores(ds.get(Split::train, i).image), 2.0), k);
    live.sample_id = i;
    CHECK(records[i].sample_id == i);
    REQUIRE(records[i].indices.size() == k);
    for (uint32_t j = 0; j < k; ++j) {
      CHECK(records[i].indices[j] == live.indices[j]);
      uint32_t stored_bits, live_bits;
      std::memcpy(&stored_bits, &records[i].values[j], 4);
      std::memcpy(&live_bits, &live.values[j], 4);
      CHECK(stored_bits == live_bits);
    }
    // Smoothed dense vectors are then identical doubles.
    std::vector<double> a = smooth(records[i], 10);
    std::vector<double> b = smooth(live, 10);
    for (size_t c = 0; c < a.size(); ++c) CHECK(a[c] == b[c]);
  }
}
