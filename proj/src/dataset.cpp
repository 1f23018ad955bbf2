#include "semdistill/dataset.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace semdistill {

namespace {

constexpr uint64_t kProtoTag = 0x70726f746fULL;    // "proto"
constexpr uint64_t kStructTag = 0x7374727563ULL;   // "struc"
constexpr uint64_t kPixelTag = 0x706978656cULL;    // "pixel"
constexpr uint64_t kCorruptTag = 0x636f727275ULL;  // "corru"
constexpr double kTwoPi = 6.283185307179586476925;

uint64_t split_code(Split s) {
  switch (s) {
    case Split::train: return 1;
    case Split::test: return 2;
    case Split::teacher_pool: return 3;
  }
  throw InvalidArgumentError("unknown split");
}

}  // namespace

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test: return "test";
    case Split::teacher_pool: return "teacher_pool";
  }
  return "?";
}

void DatasetConfig::validate() const {
  if (class_count < 2) throw InvalidArgumentError("dataset needs at least 2 classes");
  if (channels < 1 || height < 1 || width < 1) {
    throw InvalidArgumentError("dataset image dimensions must be positive");
  }
  if (train_size < 1 || test_size < 1 || teacher_pool_size < 1) {
    throw InvalidArgumentError("dataset split sizes must be positive");
  }
  if (waves < 1) throw InvalidArgumentError("waves must be positive");
  if (blend_prob < 0.0 || blend_prob > 1.0) {
    throw InvalidArgumentError("blend_prob must lie in [0, 1]");
  }
  if (blend_max < 0.0 || blend_max >= 0.5) {
    throw InvalidArgumentError("blend_max must lie in [0, 0.5) so the labeled class dominates");
  }
  if (gain_jitter < 0.0 || gain_jitter >= 1.0) {
    throw InvalidArgumentError("gain_jitter must lie in [0, 1)");
  }
  if (pixel_noise < 0.0) throw InvalidArgumentError("pixel_noise must be non-negative");
  if (label_corrupt_rate < 0.0 || label_corrupt_rate > 1.0) {
    throw InvalidArgumentError("label_corrupt_rate must lie in [0, 1]");
  }
}

Tensor random_cosine_field(int64_t channels, int64_t height, int64_t width, int waves, Rng& rng) {
  Tensor p({channels, height, width});
  for (int64_t ch = 0; ch < channels; ++ch) {
    for (int w = 0; w < waves; ++w) {
      double fx = rng.uniform(0.3, 2.8);
      double fy = rng.uniform(0.3, 2.8);
      double amp = rng.normal();
      double phase = rng.uniform(0.0, kTwoPi);
      for (int64_t y = 0; y < height; ++y) {
        for (int64_t x = 0; x < width; ++x) {
          double arg =
              kTwoPi * (fx * double(x) / double(width) + fy * double(y) / double(height)) + phase;
          p[(ch * height + y) * width + x] += amp * std::cos(arg);
        }
      }
    }
  }
  double ms = 0.0;
  for (int64_t i = 0; i < p.size(); ++i) ms += p[i] * p[i];
  double scale = 1.0 / std::sqrt(ms / double(p.size()));
  for (int64_t i = 0; i < p.size(); ++i) p[i] *= scale;
  return p;
}

SyntheticDataset::SyntheticDataset(DatasetConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  prototypes_.reserve(cfg_.class_count);
  for (uint32_t c = 0; c < cfg_.class_count; ++c) {
    Rng rng(derive_seed(cfg_.seed, kProtoTag, c));
    prototypes_.push_back(
        random_cosine_field(cfg_.channels, cfg_.height, cfg_.width, cfg_.waves, rng));
  }
}

int64_t SyntheticDataset::size(Split s) const {
  switch (s) {
    case Split::train: return cfg_.train_size;
    case Split::test: return cfg_.test_size;
    case Split::teacher_pool: return cfg_.teacher_pool_size;
  }
  throw InvalidArgumentError("unknown split");
}

const Tensor& SyntheticDataset::prototype(uint32_t cls) const {
  if (cls >= cfg_.class_count) throw InvalidArgumentError("prototype class out of range");
  return prototypes_[cls];
}

SyntheticDataset::Draw SyntheticDataset::draw_sample(Split s, uint64_t index) const {
  if (int64_t(index) >= size(s)) {
    throw InvalidArgumentError("sample index out of range for split " +
                               std::string(split_name(s)));
  }
  Draw d;
  d.primary = uint32_t(index % cfg_.class_count);
  Rng rng(derive_seed(cfg_.seed, kStructTag, split_code(s), index));
  d.secondary = d.primary;
  d.lambda = 0.0;
  if (rng.uniform() < cfg_.blend_prob) {
    d.secondary = uint32_t((d.primary + 1 + rng.uniform_int(cfg_.class_count - 1)) %
                           cfg_.class_count);
    d.lambda = rng.uniform(0.0, cfg_.blend_max);
  }
  d.gain = 1.0 + rng.uniform(-cfg_.gain_jitter, cfg_.gain_jitter);
  d.label = d.primary;
  if (s == Split::train && cfg_.label_corrupt_rate > 0.0) {
    Rng crng(derive_seed(cfg_.seed, kCorruptTag, split_code(s), index));
    if (crng.uniform() < cfg_.label_corrupt_rate) {
      d.label = uint32_t((d.primary + 1 + crng.uniform_int(cfg_.class_count - 1)) %
                         cfg_.class_count);
    }
  }
  return d;
}

uint32_t SyntheticDataset::clean_label(Split s, uint64_t index) const {
  return draw_sample(s, index).primary;
}

Sample SyntheticDataset::get(Split s, uint64_t index) const {
  Draw d = draw_sample(s, index);
  const Tensor& pa = prototypes_[d.primary];
  const Tensor& pb = prototypes_[d.secondary];
  Sample out;
  out.sample_id = index;
  out.label = d.label;
  out.image = Tensor({cfg_.channels, cfg_.height, cfg_.width});
  Rng prng(derive_seed(cfg_.seed, kPixelTag, split_code(s), index));
  double wa = d.gain * (1.0 - d.lambda), wb = d.gain * d.lambda;
  for (int64_t i = 0; i < out.image.size(); ++i) {
    out.image[i] = wa * pa[i] + wb * pb[i] + cfg_.pixel_noise * prng.normal();
  }
  return out;
}

void save_dataset_config(const DatasetConfig& cfg, const std::string& path) {
  std::ostringstream os;
  os.precision(17);
  os << "class_count=" << cfg.class_count << "\n"
     << "channels=" << cfg.channels << "\n"
     << "height=" << cfg.height << "\n"
     << "width=" << cfg.width << "\n"
     << "seed=" << cfg.seed << "\n"
     << "train_size=" << cfg.train_size << "\n"
     << "test_size=" << cfg.test_size << "\n"
     << "teacher_pool_size=" << cfg.teacher_pool_size << "\n"
     << "waves=" << cfg.waves << "\n"
     << "blend_prob=" << cfg.blend_prob << "\n"
     << "blend_max=" << cfg.blend_max << "\n"
     << "gain_jitter=" << cfg.gain_jitter << "\n"
     << "pixel_noise=" << cfg.pixel_noise << "\n"
     << "label_corrupt_rate=" << cfg.label_corrupt_rate << "\n";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open dataset config for writing: " + path);
  out << os.str();
  if (!out) throw IoError("write failure on dataset config: " + path);
}

DatasetConfig load_dataset_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset config: " + path);
  DatasetConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError("dataset config line " + std::to_string(lineno) + " lacks '=': " + line);
    }
    std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    try {
      if (key == "class_count") cfg.class_count = uint32_t(std::stoul(val));
      else if (key == "channels") cfg.channels = std::stoll(val);
      else if (key == "height") cfg.height = std::stoll(val);
      else if (key == "width") cfg.width = std::stoll(val);
      else if (key == "seed") cfg.seed = std::stoull(val);
      else if (key == "train_size") cfg.train_size = std::stoll(val);
      else if (key == "test_size") cfg.test_size = std::stoll(val);
      else if (key == "teacher_pool_size") cfg.teacher_pool_size = std::stoll(val);
      else if (key == "waves") cfg.waves = std::stoi(val);
      else if (key == "blend_prob") cfg.blend_prob = std::stod(val);
      else if (key == "blend_max") cfg.blend_max = std::stod(val);
      else if (key == "gain_jitter") cfg.gain_jitter = std::stod(val);
      else if (key == "pixel_noise") cfg.pixel_noise = std::stod(val);
      else if (key == "label_corrupt_rate") cfg.label_corrupt_rate = std::stod(val);
      else throw FormatError("unknown dataset config key: " + key);
    } catch (const std::invalid_argument&) {
      throw FormatError("unparseable value for " + key + ": " + val);
    } catch (const std::out_of_range&) {
      throw FormatError("out-of-range value for " + key + ": " + val);
    }
  }
  cfg.validate();
  return cfg;
}

Tensor stack_images(const SyntheticDataset& ds, Split s, const std::vector<uint64_t>& indices) {
  const auto& cfg = ds.config();
  Tensor batch({int64_t(indices.size()), cfg.channels, cfg.height, cfg.width});
  int64_t per = cfg.pixels();
  for (size_t i = 0; i < indices.size(); ++i) {
    Sample smp = ds.get(s, indices[i]);
    std::memcpy(batch.data() + int64_t(i) * per, smp.image.data(), size_t(per) * sizeof(double));
  }
  return batch;
}

}  // namespace semdistill
