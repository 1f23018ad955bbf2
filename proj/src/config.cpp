#include "semdistill/config.hpp"

#include <charconv>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace semdistill {

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw FormatError("config key " + key + " has a malformed value '" + text + "'");
  }
  return v;
}

std::vector<std::string> split_commas(const std::string& text) {
  std::vector<std::string> parts;
  size_t start = 0;
  while (true) {
    size_t comma = text.find(',', start);
    if (comma == std::string::npos) {
      parts.push_back(text.substr(start));
      return parts;
    }
    parts.push_back(text.substr(start, comma - start));
    start = comma + 1;
  }
}

}  // namespace

void Config::set(const std::string& key, const std::string& value) {
  if (key.empty()) throw InvalidArgumentError("config key may not be empty");
  if (key.find_first_of("=\n#") != std::string::npos || value.find('\n') != std::string::npos) {
    throw InvalidArgumentError("config entry contains reserved characters: " + key);
  }
  entries_[key] = value;
}

bool Config::has(const std::string& key) const { return entries_.count(key) != 0; }

std::string Config::get_string(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw InvalidArgumentError("missing config key: " + key);
  return it->second;
}

double Config::get_double(const std::string& key) const {
  return parse_number<double>(key, get_string(key));
}

int64_t Config::get_int(const std::string& key) const {
  return parse_number<int64_t>(key, get_string(key));
}

uint64_t Config::get_u64(const std::string& key) const {
  return parse_number<uint64_t>(key, get_string(key));
}

bool Config::get_bool(const std::string& key) const {
  const std::string v = get_string(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw FormatError("config key " + key + " expects true/false, got '" + v + "'");
}

std::vector<double> Config::get_double_list(const std::string& key) const {
  std::vector<double> out;
  for (const std::string& part : split_commas(get_string(key))) {
    out.push_back(parse_number<double>(key, trim(part)));
  }
  return out;
}

std::vector<int64_t> Config::get_int_list(const std::string& key) const {
  std::vector<int64_t> out;
  for (const std::string& part : split_commas(get_string(key))) {
    out.push_back(parse_number<int64_t>(key, trim(part)));
  }
  return out;
}

std::string Config::serialize() const {
  std::ostringstream out;
  for (const auto& [k, v] : entries_) out << k << "=" << v << "\n";
  return out.str();
}

uint64_t Config::hash() const {
  const std::string text = serialize();
  uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

Config Config::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  Config cfg;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": empty key");
    }
    cfg.set(key, value);
  }
  return cfg;
}

void Config::merge(const Config& other, bool known_only) {
  for (const auto& [k, v] : other.entries_) {
    if (known_only && !has(k)) {
      throw UsageError("unknown config key: " + k);
    }
    entries_[k] = v;
  }
}

Config default_config() {
  Config c;
  c.set("dataset.classes", "10");
  c.set("dataset.channels", "3");
  c.set("dataset.height", "32");
  c.set("dataset.width", "32");
  c.set("dataset.seed", "1234");
  c.set("dataset.train_size", "4000");
  c.set("dataset.test_size", "1000");
  c.set("dataset.teacher_pool", "10000");
  c.set("dataset.waves", "3");
  c.set("dataset.blend_prob", "0.5");
  c.set("dataset.blend_max", "0.4");
  c.set("dataset.gain_jitter", "0.15");
  c.set("dataset.pixel_noise", "0.25");
  c.set("dataset.label_corrupt", "0.2");

  c.set("model.widths", "16,24,32,48");
  c.set("model.heads", "2");
  c.set("model.mlp_ratio", "2");
  c.set("model.decoder_hidden", "64");
  c.set("model.adapt_hidden", "0");
  c.set("model.seed", "5");

  c.set("loss.beta", "512");
  c.set("loss.temperature", "2.0");

  c.set("channel.train_low_db", "-6");
  c.set("channel.train_high_db", "14");

  c.set("train.top_k", "5");
  c.set("train.batch", "32");
  c.set("train.epochs", "12");
  c.set("train.lr", "1e-3");
  c.set("train.cosine", "true");
  c.set("train.seed", "7");
  c.set("train.label_mode", "teacher_soft");
  c.set("train.max_samples", "-1");
  c.set("train.adaptive", "true");
  c.set("train.augment", "true");

  c.set("store.dtype", "f32");

  c.set("eval.snr_grid", "-4,0,4,8,12");
  c.set("eval.seeds", "3");
  c.set("eval.batch", "64");
  c.set("eval.max_samples", "-1");
  c.set("eval.split", "test");
  c.set("eval.scheme", "student");
  c.set("eval.adaptive", "true");

  c.set("teacher.hidden", "512");
  c.set("teacher.epochs", "4");
  c.set("teacher.batch", "64");
  c.set("teacher.lr", "1e-3");
  c.set("teacher.seed", "99");

  c.set("ablate.wide_classes", "1000");
  c.set("ablate.wide_topk", "10");
  c.set("ablate.wide_count", "200");
  c.set("ablate.wide_tau", "0.5");
  c.set("ablate.wide_noise", "0.05");
  c.set("ablate.wide_seed", "321");
  return c;
}

DatasetConfig dataset_from_config(const Config& cfg) {
  DatasetConfig d;
  d.class_count = uint32_t(cfg.get_int("dataset.classes"));
  d.channels = cfg.get_int("dataset.channels");
  d.height = cfg.get_int("dataset.height");
  d.width = cfg.get_int("dataset.width");
  d.seed = cfg.get_u64("dataset.seed");
  d.train_size = cfg.get_int("dataset.train_size");
  d.test_size = cfg.get_int("dataset.test_size");
  d.teacher_pool_size = cfg.get_int("dataset.teacher_pool");
  d.waves = int(cfg.get_int("dataset.waves"));
  d.blend_prob = cfg.get_double("dataset.blend_prob");
  d.blend_max = cfg.get_double("dataset.blend_max");
  d.gain_jitter = cfg.get_double("dataset.gain_jitter");
  d.pixel_noise = cfg.get_double("dataset.pixel_noise");
  d.label_corrupt_rate = cfg.get_double("dataset.label_corrupt");
  d.validate();
  return d;
}

EncoderConfig model_from_config(const Config& cfg) {
  EncoderConfig m;
  m.in_channels = cfg.get_int("dataset.channels");
  m.in_h = cfg.get_int("dataset.height");
  m.in_w = cfg.get_int("dataset.width");
  m.stage_widths = cfg.get_int_list("model.widths");
  m.heads = cfg.get_int("model.heads");
  m.mlp_ratio = cfg.get_int("model.mlp_ratio");
  m.decoder_hidden = cfg.get_int("model.decoder_hidden");
  m.adapt_hidden = cfg.get_int("model.adapt_hidden");
  m.class_count = cfg.get_int("dataset.classes");
  m.validate();
  return m;
}

DistillConfig distill_from_config(const Config& cfg) {
  DistillConfig d;
  d.beta = cfg.get_double("loss.beta");
  d.top_k = uint32_t(cfg.get_int("train.top_k"));
  d.batch_size = cfg.get_int("train.batch");
  d.epochs = cfg.get_int("train.epochs");
  d.lr = cfg.get_double("train.lr");
  d.cosine_schedule = cfg.get_bool("train.cosine");
  d.train_snr.low_db = cfg.get_double("channel.train_low_db");
  d.train_snr.high_db = cfg.get_double("channel.train_high_db");
  d.seed = cfg.get_u64("train.seed");
  d.label_mode = parse_label_mode(cfg.get_string("train.label_mode"));
  d.temperature = cfg.get_double("loss.temperature");
  d.adaptive = cfg.get_bool("train.adaptive");
  d.augment = cfg.get_bool("train.augment");
  d.max_train_samples = cfg.get_int("train.max_samples");
  d.validate(cfg.get_int("dataset.classes"));
  return d;
}

TeacherTrainConfig teacher_train_from_config(const Config& cfg) {
  TeacherTrainConfig t;
  t.hidden = cfg.get_int("teacher.hidden");
  t.epochs = cfg.get_int("teacher.epochs");
  t.batch_size = cfg.get_int("teacher.batch");
  t.lr = cfg.get_double("teacher.lr");
  t.seed = cfg.get_u64("teacher.seed");
  return t;
}

std::string utc_timestamp() {
  std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string write_run_manifest(const RunManifest& manifest, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
  nlohmann::json cfg = nlohmann::json::object();
  for (const auto& [k, v] : manifest.config.entries()) cfg[k] = v;
  nlohmann::json j{{"command_line", manifest.command_line},
                   {"subcommand", manifest.subcommand},
                   {"config", cfg},
                   {"config_hash", manifest.config_hash},
                   {"seed", manifest.seed},
                   {"code_version", manifest.code_version},
                   {"started_at", manifest.started_at},
                   {"finished_at", manifest.finished_at},
                   {"outputs", manifest.outputs}};
  const std::string path = (std::filesystem::path(dir) / "manifest.json").string();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for write: " + path);
  out << j.dump(2) << "\n";
  out.flush();
  if (!out) throw IoError("write failed: " + path);
  return path;
}

RunManifest read_run_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw IoError("cannot open " + manifest_path);
  nlohmann::json j;
  try {
    in >> j;
    RunManifest m;
    m.command_line = j.at("command_line").get<std::string>();
    m.subcommand = j.at("subcommand").get<std::string>();
    for (const auto& [k, v] : j.at("config").items()) {
      m.config.set(k, v.get<std::string>());
    }
    m.config_hash = j.at("config_hash").get<uint64_t>();
    m.seed = j.at("seed").get<uint64_t>();
    m.code_version = j.at("code_version").get<std::string>();
    m.started_at = j.at("started_at").get<std::string>();
    m.finished_at = j.at("finished_at").get<std::string>();
    m.outputs = j.at("outputs").get<std::vector<std::string>>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest " + manifest_path + ": " + e.what());
  }
}

}  // namespace semdistill
