#pragma once

// Flat key=value configuration with dotted sections, an FNV-1a content hash,
// struct mappers, and the per-run manifest that makes artifacts reproducible.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "semdistill/dataset.hpp"
#include "semdistill/model.hpp"
#include "semdistill/teacher.hpp"
#include "semdistill/training.hpp"

namespace semdistill {

inline constexpr const char* kVersion = "0.1.0";

// String-valued key/value map. Values keep their exact source text, so the
// serialized form — and therefore the hash — is independent of numeric
// formatting choices.
class Config {
 public:
  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;
  const std::map<std::string, std::string>& entries() const { return entries_; }

  std::string get_string(const std::string& key) const;
  double get_double(const std::string& key) const;
  int64_t get_int(const std::string& key) const;
  uint64_t get_u64(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  // Comma-separated lists.
  std::vector<double> get_double_list(const std::string& key) const;
  std::vector<int64_t> get_int_list(const std::string& key) const;

  // Sorted `key=value` lines, one per entry.
  std::string serialize() const;
  // FNV-1a 64 over serialize().
  uint64_t hash() const;

  // Parses `key=value` lines; '#' starts a comment, blank lines are ignored.
  static Config from_file(const std::string& path);
  // Overlays `other` on top of this config. When `known_only`, keys absent
  // from this config are rejected — catches typos in config files and flags.
  void merge(const Config& other, bool known_only);

 private:
  std::map<std::string, std::string> entries_;
};

// Every known key with its default value. Subcommands start from this and
// overlay config files, then command-line keys.
Config default_config();

// Mappers from the flat keys to the module structs.
DatasetConfig dataset_from_config(const Config& cfg);
EncoderConfig model_from_config(const Config& cfg);
DistillConfig distill_from_config(const Config& cfg);
TeacherTrainConfig teacher_train_from_config(const Config& cfg);

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

// One manifest per artifact directory: enough to re-run the command that
// produced it (full config text, seed, code version) plus provenance.
struct RunManifest {
  std::string command_line;
  std::string subcommand;
  Config config;
  uint64_t config_hash = 0;
  uint64_t seed = 0;
  std::string code_version = kVersion;
  std::string started_at;   // ISO 8601 UTC
  std::string finished_at;  // ISO 8601 UTC
  std::vector<std::string> outputs;
};

// Current UTC time as "YYYY-MM-DDTHH:MM:SSZ".
std::string utc_timestamp();

// Writes `<dir>/manifest.json`, replacing any previous manifest.
std::string write_run_manifest(const RunManifest& manifest, const std::string& dir);
RunManifest read_run_manifest(const std::string& manifest_path);

}  // namespace semdistill
