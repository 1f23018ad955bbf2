#ifndef SEMDISTILL_LOGIT_STORE_HPP
#define SEMDISTILL_LOGIT_STORE_HPP

#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "semdistill/common.hpp"

namespace semdistill {

// Top-K sparse teacher output for one sample. Values are kept in single
// precision end to end so the in-training path and the store path round
// identically and file roundtrips are bit-exact.
struct CompressedLogits {
  uint64_t sample_id = 0;
  std::vector<uint32_t> indices;
  std::vector<float> values;
};

enum class ValueDtype : uint32_t { f32 = 0, f16 = 1 };

struct LogitStoreHeader {
  uint32_t version = 1;
  uint32_t class_count = 0;
  uint32_t top_k = 0;
  uint32_t record_count = 0;
  ValueDtype value_dtype = ValueDtype::f32;
  uint32_t index_dtype = 0;  // 0 = u32
};

// 4-byte magic + six u32 fields.
constexpr int64_t kStoreHeaderBytes = 28;

inline int64_t store_record_bytes(uint32_t k, ValueDtype dtype) {
  return 8 + int64_t(k) * 4 + int64_t(k) * (dtype == ValueDtype::f16 ? 2 : 4);
}

// Throws InvalidArgumentError if cl violates its invariants for (C, K).
void validate_compressed(const CompressedLogits& cl, uint32_t class_count, uint32_t top_k);

// probs = exp(scores/T) / sum, computed with max subtraction.
std::vector<double> temperature_softmax(const std::vector<double>& scores, double temperature);

// K largest entries, ties to the smaller class index, values rounded to f32.
CompressedLogits compress_topk(const std::vector<double>& probs, int64_t k);

// Dense reconstruction: retained values kept, remaining mass spread evenly
// over the other C-K classes.
std::vector<double> smooth(const CompressedLogits& cl, int64_t class_count);

// Streaming writer. Header is written up front with a zero record count and
// patched in finish(); the destructor finalizes silently if needed.
class LogitStoreWriter {
 public:
  LogitStoreWriter(const std::string& path, uint32_t class_count, uint32_t top_k,
                   ValueDtype value_dtype = ValueDtype::f32);
  ~LogitStoreWriter();
  LogitStoreWriter(const LogitStoreWriter&) = delete;
  LogitStoreWriter& operator=(const LogitStoreWriter&) = delete;

  void append(const CompressedLogits& cl);
  // Patches the header record count and closes the file. Returns the count.
  uint64_t finish();

 private:
  std::string path_;
  std::ofstream out_;
  LogitStoreHeader header_;
  uint64_t count_ = 0;
  bool finished_ = false;
};

// Lazy streaming reader; memory use is constant in the record count.
class LogitStoreReader {
 public:
  explicit LogitStoreReader(const std::string& path);

  const LogitStoreHeader& header() const { return header_; }
  // Fills out and returns true, or returns false at end of stream.
  bool next(CompressedLogits& out);
  // Rewind to the first record.
  void reset();

 private:
  std::string path_;
  std::ifstream in_;
  LogitStoreHeader header_;
  uint64_t cursor_ = 0;
};

uint64_t write_store(const std::string& path, const LogitStoreHeader& header,
                     const std::vector<CompressedLogits>& records);

// Eager load of every record, in stored order.
std::vector<CompressedLogits> read_all(const std::string& path, LogitStoreHeader* header_out = nullptr);

struct ExtractSummary {
  uint64_t record_count = 0;
  uint64_t payload_bytes = 0;  // record payload, header excluded
  uint64_t file_bytes = 0;
  uint64_t dense_bytes = 0;  // f32 dense baseline: 4*C per sample
  double compression_ratio = 0.0;
  double wall_ms = 0.0;
};

// Runs the scorer over sample_ids [0, sample_count), converts scores to
// temperature-scaled probabilities, compresses, and appends to the store.
ExtractSummary extract_teacher_logits(
    const std::function<std::vector<double>(uint64_t)>& teacher_scores, uint64_t sample_count,
    uint32_t class_count, uint32_t top_k, double temperature, const std::string& path,
    ValueDtype value_dtype = ValueDtype::f32);

// IEEE 754 half-precision conversion (round to nearest even).
uint16_t f32_to_f16_bits(float f);
float f16_bits_to_f32(uint16_t h);

}  // namespace semdistill

#endif  // SEMDISTILL_LOGIT_STORE_HPP
