#include "semdistill/logit_store.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>

namespace semdistill {

namespace {

constexpr char kMagic[4] = {'F', 'D', 'L', 'S'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(char((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& buf, uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(char((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& buf, float f) {
  uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(buf, v);
}

void put_u16(std::string& buf, uint16_t v) {
  buf.push_back(char(v & 0xff));
  buf.push_back(char((v >> 8) & 0xff));
}

uint32_t get_u32(const unsigned char* p) {
  return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24;
}

uint64_t get_u64(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

float get_f32(const unsigned char* p) {
  uint32_t v = get_u32(p);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

uint16_t get_u16(const unsigned char* p) { return uint16_t(p[0]) | uint16_t(p[1]) << 8; }

std::string header_bytes(const LogitStoreHeader& h) {
  std::string buf;
  buf.reserve(kStoreHeaderBytes);
  buf.append(kMagic, 4);
  put_u32(buf, h.version);
  put_u32(buf, h.class_count);
  put_u32(buf, h.top_k);
  put_u32(buf, h.record_count);
  put_u32(buf, uint32_t(h.value_dtype));
  put_u32(buf, h.index_dtype);
  return buf;
}

}  // namespace

uint16_t f32_to_f16_bits(float f) {
  uint32_t x;
  std::memcpy(&x, &f, 4);
  uint32_t sign = (x >> 16) & 0x8000u;
  uint32_t mant = x & 0x007fffffu;
  int32_t exp = int32_t((x >> 23) & 0xffu) - 127 + 15;
  if (exp >= 31) return uint16_t(sign | 0x7c00u);
  if (exp <= 0) {
    if (exp < -10) return uint16_t(sign);
    mant |= 0x00800000u;
    uint32_t shift = uint32_t(14 - exp);
    uint32_t half = mant >> shift;
    uint32_t rem = mant & ((1u << shift) - 1u);
    uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (half & 1u))) ++half;
    return uint16_t(sign | half);
  }
  uint32_t half = (uint32_t(exp) << 10) | (mant >> 13);
  uint32_t rem = mant & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) ++half;
  return uint16_t(sign | half);
}

float f16_bits_to_f32(uint16_t h) {
  uint32_t sign = uint32_t(h & 0x8000u) << 16;
  uint32_t exp = (h >> 10) & 0x1fu;
  uint32_t mant = h & 0x3ffu;
  uint32_t x;
  if (exp == 0) {
    if (mant == 0) {
      x = sign;
    } else {
      int e = 0;
      while (!(mant & 0x400u)) {
        mant <<= 1;
        ++e;
      }
      mant &= 0x3ffu;
      x = sign | (uint32_t(127 - 15 - e + 1) << 23) | (mant << 13);
    }
  } else if (exp == 31) {
    x = sign | 0x7f800000u | (mant << 13);
  } else {
    x = sign | (uint32_t(int32_t(exp) - 15 + 127) << 23) | (mant << 13);
  }
  float f;
  std::memcpy(&f, &x, 4);
  return f;
}

void validate_compressed(const CompressedLogits& cl, uint32_t class_count, uint32_t top_k) {
  if (cl.indices.size() != top_k || cl.values.size() != top_k) {
    throw InvalidArgumentError("compressed record length does not match K=" +
                               std::to_string(top_k));
  }
  if (top_k < 1 || top_k >= class_count) {
    throw InvalidArgumentError("require 1 <= K < C");
  }
  double sum = 0.0;
  std::vector<uint32_t> seen;
  seen.reserve(cl.indices.size());
  for (size_t i = 0; i < cl.indices.size(); ++i) {
    if (cl.indices[i] >= class_count) {
      throw InvalidArgumentError("class index out of range");
    }
    float v = cl.values[i];
    if (!(v >= 0.0f) || v > 1.0f) {
      throw InvalidArgumentError("retained probability outside [0,1]");
    }
    if (i > 0 && (cl.values[i] > cl.values[i - 1])) {
      throw InvalidArgumentError("retained values must be non-increasing");
    }
    sum += v;
    seen.push_back(cl.indices[i]);
  }
  std::sort(seen.begin(), seen.end());
  if (std::adjacent_find(seen.begin(), seen.end()) != seen.end()) {
    throw InvalidArgumentError("duplicate class indices in compressed record");
  }
  if (sum < 0.0 || sum > 1.0 + 1e-5) {
    throw InvalidArgumentError("retained mass outside [0, 1+eps]");
  }
}

std::vector<double> temperature_softmax(const std::vector<double>& scores, double temperature) {
  if (scores.empty()) throw InvalidArgumentError("softmax of empty score vector");
  if (!(temperature > 0.0)) throw InvalidArgumentError("temperature must be positive");
  double mx = scores[0];
  for (double s : scores) mx = std::max(mx, s);
  std::vector<double> probs(scores.size());
  double sum = 0.0;
  for (size_t i = 0; i < scores.size(); ++i) {
    probs[i] = std::exp((scores[i] - mx) / temperature);
    sum += probs[i];
  }
  for (double& p : probs) p /= sum;
  return probs;
}

CompressedLogits compress_topk(const std::vector<double>& probs, int64_t k) {
  const int64_t c = int64_t(probs.size());
  if (k < 1 || k >= c) {
    throw InvalidArgumentError("compress_topk: require 1 <= K < C, got K=" + std::to_string(k) +
                               " C=" + std::to_string(c));
  }
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || p > 1.0) {
      throw InvalidArgumentError("compress_topk: probabilities must lie in [0,1]");
    }
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-5) {
    throw InvalidArgumentError("compress_topk: input does not sum to 1");
  }
  std::vector<uint32_t> order(static_cast<size_t>(c));
  std::iota(order.begin(), order.end(), 0u);
  std::partial_sort(order.begin(), order.begin() + k, order.end(),
                    [&probs](uint32_t a, uint32_t b) {
                      if (probs[a] != probs[b]) return probs[a] > probs[b];
                      return a < b;
                    });
  CompressedLogits cl;
  cl.indices.assign(order.begin(), order.begin() + k);
  cl.values.reserve(size_t(k));
  for (int64_t i = 0; i < k; ++i) cl.values.push_back(float(probs[cl.indices[size_t(i)]]));
  return cl;
}

std::vector<double> smooth(const CompressedLogits& cl, int64_t class_count) {
  const int64_t k = int64_t(cl.indices.size());
  if (class_count <= k) {
    throw InvalidArgumentError("smooth: C must exceed K (floor divides by C-K)");
  }
  validate_compressed(cl, uint32_t(class_count), uint32_t(k));
  double retained = 0.0;
  for (float v : cl.values) retained += double(v);
  const double floor_val = (1.0 - retained) / double(class_count - k);
  std::vector<double> dense(size_t(class_count), floor_val);
  for (int64_t i = 0; i < k; ++i) dense[cl.indices[size_t(i)]] = double(cl.values[size_t(i)]);
  return dense;
}

// ---------------------------------------------------------------------------

LogitStoreWriter::LogitStoreWriter(const std::string& path, uint32_t class_count, uint32_t top_k,
                                   ValueDtype value_dtype)
    : path_(path) {
  if (top_k < 1 || top_k >= class_count) {
    throw InvalidArgumentError("logit store: require 1 <= K < C");
  }
  header_.version = kVersion;
  header_.class_count = class_count;
  header_.top_k = top_k;
  header_.record_count = 0;
  header_.value_dtype = value_dtype;
  header_.index_dtype = 0;
  out_.open(path, std::ios::binary | std::ios::trunc);
  if (!out_) throw IoError("cannot open logit store for writing: " + path);
  std::string h = header_bytes(header_);
  out_.write(h.data(), std::streamsize(h.size()));
  if (!out_) throw IoError("cannot write logit store header: " + path);
}

LogitStoreWriter::~LogitStoreWriter() {
  if (!finished_) {
    try {
      finish();
    } catch (...) {
    }
  }
}

void LogitStoreWriter::append(const CompressedLogits& cl) {
  if (finished_) throw IoError("append to a finished logit store: " + path_);
  if (cl.indices.size() != header_.top_k || cl.values.size() != header_.top_k) {
    throw FormatError("record K does not match store header K=" + std::to_string(header_.top_k));
  }
  validate_compressed(cl, header_.class_count, header_.top_k);
  std::string buf;
  buf.reserve(size_t(store_record_bytes(header_.top_k, header_.value_dtype)));
  put_u64(buf, cl.sample_id);
  for (uint32_t idx : cl.indices) put_u32(buf, idx);
  if (header_.value_dtype == ValueDtype::f16) {
    for (float v : cl.values) put_u16(buf, f32_to_f16_bits(v));
  } else {
    for (float v : cl.values) put_f32(buf, v);
  }
  out_.write(buf.data(), std::streamsize(buf.size()));
  if (!out_) throw IoError("write failure on logit store: " + path_);
  ++count_;
}

uint64_t LogitStoreWriter::finish() {
  if (finished_) return count_;
  finished_ = true;
  header_.record_count = uint32_t(count_);
  out_.seekp(0);
  std::string h = header_bytes(header_);
  out_.write(h.data(), std::streamsize(h.size()));
  out_.close();
  if (!out_) throw IoError("finalize failure on logit store: " + path_);
  return count_;
}

LogitStoreReader::LogitStoreReader(const std::string& path) : path_(path) {
  in_.open(path, std::ios::binary);
  if (!in_) throw IoError("cannot open logit store: " + path);
  unsigned char raw[kStoreHeaderBytes];
  in_.read(reinterpret_cast<char*>(raw), kStoreHeaderBytes);
  if (in_.gcount() != kStoreHeaderBytes) {
    throw FormatError("logit store truncated inside header at byte " +
                      std::to_string(in_.gcount()) + ": " + path);
  }
  if (std::memcmp(raw, kMagic, 4) != 0) {
    throw FormatError("bad logit store magic (want FDLS): " + path);
  }
  header_.version = get_u32(raw + 4);
  if (header_.version != kVersion) {
    throw FormatError("unsupported logit store version " + std::to_string(header_.version) +
                      ": " + path);
  }
  header_.class_count = get_u32(raw + 8);
  header_.top_k = get_u32(raw + 12);
  header_.record_count = get_u32(raw + 16);
  uint32_t dtype = get_u32(raw + 20);
  if (dtype != uint32_t(ValueDtype::f32) && dtype != uint32_t(ValueDtype::f16)) {
    throw FormatError("unknown value dtype code " + std::to_string(dtype) + ": " + path);
  }
  header_.value_dtype = ValueDtype(dtype);
  header_.index_dtype = get_u32(raw + 24);
  if (header_.index_dtype != 0) {
    throw FormatError("unknown index dtype code " + std::to_string(header_.index_dtype) + ": " +
                      path);
  }
  if (header_.top_k < 1 || header_.top_k >= header_.class_count) {
    throw FormatError("logit store header has K outside [1, C): " + path);
  }
  // Validate physical record count against the file size up front.
  auto expected = uint64_t(kStoreHeaderBytes) +
                  uint64_t(header_.record_count) *
                      uint64_t(store_record_bytes(header_.top_k, header_.value_dtype));
  auto actual = std::filesystem::file_size(path);
  if (actual != expected) {
    throw FormatError("logit store size mismatch at byte " + std::to_string(actual) +
                      " (expected " + std::to_string(expected) + "): " + path);
  }
}

bool LogitStoreReader::next(CompressedLogits& out) {
  if (cursor_ >= header_.record_count) return false;
  const int64_t rec = store_record_bytes(header_.top_k, header_.value_dtype);
  std::vector<unsigned char> raw(static_cast<size_t>(rec));
  in_.read(reinterpret_cast<char*>(raw.data()), rec);
  if (in_.gcount() != rec) {
    throw FormatError("logit store truncated at byte " +
                      std::to_string(kStoreHeaderBytes + int64_t(cursor_) * rec + in_.gcount()) +
                      ": " + path_);
  }
  out.sample_id = get_u64(raw.data());
  const uint32_t k = header_.top_k;
  out.indices.resize(k);
  out.values.resize(k);
  const unsigned char* p = raw.data() + 8;
  for (uint32_t i = 0; i < k; ++i, p += 4) out.indices[i] = get_u32(p);
  if (header_.value_dtype == ValueDtype::f16) {
    for (uint32_t i = 0; i < k; ++i, p += 2) out.values[i] = f16_bits_to_f32(get_u16(p));
  } else {
    for (uint32_t i = 0; i < k; ++i, p += 4) out.values[i] = get_f32(p);
  }
  ++cursor_;
  return true;
}

void LogitStoreReader::reset() {
  in_.clear();
  in_.seekg(kStoreHeaderBytes);
  cursor_ = 0;
}

uint64_t write_store(const std::string& path, const LogitStoreHeader& header,
                     const std::vector<CompressedLogits>& records) {
  LogitStoreWriter w(path, header.class_count, header.top_k, header.value_dtype);
  for (const auto& r : records) w.append(r);
  return w.finish();
}

std::vector<CompressedLogits> read_all(const std::string& path, LogitStoreHeader* header_out) {
  LogitStoreReader r(path);
  if (header_out) *header_out = r.header();
  std::vector<CompressedLogits> out;
  out.reserve(r.header().record_count);
  CompressedLogits cl;
  while (r.next(cl)) out.push_back(cl);
  return out;
}

ExtractSummary extract_teacher_logits(
    const std::function<std::vector<double>(uint64_t)>& teacher_scores, uint64_t sample_count,
    uint32_t class_count, uint32_t top_k, double temperature, const std::string& path,
    ValueDtype value_dtype) {
  Stopwatch sw;
  LogitStoreWriter writer(path, class_count, top_k, value_dtype);
  for (uint64_t id = 0; id < sample_count; ++id) {
    std::vector<double> scores = teacher_scores(id);
    if (scores.size() != class_count) {
      throw ShapeError("teacher returned " + std::to_string(scores.size()) +
                       " scores, expected C=" + std::to_string(class_count));
    }
    CompressedLogits cl = compress_topk(temperature_softmax(scores, temperature), top_k);
    cl.sample_id = id;
    writer.append(cl);
  }
  ExtractSummary s;
  s.record_count = writer.finish();
  s.payload_bytes = s.record_count * uint64_t(store_record_bytes(top_k, value_dtype));
  s.file_bytes = uint64_t(kStoreHeaderBytes) + s.payload_bytes;
  s.dense_bytes = s.record_count * uint64_t(class_count) * 4;
  s.compression_ratio =
      s.payload_bytes == 0 ? 0.0 : double(s.dense_bytes) / double(s.payload_bytes);
  s.wall_ms = sw.elapsed_ms();
  return s;
}

}  // namespace semdistill
