#include "semdistill/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace semdistill {

using nlohmann::json;

void EncoderConfig::validate() const {
  if (in_channels < 1 || in_h < 4 || in_w < 4) {
    throw InvalidArgumentError("encoder input must be at least 4x4 with one channel");
  }
  if (stage_widths.size() != 4) {
    throw InvalidArgumentError("encoder requires exactly 4 stage widths");
  }
  for (int64_t w : stage_widths) {
    if (w < 1) throw InvalidArgumentError("stage widths must be positive");
    if (w % heads != 0) {
      throw InvalidArgumentError("stage width " + std::to_string(w) +
                                 " must divide by head count " + std::to_string(heads));
    }
  }
  if (heads < 1 || mlp_ratio < 1 || decoder_hidden < 1 || class_count < 2 || adapt_hidden < 0) {
    throw InvalidArgumentError("invalid encoder config scalar field");
  }
}

StudentModel::StudentModel(EncoderConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(derive_seed(seed, 0xA11C0DE));
  const int64_t w0 = cfg_.stage_widths[0];
  patch1_ = nn::Conv2dLayer(params_, "patch1", cfg_.in_channels, w0, 3, 2, 1, rng);
  patch2_ = nn::Conv2dLayer(params_, "patch2", w0, w0, 3, 2, 1, rng);
  const int64_t L = cfg_.feature_h() * cfg_.feature_w();
  pos_embed_ = params_.add("pos_embed", Tensor::randn({L, w0}, rng, 0.02));
  int64_t prev = w0;
  for (size_t s = 0; s < cfg_.stage_widths.size(); ++s) {
    int64_t width = cfg_.stage_widths[s];
    std::string prefix = "stage" + std::to_string(s);
    if (width != prev) {
      stage_proj_.emplace_back(params_, prefix + ".proj", prev, width, rng);
    } else {
      stage_proj_.emplace_back();
    }
    blocks_.emplace_back(params_, prefix + ".block", width, cfg_.heads, cfg_.mlp_ratio, rng);
    prev = width;
  }
  final_ln_ = nn::LayerNormLayer(params_, "final_ln", prev);
  const int64_t cf = cfg_.feature_channels();
  const int64_t ah = cfg_.adapt_hidden > 0 ? cfg_.adapt_hidden : cf;
  adapt_fc1_ = nn::Dense(params_, "adapt.fc1", cf + 1, ah, rng);
  adapt_fc2_ = nn::Dense(params_, "adapt.fc2", ah, cf, rng);
  dec_fc1_ = nn::Dense(params_, "decoder.fc1", cf, cfg_.decoder_hidden, rng);
  dec_fc2_ = nn::Dense(params_, "decoder.fc2", cfg_.decoder_hidden, cfg_.class_count, rng);
  log_variance_ = params_.add("density.log_variance", Tensor::zeros({1}));
}

ad::Var StudentModel::encode(const ad::Var& images) const {
  const auto& shape = images->value.shape();
  if (shape.size() != 4 || shape[1] != cfg_.in_channels || shape[2] != cfg_.in_h ||
      shape[3] != cfg_.in_w) {
    throw ShapeError("encode: image batch shape " + Tensor::shape_str(shape) +
                     " does not match config");
  }
  const int64_t n = shape[0];
  const int64_t h = cfg_.feature_h(), w = cfg_.feature_w(), L = h * w;
  ad::Var feat = patch2_(ad::gelu(patch1_(images)));  // [N, w0, h, w]
  ad::Var tokens = ad::nchw_to_tokens(feat);          // [N*L, w0]
  tokens = ad::add_tile_rows(tokens, pos_embed_, n);
  for (size_t s = 0; s < blocks_.size(); ++s) {
    if (stage_proj_[s].w) tokens = stage_proj_[s](tokens);
    tokens = blocks_[s].forward(tokens, n, L);
  }
  tokens = final_ln_(tokens);
  return ad::tokens_to_nchw(tokens, n, cfg_.feature_channels(), h, w);
}

ad::Var StudentModel::adapt_weights(const ad::Var& x0, double snr_db) const {
  const int64_t n = x0->value.dim(0);
  ad::Var pooled = ad::global_avg_pool(x0);  // [N, Cf]
  ad::Var snr_col = ad::constant(Tensor::full({n, 1}, snr_db / 20.0));
  ad::Var inp = ad::concat_cols(pooled, snr_col);
  return ad::sigmoid(adapt_fc2_(ad::gelu(adapt_fc1_(inp))));
}

ad::Var StudentModel::apply_weights(const ad::Var& x0, const ad::Var& w) const {
  return ad::channel_scale(x0, w);
}

ad::Var StudentModel::decode(const ad::Var& xp) const {
  const auto& shape = xp->value.shape();
  if (shape.size() != 4 || shape[1] != cfg_.feature_channels() ||
      shape[2] != cfg_.feature_h() || shape[3] != cfg_.feature_w()) {
    throw ShapeError("decode: feature shape " + Tensor::shape_str(shape) +
                     " does not match config");
  }
  ad::Var pooled = ad::global_avg_pool(xp);
  return ad::softmax_last(dec_fc2_(ad::gelu(dec_fc1_(pooled))));
}

StudentModel::Graph StudentModel::forward_graph(const Tensor& images, double snr_db,
                                                const ChannelState& state, Rng& noise_rng,
                                                bool adaptive_gate) const {
  Graph g;
  const int64_t n = images.dim(0);
  const int64_t d = cfg_.feature_dim();
  g.x0 = encode(ad::constant(images));
  ad::Var weighted;
  if (adaptive_gate) {
    g.weights = adapt_weights(g.x0, snr_db);
    weighted = apply_weights(g.x0, g.weights);
  } else {
    g.weights = ad::constant(Tensor::full({n, cfg_.feature_channels()}, 1.0));
    weighted = g.x0;
  }
  g.x_rows = ad::power_normalize_rows(ad::reshape(weighted, {n, d}));
  ad::Var received = g.x_rows;
  if (state.gain != 1.0) received = ad::scale(received, state.gain);
  if (state.noise_variance > 0.0) {
    Tensor noise = Tensor::randn({n, d}, noise_rng, std::sqrt(state.noise_variance));
    received = ad::add(received, ad::constant(noise));
  }
  g.xp = ad::reshape(received, {n, cfg_.feature_channels(), cfg_.feature_h(), cfg_.feature_w()});
  g.probs = decode(g.xp);
  return g;
}

ad::Var StudentModel::forward_bypass(const Tensor& images, double snr_db) const {
  ad::Var x0 = encode(ad::constant(images));
  ad::Var w = adapt_weights(x0, snr_db);
  const int64_t n = images.dim(0);
  ad::Var rows = ad::power_normalize_rows(
      ad::reshape(apply_weights(x0, w), {n, cfg_.feature_dim()}));
  return decode(ad::reshape(rows, {n, cfg_.feature_channels(), cfg_.feature_h(),
                                   cfg_.feature_w()}));
}

StudentModel::ForwardResult StudentModel::student_forward(const Tensor& images, double snr_db,
                                                          const ChannelState& state,
                                                          Rng& noise_rng,
                                                          bool adaptive_gate) const {
  Graph g = forward_graph(images, snr_db, state, noise_rng, adaptive_gate);
  return ForwardResult{g.probs->value, g.x0->value, g.weights->value, g.x_rows->value,
                       g.xp->value};
}

// ---------------------------------------------------------------------------
// checkpointing

namespace {

void put_u64_le(std::ofstream& out, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = (unsigned char)((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<char*>(b), 8);
}

uint64_t read_u64_le(std::ifstream& in, const std::string& path) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (in.gcount() != 8) throw FormatError("truncated checkpoint header: " + path);
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

json config_to_json(const EncoderConfig& c) {
  return json{{"in_channels", c.in_channels}, {"in_h", c.in_h},
              {"in_w", c.in_w},               {"stage_widths", c.stage_widths},
              {"heads", c.heads},             {"mlp_ratio", c.mlp_ratio},
              {"decoder_hidden", c.decoder_hidden},
              {"adapt_hidden", c.adapt_hidden},
              {"class_count", c.class_count}};
}

EncoderConfig config_from_json(const json& j) {
  EncoderConfig c;
  c.in_channels = j.at("in_channels").get<int64_t>();
  c.in_h = j.at("in_h").get<int64_t>();
  c.in_w = j.at("in_w").get<int64_t>();
  c.stage_widths = j.at("stage_widths").get<std::vector<int64_t>>();
  c.heads = j.at("heads").get<int64_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<int64_t>();
  c.decoder_hidden = j.at("decoder_hidden").get<int64_t>();
  c.adapt_hidden = j.at("adapt_hidden").get<int64_t>();
  c.class_count = j.at("class_count").get<int64_t>();
  return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const StudentModel& model) {
  json manifest;
  manifest["format"] = "semdistill-ckpt";
  manifest["version"] = 1;
  manifest["config"] = config_to_json(model.config());
  json params = json::array();
  for (const auto& [name, v] : model.params().items()) {
    params.push_back(json{{"name", name}, {"shape", v->value.shape()}});
  }
  manifest["params"] = params;
  std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  put_u64_le(out, text.size());
  out.write(text.data(), std::streamsize(text.size()));
  for (const auto& [name, v] : model.params().items()) {
    for (int64_t i = 0; i < v->value.size(); ++i) {
      uint64_t bits;
      double d = v->value[i];
      std::memcpy(&bits, &d, 8);
      put_u64_le(out, bits);
    }
  }
  if (!out) throw IoError("write failure on checkpoint: " + path);
}

std::unique_ptr<StudentModel> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  uint64_t len = read_u64_le(in, path);
  std::string text(len, '\0');
  in.read(text.data(), std::streamsize(len));
  if (uint64_t(in.gcount()) != len) throw FormatError("truncated checkpoint manifest: " + path);
  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError("unparseable checkpoint manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "semdistill-ckpt" || manifest.value("version", 0) != 1) {
    throw FormatError("unrecognized checkpoint format: " + path);
  }
  EncoderConfig cfg = config_from_json(manifest.at("config"));
  auto model = std::make_unique<StudentModel>(cfg, 0);
  if (manifest.at("params").size() != model->params().items().size()) {
    throw FormatError("checkpoint parameter table does not cover the model: " + path);
  }
  for (const auto& p : manifest.at("params")) {
    std::string name = p.at("name").get<std::string>();
    std::vector<int64_t> shape = p.at("shape").get<std::vector<int64_t>>();
    ad::Var v = model->params().find(name);
    if (!v) throw FormatError("checkpoint parameter not in model: " + name);
    if (v->value.shape() != shape) {
      throw FormatError("checkpoint shape mismatch for " + name);
    }
    for (int64_t i = 0; i < v->value.size(); ++i) {
      uint64_t bits = read_u64_le(in, path);
      double d;
      std::memcpy(&d, &bits, 8);
      v->value[i] = d;
    }
  }
  return model;
}

double measure_latency(const std::function<void()>& fn, int warmup, int reps) {
  for (int i = 0; i < warmup; ++i) fn();
  std::vector<double> times;
  times.reserve(size_t(reps));
  for (int i = 0; i < reps; ++i) {
    Stopwatch sw;
    fn();
    times.push_back(sw.elapsed_ms());
  }
  std::sort(times.begin(), times.end());
  size_t mid = times.size() / 2;
  if (times.size() % 2 == 1) return times[mid];
  return 0.5 * (times[mid - 1] + times[mid]);
}

}  // namespace semdistill
