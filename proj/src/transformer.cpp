#include "stp/transformer.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "stp/rng.hpp"

namespace stp {

namespace {

constexpr double kMaskNegative = -1e30;  // finite; exp underflows to exactly 0
constexpr double kInitStd = 0.02;

Tensor init_normal(Rng& rng, const std::vector<int>& shape) {
  Tensor t = Tensor::zeros(shape, true);
  for (double& v : t.values()) v = kInitStd * rng.normal();
  return t;
}

// Columns [c0, c1) of a seq x d matrix, via transpose + slice_rows + transpose.
Tensor take_cols(const Tensor& x, int c0, int c1) {
  return transpose(slice_rows(transpose(x), c0, c1));
}

Tensor causal_mask(int len) {
  Tensor m = Tensor::zeros({len, len});
  for (int i = 0; i < len; ++i)
    for (int j = i + 1; j < len; ++j) m.at(i, j) = kMaskNegative;
  return m;
}

Tensor self_attention(const Tensor& x, const LayerParams& layer, int n_heads) {
  int len = x.shape()[0];
  int d = x.shape()[1];
  int d_head = d / n_heads;
  Tensor q = matmul(x, layer.wq);
  Tensor k = matmul(x, layer.wk);
  Tensor v = matmul(x, layer.wv);
  Tensor mask = causal_mask(len);
  double scale = 1.0 / std::sqrt(static_cast<double>(d_head));

  std::vector<Tensor> head_outputs_t;  // transposed (d_head x len) per head
  for (int h = 0; h < n_heads; ++h) {
    Tensor qh = take_cols(q, h * d_head, (h + 1) * d_head);
    Tensor kh = take_cols(k, h * d_head, (h + 1) * d_head);
    Tensor vh = take_cols(v, h * d_head, (h + 1) * d_head);
    Tensor scores = add(scalar_mul(matmul(qh, transpose(kh)), scale), mask);
    Tensor probs = row_softmax(scores);
    head_outputs_t.push_back(transpose(matmul(probs, vh)));
  }
  Tensor merged = transpose(concat_rows(head_outputs_t));  // len x d
  return matmul(merged, layer.wo);
}

void write_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void write_f32(std::ostream& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_u32(out, bits);
}

float read_f32(std::istream& in) {
  uint32_t bits = read_u32(in);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 4)
    throw std::invalid_argument("config: vocab_size must be >= 4 (PAD, BOS, EOS, MASK)");
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0)
    throw std::invalid_argument("config: extents must be positive");
  if (d_model % n_heads != 0)
    throw std::invalid_argument("config: d_model " + std::to_string(d_model) +
                                " not divisible by n_heads " + std::to_string(n_heads));
  if (max_seq_len < 8) throw std::invalid_argument("config: max_seq_len must be >= 8");
}

std::vector<Tensor> ModelParams::all() const {
  std::vector<Tensor> out;
  out.push_back(tok_embed);
  out.push_back(pos_embed);
  for (const auto& l : layers) {
    out.push_back(l.wq);
    out.push_back(l.wk);
    out.push_back(l.wv);
    out.push_back(l.wo);
  }
  for (const auto& l : layers) {
    out.push_back(l.w1);
    out.push_back(l.b1);
    out.push_back(l.w2);
    out.push_back(l.b2);
  }
  for (const auto& l : layers) {
    out.push_back(l.ln1_gain);
    out.push_back(l.ln1_bias);
    out.push_back(l.ln2_gain);
    out.push_back(l.ln2_bias);
  }
  out.push_back(final_gain);
  out.push_back(final_bias);
  if (!config.tie_embeddings) out.push_back(unembed);
  return out;
}

size_t ModelParams::parameter_count() const {
  size_t n = 0;
  for (const Tensor& t : all()) n += t.numel();
  return n;
}

ModelParams init_params(const ModelConfig& config, uint64_t seed) {
  config.validate();
  Rng rng(mix_seed(seed, 0x1217u));
  ModelParams p;
  p.config = config;
  int d = config.d_model;
  p.tok_embed = init_normal(rng, {config.vocab_size, d});
  p.pos_embed = init_normal(rng, {config.max_seq_len, d});
  for (int l = 0; l < config.n_layers; ++l) {
    LayerParams layer;
    layer.wq = init_normal(rng, {d, d});
    layer.wk = init_normal(rng, {d, d});
    layer.wv = init_normal(rng, {d, d});
    layer.wo = init_normal(rng, {d, d});
    layer.w1 = init_normal(rng, {d, config.d_ff});
    layer.b1 = Tensor::zeros({config.d_ff}, true);
    layer.w2 = init_normal(rng, {config.d_ff, d});
    layer.b2 = Tensor::zeros({d}, true);
    layer.ln1_gain = Tensor::full({d}, 1.0);
    layer.ln1_gain.set_requires_grad(true);
    layer.ln1_bias = Tensor::zeros({d}, true);
    layer.ln2_gain = Tensor::full({d}, 1.0);
    layer.ln2_gain.set_requires_grad(true);
    layer.ln2_bias = Tensor::zeros({d}, true);
    p.layers.push_back(layer);
  }
  p.final_gain = Tensor::full({d}, 1.0);
  p.final_gain.set_requires_grad(true);
  p.final_bias = Tensor::zeros({d}, true);
  if (!config.tie_embeddings) p.unembed = init_normal(rng, {d, config.vocab_size});
  return p;
}

ForwardResult forward(const ModelParams& params, const std::vector<int>& tokens) {
  const ModelConfig& cfg = params.config;
  int len = static_cast<int>(tokens.size());
  if (len < 1 || len > cfg.max_seq_len)
    throw std::invalid_argument("forward: sequence length " + std::to_string(len) +
                                " outside [1, " + std::to_string(cfg.max_seq_len) + "]");
  for (int id : tokens)
    if (id < 0 || id >= cfg.vocab_size)
      throw std::invalid_argument("forward: token id " + std::to_string(id) +
                                  " outside vocab " + std::to_string(cfg.vocab_size));

  Tensor x = add(embed_lookup(params.tok_embed, tokens),
                 slice_rows(params.pos_embed, 0, len));
  for (const LayerParams& layer : params.layers) {
    Tensor normed = layer_norm(x, layer.ln1_gain, layer.ln1_bias);
    x = add(x, self_attention(normed, layer, cfg.n_heads));
    Tensor normed2 = layer_norm(x, layer.ln2_gain, layer.ln2_bias);
    Tensor hidden = gelu(add(matmul(normed2, layer.w1), layer.b1));
    x = add(x, add(matmul(hidden, layer.w2), layer.b2));
  }
  Tensor final_states = layer_norm(x, params.final_gain, params.final_bias);
  Tensor logits = cfg.tie_embeddings ? matmul(final_states, transpose(params.tok_embed))
                                     : matmul(final_states, params.unembed);

  ForwardResult result;
  result.logits = logits;
  result.trajectory.states = final_states;
  result.trajectory.tokens = tokens;
  return result;
}

std::vector<int> greedy_decode(const ModelParams& params, const std::vector<int>& prompt,
                               int max_new) {
  if (prompt.empty()) throw std::invalid_argument("greedy_decode: empty prompt");
  if (static_cast<int>(prompt.size()) + max_new > params.config.max_seq_len)
    throw std::invalid_argument("greedy_decode: prompt + max_new exceeds max_seq_len");

  NoGradGuard no_grad;
  std::vector<int> sequence = prompt;
  for (int i = 0; i < max_new; ++i) {
    ForwardResult result = forward(params, sequence);
    int last = static_cast<int>(sequence.size()) - 1;
    int vocab = params.config.vocab_size;
    int best = 0;
    double best_value = result.logits.at(last, 0);
    for (int j = 1; j < vocab; ++j) {
      double v = result.logits.at(last, j);
      if (v > best_value) {  // strict: ties keep the lowest id
        best_value = v;
        best = j;
      }
    }
    sequence.push_back(best);
    if (best == kEosToken) break;
  }
  return sequence;
}

void save_checkpoint(const ModelParams& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  out.write("STPC", 4);
  write_u32(out, 1);
  const ModelConfig& c = params.config;
  write_u32(out, static_cast<uint32_t>(c.vocab_size));
  write_u32(out, static_cast<uint32_t>(c.d_model));
  write_u32(out, static_cast<uint32_t>(c.n_layers));
  write_u32(out, static_cast<uint32_t>(c.n_heads));
  write_u32(out, static_cast<uint32_t>(c.d_ff));
  write_u32(out, static_cast<uint32_t>(c.max_seq_len));
  write_u32(out, c.tie_embeddings ? 1 : 0);
  for (const Tensor& t : params.all())
    for (double v : t.values()) write_f32(out, static_cast<float>(v));
  if (!out) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "STPC", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic (not an STPC file)");
  uint32_t version = read_u32(in);
  if (version != 1)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  ModelConfig cfg;
  cfg.vocab_size = static_cast<int>(read_u32(in));
  cfg.d_model = static_cast<int>(read_u32(in));
  cfg.n_layers = static_cast<int>(read_u32(in));
  cfg.n_heads = static_cast<int>(read_u32(in));
  cfg.d_ff = static_cast<int>(read_u32(in));
  cfg.max_seq_len = static_cast<int>(read_u32(in));
  cfg.tie_embeddings = read_u32(in) != 0;
  cfg.validate();

  // Shapes derive solely from the header; a size mismatch against the blob is
  // detected as truncation or trailing bytes.
  ModelParams p = init_params(cfg, 0);
  for (Tensor t : p.all())
    for (size_t i = 0; i < t.numel(); ++i) t.values()[i] = static_cast<double>(read_f32(in));
  char extra;
  if (in.read(&extra, 1))
    throw std::runtime_error("checkpoint: trailing bytes do not match header shapes");
  return p;
}

}  // namespace stp
