#include "mumoe/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <random>

namespace mumoe {

namespace {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

constexpr char kMagic[4] = {'M', 'U', 'M', 'O'};
constexpr double kLayerNormEps = 1e-5;

// Visits every tensor in file order. fn(name, span) may read or write the span.
template <typename Weights, typename Fn>
void for_each_tensor(Weights& w, Fn&& fn) {
  fn(std::string("token_embedding"), w.token_embedding.data());
  fn(std::string("position_embedding"), w.position_embedding.data());
  for (std::size_t b = 0; b < w.blocks.size(); ++b) {
    auto& blk = w.blocks[b];
    const std::string p = "blocks." + std::to_string(b) + ".";
    fn(p + "q", blk.q.data());
    fn(p + "k", blk.k.data());
    fn(p + "v", blk.v.data());
    fn(p + "o", blk.o.data());
    fn(p + "up", blk.up.data());
    fn(p + "down", blk.down.data());
    fn(p + "ln1_gain", std::span(blk.ln1_gain));
    fn(p + "ln1_bias", std::span(blk.ln1_bias));
    fn(p + "ln2_gain", std::span(blk.ln2_gain));
    fn(p + "ln2_bias", std::span(blk.ln2_bias));
  }
  fn(std::string("final_gain"), std::span(w.final_gain));
  fn(std::string("final_bias"), std::span(w.final_bias));
}

ModelWeights allocate(const ModelConfig& c) {
  ModelWeights w;
  w.token_embedding = Matrix(c.vocab, c.hidden);
  w.position_embedding = Matrix(c.max_seq, c.hidden);
  w.blocks.resize(c.n_layers);
  for (auto& blk : w.blocks) {
    blk.q = Matrix(c.hidden, c.hidden);
    blk.k = Matrix(c.hidden, c.hidden);
    blk.v = Matrix(c.hidden, c.hidden);
    blk.o = Matrix(c.hidden, c.hidden);
    blk.up = Matrix(c.ffn_dim, c.hidden);
    blk.down = Matrix(c.hidden, c.ffn_dim);
    blk.ln1_gain.assign(c.hidden, 1.0f);
    blk.ln1_bias.assign(c.hidden, 0.0f);
    blk.ln2_gain.assign(c.hidden, 1.0f);
    blk.ln2_bias.assign(c.hidden, 0.0f);
  }
  w.final_gain.assign(c.hidden, 1.0f);
  w.final_bias.assign(c.hidden, 0.0f);
  return w;
}

void check_shapes(const ModelConfig& c, const ModelWeights& w) {
  ModelWeights expected = allocate(c);
  bool ok = w.token_embedding.rows() == c.vocab && w.token_embedding.cols() == c.hidden &&
            w.position_embedding.rows() == c.max_seq && w.position_embedding.cols() == c.hidden &&
            w.blocks.size() == c.n_layers && w.final_gain.size() == c.hidden && w.final_bias.size() == c.hidden;
  for (std::size_t b = 0; ok && b < w.blocks.size(); ++b) {
    const auto& x = w.blocks[b];
    const auto& e = expected.blocks[b];
    for (auto kind : kAllLinearKinds) {
      ok = ok && x.linear(kind).rows() == e.linear(kind).rows() && x.linear(kind).cols() == e.linear(kind).cols();
    }
    ok = ok && x.ln1_gain.size() == c.hidden && x.ln1_bias.size() == c.hidden && x.ln2_gain.size() == c.hidden &&
         x.ln2_bias.size() == c.hidden;
  }
  if (!ok) throw ModelShapeError("model weights do not match the configuration");
  if (!w.vocab.empty() && w.vocab.size() != c.vocab) {
    throw ModelShapeError("vocab section has " + std::to_string(w.vocab.size()) + " entries, config says " +
                          std::to_string(c.vocab));
  }
}

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

bool get_u32(std::istream& is, std::uint32_t& v) {
  return static_cast<bool>(is.read(reinterpret_cast<char*>(&v), 4));
}

Matrix layer_norm(const Matrix& h, const std::vector<float>& gain, const std::vector<float>& bias) {
  const std::size_t d = h.rows();
  const std::size_t n = h.cols();
  Matrix out(d, n);
  for (std::size_t t = 0; t < n; ++t) {
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += h(i, t);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double c = h(i, t) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t i = 0; i < d; ++i) {
      out(i, t) = static_cast<float>((h(i, t) - mean) * inv * gain[i] + bias[i]);
    }
  }
  return out;
}

// Causal multi-head attention over features x tokens inputs.
Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads, std::size_t head_dim) {
  const std::size_t n = q.cols();
  const Matrix qt = q.transposed();
  const Matrix kt = k.transposed();
  const Matrix vt = v.transposed();
  Matrix out_t(n, q.rows());
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<double> p(n);
  std::vector<double> acc(head_dim);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * head_dim;
    for (std::size_t t = 0; t < n; ++t) {
      const auto qr = qt.row(t).subspan(off, head_dim);
      double mx = -INFINITY;
      for (std::size_t s = 0; s <= t; ++s) {
        const auto kr = kt.row(s).subspan(off, head_dim);
        double dot = 0.0;
        for (std::size_t r = 0; r < head_dim; ++r) dot += static_cast<double>(qr[r]) * kr[r];
        p[s] = dot * scale;
        mx = std::max(mx, p[s]);
      }
      double z = 0.0;
      for (std::size_t s = 0; s <= t; ++s) {
        p[s] = std::exp(p[s] - mx);
        z += p[s];
      }
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t s = 0; s <= t; ++s) {
        const double w = p[s] / z;
        const auto vr = vt.row(s).subspan(off, head_dim);
        for (std::size_t r = 0; r < head_dim; ++r) acc[r] += w * vr[r];
      }
      auto orow = out_t.row(t).subspan(off, head_dim);
      for (std::size_t r = 0; r < head_dim; ++r) orow[r] = static_cast<float>(acc[r]);
    }
  }
  return out_t.transposed();
}

void add_in_place(Matrix& h, const Matrix& delta) {
  auto hd = h.data();
  auto dd = delta.data();
  for (std::size_t i = 0; i < hd.size(); ++i) hd[i] += dd[i];
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || hidden == 0 || head_dim == 0 || ffn_dim == 0 || vocab == 0 || max_seq == 0) {
    throw ModelShapeError("model config fields must be positive");
  }
  if (static_cast<std::uint64_t>(n_heads) * head_dim != hidden) {
    throw ModelShapeError("hidden (" + std::to_string(hidden) + ") != heads x head_dim (" +
                          std::to_string(n_heads) + " x " + std::to_string(head_dim) + ")");
  }
  if (ffn_dim < hidden) throw ModelShapeError("ffn_dim must be at least hidden");
}

std::string_view to_string(LinearKind kind) {
  switch (kind) {
    case LinearKind::q:
      return "q";
    case LinearKind::k:
      return "k";
    case LinearKind::v:
      return "v";
    case LinearKind::o:
      return "o";
    case LinearKind::up:
      return "up";
    case LinearKind::down:
      return "down";
  }
  return "?";
}

LinearKind parse_linear_kind(std::string_view name) {
  for (auto kind : kAllLinearKinds)
    if (to_string(kind) == name) return kind;
  throw std::invalid_argument("unknown linear layer kind '" + std::string(name) + "'");
}

std::string LayerId::name() const { return std::to_string(block) + "." + std::string(to_string(kind)); }

const Matrix& BlockWeights::linear(LinearKind kind) const {
  switch (kind) {
    case LinearKind::q:
      return q;
    case LinearKind::k:
      return k;
    case LinearKind::v:
      return v;
    case LinearKind::o:
      return o;
    case LinearKind::up:
      return up;
    case LinearKind::down:
      return down;
  }
  throw std::invalid_argument("unknown linear layer kind");
}

TruncatedError::TruncatedError(std::string tensor, const std::string& detail)
    : ModelFormatError("model file truncated in " + tensor + ": " + detail), tensor_(std::move(tensor)) {}

NonFiniteError::NonFiniteError(std::string tensor, std::size_t index)
    : ModelFormatError("non-finite value in " + tensor + " at element " + std::to_string(index)),
      tensor_(std::move(tensor)) {}

Model::Model(ModelConfig config, ModelWeights weights) : config_(config), weights_(std::move(weights)) {
  config_.validate();
  check_shapes(config_, weights_);
}

const Matrix& Model::linear(LayerId id) const {
  if (id.block >= weights_.blocks.size()) throw std::out_of_range("layer " + id.name() + " does not exist");
  return weights_.blocks[id.block].linear(id.kind);
}

std::vector<LayerId> Model::linear_layers() const {
  std::vector<LayerId> ids;
  for (std::uint32_t b = 0; b < config_.n_layers; ++b)
    for (auto kind : kAllLinearKinds) ids.push_back({b, kind});
  return ids;
}

Matrix Model::forward(std::span<const TokenId> tokens, const LinearApplier& apply) const {
  const std::size_t n = tokens.size();
  if (n == 0) throw InputError("forward: empty token sequence");
  if (n > config_.max_seq) {
    throw InputError("forward: sequence of " + std::to_string(n) + " tokens exceeds max_seq " +
                     std::to_string(config_.max_seq));
  }
  const std::size_t d = config_.hidden;
  Matrix h(d, n);
  for (std::size_t t = 0; t < n; ++t) {
    if (tokens[t] >= config_.vocab) {
      throw InputError("forward: token id " + std::to_string(tokens[t]) + " outside vocab of " +
                       std::to_string(config_.vocab));
    }
    const auto te = weights_.token_embedding.row(tokens[t]);
    const auto pe = weights_.position_embedding.row(t);
    for (std::size_t i = 0; i < d; ++i) h(i, t) = te[i] + pe[i];
  }

  auto run = [&apply](LayerId id, const Matrix& w, const Matrix& x) {
    return apply ? apply(id, w, x) : matmul(w, x);
  };

  for (std::uint32_t b = 0; b < config_.n_layers; ++b) {
    const auto& blk = weights_.blocks[b];
    const Matrix a = layer_norm(h, blk.ln1_gain, blk.ln1_bias);
    const Matrix q = run({b, LinearKind::q}, blk.q, a);
    const Matrix k = run({b, LinearKind::k}, blk.k, a);
    const Matrix v = run({b, LinearKind::v}, blk.v, a);
    const Matrix att = attention(q, k, v, config_.n_heads, config_.head_dim);
    add_in_place(h, run({b, LinearKind::o}, blk.o, att));

    const Matrix a2 = layer_norm(h, blk.ln2_gain, blk.ln2_bias);
    Matrix u = run({b, LinearKind::up}, blk.up, a2);
    for (float& x : u.data()) x = std::max(x, 0.0f);
    add_in_place(h, run({b, LinearKind::down}, blk.down, u));
  }

  const Matrix hf = layer_norm(h, weights_.final_gain, weights_.final_bias);
  return matmul(weights_.token_embedding, hf).transposed();
}

Model Model::random(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelWeights w = allocate(config);
  std::mt19937_64 rng(seed);
  auto fill = [&rng](std::span<float> s, float stddev) {
    std::normal_distribution<float> dist(0.0f, stddev);
    for (float& x : s) x = dist(rng);
  };
  fill(w.token_embedding.data(), 1.0f);
  fill(w.position_embedding.data(), 0.1f);
  for (auto& blk : w.blocks) {
    const float in_std = 1.0f / std::sqrt(static_cast<float>(config.hidden));
    fill(blk.q.data(), in_std);
    fill(blk.k.data(), in_std);
    fill(blk.v.data(), in_std);
    fill(blk.o.data(), in_std);
    fill(blk.up.data(), in_std);
    fill(blk.down.data(), 1.0f / std::sqrt(static_cast<float>(config.ffn_dim)));
    for (float& g : blk.ln1_gain) g = 1.0f;
    for (float& g : blk.ln2_gain) g = 1.0f;
    fill(blk.ln1_bias, 0.05f);
    fill(blk.ln2_bias, 0.05f);
  }
  fill(w.final_bias, 0.05f);
  return Model(config, std::move(w));
}

void save_model(const Model& model, std::ostream& os) {
  const auto& c = model.config();
  os.write(kMagic, 4);
  put_u32(os, kFormatVersion);
  for (std::uint32_t v : {c.n_layers, c.n_heads, c.hidden, c.head_dim, c.ffn_dim, c.vocab, c.max_seq}) put_u32(os, v);
  for_each_tensor(model.weights(), [&os](const std::string&, std::span<const float> s) {
    os.write(reinterpret_cast<const char*>(s.data()), static_cast<std::streamsize>(s.size_bytes()));
  });
  const auto& vocab = model.weights().vocab;
  if (!vocab.empty()) {
    put_u32(os, static_cast<std::uint32_t>(vocab.size()));
    for (const auto& tok : vocab) {
      put_u32(os, static_cast<std::uint32_t>(tok.size()));
      os.write(tok.data(), static_cast<std::streamsize>(tok.size()));
    }
  }
  if (!os) throw std::runtime_error("failed to write model");
}

void save_model(const Model& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  save_model(model, os);
}

Model load_model(std::istream& is) {
  char magic[4] = {};
  if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kMagic)) {
    throw BadMagicError("not a MUMO model file (bad magic)");
  }
  std::uint32_t version = 0;
  if (!get_u32(is, version)) throw TruncatedError("header", "missing format version");
  if (version != kFormatVersion) {
    throw UnsupportedVersionError("unsupported model format version " + std::to_string(version));
  }
  ModelConfig c;
  for (std::uint32_t* field : {&c.n_layers, &c.n_heads, &c.hidden, &c.head_dim, &c.ffn_dim, &c.vocab, &c.max_seq}) {
    if (!get_u32(is, *field)) throw TruncatedError("config", "header ends early");
  }
  c.validate();

  ModelWeights w = allocate(c);
  for_each_tensor(w, [&is](const std::string& name, std::span<float> s) {
    if (!is.read(reinterpret_cast<char*>(s.data()), static_cast<std::streamsize>(s.size_bytes()))) {
      throw TruncatedError(name, "expected " + std::to_string(s.size()) + " floats, got " +
                                     std::to_string(is.gcount() / 4));
    }
    for (std::size_t i = 0; i < s.size(); ++i)
      if (!std::isfinite(s[i])) throw NonFiniteError(name, i);
  });

  std::uint32_t count = 0;
  if (is.read(reinterpret_cast<char*>(&count), 4)) {
    w.vocab.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
      std::uint32_t len = 0;
      if (!get_u32(is, len)) throw TruncatedError("vocab", "entry " + std::to_string(i) + " length missing");
      std::string tok(len, '\0');
      if (!is.read(tok.data(), len)) throw TruncatedError("vocab", "entry " + std::to_string(i) + " bytes missing");
      w.vocab.push_back(std::move(tok));
    }
    if (is.peek() != std::char_traits<char>::eof()) throw ModelFormatError("trailing bytes after vocab section");
  } else if (is.gcount() != 0) {
    throw TruncatedError("vocab", "partial token count");
  }
  return Model(c, std::move(w));
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open model file " + path.string());
  return load_model(is);
}

double PerplexityResult::perplexity() const { return std::exp(mean_nll()); }

PerplexityResult perplexity(std::span<const TokenId> stream, std::size_t window, std::size_t stride,
                            const LogitsFn& logits) {
  if (stream.size() < 2) throw std::invalid_argument("perplexity: need at least two tokens");
  if (window < 2) throw std::invalid_argument("perplexity: window must hold at least two tokens");
  if (stride < 1 || stride > window) throw std::invalid_argument("perplexity: stride must lie in [1, window]");
  PerplexityResult result;
  std::size_t scored_until = 1;  // next position still to be scored
  for (std::size_t begin = 0; begin + 1 < stream.size() && scored_until < stream.size(); begin += stride) {
    const std::size_t end = std::min(begin + window, stream.size());
    const std::size_t first = std::max(scored_until, begin + 1);
    if (first >= end) continue;
    const Matrix z = logits(stream.subspan(begin, end - begin));
    ++result.windows;
    for (std::size_t pos = first; pos < end; ++pos) {
      const auto row = z.row(pos - 1 - begin);
      double mx = -INFINITY;
      for (float v : row) mx = std::max(mx, static_cast<double>(v));
      double sum = 0.0;
      for (float v : row) sum += std::exp(static_cast<double>(v) - mx);
      result.nll_sum += (mx + std::log(sum)) - static_cast<double>(row[stream[pos]]);
      ++result.predictions;
    }
    scored_until = end;
  }
  return result;
}

PerplexityResult perplexity(const Model& model, std::span<const TokenId> stream, std::size_t stride) {
  return perplexity(stream, model.config().max_seq, stride,
                    [&model](std::span<const TokenId> w) { return model.forward(w); });
}

}  // namespace mumoe
