#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "doctest.h"
#include "mumoe/model.hpp"
#include "mumoe/tokenizer.hpp"
#include "test_util.hpp"

using namespace mumoe;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.hidden = 16;
  c.head_dim = 8;
  c.ffn_dim = 32;
  c.vocab = 40;
  c.max_seq = 24;
  return c;
}

std::string serialize(const Model& m) {
  std::stringstream ss;
  save_model(m, ss);
  return ss.str();
}

Model parse(const std::string& bytes) {
  std::stringstream ss(bytes);
  return load_model(ss);
}

// Token-major double-precision forward written independently of the library.
std::vector<std::vector<double>> reference_logits(const Model& model, const std::vector<TokenId>& tokens) {
  const auto& c = model.config();
  const auto& w = model.weights();
  const std::size_t n = tokens.size(), d = c.hidden;
  using Vec = std::vector<double>;
  std::vector<Vec> h(n, Vec(d));
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t i = 0; i < d; ++i)
      h[t][i] = double(w.token_embedding(tokens[t], i)) + w.position_embedding(t, i);

  auto ln = [d](const Vec& x, const std::vector<float>& g, const std::vector<float>& b) {
    double mean = 0.0, var = 0.0;
    for (double v : x) mean += v;
    mean /= double(d);
    for (double v : x) var += (v - mean) * (v - mean);
    var /= double(d);
    Vec out(d);
    for (std::size_t i = 0; i < d; ++i) out[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * g[i] + b[i];
    return out;
  };
  auto lin = [](const Matrix& m, const Vec& x) {
    Vec out(m.rows(), 0.0);
    for (std::size_t r = 0; r < m.rows(); ++r)
      for (std::size_t j = 0; j < m.cols(); ++j) out[r] += double(m(r, j)) * x[j];
    return out;
  };

  for (const auto& blk : w.blocks) {
    std::vector<Vec> q(n), k(n), v(n);
    for (std::size_t t = 0; t < n; ++t) {
      const Vec a = ln(h[t], blk.ln1_gain, blk.ln1_bias);
      q[t] = lin(blk.q, a);
      k[t] = lin(blk.k, a);
      v[t] = lin(blk.v, a);
    }
    for (std::size_t t = 0; t < n; ++t) {
      Vec att(d, 0.0);
      for (std::size_t hd = 0; hd < c.n_heads; ++hd) {
        const std::size_t off = hd * c.head_dim;
        Vec s(t + 1);
        double mx = -INFINITY;
        for (std::size_t u = 0; u <= t; ++u) {
          double dot = 0.0;
          for (std::size_t r = 0; r < c.head_dim; ++r) dot += q[t][off + r] * k[u][off + r];
          s[u] = dot / std::sqrt(double(c.head_dim));
          mx = std::max(mx, s[u]);
        }
        double z = 0.0;
        for (double& e : s) z += (e = std::exp(e - mx));
        for (std::size_t u = 0; u <= t; ++u)
          for (std::size_t r = 0; r < c.head_dim; ++r) att[off + r] += s[u] / z * v[u][off + r];
      }
      const Vec o = lin(blk.o, att);
      for (std::size_t i = 0; i < d; ++i) h[t][i] += o[i];
    }
    for (std::size_t t = 0; t < n; ++t) {
      Vec u = lin(blk.up, ln(h[t], blk.ln2_gain, blk.ln2_bias));
      for (double& e : u) e = std::max(e, 0.0);
      const Vec dn = lin(blk.down, u);
      for (std::size_t i = 0; i < d; ++i) h[t][i] += dn[i];
    }
  }
  std::vector<Vec> logits(n);
  for (std::size_t t = 0; t < n; ++t) logits[t] = lin(w.token_embedding, ln(h[t], w.final_gain, w.final_bias));
  return logits;
}

const std::filesystem::path kFixtures = MUMOE_FIXTURE_DIR;

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(small_config().validate());
  auto c = small_config();
  c.head_dim = 7;
  CHECK_THROWS_AS(c.validate(), ModelShapeError);
  c = small_config();
  c.n_layers = 0;
  CHECK_THROWS_AS(c.validate(), ModelShapeError);
}

TEST_CASE("save/load round trip is byte exact") {
  const Model m = Model::random(small_config(), 7);
  const std::string bytes = serialize(m);
  CHECK(bytes.substr(0, 4) == "MUMO");
  const Model back = parse(bytes);
  CHECK(back.config() == m.config());
  CHECK(back.weights() == m.weights());
  CHECK(serialize(back) == bytes);

  ModelWeights w = m.weights();
  w.vocab.resize(40);
  for (std::size_t i = 0; i < 40; ++i) w.vocab[i] = i < 26 ? std::string(1, char('a' + i)) : "tok" + std::to_string(i);
  const Model with_vocab(m.config(), w);
  const std::string vbytes = serialize(with_vocab);
  CHECK(vbytes.size() > bytes.size());
  CHECK(parse(vbytes).weights().vocab == w.vocab);
  CHECK(serialize(parse(vbytes)) == vbytes);
}

TEST_CASE("loader errors are distinct") {
  const std::string bytes = serialize(Model::random(small_config(), 8));

  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(parse(bad), BadMagicError);

  bad = bytes;
  bad[4] = 2;
  CHECK_THROWS_AS(parse(bad), UnsupportedVersionError);

  // cut inside the first block's q weights: 36-byte header, then embeddings
  const auto c = small_config();
  const std::size_t q_offset = 36 + 4 * (c.vocab * c.hidden + c.max_seq * c.hidden);
  try {
    (void)parse(bytes.substr(0, q_offset + 10));
    FAIL("expected TruncatedError");
  } catch (const TruncatedError& e) {
    CHECK(e.tensor() == "blocks.0.q");
  }
  CHECK_THROWS_AS(parse(bytes.substr(0, 20)), TruncatedError);

  bad = bytes;
  const float nan = std::nanf("");
  std::memcpy(bad.data() + q_offset + 8, &nan, 4);
  try {
    (void)parse(bad);
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(e.tensor() == "blocks.0.q");
  }

  bad = bytes;
  const std::uint32_t odd_head = 5;
  std::memcpy(bad.data() + 8 + 4 * 3, &odd_head, 4);
  CHECK_THROWS_AS(parse(bad), ModelShapeError);

  CHECK_THROWS_AS(parse(bytes + "xy"), ModelFormatError);
}

TEST_CASE("forward matches an independent double-precision reference") {
  const Model m = Model::random(small_config(), 9);
  std::mt19937_64 rng(9);
  for (std::size_t n : {1u, 2u, 7u, 24u}) {
    std::vector<TokenId> toks(n);
    for (auto& t : toks) t = static_cast<TokenId>(rng() % 40);
    const Matrix z = m.forward(toks);
    REQUIRE(z.rows() == n);
    REQUIRE(z.cols() == 40);
    const auto ref = reference_logits(m, toks);
    double err = 0.0, norm = 0.0;
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t v = 0; v < 40; ++v) {
        err += (z(t, v) - ref[t][v]) * (z(t, v) - ref[t][v]);
        norm += ref[t][v] * ref[t][v];
      }
    CHECK(std::sqrt(err / norm) < 1e-5);
  }
}

TEST_CASE("forward is causal") {
  const Model m = Model::random(small_config(), 10);
  std::vector<TokenId> a{1, 5, 9, 2, 33, 4, 17, 8};
  std::vector<TokenId> b = a;
  b[5] = 20;
  b[7] = 0;
  const Matrix za = m.forward(a);
  const Matrix zb = m.forward(b);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t v = 0; v < 40; ++v) CHECK(za(t, v) == zb(t, v));
  const Matrix prefix = m.forward(std::span<const TokenId>(a).first(3));
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t v = 0; v < 40; ++v) CHECK(prefix(t, v) == za(t, v));
}

TEST_CASE("forward applier sees every linear layer with features x tokens inputs") {
  const Model m = Model::random(small_config(), 11);
  std::vector<LayerId> seen;
  const std::vector<TokenId> toks{3, 4, 5};
  const Matrix z = m.forward(toks, [&](LayerId id, const Matrix& w, const Matrix& x) {
    seen.push_back(id);
    CHECK(x.cols() == 3);
    CHECK(x.rows() == w.cols());
    return matmul(w, x);
  });
  CHECK(seen == m.linear_layers());
  CHECK(seen.size() == 12);
  CHECK(z == m.forward(toks));
}

TEST_CASE("forward input errors") {
  const Model m = Model::random(small_config(), 12);
  CHECK_THROWS_AS(m.forward(std::vector<TokenId>(25, 1)), InputError);
  CHECK_THROWS_AS(m.forward(std::vector<TokenId>{1, 40}), InputError);
  CHECK_THROWS_AS(m.forward(std::vector<TokenId>{}), InputError);
}

TEST_CASE("perplexity of synthetic predictors") {
  std::vector<TokenId> stream(300);
  for (std::size_t i = 0; i < stream.size(); ++i) stream[i] = static_cast<TokenId>((i * 7) % 50);

  const auto uniform = perplexity(stream, 64, 64, [](std::span<const TokenId> w) { return Matrix(w.size(), 50); });
  CHECK(uniform.perplexity() == doctest::Approx(50.0).epsilon(1e-12));

  // Puts a huge logit on the true next token.
  const LogitsFn oracle = [&stream](std::span<const TokenId> w) {
    const std::size_t begin = static_cast<std::size_t>(w.data() - stream.data());
    Matrix z(w.size(), 50);
    for (std::size_t t = 0; t < w.size() && begin + t + 1 < stream.size(); ++t) z(t, stream[begin + t + 1]) = 100.0f;
    return z;
  };
  CHECK(perplexity(stream, 64, 64, oracle).perplexity() == doctest::Approx(1.0));

  // Non-overlapping windows skip the first token of each window.
  const auto nonoverlap = perplexity(stream, 64, 64, oracle);
  CHECK(nonoverlap.windows == 5);
  CHECK(nonoverlap.predictions == 299 - 4);
  // Sliding windows score every position once.
  const auto sliding = perplexity(stream, 64, 16, oracle);
  CHECK(sliding.predictions == 299);

  std::vector<TokenId> edge(129, 1);
  CHECK(perplexity(edge, 128, 128, [](std::span<const TokenId> w) { return Matrix(w.size(), 2); }).predictions ==
        127);
  CHECK_THROWS(perplexity(std::vector<TokenId>{1}, 64, 64, oracle));
  CHECK_THROWS(perplexity(stream, 64, 65, oracle));
}

TEST_CASE("tokenizer and token files") {
  const Tokenizer bytes;
  const std::string text = "Hello, world\n\xc3\xa9";
  const auto ids = bytes.encode(text);
  CHECK(ids.size() == text.size());
  CHECK(ids[0] == 'H');
  CHECK(bytes.decode(ids) == text);

  const Tokenizer vocab({"a", "b", "ab", "abc", " "});
  CHECK(vocab.encode("abcab a") == std::vector<TokenId>{3, 2, 4, 0});
  CHECK(vocab.decode(std::vector<TokenId>{3, 4, 1}) == "abc b");
  CHECK_THROWS(vocab.encode("z"));

  const auto dir = std::filesystem::temp_directory_path() / "mumoe_test_model";
  std::filesystem::create_directories(dir);
  const std::vector<TokenId> stream{0, 1, 255, 70000, 42};
  write_token_file(dir / "s.u32", stream);
  CHECK(std::filesystem::file_size(dir / "s.u32") == 20);
  CHECK(read_token_file(dir / "s.u32") == stream);
  CHECK(load_token_stream(dir / "s.u32", bytes) == stream);
  {
    std::ofstream(dir / "t.txt") << "abc";
  }
  CHECK(load_token_stream(dir / "t.txt", bytes) == std::vector<TokenId>{'a', 'b', 'c'});
  {
    std::ofstream(dir / "bad.u32") << "abcde";
  }
  CHECK_THROWS(read_token_file(dir / "bad.u32"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("fixture model reproduces the golden dense perplexity") {
  const auto model_path = kFixtures / "tiny_lm.mumo";
  REQUIRE(std::filesystem::exists(model_path));
  std::ifstream gj(kFixtures / "golden.json");
  const auto golden = nlohmann::json::parse(gj);
  const Model m = load_model(model_path);
  const auto& gc = golden["config"];
  CHECK(m.config().n_layers == gc["n_layers"].get<std::uint32_t>());
  CHECK(m.config().n_heads == gc["n_heads"].get<std::uint32_t>());
  CHECK(m.config().hidden == gc["hidden"].get<std::uint32_t>());
  CHECK(m.config().ffn_dim == gc["ffn_dim"].get<std::uint32_t>());
  CHECK(m.config().vocab == gc["vocab"].get<std::uint32_t>());
  CHECK(m.config().max_seq == gc["max_seq"].get<std::uint32_t>());

  const auto stream = load_token_stream(kFixtures / "corpus_eval.txt", Tokenizer::for_model(m));
  CHECK(stream.size() == golden["eval_bytes"].get<std::size_t>());
  const auto r = perplexity(m, stream, golden["stride"].get<std::size_t>());
  CHECK(r.predictions == golden["predictions"].get<std::size_t>());
  const double ref = golden["dense_perplexity"].get<double>();
  CHECK(mumoe::testing::rel_diff(r.perplexity(), ref) < 1e-4);
}
