#include "doctest.h"
#include "mumoe/pruner.hpp"
#include "test_util.hpp"

using namespace mumoe;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 4;
  c.hidden = 64;
  c.head_dim = 16;
  c.ffn_dim = 128;
  c.vocab = 64;
  c.max_seq = 48;
  return c;
}

std::shared_ptr<const Model> shared_model(std::uint64_t seed = 1) {
  return std::make_shared<const Model>(Model::random(small_config(), seed));
}

std::vector<TokenId> random_tokens(std::size_t n, std::mt19937_64& rng, std::uint32_t vocab = 64) {
  std::vector<TokenId> t(n);
  for (auto& v : t) v = static_cast<TokenId>(rng() % vocab);
  return t;
}

PruneConfig config(double rho, Method method, Mode mode = Mode::offline) {
  PruneConfig c;
  c.rho = rho;
  c.method = method;
  c.mode = mode;
  return c;
}

}  // namespace

TEST_CASE("config parsing and validation") {
  CHECK(parse_method("sparsegpt") == Method::sparsegpt);
  CHECK(parse_mode("online") == Mode::online);
  CHECK_THROWS(parse_method("obs"));
  const auto f = LayerFilter::parse("q,up");
  CHECK(f.contains({0, LinearKind::q}));
  CHECK(f.contains({1, LinearKind::up}));
  CHECK_FALSE(f.contains({0, LinearKind::k}));
  CHECK(LayerFilter::parse("all").contains({3, LinearKind::down}));
  CHECK_THROWS(LayerFilter::parse("q,zz"));

  auto c = config(0.5, Method::sparsegpt, Mode::online);
  CHECK_THROWS(c.validate());
  c.allow_online_sparsegpt = true;
  CHECK_NOTHROW(c.validate());
  CHECK_THROWS(config(0.0, Method::wanda).validate());
  CHECK_THROWS(config(1.2, Method::wanda).validate());
}

TEST_CASE("calibration record") {
  const auto model = shared_model();
  std::mt19937_64 rng(40);
  const auto toks = random_tokens(20, rng);
  const auto cfg = config(0.5, Method::wanda);
  const auto rec = calibrate_offline(*model, toks, cfg, "unit");
  CHECK(rec.source == "unit");
  CHECK(rec.token_count == 20);
  CHECK(rec.layers.size() == 12);
  for (const auto& [id, s] : rec.layers) {
    CHECK(s.token_count == 20);
    CHECK(s.feature_norms.size() == model->linear(id).cols());
    CHECK_FALSE(s.gram.has_value());
  }
  CHECK(calibrate_offline(*model, toks, cfg).layers == rec.layers);

  const auto one = calibrate_offline(*model, std::vector<TokenId>{5}, cfg);
  CHECK(one.layers.at({0, LinearKind::q}).token_count == 1);

  const auto grams = calibrate_offline(*model, toks, config(0.5, Method::sparsegpt));
  CHECK(grams.layers.at({1, LinearKind::down}).gram.has_value());

  CHECK_THROWS_AS(calibrate_offline(*model, std::vector<TokenId>{}, cfg), PruneError);
}

TEST_CASE("layer-0 statistics are the norms of the embedding layer norm output") {
  const auto model = shared_model(2);
  std::mt19937_64 rng(41);
  const auto toks = random_tokens(16, rng);
  Matrix first_input;
  observe_dense(*model, toks, [&](LayerId id, const Matrix&, const RowSparseMatrix*, const Matrix& x) {
    if (id == LayerId{0, LinearKind::q}) first_input = x;
  });
  const auto rec = calibrate_offline(*model, toks, config(0.5, Method::wanda));
  const auto norms = row_l2_norms(first_input);
  const auto& got = rec.layers.at({0, LinearKind::q}).feature_norms;
  for (std::size_t j = 0; j < norms.size(); ++j) CHECK(got[j] == doctest::Approx(norms[j]).epsilon(1e-6));
  // q, k and v share one input
  CHECK(rec.layers.at({0, LinearKind::k}).feature_norms == got);
}

TEST_CASE("rho = 1 reproduces the dense model bitwise") {
  const auto model = shared_model(3);
  std::mt19937_64 rng(42);
  for (Method m : {Method::magnitude, Method::wanda, Method::sparsegpt}) {
    const auto toks = random_tokens(24, rng);
    const auto cfg = config(1.0, m);
    const auto pruned = prune_offline(model, calibrate_offline(*model, toks, cfg), cfg);
    CHECK(pruned.forward(toks) == model->forward(toks));
  }
  auto online = config(1.0, Method::wanda, Mode::online);
  const auto toks = random_tokens(30, rng);
  CHECK(prune_online(model, toks, online).logits == model->forward(toks));
}

TEST_CASE("pruned layers keep k active weights per row and never touch the dense model") {
  const auto model = shared_model(4);
  const Model snapshot = *model;
  std::mt19937_64 rng(43);
  const auto toks = random_tokens(32, rng);
  for (double rho : {0.25, 0.5, 0.75}) {
    auto cfg = config(rho, Method::wanda);
    const auto pruned = prune_offline(model, calibrate_offline(*model, toks, cfg), cfg);
    CHECK(pruned.layers().size() == 12);
    for (const auto& [id, layer] : pruned.layers()) {
      const auto& w = model->linear(id);
      const auto p = SelectionParams::make(rho, w.cols());
      for (std::size_t r = 0; r < w.rows(); ++r) CHECK(layer.mask.row_count(r) == p.k);
      CHECK(layer.weights.k() == p.k);
    }
    const Matrix z = pruned.forward(toks);
    CHECK(z.all_finite());
    CHECK_FALSE(z == model->forward(toks));
  }
  CHECK(model->weights() == snapshot.weights());
}

TEST_CASE("layer filter restricts pruning") {
  const auto model = shared_model(5);
  std::mt19937_64 rng(44);
  const auto toks = random_tokens(16, rng);
  auto cfg = config(0.5, Method::wanda);
  cfg.layers = LayerFilter::parse("up,down");
  const auto rec = calibrate_offline(*model, toks, cfg);
  const auto pruned = prune_offline(model, rec, cfg);
  CHECK(pruned.layers().size() == 4);
  CHECK(pruned.layers().count({1, LinearKind::down}) == 1);
  CHECK(pruned.layers().count({0, LinearKind::q}) == 0);
}

TEST_CASE("magnitude pruning ignores the calibration record") {
  const auto model = shared_model(6);
  std::mt19937_64 rng(45);
  const auto cfg = config(0.5, Method::magnitude);
  const auto a = prune_offline(model, calibrate_offline(*model, random_tokens(10, rng), cfg), cfg);
  const auto b = prune_offline(model, CalibrationRecord{}, cfg);
  CHECK(a.mask_hash() == b.mask_hash());
  const auto wanda = config(0.5, Method::wanda);
  CHECK_THROWS_AS(prune_offline(model, CalibrationRecord{}, wanda), PruneError);
}

TEST_CASE("online masks equal offline masks calibrated on the same prompt") {
  const auto model = shared_model(7);
  std::mt19937_64 rng(46);
  for (Method m : {Method::magnitude, Method::wanda, Method::sparsegpt}) {
    for (int trial = 0; trial < 4; ++trial) {
      const auto prompt = random_tokens(8 + trial * 9, rng);
      auto off = config(0.5, m);
      auto on = config(0.5, m, Mode::online);
      on.allow_online_sparsegpt = true;
      const auto offline = prune_offline(model, calibrate_offline(*model, prompt, off), off);
      const auto online = prune_online(model, prompt, on);
      for (const auto& [id, layer] : offline.layers()) CHECK(online.model.mask(id) == layer.mask);
      CHECK(online.logits == offline.forward(prompt));
    }
  }
}

TEST_CASE("online pruning errors") {
  const auto model = shared_model(8);
  CHECK_THROWS_AS(prune_online(model, std::vector<TokenId>{}, config(0.5, Method::wanda, Mode::online)),
                  PruneError);
  CHECK_THROWS(prune_online(model, std::vector<TokenId>{1, 2}, config(0.5, Method::sparsegpt, Mode::online)));
  CHECK_THROWS(prune_online(model, std::vector<TokenId>{1, 2}, config(0.5, Method::wanda)));
}

TEST_CASE("greedy decoding keeps prefill masks unless asked to re-prune") {
  const auto model = shared_model(9);
  std::mt19937_64 rng(47);
  const auto prompt = random_tokens(12, rng);
  auto cfg = config(0.5, Method::wanda, Mode::online);
  const auto trace = decode_greedy(model, prompt, 6, cfg);
  CHECK(trace.tokens.size() == 18);
  REQUIRE(trace.mask_hashes.size() == 7);
  for (auto h : trace.mask_hashes) CHECK(h == trace.mask_hashes.front());
  CHECK(decode_greedy(model, prompt, 6, cfg).tokens == trace.tokens);

  cfg.reprune_every_step = true;
  const auto re = decode_greedy(model, prompt, 6, cfg);
  CHECK(re.mask_hashes.front() == trace.mask_hashes.front());
  CHECK(re.mask_hashes.size() == 7);

  const auto capped = decode_greedy(model, random_tokens(46, rng), 10, config(0.5, Method::wanda, Mode::online));
  CHECK(capped.tokens.size() == 48);
}

TEST_CASE("pruned forward agrees with sparse_matmul applied layer by layer") {
  const auto model = shared_model(10);
  std::mt19937_64 rng(48);
  const auto toks = random_tokens(20, rng);
  const auto cfg = config(0.4, Method::wanda);
  const auto pruned = prune_offline(model, calibrate_offline(*model, toks, cfg), cfg);
  std::size_t seen = 0;
  pruned.forward(toks, [&](LayerId id, const Matrix& w, const RowSparseMatrix* ws, const Matrix& x) {
    REQUIRE(ws != nullptr);
    CHECK(&w == &model->linear(id));
    CHECK(ws->to_dense() == compress(w, pruned.mask(id)).to_dense());
    CHECK(x.rows() == w.cols());
    ++seen;
  });
  CHECK(seen == 12);
}
