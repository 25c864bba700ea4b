#include "mumoe/pruner.hpp"

#include <algorithm>
#include <sstream>

namespace mumoe {

namespace {

bool needs_gram(const PruneConfig& cfg) { return cfg.method == Method::sparsegpt; }

// Forward pass that prunes filtered layers in execution order. Stats and
// pruned layers are written to the optional sinks.
Matrix sequential_prune_pass(const Model& model, std::span<const TokenId> tokens, const PruneConfig& cfg,
                             std::map<LayerId, ActivationStats>* stats_out,
                             std::map<LayerId, PrunedLayer>* layers_out) {
  return model.forward(tokens, [&](LayerId id, const Matrix& w, const Matrix& x) {
    if (!cfg.layers.contains(id)) return matmul(w, x);
    ActivationStats stats = collect_stats(x, needs_gram(cfg), cfg.lambda);
    PrunedLayer layer = prune_layer(w, &stats, cfg, id);
    Matrix y = sparse_matmul(layer.weights, x);
    if (stats_out) stats_out->insert_or_assign(id, std::move(stats));
    if (layers_out) layers_out->insert_or_assign(id, std::move(layer));
    return y;
  });
}

}  // namespace

std::string_view to_string(Method m) {
  switch (m) {
    case Method::magnitude:
      return "magnitude";
    case Method::wanda:
      return "wanda";
    case Method::sparsegpt:
      return "sparsegpt";
  }
  return "?";
}

std::string_view to_string(Mode m) { return m == Mode::offline ? "offline" : "online"; }

Method parse_method(std::string_view name) {
  if (name == "magnitude") return Method::magnitude;
  if (name == "wanda") return Method::wanda;
  if (name == "sparsegpt" || name == "sparsegpt_score") return Method::sparsegpt;
  throw std::invalid_argument("unknown pruning method '" + std::string(name) + "'");
}

Mode parse_mode(std::string_view name) {
  if (name == "offline") return Mode::offline;
  if (name == "online") return Mode::online;
  throw std::invalid_argument("unknown pruning mode '" + std::string(name) + "'");
}

bool LayerFilter::contains(LayerId id) const {
  const bool kind_ok = std::find(kinds.begin(), kinds.end(), id.kind) != kinds.end();
  const bool block_ok = blocks.empty() || std::find(blocks.begin(), blocks.end(), id.block) != blocks.end();
  return kind_ok && block_ok;
}

LayerFilter LayerFilter::parse(std::string_view spec) {
  LayerFilter f;
  if (spec.empty() || spec == "all") return f;
  f.kinds.clear();
  std::size_t pos = 0;
  while (pos <= spec.size()) {
    const std::size_t comma = std::min(spec.find(',', pos), spec.size());
    const auto item = spec.substr(pos, comma - pos);
    if (!item.empty()) {
      const LinearKind kind = parse_linear_kind(item);
      if (std::find(f.kinds.begin(), f.kinds.end(), kind) == f.kinds.end()) f.kinds.push_back(kind);
    }
    pos = comma + 1;
  }
  if (f.kinds.empty()) throw std::invalid_argument("layer filter selects no layers");
  return f;
}

std::string LayerFilter::to_string() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < kinds.size(); ++i) os << (i ? "," : "") << mumoe::to_string(kinds[i]);
  if (!blocks.empty()) {
    os << "@";
    for (std::size_t i = 0; i < blocks.size(); ++i) os << (i ? "," : "") << blocks[i];
  }
  return os.str();
}

void PruneConfig::validate() const {
  if (!(rho > 0.0 && rho <= 1.0)) throw std::invalid_argument("rho must lie in (0, 1]");
  if (mode == Mode::online && method == Method::sparsegpt && !allow_online_sparsegpt) {
    throw std::invalid_argument("online pruning with the SparseGPT score is cubic in d per prompt; "
                                "use magnitude or wanda, or force it explicitly");
  }
  if (lambda.value < 0.0) throw std::invalid_argument("damping must be non-negative");
}

PrunedLayer prune_layer(const Matrix& w, const ActivationStats* stats, const PruneConfig& cfg, LayerId id) {
  ScoreMatrix scores;
  switch (cfg.method) {
    case Method::magnitude:
      scores = magnitude_score(w);
      break;
    case Method::wanda:
      if (!stats) throw PruneError("layer " + id.name() + ": wanda needs activation statistics");
      scores = wanda_score(w, *stats);
      break;
    case Method::sparsegpt:
      if (!stats || !stats->gram) throw PruneError("layer " + id.name() + ": sparsegpt needs a gram matrix");
      scores = sparsegpt_score(w, *stats, "layer " + id.name());
      break;
  }
  const auto params = SelectionParams::make(cfg.rho, w.cols(), cfg.strategy, cfg.tie_mode);
  PrunedLayer out;
  out.mask = select_mask(scores, params, cfg.parallel_selection);
  out.weights = compress(w, out.mask);
  return out;
}

PrunedModel::PrunedModel(std::shared_ptr<const Model> base, std::map<LayerId, PrunedLayer> layers)
    : base_(std::move(base)), layers_(std::move(layers)) {
  if (!base_) throw std::invalid_argument("pruned model needs a base model");
}

const SparsityMask& PrunedModel::mask(LayerId id) const {
  const auto it = layers_.find(id);
  if (it == layers_.end()) throw std::out_of_range("layer " + id.name() + " is not pruned");
  return it->second.mask;
}

Matrix PrunedModel::forward(std::span<const TokenId> tokens, const LayerObserver& observe) const {
  return base_->forward(tokens, [&](LayerId id, const Matrix& w, const Matrix& x) {
    const auto it = layers_.find(id);
    const RowSparseMatrix* pruned = it == layers_.end() ? nullptr : &it->second.weights;
    if (observe) observe(id, w, pruned, x);
    return pruned ? sparse_matmul(*pruned, x) : matmul(w, x);
  });
}

std::uint64_t PrunedModel::mask_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [id, layer] : layers_) {
    h ^= (static_cast<std::uint64_t>(id.block) << 8) | static_cast<std::uint64_t>(id.kind);
    h *= 0x100000001b3ull;
    h ^= layer.mask.hash();
    h *= 0x100000001b3ull;
  }
  return h;
}

CalibrationRecord calibrate_offline(const Model& model, std::span<const TokenId> tokens, const PruneConfig& cfg,
                                    std::string source) {
  cfg.validate();
  if (tokens.empty()) throw PruneError("calibration needs at least one token");
  CalibrationRecord record;
  record.source = std::move(source);
  record.token_count = tokens.size();
  sequential_prune_pass(model, tokens, cfg, &record.layers, nullptr);
  return record;
}

PrunedModel prune_offline(std::shared_ptr<const Model> model, const CalibrationRecord& record,
                          const PruneConfig& cfg) {
  cfg.validate();
  std::map<LayerId, PrunedLayer> layers;
  for (const LayerId id : model->linear_layers()) {
    if (!cfg.layers.contains(id)) continue;
    const ActivationStats* stats = nullptr;
    if (cfg.method != Method::magnitude) {
      const auto it = record.layers.find(id);
      if (it == record.layers.end()) throw PruneError("calibration record has no statistics for layer " + id.name());
      stats = &it->second;
    }
    layers.emplace(id, prune_layer(model->linear(id), stats, cfg, id));
  }
  return PrunedModel(std::move(model), std::move(layers));
}

OnlinePrune prune_online(std::shared_ptr<const Model> model, std::span<const TokenId> prompt,
                         const PruneConfig& cfg) {
  cfg.validate();
  if (cfg.mode != Mode::online) throw std::invalid_argument("prune_online requires mode=online");
  if (prompt.empty()) throw PruneError("online pruning needs a non-empty prompt");
  std::map<LayerId, PrunedLayer> layers;
  Matrix logits = sequential_prune_pass(*model, prompt, cfg, nullptr, &layers);
  return {PrunedModel(std::move(model), std::move(layers)), std::move(logits)};
}

DecodeTrace decode_greedy(std::shared_ptr<const Model> model, std::span<const TokenId> prompt,
                          std::size_t new_tokens, const PruneConfig& cfg) {
  const std::size_t max_seq = model->config().max_seq;
  OnlinePrune state = prune_online(model, prompt, cfg);
  DecodeTrace trace;
  trace.tokens.assign(prompt.begin(), prompt.end());
  trace.mask_hashes.push_back(state.model.mask_hash());
  Matrix logits = std::move(state.logits);
  for (std::size_t step = 0; step < new_tokens && trace.tokens.size() < max_seq; ++step) {
    const auto last = logits.row(logits.rows() - 1);
    const auto next = static_cast<TokenId>(std::max_element(last.begin(), last.end()) - last.begin());
    trace.tokens.push_back(next);
    if (cfg.reprune_every_step) {
      state = prune_online(model, trace.tokens, cfg);
      logits = std::move(state.logits);
    } else {
      logits = state.model.forward(trace.tokens);
    }
    trace.mask_hashes.push_back(state.model.mask_hash());
  }
  return trace;
}

Matrix observe_dense(const Model& model, std::span<const TokenId> tokens, const LayerObserver& observe) {
  return model.forward(tokens, [&](LayerId id, const Matrix& w, const Matrix& x) {
    if (observe) observe(id, w, nullptr, x);
    return matmul(w, x);
  });
}

}  // namespace mumoe
