#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mumoe/model.hpp"
#include "mumoe/scoring.hpp"
#include "mumoe/selection.hpp"
#include "mumoe/sparse.hpp"

namespace mumoe {

enum class Method { magnitude, wanda, sparsegpt };
enum class Mode { offline, online };

std::string_view to_string(Method m);
std::string_view to_string(Mode m);
Method parse_method(std::string_view name);
Mode parse_mode(std::string_view name);

/// Which linear layers get pruned. Empty `blocks` means every block.
struct LayerFilter {
  std::vector<LinearKind> kinds{kAllLinearKinds.begin(), kAllLinearKinds.end()};
  std::vector<std::uint32_t> blocks;

  bool contains(LayerId id) const;
  /// "all", or a comma list of kinds (q,k,v,o,up,down).
  static LayerFilter parse(std::string_view spec);
  std::string to_string() const;
};

struct PruneConfig {
  double rho = 0.5;
  Method method = Method::wanda;
  Strategy strategy = Strategy::kth_threshold;
  TieMode tie_mode = TieMode::canonical;
  Mode mode = Mode::offline;
  LambdaPolicy lambda;
  LayerFilter layers;
  bool parallel_selection = false;
  /// Online SparseGPT costs O(d³) per prompt and is refused unless forced.
  bool allow_online_sparsegpt = false;
  /// Recompute online masks at every decode step instead of once at prefill.
  bool reprune_every_step = false;

  void validate() const;
};

/// Input statistics of every pruned layer from one calibration pass.
struct CalibrationRecord {
  std::string source;
  std::size_t token_count = 0;
  std::map<LayerId, ActivationStats> layers;

  bool operator==(const CalibrationRecord&) const = default;
};

struct PrunedLayer {
  SparsityMask mask;
  RowSparseMatrix weights;
};

class PruneError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Score, select and compress one weight matrix. `stats` may be null for magnitude pruning.
PrunedLayer prune_layer(const Matrix& w, const ActivationStats* stats, const PruneConfig& cfg, LayerId id);

/// Sees every linear layer's input during a forward pass. `pruned` is null for dense layers.
using LayerObserver =
    std::function<void(LayerId id, const Matrix& weight, const RowSparseMatrix* pruned, const Matrix& input)>;

/// A view over a shared dense model with compressed replacements for some
/// layers. The dense weights are never modified.
class PrunedModel {
 public:
  PrunedModel(std::shared_ptr<const Model> base, std::map<LayerId, PrunedLayer> layers);

  const Model& base() const noexcept { return *base_; }
  const std::shared_ptr<const Model>& base_ptr() const noexcept { return base_; }
  const std::map<LayerId, PrunedLayer>& layers() const noexcept { return layers_; }
  const SparsityMask& mask(LayerId id) const;

  Matrix forward(std::span<const TokenId> tokens, const LayerObserver& observe = {}) const;
  /// Combined hash of every layer mask, in layer order.
  std::uint64_t mask_hash() const;

 private:
  std::shared_ptr<const Model> base_;
  std::map<LayerId, PrunedLayer> layers_;
};

/// One forward pass over `tokens`, pruning filtered layers front to back so
/// each layer's statistics reflect the already-pruned layers before it.
CalibrationRecord calibrate_offline(const Model& model, std::span<const TokenId> tokens, const PruneConfig& cfg,
                                    std::string source = {});

/// Static masks from a calibration record. Magnitude pruning ignores the record.
PrunedModel prune_offline(std::shared_ptr<const Model> model, const CalibrationRecord& record,
                          const PruneConfig& cfg);

struct OnlinePrune {
  PrunedModel model;
  Matrix logits;  ///< prefill logits, tokens x vocab
};

/// Prefill with per-prompt pruning: each filtered layer is calibrated on the
/// prompt's own activations, pruned, then applied in compressed form.
OnlinePrune prune_online(std::shared_ptr<const Model> model, std::span<const TokenId> prompt,
                         const PruneConfig& cfg);

struct DecodeTrace {
  std::vector<TokenId> tokens;               ///< prompt followed by generated ids
  std::vector<std::uint64_t> mask_hashes;    ///< prefill, then one per decode step
};

/// Greedy decoding under online pruning. Masks from prefill are reused unless
/// cfg.reprune_every_step is set. Stops early at max_seq.
DecodeTrace decode_greedy(std::shared_ptr<const Model> model, std::span<const TokenId> prompt,
                          std::size_t new_tokens, const PruneConfig& cfg);

/// Dense forward that reports every linear layer's input.
Matrix observe_dense(const Model& model, std::span<const TokenId> tokens, const LayerObserver& observe);

}  // namespace mumoe
