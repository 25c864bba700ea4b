#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mumoe/linalg.hpp"

namespace mumoe {

using TokenId = std::uint32_t;

/// Hyper-parameters of a pre-LN decoder-only transformer with a ReLU MLP and a
/// head tied to the token embedding.
struct ModelConfig {
  std::uint32_t n_layers = 2;
  std::uint32_t n_heads = 4;
  std::uint32_t hidden = 64;
  std::uint32_t head_dim = 16;
  std::uint32_t ffn_dim = 256;
  std::uint32_t vocab = 256;
  std::uint32_t max_seq = 512;

  /// Throws ModelShapeError when the fields are inconsistent.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// The six prunable linear layers of a block.
enum class LinearKind : std::uint8_t { q, k, v, o, up, down };
inline constexpr std::array<LinearKind, 6> kAllLinearKinds{LinearKind::q, LinearKind::k, LinearKind::v,
                                                            LinearKind::o, LinearKind::up, LinearKind::down};
std::string_view to_string(LinearKind kind);
LinearKind parse_linear_kind(std::string_view name);

struct LayerId {
  std::uint32_t block = 0;
  LinearKind kind = LinearKind::q;

  /// "<block>.<kind>", e.g. "0.q".
  std::string name() const;
  auto operator<=>(const LayerId&) const = default;
};

struct BlockWeights {
  Matrix q, k, v, o;  ///< hidden x hidden
  Matrix up;          ///< ffn x hidden
  Matrix down;        ///< hidden x ffn
  std::vector<float> ln1_gain, ln1_bias, ln2_gain, ln2_bias;

  const Matrix& linear(LinearKind kind) const;
  bool operator==(const BlockWeights&) const = default;
};

struct ModelWeights {
  Matrix token_embedding;  ///< vocab x hidden; also the output head
  Matrix position_embedding;  ///< max_seq x hidden
  std::vector<BlockWeights> blocks;
  std::vector<float> final_gain, final_bias;
  /// Optional token strings; empty means the byte-level vocabulary.
  std::vector<std::string> vocab;

  bool operator==(const ModelWeights&) const = default;
};

// Loader errors. Each failure class has its own type.
class ModelFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class BadMagicError : public ModelFormatError {
 public:
  using ModelFormatError::ModelFormatError;
};
class UnsupportedVersionError : public ModelFormatError {
 public:
  using ModelFormatError::ModelFormatError;
};
class TruncatedError : public ModelFormatError {
 public:
  TruncatedError(std::string tensor, const std::string& detail);
  const std::string& tensor() const noexcept { return tensor_; }

 private:
  std::string tensor_;
};
class ModelShapeError : public ModelFormatError {
 public:
  using ModelFormatError::ModelFormatError;
};
class NonFiniteError : public ModelFormatError {
 public:
  NonFiniteError(std::string tensor, std::size_t index);
  const std::string& tensor() const noexcept { return tensor_; }

 private:
  std::string tensor_;
};

/// Raised by forward() for inputs outside the model's domain.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr std::uint32_t kFormatVersion = 1;

/// Applies linear layer `id` (weight d_out x d_in) to an input laid out as
/// features x tokens. The default applier is a dense matmul.
using LinearApplier = std::function<Matrix(LayerId id, const Matrix& weight, const Matrix& input)>;

class Model {
 public:
  Model(ModelConfig config, ModelWeights weights);

  const ModelConfig& config() const noexcept { return config_; }
  const ModelWeights& weights() const noexcept { return weights_; }
  const Matrix& linear(LayerId id) const;
  std::vector<LayerId> linear_layers() const;

  /// Logits laid out tokens x vocab. Hidden states are features x tokens
  /// throughout, so each linear layer sees X in the d x T orientation.
  Matrix forward(std::span<const TokenId> tokens, const LinearApplier& apply = {}) const;

  /// Random weights for tests and experiments; deterministic in `seed`.
  static Model random(const ModelConfig& config, std::uint64_t seed);

 private:
  ModelConfig config_;
  ModelWeights weights_;
};

/// "MUMO" format: magic, u32 version, seven u32 config fields, raw f32 tensors in
/// the fixed order (token embedding, position embedding, per block q, k, v, o,
/// up, down, ln1 gain, ln1 bias, ln2 gain, ln2 bias, then final gain, final
/// bias), then an optional vocab section (u32 count, then u32 length + UTF-8
/// bytes per token). Everything little-endian.
void save_model(const Model& model, std::ostream& os);
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(std::istream& is);
Model load_model(const std::filesystem::path& path);

/// Produces logits (tokens x vocab) for one evaluation window.
using LogitsFn = std::function<Matrix(std::span<const TokenId> window)>;

struct PerplexityResult {
  double nll_sum = 0.0;
  std::size_t predictions = 0;
  std::size_t windows = 0;

  double mean_nll() const { return predictions == 0 ? 0.0 : nll_sum / static_cast<double>(predictions); }
  double perplexity() const;
};

/// Windows of up to `window` tokens start every `stride` tokens; each token is
/// scored once, by the first window that holds it with at least one token of
/// context. stride == window gives non-overlapping windows.
PerplexityResult perplexity(std::span<const TokenId> stream, std::size_t window, std::size_t stride,
                            const LogitsFn& logits);

/// Convenience overload evaluating the dense model with window = max_seq.
PerplexityResult perplexity(const Model& model, std::span<const TokenId> stream, std::size_t stride);

}  // namespace mumoe
