#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mumoe/model.hpp"

namespace mumoe {

/// Byte-level by default (id = byte value, 256 ids). With a vocab section the
/// encoder takes the longest matching vocab entry at each position.
class Tokenizer {
 public:
  Tokenizer() = default;
  explicit Tokenizer(std::vector<std::string> vocab);

  static Tokenizer for_model(const Model& model);

  std::size_t vocab_size() const noexcept { return vocab_.empty() ? 256 : vocab_.size(); }
  bool byte_level() const noexcept { return vocab_.empty(); }

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

 private:
  std::vector<std::string> vocab_;
  std::size_t longest_ = 0;
};

/// Flat little-endian u32 token ids.
std::vector<TokenId> read_token_file(const std::filesystem::path& path);
void write_token_file(const std::filesystem::path& path, std::span<const TokenId> ids);

/// Reads a token stream: `.u32` files hold raw ids, anything else is text.
std::vector<TokenId> load_token_stream(const std::filesystem::path& path, const Tokenizer& tokenizer);

std::string read_text_file(const std::filesystem::path& path);

}  // namespace mumoe
