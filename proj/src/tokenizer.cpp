#include "mumoe/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <stdexcept>

namespace mumoe {

Tokenizer::Tokenizer(std::vector<std::string> vocab) : vocab_(std::move(vocab)) {
  for (const auto& t : vocab_) longest_ = std::max(longest_, t.size());
}

Tokenizer Tokenizer::for_model(const Model& model) { return Tokenizer(model.weights().vocab); }

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  if (vocab_.empty()) {
    for (char c : text) ids.push_back(static_cast<unsigned char>(c));
    return ids;
  }
  // Linear scan per position is fine for the small vocabularies this targets.
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t best_len = 0;
    TokenId best = 0;
    for (std::size_t id = 0; id < vocab_.size(); ++id) {
      const auto& tok = vocab_[id];
      if (tok.size() > best_len && text.substr(pos, tok.size()) == tok) {
        best_len = tok.size();
        best = static_cast<TokenId>(id);
      }
    }
    if (best_len == 0) {
      throw std::invalid_argument("text not tokenizable at byte " + std::to_string(pos));
    }
    ids.push_back(best);
    pos += best_len;
  }
  return ids;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (auto id : ids) {
    if (vocab_.empty()) {
      if (id > 255) throw std::invalid_argument("byte token id out of range");
      out.push_back(static_cast<char>(id));
    } else {
      out += vocab_.at(id);
    }
  }
  return out;
}

std::vector<TokenId> read_token_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open token file " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() % 4 != 0) throw std::runtime_error("token file size is not a multiple of 4: " + path.string());
  std::vector<TokenId> ids(bytes.size() / 4);
  std::copy(bytes.begin(), bytes.end(), reinterpret_cast<char*>(ids.data()));
  return ids;
}

void write_token_file(const std::filesystem::path& path, std::span<const TokenId> ids) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(ids.data()), static_cast<std::streamsize>(ids.size_bytes()));
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open text file " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::vector<TokenId> load_token_stream(const std::filesystem::path& path, const Tokenizer& tokenizer) {
  if (path.extension() == ".u32") return read_token_file(path);
  return tokenizer.encode(read_text_file(path));
}

}  // namespace mumoe
