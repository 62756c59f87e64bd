#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <vector>

namespace fedgen {

using VocabId = std::int32_t;

// Reserved ids, fixed in this order at the bottom of every vocabulary.
constexpr VocabId kPadId = 0;
constexpr VocabId kBosId = 1;
constexpr VocabId kEosId = 2;
constexpr VocabId kUnkId = 3;
constexpr std::size_t kNumReserved = 4;

// Lowercases and splits on whitespace, with punctuation separated into
// standalone tokens ("don't go." -> don ' t go .).
std::vector<std::string> tokenize(const std::string& text);
std::string detokenize(const std::vector<std::string>& tokens);

class Vocab {
 public:
  Vocab();

  // Registers a token, returning its id (existing id if already known).
  VocabId add_token(const std::string& token);

  VocabId encode(const std::string& token) const;  // UNK when absent
  const std::string& token(VocabId id) const;

  std::vector<VocabId> encode_all(const std::vector<std::string>& tokens) const;

  std::size_t size() const { return id_to_token_.size(); }

  void write(std::ostream& out) const;
  static Vocab read(std::istream& in);

 private:
  std::unordered_map<std::string, VocabId> token_to_id_;
  std::vector<std::string> id_to_token_;
};

}  // namespace fedgen
