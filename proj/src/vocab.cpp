#include "vocab.hpp"

#include <cctype>
#include <istream>
#include <ostream>

#include "common.hpp"
#include "params.hpp"

namespace fedgen {

std::vector<std::string> tokenize(const std::string& text) {
  std::string spaced;
  spaced.reserve(text.size() * 2);
  for (char ch : text) {
    unsigned char c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      spaced.push_back(' ');
    } else if (std::isalnum(c) || c >= 0x80) {
      spaced.push_back(static_cast<char>(std::tolower(c)));
    } else {
      spaced.push_back(' ');
      spaced.push_back(ch);
      spaced.push_back(' ');
    }
  }
  std::vector<std::string> tokens;
  std::size_t i = 0;
  while (i < spaced.size()) {
    while (i < spaced.size() && spaced[i] == ' ') ++i;
    std::size_t start = i;
    while (i < spaced.size() && spaced[i] != ' ') ++i;
    if (i > start) tokens.push_back(spaced.substr(start, i - start));
  }
  return tokens;
}

std::string detokenize(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

Vocab::Vocab() {
  add_token("<pad>");
  add_token("<bos>");
  add_token("<eos>");
  add_token("<unk>");
}

VocabId Vocab::add_token(const std::string& token) {
  auto it = token_to_id_.find(token);
  if (it != token_to_id_.end()) return it->second;
  VocabId id = static_cast<VocabId>(id_to_token_.size());
  token_to_id_.emplace(token, id);
  id_to_token_.push_back(token);
  return id;
}

VocabId Vocab::encode(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnkId : it->second;
}

const std::string& Vocab::token(VocabId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
    fail(ErrorCode::kVocab, "token id " + std::to_string(id) +
                                " out of range [0, " +
                                std::to_string(id_to_token_.size()) + ")");
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

std::vector<VocabId> Vocab::encode_all(
    const std::vector<std::string>& tokens) const {
  std::vector<VocabId> out;
  out.reserve(tokens.size());
  for (const std::string& t : tokens) out.push_back(encode(t));
  return out;
}

void Vocab::write(std::ostream& out) const {
  io::write_u64(out, id_to_token_.size());
  for (const std::string& t : id_to_token_) io::write_string(out, t);
}

Vocab Vocab::read(std::istream& in) {
  std::uint64_t n = io::read_u64(in);
  if (n < kNumReserved) {
    fail(ErrorCode::kFormat, "vocabulary smaller than the reserved range");
  }
  Vocab v;
  for (std::uint64_t i = 0; i < kNumReserved; ++i) {
    std::string t = io::read_string(in);
    if (t != v.id_to_token_[i]) {
      fail(ErrorCode::kFormat, "reserved token mismatch at id " +
                                   std::to_string(i) + ": '" + t + "'");
    }
  }
  for (std::uint64_t i = kNumReserved; i < n; ++i) {
    v.add_token(io::read_string(in));
  }
  return v;
}

}  // namespace fedgen
