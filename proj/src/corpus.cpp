#include "corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "common.hpp"
#include "rng.hpp"

namespace fedgen {

namespace {

constexpr const char* kCornellDelim = " +++$+++ ";

// Splits on the Cornell delimiter, at most max_fields pieces; the last
// piece keeps any further delimiter occurrences verbatim.
std::vector<std::string> split_cornell(const std::string& line,
                                       std::size_t max_fields) {
  std::vector<std::string> fields;
  std::size_t pos = 0;
  const std::string delim = kCornellDelim;
  while (fields.size() + 1 < max_fields) {
    std::size_t next = line.find(delim, pos);
    if (next == std::string::npos) break;
    fields.push_back(line.substr(pos, next - pos));
    pos = next + delim.size();
  }
  fields.push_back(line.substr(pos));
  return fields;
}

std::string trim(const std::string& s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::string fold_case(const std::string& s) {
  std::string out = s;
  for (char& c : out) {
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return out;
}

std::ifstream open_or_fail(const std::string& path) {
  std::ifstream in(path);
  if (!in.is_open()) {
    fail(ErrorCode::kIo, "cannot open '" + path + "'");
  }
  return in;
}

}  // namespace

ParseResult parse_cornell(const std::string& lines_path,
                          const std::string& conversations_path) {
  ParseResult result;

  struct LineEntry {
    std::string speaker;
    std::string text;
  };
  std::unordered_map<std::string, LineEntry> lines;

  {
    std::ifstream in = open_or_fail(lines_path);
    std::string line;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      // lineID, characterID, movieID, character name, text
      std::vector<std::string> f = split_cornell(line, 5);
      if (f.size() != 5) {
        ++result.skipped;
        continue;
      }
      std::string text = trim(f[4]);
      if (text.empty()) {
        ++result.skipped;
        continue;
      }
      lines[trim(f[0])] = LineEntry{trim(f[1]), text};
    }
  }

  {
    std::ifstream in = open_or_fail(conversations_path);
    std::string line;
    std::size_t conv_index = 0;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      // char1, char2, movieID, list of line ids
      std::vector<std::string> f = split_cornell(line, 4);
      if (f.size() != 4) {
        ++result.skipped;
        continue;
      }
      std::vector<std::string> ids;
      std::string cur;
      for (char c : f[3]) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
          cur.push_back(c);
        } else if (!cur.empty()) {
          ids.push_back(cur);
          cur.clear();
        }
      }
      if (!cur.empty()) ids.push_back(cur);

      std::string conv_id = "c" + std::to_string(conv_index++);
      std::size_t position = 0;
      for (const std::string& id : ids) {
        auto it = lines.find(id);
        if (it == lines.end()) {
          ++result.skipped;
          continue;
        }
        result.utterances.push_back(Utterance{
            it->second.speaker, it->second.text, conv_id, position++});
      }
    }
  }

  if (result.utterances.empty()) {
    fail(ErrorCode::kFormat,
         "no parsable utterances in '" + lines_path + "' + '" +
             conversations_path + "'");
  }
  return result;
}

ParseResult parse_tv_script(const std::string& path) {
  ParseResult result;
  std::ifstream in = open_or_fail(path);

  std::string line;
  std::size_t scene = 0;
  std::size_t position = 0;
  bool scene_open = false;
  while (std::getline(in, line)) {
    std::string t = trim(line);
    if (t.empty()) {
      if (scene_open) {
        ++scene;
        scene_open = false;
        position = 0;
      }
      continue;
    }
    std::size_t colon = t.find(':');
    if (colon == std::string::npos || colon == 0) {
      ++result.skipped;
      continue;
    }
    std::string speaker = fold_case(trim(t.substr(0, colon)));
    std::string text = trim(t.substr(colon + 1));
    if (speaker.empty() || text.empty()) {
      ++result.skipped;
      continue;
    }
    result.utterances.push_back(
        Utterance{speaker, text, "scene-" + std::to_string(scene), position++});
    scene_open = true;
  }

  if (result.utterances.empty()) {
    fail(ErrorCode::kFormat, "no parsable utterances in '" + path + "'");
  }
  return result;
}

std::vector<RawPair> make_raw_pairs(
    const std::vector<Utterance>& utterances,
    const std::optional<std::set<std::string>>& speaker_filter) {
  std::vector<RawPair> pairs;
  for (std::size_t i = 0; i + 1 < utterances.size(); ++i) {
    const Utterance& q = utterances[i];
    const Utterance& r = utterances[i + 1];
    if (q.conversation_id != r.conversation_id) continue;
    if (speaker_filter && speaker_filter->count(r.speaker) == 0) continue;
    std::vector<std::string> q_tok = tokenize(q.text);
    std::vector<std::string> r_tok = tokenize(r.text);
    if (q_tok.empty() || r_tok.empty()) continue;
    pairs.push_back(RawPair{std::move(q_tok), std::move(r_tok), r.speaker});
  }
  return pairs;
}

Vocab build_vocab(const std::vector<RawPair>& train_pairs, std::size_t cap) {
  if (train_pairs.empty()) {
    fail(ErrorCode::kInvalidArgument, "build_vocab: empty training set");
  }
  std::map<std::string, std::size_t> freq;
  for (const RawPair& p : train_pairs) {
    for (const std::string& t : p.question) ++freq[t];
    for (const std::string& t : p.response) ++freq[t];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(),
                                                          freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocab vocab;
  for (std::size_t i = 0; i < ranked.size() && i < cap; ++i) {
    vocab.add_token(ranked[i].first);
  }
  return vocab;
}

SplitResult split_pairs(const std::vector<RawPair>& pairs,
                        const SplitSpec& spec) {
  if (pairs.empty()) {
    fail(ErrorCode::kInvalidArgument, "split_pairs: empty pair list");
  }
  double total = spec.train + spec.dev + spec.test;
  if (std::abs(total - 1.0) > 1e-9) {
    fail(ErrorCode::kConfig, "split fractions sum to " + std::to_string(total) +
                                 ", expected 1");
  }

  // Group by responder, keep first-seen order inside each group.
  std::map<std::string, std::vector<std::size_t>> by_speaker;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    by_speaker[pairs[i].speaker].push_back(i);
  }

  SplitResult result;
  Rng rng(spec.seed);
  for (auto& [speaker, indices] : by_speaker) {
    if (indices.size() < 3) {
      ++result.small_speaker_warnings;
      for (std::size_t i : indices) result.train.push_back(pairs[i]);
      continue;
    }
    rng.shuffle(indices);
    std::size_t n = indices.size();
    std::size_t n_dev = static_cast<std::size_t>(
        static_cast<double>(n) * spec.dev);
    std::size_t n_test = static_cast<std::size_t>(
        static_cast<double>(n) * spec.test);
    // Train absorbs the rounding remainder and is never left empty.
    while (n_dev + n_test >= n) {
      if (n_test > 0) {
        --n_test;
      } else {
        --n_dev;
      }
    }
    std::size_t n_train = n - n_dev - n_test;
    for (std::size_t i = 0; i < n_train; ++i) {
      result.train.push_back(pairs[indices[i]]);
    }
    for (std::size_t i = n_train; i < n_train + n_dev; ++i) {
      result.dev.push_back(pairs[indices[i]]);
    }
    for (std::size_t i = n_train + n_dev; i < n; ++i) {
      result.test.push_back(pairs[indices[i]]);
    }
  }
  return result;
}

SpeakerRegistry::SpeakerRegistry(std::vector<std::string> names)
    : names_(std::move(names)) {
  std::sort(names_.begin(), names_.end());
  names_.erase(std::unique(names_.begin(), names_.end()), names_.end());
}

SpeakerId SpeakerRegistry::id(const std::string& name) const {
  auto it = std::lower_bound(names_.begin(), names_.end(), name);
  if (it == names_.end() || *it != name) {
    fail(ErrorCode::kDomain, "unknown speaker '" + name + "'");
  }
  return static_cast<SpeakerId>(it - names_.begin());
}

const std::string& SpeakerRegistry::name(SpeakerId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= names_.size()) {
    fail(ErrorCode::kDomain, "speaker id " + std::to_string(id) +
                                 " out of range [0, " +
                                 std::to_string(names_.size()) + ")");
  }
  return names_[static_cast<std::size_t>(id)];
}

bool SpeakerRegistry::contains(const std::string& name) const {
  return std::binary_search(names_.begin(), names_.end(), name);
}

DialoguePair encode_pair(const RawPair& raw, const Vocab& vocab,
                         const SpeakerRegistry& speakers,
                         std::size_t max_len) {
  if (max_len < 2) {
    fail(ErrorCode::kInvalidArgument, "encode_pair: max_len must be >= 2");
  }
  DialoguePair pair;
  pair.speaker = speakers.id(raw.speaker);
  for (std::size_t i = 0; i < raw.question.size() && i < max_len; ++i) {
    pair.question.push_back(vocab.encode(raw.question[i]));
  }
  for (std::size_t i = 0; i < raw.response.size() && i < max_len - 1; ++i) {
    pair.response.push_back(vocab.encode(raw.response[i]));
  }
  pair.response.push_back(kEosId);
  return pair;
}

std::vector<DialoguePair> encode_pairs(const std::vector<RawPair>& raws,
                                       const Vocab& vocab,
                                       const SpeakerRegistry& speakers,
                                       std::size_t max_len) {
  std::vector<DialoguePair> out;
  out.reserve(raws.size());
  for (const RawPair& raw : raws) {
    out.push_back(encode_pair(raw, vocab, speakers, max_len));
  }
  return out;
}

void write_pairs_jsonl(const std::string& path,
                       const std::vector<RawPair>& pairs) {
  std::ofstream out(path, std::ios::binary);
  if (!out.is_open()) {
    fail(ErrorCode::kIo, "cannot write '" + path + "'");
  }
  for (const RawPair& p : pairs) {
    nlohmann::json row;
    row["speaker"] = p.speaker;
    row["q_tokens"] = p.question;
    row["r_tokens"] = p.response;
    out << row.dump() << "\n";
  }
}

std::vector<RawPair> read_pairs_jsonl(const std::string& path) {
  std::ifstream in = open_or_fail(path);
  std::vector<RawPair> pairs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    nlohmann::json row = nlohmann::json::parse(line, nullptr, false);
    if (row.is_discarded() || !row.contains("speaker") ||
        !row.contains("q_tokens") || !row.contains("r_tokens")) {
      fail(ErrorCode::kFormat,
           path + ":" + std::to_string(lineno) + ": bad pair record");
    }
    RawPair p;
    p.speaker = row["speaker"].get<std::string>();
    p.question = row["q_tokens"].get<std::vector<std::string>>();
    p.response = row["r_tokens"].get<std::vector<std::string>>();
    pairs.push_back(std::move(p));
  }
  if (pairs.empty()) {
    fail(ErrorCode::kFormat, "no pair records in '" + path + "'");
  }
  return pairs;
}

}  // namespace fedgen
