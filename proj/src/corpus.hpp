#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "vocab.hpp"

namespace fedgen {

using SpeakerId = std::int32_t;

struct Utterance {
  std::string speaker;
  std::string text;
  std::string conversation_id;
  std::size_t position = 0;
};

struct ParseResult {
  std::vector<Utterance> utterances;
  std::size_t skipped = 0;  // malformed lines
};

// Cornell movie-dialog format: a lines file and a conversations file,
// both " +++$+++ "-delimited. Malformed lines are skipped and counted.
ParseResult parse_cornell(const std::string& lines_path,
                          const std::string& conversations_path);

// "SPEAKER: text" transcript; a blank line starts a new scene and scenes
// are the conversation boundaries. Speaker names are case-folded.
ParseResult parse_tv_script(const std::string& path);

// Adjacent-utterance pair before vocabulary mapping. `speaker` is the
// responder.
struct RawPair {
  std::vector<std::string> question;
  std::vector<std::string> response;
  std::string speaker;
};

// Every adjacent utterance pair within a conversation becomes one
// (question, response) pair; when a filter is given, only pairs whose
// responder is in the filter survive.
std::vector<RawPair> make_raw_pairs(
    const std::vector<Utterance>& utterances,
    const std::optional<std::set<std::string>>& speaker_filter = std::nullopt);

// Tokens ranked by frequency (ties broken lexicographically); the top
// `cap` tokens get ids above the reserved range, everything else maps
// to UNK. Built from the training split only.
Vocab build_vocab(const std::vector<RawPair>& train_pairs, std::size_t cap);

struct SplitSpec {
  double train = 0.8;
  double dev = 0.1;
  double test = 0.1;
  std::uint64_t seed = 0;
};

struct SplitResult {
  std::vector<RawPair> train;
  std::vector<RawPair> dev;
  std::vector<RawPair> test;
  std::size_t small_speaker_warnings = 0;  // speakers with < 3 pairs
};

// Seeded shuffle then contiguous slicing, stratified per responder so
// every speaker lands in train. Speakers with fewer than 3 pairs go to
// train wholesale (counted as warnings).
SplitResult split_pairs(const std::vector<RawPair>& pairs,
                        const SplitSpec& spec);

// Stable name -> SpeakerId binding for one experiment (sorted names).
class SpeakerRegistry {
 public:
  SpeakerRegistry() = default;
  explicit SpeakerRegistry(std::vector<std::string> names);

  SpeakerId id(const std::string& name) const;  // kDomain error if unknown
  const std::string& name(SpeakerId id) const;
  bool contains(const std::string& name) const;
  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;  // sorted
};

// Vocabulary-mapped pair; the unit all training and evaluation runs on.
struct DialoguePair {
  std::vector<VocabId> question;  // length <= max_len
  std::vector<VocabId> response;  // ends with EOS, length <= max_len
  SpeakerId speaker = 0;
};

// OOV tokens map to UNK; the question keeps its first max_len tokens and
// the response its first max_len - 1 plus a final EOS.
DialoguePair encode_pair(const RawPair& raw, const Vocab& vocab,
                         const SpeakerRegistry& speakers, std::size_t max_len);

std::vector<DialoguePair> encode_pairs(const std::vector<RawPair>& raws,
                                       const Vocab& vocab,
                                       const SpeakerRegistry& speakers,
                                       std::size_t max_len);

// Cached tokenized corpus, one JSON object per line:
// {"speaker": ..., "q_tokens": [...], "r_tokens": [...]}.
void write_pairs_jsonl(const std::string& path,
                       const std::vector<RawPair>& pairs);
std::vector<RawPair> read_pairs_jsonl(const std::string& path);

}  // namespace fedgen
