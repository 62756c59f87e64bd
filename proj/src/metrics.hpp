#pragma once

#include <map>
#include <vector>

#include "model.hpp"

namespace fedgen {

struct RerankWeights;
struct BeamConfig;

struct BleuConfig {
  std::size_t max_order = 4;
  // Add-one smoothing on the modified precisions for n >= 2; without it
  // BLEU-4 collapses to zero on nearly all short dialogue outputs.
  bool add_one_smoothing = true;
};

// Corpus-level BLEU: geometric mean of modified n-gram precisions times
// the brevity penalty. Candidates and references are matched pairwise.
double bleu(const std::vector<std::vector<VocabId>>& candidates,
            const std::vector<std::vector<VocabId>>& references,
            const BleuConfig& cfg = {});
double bleu(const std::vector<std::vector<std::string>>& candidates,
            const std::vector<std::vector<std::string>>& references,
            const BleuConfig& cfg = {});

// exp(total NLL / total response tokens) under teacher forcing,
// evaluation mode (no dropout).
double perplexity(const Seq2SeqModel& model,
                  const std::vector<DialoguePair>& pairs);

struct SpeakerScore {
  double bleu = 0.0;
  double perplexity = 0.0;
  std::size_t n_examples = 0;
};

struct EvalReport {
  double bleu = 0.0;
  double perplexity = 0.0;
  std::map<SpeakerId, SpeakerScore> per_speaker;
  std::size_t n_examples = 0;
};

// Generates with beam search + reranking per pair and scores corpus BLEU
// against the references (trailing EOS stripped on both sides), plus
// teacher-forced perplexity; also broken down per responder.
EvalReport evaluate(const Seq2SeqModel& model,
                    const Seq2SeqModel* inverse_model,
                    const std::vector<DialoguePair>& test_pairs,
                    const RerankWeights& weights, const BeamConfig& beam_cfg,
                    const BleuConfig& bleu_cfg = {});

}  // namespace fedgen
