#pragma once

#include <iosfwd>
#include <vector>

#include "model.hpp"

namespace fedgen {

struct Hypothesis {
  std::vector<VocabId> tokens;
  double logp = 0.0;  // cumulative ln p of the tokens
  LstmState state;
  bool finished = false;  // last token is EOS or length hit max_len
};

struct BeamConfig {
  std::size_t beam_size = 200;
  std::size_t max_len = 20;
  std::size_t nbest = 0;  // hypotheses kept for reranking; 0 = beam_size
};

// Breadth-limited search by cumulative log-probability: every live
// hypothesis is expanded over the full vocabulary, the top beam_size
// candidates survive, and finished ones retire into the result pool.
// Returns up to beam_size hypotheses sorted by logp descending.
std::vector<Hypothesis> beam_search(const Seq2SeqModel& model,
                                    const std::vector<VocabId>& question,
                                    SpeakerId speaker, const BeamConfig& cfg);

struct RerankWeights {
  double lambda = 0.0;  // inverse-model weight
  double gamma = 0.0;   // length-penalty weight
};

// fwd_logp + lambda * inv_logp + gamma * length.
double rerank_score(double fwd_logp, double inv_logp, std::size_t length,
                    const RerankWeights& w);

// ln p(question | response) under a persona-free model trained on
// swapped pairs; scores exactly the question tokens as the target.
double score_inverse(const Seq2SeqModel& inverse_model,
                     const std::vector<VocabId>& question,
                     const std::vector<VocabId>& response);

struct ScoredHypothesis {
  std::vector<VocabId> tokens;
  double fwd_logp = 0.0;
  double inv_logp = 0.0;
};

// Builds the per-question N-best list for reranking: beam search, then
// inverse-model scoring of each survivor (0 when no inverse model).
std::vector<ScoredHypothesis> build_nbest(const Seq2SeqModel& model,
                                          const Seq2SeqModel* inverse_model,
                                          const std::vector<VocabId>& question,
                                          SpeakerId speaker,
                                          const BeamConfig& cfg);

// Index of the best hypothesis under the weights; ties keep beam order.
std::size_t rerank_best(const std::vector<ScoredHypothesis>& nbest,
                        const RerankWeights& w);

struct RerankGrid {
  double lambda_min = 0.0;
  double lambda_max = 1.0;
  double lambda_step = 0.05;
  double gamma_min = -0.5;
  double gamma_max = 0.5;
  double gamma_step = 0.05;
};

struct MertResult {
  RerankWeights weights;
  double dev_bleu = 0.0;       // at the returned weights
  double baseline_bleu = 0.0;  // at (0, 0)
};

// Deterministic grid search maximizing corpus BLEU of the top reranked
// hypothesis; ties resolve to the smallest (lambda, gamma) pair.
// References and candidates are compared with the trailing EOS removed.
MertResult mert_tune(const std::vector<std::vector<ScoredHypothesis>>& nbest,
                     const std::vector<std::vector<VocabId>>& references,
                     const RerankGrid& grid);

// Convenience wrapper: N-best lists from the dev pairs, then the grid.
MertResult mert_tune(const Seq2SeqModel& model,
                     const Seq2SeqModel* inverse_model,
                     const std::vector<DialoguePair>& dev_pairs,
                     const BeamConfig& beam_cfg, const RerankGrid& grid);

// Strips one trailing EOS, if present.
std::vector<VocabId> strip_eos(const std::vector<VocabId>& tokens);

// One JSON object per hypothesis:
// {"question_id", "rank", "tokens", "fwd_logp", "inv_logp", "length"}.
void write_nbest_jsonl(std::ostream& out, const std::string& question_id,
                       const std::vector<ScoredHypothesis>& nbest,
                       const Vocab& vocab);

}  // namespace fedgen
