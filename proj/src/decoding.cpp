#include "decoding.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include <json.hpp>

#include "common.hpp"
#include "metrics.hpp"

namespace fedgen {

namespace {

struct Candidate {
  double logp;
  std::size_t origin;  // deterministic enumeration order, breaks ties
  std::size_t parent;
  VocabId token;   // ignored for frozen candidates
  bool frozen;     // an already-finished hypothesis defending its slot
};

}  // namespace

// Finished hypotheses stay in the beam ("frozen") and compete for slots
// on cumulative log-probability instead of retiring to a side pool; a
// short high-probability finish therefore survives widening the beam,
// and B = 1 is exactly the stepwise argmax trace.
std::vector<Hypothesis> beam_search(const Seq2SeqModel& model,
                                    const std::vector<VocabId>& question,
                                    SpeakerId speaker, const BeamConfig& cfg) {
  if (cfg.beam_size == 0 || cfg.max_len == 0) {
    fail(ErrorCode::kInvalidArgument,
         "beam_search: beam_size and max_len must be >= 1");
  }

  Matrix persona_vec;
  const Matrix* persona = nullptr;
  if (model.config().persona_enabled) {
    persona_vec = model.persona_row(speaker);
    persona = &persona_vec;
  }

  Hypothesis root;
  root.state = encode(model, question);
  std::vector<Hypothesis> beam;
  beam.push_back(std::move(root));

  for (std::size_t step = 0; step < cfg.max_len; ++step) {
    bool any_unfinished = false;
    for (const Hypothesis& h : beam) {
      if (!h.finished) any_unfinished = true;
    }
    if (!any_unfinished) break;

    std::vector<Candidate> candidates;
    candidates.reserve(beam.size() * model.config().vocab_size);
    std::vector<LstmState> advanced(beam.size());
    std::size_t origin = 0;
    for (std::size_t p = 0; p < beam.size(); ++p) {
      if (beam[p].finished) {
        candidates.push_back(Candidate{beam[p].logp, origin++, p, 0, true});
        continue;
      }
      LstmState st = beam[p].state;
      VocabId prev = beam[p].tokens.empty() ? kBosId : beam[p].tokens.back();
      Matrix logp = decode_step(model, st, prev, persona);
      advanced[p] = std::move(st);
      for (std::size_t v = 0; v < logp.rows; ++v) {
        candidates.push_back(Candidate{beam[p].logp + logp.data[v], origin++,
                                       p, static_cast<VocabId>(v), false});
      }
    }

    std::size_t keep = std::min(cfg.beam_size, candidates.size());
    std::partial_sort(candidates.begin(),
                      candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                      candidates.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.logp != b.logp) return a.logp > b.logp;
                        return a.origin < b.origin;
                      });

    std::vector<Hypothesis> next;
    next.reserve(keep);
    for (std::size_t k = 0; k < keep; ++k) {
      const Candidate& c = candidates[k];
      if (c.frozen) {
        next.push_back(std::move(beam[c.parent]));
        continue;
      }
      Hypothesis hyp;
      hyp.tokens = beam[c.parent].tokens;
      hyp.tokens.push_back(c.token);
      hyp.logp = c.logp;
      hyp.state = advanced[c.parent];
      hyp.finished = c.token == kEosId || hyp.tokens.size() >= cfg.max_len;
      next.push_back(std::move(hyp));
    }
    beam = std::move(next);
  }

  // Unfinished survivors only exist when the loop ran out of steps, and
  // then their length equals max_len, which marks them finished; the
  // beam is therefore entirely finished here.
  std::stable_sort(beam.begin(), beam.end(),
                   [](const Hypothesis& a, const Hypothesis& b) {
                     return a.logp > b.logp;
                   });
  if (beam.size() > cfg.beam_size) beam.resize(cfg.beam_size);
  return beam;
}

double rerank_score(double fwd_logp, double inv_logp, std::size_t length,
                    const RerankWeights& w) {
  return fwd_logp + w.lambda * inv_logp +
         w.gamma * static_cast<double>(length);
}

double score_inverse(const Seq2SeqModel& inverse_model,
                     const std::vector<VocabId>& question,
                     const std::vector<VocabId>& response) {
  if (inverse_model.config().persona_enabled) {
    fail(ErrorCode::kInvalidArgument,
         "score_inverse: the inverse model must be persona-free");
  }
  DialoguePair swapped;
  swapped.question = strip_eos(response);
  swapped.response = question;  // scored exactly as given
  swapped.speaker = 0;
  if (swapped.question.empty()) {
    swapped.question.push_back(kEosId);
  }
  return -forward_loss(inverse_model, swapped).nll;
}

std::vector<ScoredHypothesis> build_nbest(const Seq2SeqModel& model,
                                          const Seq2SeqModel* inverse_model,
                                          const std::vector<VocabId>& question,
                                          SpeakerId speaker,
                                          const BeamConfig& cfg) {
  std::vector<Hypothesis> hyps = beam_search(model, question, speaker, cfg);
  if (cfg.nbest > 0 && hyps.size() > cfg.nbest) {
    hyps.resize(cfg.nbest);
  }
  std::vector<ScoredHypothesis> out;
  out.reserve(hyps.size());
  for (Hypothesis& h : hyps) {
    ScoredHypothesis sh;
    sh.fwd_logp = h.logp;
    sh.inv_logp = inverse_model != nullptr
                      ? score_inverse(*inverse_model, question, h.tokens)
                      : 0.0;
    sh.tokens = std::move(h.tokens);
    out.push_back(std::move(sh));
  }
  return out;
}

std::size_t rerank_best(const std::vector<ScoredHypothesis>& nbest,
                        const RerankWeights& w) {
  if (nbest.empty()) {
    fail(ErrorCode::kInvalidArgument, "rerank_best: empty N-best list");
  }
  std::size_t best = 0;
  double best_score =
      rerank_score(nbest[0].fwd_logp, nbest[0].inv_logp, nbest[0].tokens.size(), w);
  for (std::size_t i = 1; i < nbest.size(); ++i) {
    double s =
        rerank_score(nbest[i].fwd_logp, nbest[i].inv_logp, nbest[i].tokens.size(), w);
    if (s > best_score) {
      best_score = s;
      best = i;
    }
  }
  return best;
}

std::vector<VocabId> strip_eos(const std::vector<VocabId>& tokens) {
  std::vector<VocabId> out = tokens;
  if (!out.empty() && out.back() == kEosId) out.pop_back();
  return out;
}

MertResult mert_tune(const std::vector<std::vector<ScoredHypothesis>>& nbest,
                     const std::vector<std::vector<VocabId>>& references,
                     const RerankGrid& grid) {
  if (nbest.empty() || nbest.size() != references.size()) {
    fail(ErrorCode::kInvalidArgument,
         "mert_tune: need matching, nonempty N-best and reference lists");
  }
  if (grid.lambda_step <= 0.0 || grid.gamma_step <= 0.0) {
    fail(ErrorCode::kInvalidArgument, "mert_tune: grid steps must be positive");
  }

  std::vector<std::vector<VocabId>> refs;
  refs.reserve(references.size());
  for (const auto& r : references) refs.push_back(strip_eos(r));

  auto bleu_at = [&](const RerankWeights& w) {
    std::vector<std::vector<VocabId>> cands;
    cands.reserve(nbest.size());
    for (const auto& list : nbest) {
      cands.push_back(strip_eos(list[rerank_best(list, w)].tokens));
    }
    return bleu(cands, refs);
  };

  // Ties resolve toward the least-intervention weights: smallest
  // |lambda|, then |gamma|, then the signs (so (0,0) wins whenever it is
  // among the optima, on grids spanning negative gamma too).
  auto precedes = [](const RerankWeights& a, const RerankWeights& b) {
    if (std::fabs(a.lambda) != std::fabs(b.lambda)) {
      return std::fabs(a.lambda) < std::fabs(b.lambda);
    }
    if (std::fabs(a.gamma) != std::fabs(b.gamma)) {
      return std::fabs(a.gamma) < std::fabs(b.gamma);
    }
    if (a.lambda != b.lambda) return a.lambda < b.lambda;
    return a.gamma < b.gamma;
  };

  // Index-based lattice; accumulating the step drifts past exact zero.
  auto grid_points = [](double lo, double hi, double step) {
    std::vector<double> points;
    const double eps = 1e-12;
    for (std::size_t i = 0;; ++i) {
      double v = lo + static_cast<double>(i) * step;
      if (v > hi + eps) break;
      if (std::fabs(v) < step * 1e-9) v = 0.0;
      points.push_back(v);
    }
    return points;
  };

  MertResult result;
  result.baseline_bleu = bleu_at(RerankWeights{0.0, 0.0});
  bool have_best = false;
  const double eps = 1e-12;
  for (double lam : grid_points(grid.lambda_min, grid.lambda_max,
                                grid.lambda_step)) {
    for (double gam : grid_points(grid.gamma_min, grid.gamma_max,
                                  grid.gamma_step)) {
      RerankWeights w{lam, gam};
      double score = bleu_at(w);
      if (!have_best || score > result.dev_bleu + eps) {
        result.weights = w;
        result.dev_bleu = score;
        have_best = true;
      } else if (score > result.dev_bleu - eps &&
                 precedes(w, result.weights)) {
        result.weights = w;
      }
    }
  }
  return result;
}

MertResult mert_tune(const Seq2SeqModel& model,
                     const Seq2SeqModel* inverse_model,
                     const std::vector<DialoguePair>& dev_pairs,
                     const BeamConfig& beam_cfg, const RerankGrid& grid) {
  if (dev_pairs.empty()) {
    fail(ErrorCode::kInvalidArgument, "mert_tune: empty dev set");
  }
  std::vector<std::vector<ScoredHypothesis>> nbest;
  std::vector<std::vector<VocabId>> refs;
  nbest.reserve(dev_pairs.size());
  refs.reserve(dev_pairs.size());
  for (const DialoguePair& pair : dev_pairs) {
    nbest.push_back(
        build_nbest(model, inverse_model, pair.question, pair.speaker, beam_cfg));
    refs.push_back(pair.response);
  }
  return mert_tune(nbest, refs, grid);
}

void write_nbest_jsonl(std::ostream& out, const std::string& question_id,
                       const std::vector<ScoredHypothesis>& nbest,
                       const Vocab& vocab) {
  for (std::size_t rank = 0; rank < nbest.size(); ++rank) {
    const ScoredHypothesis& h = nbest[rank];
    nlohmann::json row;
    row["question_id"] = question_id;
    row["rank"] = rank;
    std::vector<std::string> tokens;
    tokens.reserve(h.tokens.size());
    for (VocabId t : h.tokens) tokens.push_back(vocab.token(t));
    row["tokens"] = tokens;
    row["fwd_logp"] = h.fwd_logp;
    row["inv_logp"] = h.inv_logp;
    row["length"] = h.tokens.size();
    out << row.dump() << "\n";
  }
}

}  // namespace fedgen
