#include "metrics.hpp"

#include <cmath>
#include <map>

#include "common.hpp"
#include "decoding.hpp"

namespace fedgen {

namespace {

template <typename Tok>
double bleu_impl(const std::vector<std::vector<Tok>>& candidates,
                 const std::vector<std::vector<Tok>>& references,
                 const BleuConfig& cfg) {
  if (candidates.empty() || candidates.size() != references.size()) {
    fail(ErrorCode::kInvalidArgument,
         "bleu: candidate and reference lists must be nonempty and equal "
         "length");
  }
  if (cfg.max_order == 0) {
    fail(ErrorCode::kInvalidArgument, "bleu: max_order must be >= 1");
  }

  std::size_t order = cfg.max_order;
  std::vector<double> matches(order, 0.0);
  std::vector<double> totals(order, 0.0);
  double cand_len = 0.0;
  double ref_len = 0.0;

  using Ngram = std::vector<Tok>;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& cand = candidates[i];
    const auto& ref = references[i];
    cand_len += static_cast<double>(cand.size());
    ref_len += static_cast<double>(ref.size());
    for (std::size_t n = 1; n <= order; ++n) {
      if (cand.size() < n) continue;
      std::map<Ngram, std::size_t> ref_counts;
      if (ref.size() >= n) {
        for (std::size_t s = 0; s + n <= ref.size(); ++s) {
          ++ref_counts[Ngram(ref.begin() + s, ref.begin() + s + n)];
        }
      }
      std::map<Ngram, std::size_t> cand_counts;
      for (std::size_t s = 0; s + n <= cand.size(); ++s) {
        ++cand_counts[Ngram(cand.begin() + s, cand.begin() + s + n)];
      }
      for (const auto& [gram, count] : cand_counts) {
        totals[n - 1] += static_cast<double>(count);
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) {
          matches[n - 1] += static_cast<double>(std::min(count, it->second));
        }
      }
    }
  }

  double log_precision_sum = 0.0;
  for (std::size_t n = 1; n <= order; ++n) {
    double m = matches[n - 1];
    double t = totals[n - 1];
    if (cfg.add_one_smoothing && n >= 2) {
      m += 1.0;
      t += 1.0;
    }
    if (m <= 0.0 || t <= 0.0) return 0.0;
    log_precision_sum += std::log(m / t);
  }
  double geo_mean = log_precision_sum / static_cast<double>(order);

  double bp = 1.0;
  if (cand_len <= 0.0) return 0.0;
  if (cand_len < ref_len) {
    bp = std::exp(1.0 - ref_len / cand_len);
  }
  return bp * std::exp(geo_mean);
}

}  // namespace

double bleu(const std::vector<std::vector<VocabId>>& candidates,
            const std::vector<std::vector<VocabId>>& references,
            const BleuConfig& cfg) {
  return bleu_impl(candidates, references, cfg);
}

double bleu(const std::vector<std::vector<std::string>>& candidates,
            const std::vector<std::vector<std::string>>& references,
            const BleuConfig& cfg) {
  return bleu_impl(candidates, references, cfg);
}

double perplexity(const Seq2SeqModel& model,
                  const std::vector<DialoguePair>& pairs) {
  if (pairs.empty()) {
    fail(ErrorCode::kInvalidArgument, "perplexity: no pairs");
  }
  double total_nll = 0.0;
  std::size_t total_tokens = 0;
  for (const DialoguePair& pair : pairs) {
    ForwardResult fr = forward_loss(model, pair);
    total_nll += fr.nll;
    total_tokens += fr.tokens;
  }
  return std::exp(total_nll / static_cast<double>(total_tokens));
}

EvalReport evaluate(const Seq2SeqModel& model,
                    const Seq2SeqModel* inverse_model,
                    const std::vector<DialoguePair>& test_pairs,
                    const RerankWeights& weights, const BeamConfig& beam_cfg,
                    const BleuConfig& bleu_cfg) {
  if (test_pairs.empty()) {
    fail(ErrorCode::kInvalidArgument, "evaluate: no pairs");
  }

  std::vector<std::vector<VocabId>> cands;
  std::vector<std::vector<VocabId>> refs;
  cands.reserve(test_pairs.size());
  refs.reserve(test_pairs.size());
  std::map<SpeakerId, std::vector<std::size_t>> by_speaker;
  for (std::size_t i = 0; i < test_pairs.size(); ++i) {
    const DialoguePair& pair = test_pairs[i];
    std::vector<ScoredHypothesis> nbest =
        build_nbest(model, inverse_model, pair.question, pair.speaker,
                    beam_cfg);
    cands.push_back(strip_eos(nbest[rerank_best(nbest, weights)].tokens));
    refs.push_back(strip_eos(pair.response));
    by_speaker[pair.speaker].push_back(i);
  }

  EvalReport report;
  report.n_examples = test_pairs.size();
  report.bleu = bleu(cands, refs, bleu_cfg);
  report.perplexity = perplexity(model, test_pairs);
  for (const auto& [speaker, indices] : by_speaker) {
    std::vector<std::vector<VocabId>> c, r;
    std::vector<DialoguePair> p;
    for (std::size_t i : indices) {
      c.push_back(cands[i]);
      r.push_back(refs[i]);
      p.push_back(test_pairs[i]);
    }
    SpeakerScore score;
    score.bleu = bleu(c, r, bleu_cfg);
    score.perplexity = perplexity(model, p);
    score.n_examples = indices.size();
    report.per_speaker.emplace(speaker, score);
  }
  return report;
}

}  // namespace fedgen
