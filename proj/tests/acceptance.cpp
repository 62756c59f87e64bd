// Acceptance suite: one pass/fail line per criterion, nonzero exit when
// any criterion fails.

#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "common.hpp"
#include "decoding.hpp"
#include "experiment.hpp"
#include "federated.hpp"
#include "metrics.hpp"
#include "rng.hpp"
#include "test_support.hpp"

using namespace fedgen;
namespace ft = fedgen::test;

namespace {

int g_failures = 0;

void report(int number, const std::string& name, bool pass,
            const std::string& detail) {
  std::printf("[%s] criterion %2d: %s — %s\n", pass ? "PASS" : "FAIL",
              number, name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

std::string fmt(double v) {
  std::ostringstream out;
  out.precision(6);
  out << v;
  return out.str();
}

// ---------------------------------------------------------------------
// 1. Gradient oracle: BPTT vs central finite differences on >= 20 tiny
//    persona models, every parameter within 1e-4 relative error.
void criterion_gradients() {
  double worst = 0.0;
  std::string worst_param;
  const int kModels = 20;
  for (int t = 0; t < kModels; ++t) {
    ModelConfig cfg = ft::tiny_config(derive_seed(9001, t), true);
    Seq2SeqModel model = Seq2SeqModel::build(cfg, derive_seed(9002, t));
    std::vector<DialoguePair> pairs = {
        ft::random_pair(cfg, derive_seed(9003, t, 0)),
        ft::random_pair(cfg, derive_seed(9003, t, 1)),
    };
    ft::GradCheckResult r = ft::finite_diff_check(model, pairs, 1e-5);
    if (r.max_rel_err > worst) {
      worst = r.max_rel_err;
      worst_param = r.worst_param;
    }
  }
  report(1, "gradient oracle (finite differences)", worst < 1e-4,
         "max rel err " + fmt(worst) + " over " + std::to_string(kModels) +
             " models (worst: " + worst_param + ")");
}

// ---------------------------------------------------------------------
// 2. Uniform-model identities: zero output projection means per-token
//    NLL = ln V and perplexity = V, within 1e-9.
void criterion_uniform_identities() {
  ModelConfig cfg = ft::tiny_config(9010, false);
  Seq2SeqModel model = Seq2SeqModel::build(cfg, 9011);
  for (const std::string& name : {output_weight_name(), output_bias_name()}) {
    Matrix& m = model.params().at(name).value;
    std::fill(m.data.begin(), m.data.end(), 0.0);
  }
  model.mark_params_changed();

  std::vector<DialoguePair> pairs;
  for (std::uint64_t i = 0; i < 6; ++i) {
    pairs.push_back(ft::random_pair(cfg, derive_seed(9012, i)));
  }
  double v = static_cast<double>(cfg.vocab_size);
  double log_v = std::log(v);

  double nll_err = 0.0;
  for (const DialoguePair& p : pairs) {
    ForwardResult fr = forward_loss(model, p);
    double per_token = fr.nll / static_cast<double>(fr.tokens);
    nll_err = std::max(nll_err, std::fabs(per_token - log_v));
  }
  double ppl = perplexity(model, pairs);
  double ppl_err = std::fabs(ppl - v) / v;
  report(2, "uniform-model identities (ln V, V)",
         nll_err < 1e-9 && ppl_err < 1e-9,
         "per-token NLL err " + fmt(nll_err) + ", ppl rel err " +
             fmt(ppl_err));
}

// ---------------------------------------------------------------------
// 3. Beam oracle: saturated beam equals exhaustive enumeration on >= 50
//    random models with vocab <= 6 and max_len <= 3.
void criterion_beam_oracle() {
  const int kModels = 50;
  double worst_gap = 0.0;
  for (int t = 0; t < kModels; ++t) {
    Rng rng(derive_seed(9020, t));
    ModelConfig cfg;
    cfg.vocab_size = kNumReserved + 1 + rng.index(2);  // 5..6
    cfg.embed_dim = 2 + rng.index(3);
    cfg.hidden_size = 2 + rng.index(4);
    cfg.persona_dim = 2;
    cfg.num_layers = 2;
    cfg.persona_enabled = (t % 2) == 0;
    cfg.num_speakers = cfg.persona_enabled ? 2 : 0;
    cfg.max_len = 8;
    Seq2SeqModel model = Seq2SeqModel::build(cfg, derive_seed(9021, t));

    std::size_t max_len = 1 + rng.index(3);
    std::size_t saturate = 1;
    for (std::size_t i = 0; i < max_len; ++i) saturate *= cfg.vocab_size;
    std::vector<VocabId> question = {
        static_cast<VocabId>(kNumReserved + rng.index(cfg.vocab_size -
                                                      kNumReserved))};
    SpeakerId speaker =
        cfg.persona_enabled ? static_cast<SpeakerId>(rng.index(2)) : 0;

    std::vector<Hypothesis> hyps =
        beam_search(model, question, speaker, BeamConfig{saturate, max_len});
    ft::EnumBest oracle =
        ft::enumerate_best(model, question, speaker, max_len);
    worst_gap =
        std::max(worst_gap, std::fabs(hyps.at(0).logp - oracle.logp));
  }
  report(3, "beam search equals exhaustive enumeration", worst_gap < 1e-9,
         "max |logp gap| " + fmt(worst_gap) + " over " +
             std::to_string(kModels) + " models");
}

// ---------------------------------------------------------------------
// 4. Aggregation oracle: FedAvg equals the direct weighted mean within
//    1e-12 and is bitwise permutation-invariant.
void criterion_aggregation() {
  bool pass = true;
  double worst = 0.0;
  for (int t = 0; t < 10; ++t) {
    Rng rng(derive_seed(9030, t));
    ParamSet federated;
    federated.add("w.a", xavier_init(3, 4, rng.next_u64()),
                  ParamTag::kFederated);
    federated.add("w.b", xavier_init(2, 2, rng.next_u64()),
                  ParamTag::kFederated);
    ServerState server = make_server(std::move(federated));

    std::size_t n = 2 + rng.index(4);
    std::vector<ClientUpdate> updates;
    std::vector<std::size_t> counts;
    for (std::size_t c = 0; c < n; ++c) {
      ClientUpdate u;
      u.client_id = static_cast<SpeakerId>(c);
      u.sample_count = 1 + rng.index(9);
      counts.push_back(u.sample_count);
      for (const auto& [name, tensor] : server.federated.tensors()) {
        Matrix d(tensor.value.rows, tensor.value.cols);
        for (double& x : d.data) x = rng.uniform(-2.0, 2.0);
        u.delta.emplace(name, std::move(d));
      }
      updates.push_back(std::move(u));
    }

    ParamSet got = aggregate_fedavg(server, updates);
    for (const auto& [name, tensor] : got.tensors()) {
      std::vector<Matrix> deltas;
      for (const ClientUpdate& u : updates) {
        deltas.push_back(u.delta.at(name));
      }
      Matrix want = ft::weighted_mean_reference(
          server.federated.at(name).value, deltas, counts);
      for (std::size_t i = 0; i < want.size(); ++i) {
        worst = std::max(worst,
                         std::fabs(tensor.value.data[i] - want.data[i]));
      }
    }

    std::vector<ClientUpdate> permuted(updates.rbegin(), updates.rend());
    ParamSet again = aggregate_fedavg(server, permuted);
    if (!values_equal(got, again)) pass = false;
  }
  pass = pass && worst < 1e-12;
  report(4, "FedAvg weighted-mean oracle + permutation invariance", pass,
         "max |err| " + fmt(worst) + ", permutations bitwise identical");
}

// ---------------------------------------------------------------------
// 5. Equivalence reductions, bitwise under fixed seeds.
void criterion_equivalences() {
  // Federated fixtures.
  ModelConfig cfg;
  cfg.vocab_size = kNumReserved + 6;
  cfg.embed_dim = 5;
  cfg.hidden_size = 6;
  cfg.persona_dim = 3;
  cfg.num_layers = 2;
  cfg.persona_enabled = true;
  cfg.num_speakers = 2;
  cfg.max_len = 10;
  ModelConfig pre_cfg = cfg;
  pre_cfg.persona_enabled = false;
  pre_cfg.num_speakers = 0;
  Seq2SeqModel pretrained = Seq2SeqModel::build(pre_cfg, 9040);
  ParamSet expanded = expand_pretrained(pretrained.params(), cfg, 9041);

  std::vector<ClientData> data;
  for (std::size_t c = 0; c < 2; ++c) {
    ClientData cd;
    cd.client_id = static_cast<SpeakerId>(c);
    for (std::size_t i = 0; i < 5; ++i) {
      DialoguePair p = ft::random_pair(cfg, derive_seed(9042, c, i));
      p.speaker = cd.client_id;
      cd.train.push_back(p);
    }
    data.push_back(cd);
  }

  FedConfig avg;
  avg.strategy = FedStrategy::kFedAvg;
  avg.total_rounds = 2;
  avg.train.batch_size = 4;
  avg.train.lr = 0.1;
  avg.train.dropout_rate = 0.0;
  avg.seed = 9043;
  FedConfig prox = avg;
  prox.strategy = FedStrategy::kFedProx;
  prox.mu = 0.0;
  FedConfig drop = avg;
  drop.strategy = FedStrategy::kFedDrop;
  drop.drop_fraction = 0.0;

  std::vector<ClientState> c1, c2, c3;
  SimulationResult ra = run_simulation(expanded, cfg, data, avg, c1);
  SimulationResult rp = run_simulation(expanded, cfg, data, prox, c2);
  SimulationResult rd = run_simulation(expanded, cfg, data, drop, c3);
  bool prox_ok = values_equal(ra.server_federated, rp.server_federated);
  bool drop_ok = values_equal(ra.server_federated, rd.server_federated);
  for (std::size_t i = 0; i < c1.size(); ++i) {
    prox_ok = prox_ok && c1[i].model.persona_table()->value.data ==
                             c2[i].model.persona_table()->value.data;
    drop_ok = drop_ok && c1[i].model.persona_table()->value.data ==
                             c3[i].model.persona_table()->value.data;
  }

  // Persona model with zeroed persona parts == standard model, exactly.
  ModelConfig zcfg = ft::tiny_config(9044, true);
  Seq2SeqModel zp = Seq2SeqModel::build(zcfg, 9045);
  for (const std::string& name :
       {decoder_persona_weight_name(), persona_table_name()}) {
    Matrix& m = zp.params().at(name).value;
    std::fill(m.data.begin(), m.data.end(), 0.0);
  }
  zp.mark_params_changed();
  ModelConfig scfg = zcfg;
  scfg.persona_enabled = false;
  scfg.num_speakers = 0;
  ParamSet sparams;
  for (const auto& [name, t] : zp.params().tensors()) {
    if (name == decoder_persona_weight_name() ||
        name == persona_table_name()) {
      continue;
    }
    sparams.add(name, t.value, t.tag);
  }
  Seq2SeqModel standard(scfg, std::move(sparams));
  bool persona_ok = true;
  for (std::uint64_t i = 0; i < 10; ++i) {
    DialoguePair p = ft::random_pair(zcfg, derive_seed(9046, i));
    persona_ok = persona_ok && forward_loss(zp, p).nll ==
                                   forward_loss(standard, p).nll;
  }

  report(5, "equivalence reductions (bitwise)",
         prox_ok && drop_ok && persona_ok,
         std::string("FedProx(0)==FedAvg: ") + (prox_ok ? "yes" : "NO") +
             ", FedDrop(0)==FedAvg: " + (drop_ok ? "yes" : "NO") +
             ", zero-persona==standard loss: " +
             (persona_ok ? "yes" : "NO"));
}

// ---------------------------------------------------------------------
// 6. Privacy audit: no private tensor name in any serialized update or
//    in the server checkpoint; persona rows written only by their own
//    client's local training.
struct PipelineArtifacts {
  std::string out;
  std::string pretrain_ckpt;
  std::string pretrain_log;
  std::string inverse_ckpt;
  std::string server_ckpt;
  std::string clients_dir;
  std::string rounds_log;
  std::string weights_json;
  std::string report_json;
  std::string report_csv;
  std::string nbest;
  std::string response;
  double fednlg_dev_ppl = 0.0;
};

ExperimentConfig acceptance_config(const std::string& base_dir,
                                   const std::string& out_dir,
                                   bool persona) {
  nlohmann::json doc = profile_defaults("tiny");
  doc["seed"] = 90210;
  doc["label"] = "acceptance";
  doc["output_dir"] = out_dir;
  doc["data"]["pretrain"]["path"] = "pretrain.txt";
  doc["data"]["finetune"]["path"] = "persona.txt";
  doc["data"]["speakers"] = {"speaker0", "speaker1", "speaker2"};
  doc["data"]["split"] = {{"train", 0.8}, {"dev", 0.1}, {"test", 0.1},
                          {"seed", 17}};
  doc["model"]["vocab_cap"] = 200;
  doc["model"]["embed_dim"] = 20;
  doc["model"]["hidden_size"] = 24;
  doc["model"]["persona_dim"] = 10;
  doc["model"]["num_layers"] = 2;
  doc["model"]["persona_enabled"] = persona;
  doc["train"]["batch_size"] = 8;
  doc["train"]["lr"] = 0.2;
  doc["train"]["dropout"] = 0.0;
  doc["train"]["pretrain_epochs"] = 12;
  doc["fed"]["strategy"] = "fedavg";
  doc["fed"]["rounds"] = 50;
  doc["fed"]["local_epochs"] = 2;
  doc["decode"]["beam_size"] = 4;
  doc["decode"]["nbest"] = 4;
  doc["rerank"]["lambda_step"] = 0.1;
  doc["rerank"]["gamma_step"] = 0.1;
  return parse_config(doc, base_dir);
}

PipelineArtifacts run_pipeline(const std::string& base_dir,
                               const std::string& out_dir,
                               const std::string& probe_question) {
  ExperimentConfig cfg = acceptance_config(base_dir, out_dir, true);
  PipelineArtifacts art;
  art.out = out_dir;
  nlohmann::json pre = run_pretrain(cfg, false);
  art.pretrain_ckpt = pre["checkpoint"].get<std::string>();
  art.pretrain_log = pre["log"].get<std::string>();
  nlohmann::json inv = run_pretrain(cfg, true);
  art.inverse_ckpt = inv["checkpoint"].get<std::string>();
  nlohmann::json fed = run_fedtune(cfg, art.pretrain_ckpt);
  art.server_ckpt = fed["server_checkpoint"].get<std::string>();
  art.clients_dir = fed["clients_dir"].get<std::string>();
  art.rounds_log = fed["rounds_log"].get<std::string>();
  art.fednlg_dev_ppl = fed["final_mean_dev_ppl"].get<double>();
  nlohmann::json tuned =
      run_tune_rerank(cfg, art.server_ckpt, art.clients_dir,
                      art.inverse_ckpt);
  art.weights_json = tuned["weights_file"].get<std::string>();
  nlohmann::json eval =
      run_evaluate(cfg, art.server_ckpt, art.clients_dir, art.inverse_ckpt,
                   art.weights_json, "test");
  art.report_json = eval["report_json"].get<std::string>();
  art.report_csv = eval["report_csv"].get<std::string>();
  art.nbest = out_dir + "/nbest.jsonl";
  nlohmann::json gen =
      run_generate(cfg, art.server_ckpt, art.clients_dir, art.inverse_ckpt,
                   art.weights_json, "speaker0", probe_question, art.nbest);
  art.response = gen["response"].get<std::string>();
  return art;
}

void criterion_privacy(const PipelineArtifacts& art) {
  const std::string needle = persona_table_name();
  bool pass = true;
  std::ostringstream detail;

  // Server-side files never mention the private tensor.
  std::string server_bytes = ft::read_file(art.server_ckpt);
  if (server_bytes.find(needle) != std::string::npos) {
    pass = false;
    detail << "server checkpoint leaks the persona table; ";
  }

  // Library-level audit with the updates round-tripping over the wire.
  ModelConfig cfg;
  cfg.vocab_size = kNumReserved + 6;
  cfg.embed_dim = 4;
  cfg.hidden_size = 5;
  cfg.persona_dim = 3;
  cfg.num_layers = 2;
  cfg.persona_enabled = true;
  cfg.num_speakers = 3;
  cfg.max_len = 10;
  ModelConfig pre_cfg = cfg;
  pre_cfg.persona_enabled = false;
  pre_cfg.num_speakers = 0;
  Seq2SeqModel pretrained = Seq2SeqModel::build(pre_cfg, 9050);
  ParamSet expanded = expand_pretrained(pretrained.params(), cfg, 9051);
  std::vector<ClientData> data;
  for (std::size_t c = 0; c < 3; ++c) {
    ClientData cd;
    cd.client_id = static_cast<SpeakerId>(c);
    for (std::size_t i = 0; i < 4; ++i) {
      DialoguePair p = ft::random_pair(cfg, derive_seed(9052, c, i));
      p.speaker = cd.client_id;
      cd.train.push_back(p);
    }
    data.push_back(cd);
  }

  FedConfig fed;
  fed.total_rounds = 3;
  fed.train.batch_size = 4;
  fed.train.lr = 0.1;
  fed.train.dropout_rate = 0.0;
  fed.seed = 9053;

  std::size_t update_count = 0;
  bool clean_updates = true;
  SimulationHooks hooks;
  hooks.on_update_bytes = [&](std::size_t, const std::vector<std::byte>& b) {
    ++update_count;
    std::string text(reinterpret_cast<const char*>(b.data()), b.size());
    if (text.find(needle) != std::string::npos) clean_updates = false;
    ClientUpdate u = parse_update(b);
    for (const auto& [name, d] : u.delta) {
      if (name == needle) clean_updates = false;
    }
  };
  std::vector<ClientState> clients;
  run_simulation(expanded, cfg, data, fed, clients, hooks);
  if (!clean_updates || update_count != 9) {
    pass = false;
    detail << "client updates leaked or were missed; ";
  }

  // Persona rows: untouched by broadcast and aggregation, and bitwise
  // frozen when no local optimizer steps run (lr = 0 round).
  ParamSet fed_only = expanded.subset(ParamTag::kFederated);
  std::vector<ClientState> manual = init_clients(fed_only, cfg, data, 9054);
  ServerState server = make_server(fed_only);
  bool rows_ok = true;
  for (std::size_t round = 0; round < 2; ++round) {
    std::vector<std::vector<double>> before;
    for (const ClientState& c : manual) {
      before.push_back(c.model.persona_table()->value.data);
    }
    for (ClientState& c : manual) {
      c.model.load_values(server.federated);  // broadcast
    }
    for (std::size_t i = 0; i < manual.size(); ++i) {
      if (manual[i].model.persona_table()->value.data != before[i]) {
        rows_ok = false;  // broadcast must not write personas
      }
    }
    std::vector<ClientUpdate> updates;
    std::size_t total = 0;
    for (const ClientState& c : manual) total += c.sample_count;
    std::vector<std::vector<double>> after_train;
    for (ClientState& c : manual) {
      updates.push_back(
          local_train(c, fed, server.federated, round, total).update);
      after_train.push_back(c.model.persona_table()->value.data);
    }
    server.federated = aggregate_fedavg(server, updates);
    server.round_index++;
    for (std::size_t i = 0; i < manual.size(); ++i) {
      if (manual[i].model.persona_table()->value.data != after_train[i]) {
        rows_ok = false;  // aggregation must not write personas
      }
    }
  }

  FedConfig frozen = fed;
  frozen.train.lr = 0.0;
  std::vector<ClientState> still = init_clients(fed_only, cfg, data, 9055);
  ServerState server2 = make_server(fed_only);
  std::vector<std::vector<double>> before;
  for (const ClientState& c : still) {
    before.push_back(c.model.persona_table()->value.data);
  }
  for (int r = 0; r < 2; ++r) run_round(server2, still, frozen);
  for (std::size_t i = 0; i < still.size(); ++i) {
    if (still[i].model.persona_table()->value.data != before[i]) {
      rows_ok = false;
    }
  }
  if (!rows_ok) {
    pass = false;
    detail << "persona rows written outside local training; ";
  }

  if (pass) {
    detail << "updates (" << update_count
           << ") and server checkpoint clean; persona rows only written "
              "by their own client";
  }
  report(6, "privacy audit", pass, detail.str());
}

// ---------------------------------------------------------------------
// 7. Directional persona experiment.
void criterion_directional(const std::string& base_dir,
                           const PipelineArtifacts& art,
                           const std::vector<std::string>& probes,
                           const std::vector<std::string>& speakers) {
  ExperimentConfig cfg = acceptance_config(base_dir, art.out, true);

  // Mean per-client dev perplexity of the pre-trained model.
  ExperimentConfig eval_cfg = cfg;
  eval_cfg.output_dir = art.out + "/pre_eval";
  nlohmann::json pre_eval =
      run_evaluate(eval_cfg, art.pretrain_ckpt, "", "", "", "dev");
  nlohmann::json pre_report =
      nlohmann::json::parse(ft::read_file(pre_eval["report_json"].get<std::string>()));
  double before = 0.0;
  std::size_t n = 0;
  for (const auto& [name, entry] : pre_report["per_speaker"].items()) {
    before += entry["perplexity"].get<double>();
    ++n;
  }
  before /= static_cast<double>(n);

  double after = art.fednlg_dev_ppl;

  // Persona-off federated baseline, same data and schedule.
  ExperimentConfig off_cfg = acceptance_config(base_dir, art.out + "_off",
                                               false);
  nlohmann::json off = run_fedtune(off_cfg, art.pretrain_ckpt);
  double baseline = off["final_mean_dev_ppl"].get<double>();

  bool a = after < before;
  bool b = after < baseline;

  // (c) distinct top responses across speakers for some probe question.
  bool c = false;
  std::string probe_used;
  for (const std::string& probe : probes) {
    std::set<std::string> responses;
    for (const std::string& speaker : speakers) {
      nlohmann::json gen = run_generate(cfg, art.server_ckpt,
                                        art.clients_dir, "", "", speaker,
                                        probe, "");
      responses.insert(gen["response"].get<std::string>());
    }
    if (responses.size() > 1) {
      c = true;
      probe_used = probe;
      break;
    }
  }

  report(7, "directional persona experiment", a && b && c,
         "dev ppl pretrained " + fmt(before) + " -> fednlg " + fmt(after) +
             " (persona-off federated " + fmt(baseline) + "); distinct " +
             "responses across speakers: " + (c ? "yes" : "NO") +
             (c ? " (probe: '" + probe_used + "')" : ""));
}

// ---------------------------------------------------------------------
// 8. BLEU correctness: hand-computed fixtures and corruption monotonicity.
void criterion_bleu() {
  bool pass = true;
  std::ostringstream detail;

  std::vector<std::vector<std::string>> perfect = {
      tokenize("the cat is on the mat")};
  double p = bleu(perfect, perfect);
  if (std::fabs(p - 1.0) > 1e-9) {
    pass = false;
    detail << "perfect match gave " << fmt(p) << "; ";
  }

  std::vector<std::vector<std::string>> cand = {
      tokenize("the the the the the the the")};
  std::vector<std::vector<std::string>> ref = {
      tokenize("the cat is on the mat")};
  double clipped = bleu(cand, ref);
  double clipped_want = std::exp(
      0.25 * (std::log(2.0 / 7.0) + std::log(1.0 / 7.0) +
              std::log(1.0 / 6.0) + std::log(1.0 / 5.0)));
  if (std::fabs(clipped - clipped_want) > 1e-9) {
    pass = false;
    detail << "clipped-unigram case off by "
           << fmt(std::fabs(clipped - clipped_want)) << "; ";
  }

  std::vector<std::vector<std::string>> shorter = {tokenize("the cat")};
  double brevity = bleu(shorter, ref);
  double brevity_want = std::exp(1.0 - 6.0 / 2.0);
  if (std::fabs(brevity - brevity_want) > 1e-9) {
    pass = false;
    detail << "brevity case off by "
           << fmt(std::fabs(brevity - brevity_want)) << "; ";
  }

  // Monotone degradation under growing UNK corruption.
  Rng rng(9060);
  std::vector<std::vector<VocabId>> refs;
  for (int i = 0; i < 6; ++i) {
    std::vector<VocabId> r;
    for (int k = 0; k < 8; ++k) {
      r.push_back(static_cast<VocabId>(kNumReserved + rng.index(10)));
    }
    refs.push_back(r);
  }
  double prev = 1.1;
  for (std::size_t corrupt = 0; corrupt <= 8; ++corrupt) {
    std::vector<std::vector<VocabId>> cands = refs;
    for (auto& cseq : cands) {
      for (std::size_t k = 0; k < corrupt && k < cseq.size(); ++k) {
        cseq[k] = kUnkId;
      }
    }
    double score = bleu(cands, refs);
    if (score > prev + 1e-12) {
      pass = false;
      detail << "corruption " << corrupt << " raised BLEU; ";
    }
    prev = score;
  }

  if (pass) detail << "fixtures exact to 1e-9, corruption monotone";
  report(8, "BLEU correctness", pass, detail.str());
}

// ---------------------------------------------------------------------
// 9. Reranking: zero weights preserve order; a constructed instance
//    forces gamma > 0 and never loses dev BLEU.
void criterion_reranking() {
  bool pass = true;
  std::ostringstream detail;

  ModelConfig cfg = ft::tiny_config(9070, true);
  Seq2SeqModel model = Seq2SeqModel::build(cfg, 9071);
  ModelConfig inv_cfg = cfg;
  inv_cfg.persona_enabled = false;
  inv_cfg.num_speakers = 0;
  Seq2SeqModel inverse = Seq2SeqModel::build(inv_cfg, 9072);
  std::vector<VocabId> question = {static_cast<VocabId>(kNumReserved)};
  std::vector<ScoredHypothesis> nbest =
      build_nbest(model, &inverse, question, 0, BeamConfig{6, 5});
  if (rerank_best(nbest, RerankWeights{0.0, 0.0}) != 0) {
    pass = false;
    detail << "zero weights did not keep beam order; ";
  }
  for (std::size_t i = 1; i < nbest.size(); ++i) {
    if (nbest[i - 1].fwd_logp < nbest[i].fwd_logp) {
      pass = false;
      detail << "N-best list unsorted; ";
    }
  }

  VocabId a = kNumReserved, b = kNumReserved + 1, c = kNumReserved + 2;
  std::vector<std::vector<ScoredHypothesis>> lists = {{
      {{a, kEosId}, -1.0, -2.0},
      {{a, b, c, kEosId}, -1.2, -2.0},
  }};
  std::vector<std::vector<VocabId>> refs = {{a, b, c, kEosId}};
  MertResult tuned = mert_tune(lists, refs, RerankGrid{});
  if (!(tuned.weights.gamma > 0.0)) {
    pass = false;
    detail << "gamma stayed at " << fmt(tuned.weights.gamma) << "; ";
  }
  if (tuned.dev_bleu + 1e-12 < tuned.baseline_bleu) {
    pass = false;
    detail << "tuned BLEU below baseline; ";
  }
  if (pass) {
    detail << "order preserved at (0,0); constructed case tuned to gamma="
           << fmt(tuned.weights.gamma) << " with dev BLEU "
           << fmt(tuned.dev_bleu) << " >= baseline "
           << fmt(tuned.baseline_bleu);
  }
  report(9, "reranking and MERT", pass, detail.str());
}

// ---------------------------------------------------------------------
// 10. Determinism: two full pipeline runs under one seed produce
//     byte-identical artifacts.
void criterion_determinism(const PipelineArtifacts& a,
                           const PipelineArtifacts& b) {
  struct Pair {
    const char* what;
    std::string lhs, rhs;
  };
  std::vector<Pair> files = {
      {"pretrain checkpoint", a.pretrain_ckpt, b.pretrain_ckpt},
      {"pretrain log", a.pretrain_log, b.pretrain_log},
      {"inverse checkpoint", a.inverse_ckpt, b.inverse_ckpt},
      {"server checkpoint", a.server_ckpt, b.server_ckpt},
      {"rounds log", a.rounds_log, b.rounds_log},
      {"reranker weights", a.weights_json, b.weights_json},
      {"eval report json", a.report_json, b.report_json},
      {"eval report csv", a.report_csv, b.report_csv},
      {"n-best dump", a.nbest, b.nbest},
  };
  bool pass = true;
  std::ostringstream detail;
  for (const Pair& f : files) {
    if (!ft::files_equal(f.lhs, f.rhs)) {
      pass = false;
      detail << f.what << " differs; ";
    }
  }
  for (int s = 0; s < 3; ++s) {
    std::string name = "speaker" + std::to_string(s) + ".persona.ckpt";
    if (!ft::files_equal(a.clients_dir + "/" + name,
                         b.clients_dir + "/" + name)) {
      pass = false;
      detail << name << " differs; ";
    }
  }
  if (a.response != b.response) {
    pass = false;
    detail << "generated responses differ; ";
  }
  if (pass) detail << "all checkpoints, reports, and logs byte-identical";
  report(10, "end-to-end determinism", pass, detail.str());
}

}  // namespace

int main() {
  std::printf("acceptance suite\n");

  criterion_gradients();
  criterion_uniform_identities();
  criterion_beam_oracle();
  criterion_aggregation();
  criterion_equivalences();

  // Shared pipeline runs for criteria 6, 7, and 10.
  std::string base = ft::make_temp_dir("acceptance");
  ft::SyntheticCorpus corpus = ft::make_synthetic_corpus(3, 200, 4242);
  ft::write_script_corpus(base + "/pretrain.txt", corpus.pretrain);
  ft::write_script_corpus(base + "/persona.txt", corpus.finetune);

  PipelineArtifacts run_a =
      run_pipeline(base, base + "/run_a", corpus.probe_questions[0]);
  PipelineArtifacts run_b =
      run_pipeline(base, base + "/run_b", corpus.probe_questions[0]);

  criterion_privacy(run_a);
  criterion_directional(base, run_a, corpus.probe_questions,
                        corpus.speakers);
  criterion_bleu();
  criterion_reranking();
  criterion_determinism(run_a, run_b);

  if (g_failures > 0) {
    std::printf("%d criterion(s) failed\n", g_failures);
    return 1;
  }
  std::printf("all criteria passed\n");
  return 0;
}
