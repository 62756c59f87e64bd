#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "common.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "test_support.hpp"

using namespace fedgen;

namespace {

Matrix random_vec(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Matrix v(n, 1);
  for (double& x : v.data) x = rng.uniform(-scale, scale);
  return v;
}

void zero_tensor(Seq2SeqModel& model, const std::string& name) {
  Matrix& m = model.params().at(name).value;
  std::fill(m.data.begin(), m.data.end(), 0.0);
  model.mark_params_changed();
}

}  // namespace

TEST_CASE("standard cell: zero-weight closed form") {
  std::size_t hidden = 3;
  Matrix w(4 * hidden, hidden + 2, 0.0);
  Matrix b(4 * hidden, 1, 0.0);
  Matrix h_prev = random_vec(hidden, 1);
  Matrix c_prev = random_vec(hidden, 2);
  Matrix x = random_vec(2, 3);

  CellOutput out = lstm_cell_standard(w, b, h_prev, c_prev, x);
  for (std::size_t k = 0; k < hidden; ++k) {
    // Gates are all 0.5 and j = 0, so c halves and h = 0.5 tanh(c).
    CHECK(out.c.data[k] == doctest::Approx(0.5 * c_prev.data[k]));
    CHECK(out.h.data[k] ==
          doctest::Approx(0.5 * std::tanh(0.5 * c_prev.data[k])));
  }
}

TEST_CASE("standard cell matches the scalar reference") {
  Rng rng(42);
  for (int trial = 0; trial < 5; ++trial) {
    std::size_t hidden = 2 + rng.index(4);
    std::size_t in = 1 + rng.index(4);
    Matrix w = xavier_init(4 * hidden, hidden + in, rng.next_u64());
    Matrix b = random_vec(4 * hidden, rng.next_u64(), 0.3);
    Matrix h_prev = random_vec(hidden, rng.next_u64());
    Matrix c_prev = random_vec(hidden, rng.next_u64());
    Matrix x = random_vec(in, rng.next_u64());

    std::vector<std::vector<double>> w_ref(4 * hidden,
                                           std::vector<double>(hidden + in));
    for (std::size_t r = 0; r < 4 * hidden; ++r) {
      for (std::size_t c = 0; c < hidden + in; ++c) {
        w_ref[r][c] = w.at(r, c);
      }
    }
    std::vector<double> h_out, c_out;
    test::lstm_cell_reference(w_ref, b.data, h_prev.data, c_prev.data,
                              x.data, h_out, c_out);

    CellOutput out = lstm_cell_standard(w, b, h_prev, c_prev, x);
    for (std::size_t k = 0; k < hidden; ++k) {
      CHECK(out.h.data[k] == doctest::Approx(h_out[k]).epsilon(1e-12));
      CHECK(out.c.data[k] == doctest::Approx(c_out[k]).epsilon(1e-12));
    }
  }
}

TEST_CASE("standard cell rejects mismatched shapes") {
  Matrix w(8, 5, 0.0);  // expects hidden 2, input 3
  Matrix b(8, 1, 0.0);
  CHECK_THROWS_AS(lstm_cell_standard(w, b, random_vec(2, 1),
                                     random_vec(2, 2), random_vec(4, 3)),
                  Error);
}

TEST_CASE("persona cell: zero persona vector contributes nothing") {
  std::size_t hidden = 3, in = 2, persona = 4;
  Matrix w = xavier_init(4 * hidden, hidden + in, 7);
  Matrix wp = xavier_init(4 * hidden, persona, 8);  // arbitrary columns
  Matrix b = random_vec(4 * hidden, 9, 0.2);
  Matrix h_prev = random_vec(hidden, 10);
  Matrix c_prev = random_vec(hidden, 11);
  Matrix x = random_vec(in, 12);

  Matrix v0(persona, 1, 0.0);
  CellOutput with_zero = lstm_cell_persona(w, wp, b, h_prev, c_prev, x, v0);
  CellOutput standard = lstm_cell_standard(w, b, h_prev, c_prev, x);
  CHECK(with_zero.h.data == standard.h.data);
  CHECK(with_zero.c.data == standard.c.data);
}

TEST_CASE("persona cell: distinct personas give distinct outputs") {
  std::size_t hidden = 3, in = 2, persona = 4;
  Matrix w = xavier_init(4 * hidden, hidden + in, 13);
  Matrix wp = xavier_init(4 * hidden, persona, 14);
  Matrix b(4 * hidden, 1, 0.0);
  Matrix h_prev = random_vec(hidden, 15);
  Matrix c_prev = random_vec(hidden, 16);
  Matrix x = random_vec(in, 17);

  CellOutput a =
      lstm_cell_persona(w, wp, b, h_prev, c_prev, x, random_vec(persona, 18));
  CellOutput bo =
      lstm_cell_persona(w, wp, b, h_prev, c_prev, x, random_vec(persona, 19));
  CHECK(a.h.data != bo.h.data);
}

TEST_CASE("persona cell: zero weights ignore the persona entirely") {
  std::size_t hidden = 2, in = 2, persona = 3;
  Matrix w(4 * hidden, hidden + in, 0.0);
  Matrix wp(4 * hidden, persona, 0.0);
  Matrix b(4 * hidden, 1, 0.0);
  Matrix c_prev = random_vec(hidden, 20);
  CellOutput out = lstm_cell_persona(w, wp, b, random_vec(hidden, 21),
                                     c_prev, random_vec(in, 22),
                                     random_vec(persona, 23));
  for (std::size_t k = 0; k < hidden; ++k) {
    CHECK(out.c.data[k] == doctest::Approx(0.5 * c_prev.data[k]));
  }
}

TEST_CASE("encode: single token equals one manual cell step per layer") {
  ModelConfig cfg = test::tiny_config(31, false);
  Seq2SeqModel model = Seq2SeqModel::build(cfg, 32);
  VocabId tok = kNumReserved;

  LstmState got = encode(model, {tok});

  Matrix x(cfg.embed_dim, 1);
  const Matrix& table = model.embedding().value;
  for (std::size_t k = 0; k < cfg.embed_dim; ++k) {
    x.data[k] = table.at(static_cast<std::size_t>(tok), k);
  }
  Matrix zero_h(cfg.hidden_size, 1, 0.0);
  CellOutput l0 = lstm_cell_standard(model.enc_w(0).value,
                                     model.enc_b(0).value, zero_h, zero_h, x);
  CellOutput l1 = lstm_cell_standard(model.enc_w(1).value,
                                     model.enc_b(1).value, zero_h, zero_h,
                                     l0.h);
  CHECK(got.h[0].data == l0.h.data);
  CHECK(got.h[1].data == l1.h.data);
  CHECK(got.c[1].data == l1.c.data);
}

TEST_CASE("encode is sensitive to repetition and validates input") {
  ModelConfig cfg = test::tiny_config(33, false);
  Seq2SeqModel model = Seq2SeqModel::build(cfg, 34);
  std::vector<VocabId> once = {4, 5};
  std::vector<VocabId> twice = {4, 5, 4, 5};
  CHECK(encode(model, once).h.back().data !=
        encode(model, twice).h.back().data);

  CHECK_THROWS_AS(encode(model, {}), Error);
  try {
    encode(model, {static_cast<VocabId>(cfg.vocab_size)});
    FAIL("expected vocab error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kVocab);
  }
}

TEST_CASE("encode of an all-zero model stays at the zero state") {
  ModelConfig cfg = test::tiny_config(35, false);
  Seq2SeqModel model = Seq2SeqModel::build(cfg, 36);
  for (auto& [name, t] : model.params().tensors()) {
    std::fill(t.value.data.begin(), t.value.data.end(), 0.0);
  }
  model.mark_params_changed();
  LstmState st = encode(model, {4, 5, 6});
  for (const Matrix& h : st.h) {
    for (double v : h.data) CHECK(v == 0.0);
  }
}

TEST_CASE("hidden states are bounded by construction") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ModelConfig cfg = test::tiny_config(derive_seed(37, seed), false);
    Seq2SeqModel model = Seq2SeqModel::build(cfg, derive_seed(38, seed));
    // Exaggerate the weights; |h| < 1 must still hold.
    for (auto& [name, t] : model.params().tensors()) {
      scale_in_place(t.value, 50.0);
    }
    model.mark_params_changed();
    DialoguePair pair = test::random_pair(cfg, derive_seed(39, seed));
    LstmState st = encode(model, pair.question);
    for (const Matrix& h : st.h) {
      for (double v : h.data) CHECK(std::fabs(v) < 1.0);
    }
  }
}

TEST_CASE("zero output projection gives per-token NLL of ln V") {
  ModelConfig cfg = test::tiny_config(41, false);
  Seq2SeqModel model = Seq2SeqModel::build(cfg, 42);
  zero_tensor(model, output_weight_name());
  zero_tensor(model, output_bias_name());
  DialoguePair pair = test::random_pair(cfg, 43);
  ForwardResult fr = forward_loss(model, pair);
  double expected =
      static_cast<double>(pair.response.size()) *
      std::log(static_cast<double>(cfg.vocab_size));
  CHECK(fr.nll == doctest::Approx(expected).epsilon(1e-12));
  CHECK(fr.tokens == pair.response.size());
}

TEST_CASE("a small gradient step decreases the loss on that pair") {
  ModelConfig cfg = test::tiny_config(45, true);
  Seq2SeqModel model = Seq2SeqModel::build(cfg, 46);
  DialoguePair pair = test::random_pair(cfg, 47);

  ForwardResult before = forward_loss(model, pair);
  model.params().zero_grads();
  backward(model, before.cache);
  model.sgd_step(1e-3);
  ForwardResult after = forward_loss(model, pair);
  CHECK(after.nll < before.nll);
}

TEST_CASE("persona model with zeroed persona parts reduces exactly") {
  ModelConfig cfg = test::tiny_config(49, true);
  Seq2SeqModel persona_model = Seq2SeqModel::build(cfg, 50);
  zero_tensor(persona_model, decoder_persona_weight_name());
  zero_tensor(persona_model, persona_table_name());

  ModelConfig std_cfg = cfg;
  std_cfg.persona_enabled = false;
  std_cfg.num_speakers = 0;
  ParamSet std_params;
  for (const auto& [name, t] : persona_model.params().tensors()) {
    if (name == decoder_persona_weight_name() ||
        name == persona_table_name()) {
      continue;
    }
    std_params.add(name, t.value, t.tag);
  }
  Seq2SeqModel standard(std_cfg, std::move(std_params));

  for (std::uint64_t s = 0; s < 5; ++s) {
    DialoguePair pair = test::random_pair(cfg, derive_seed(51, s));
    double a = forward_loss(persona_model, pair).nll;
    double b = forward_loss(standard, pair).nll;
    CHECK(a == b);  // exact reduction
  }
}

TEST_CASE("BPTT gradients match central finite differences") {
  for (std::uint64_t trial = 0; trial < 3; ++trial) {
    ModelConfig cfg = test::tiny_config(derive_seed(53, trial), true);
    Seq2SeqModel model =
        Seq2SeqModel::build(cfg, derive_seed(54, trial));
    std::vector<DialoguePair> pairs = {
        test::random_pair(cfg, derive_seed(55, trial, 0)),
        test::random_pair(cfg, derive_seed(55, trial, 1)),
    };
    test::GradCheckResult r = test::finite_diff_check(model, pairs, 1e-5);
    INFO("worst parameter: " << r.worst_param << "[" << r.worst_index
                             << "]");
    CHECK(r.max_rel_err < 1e-4);
  }
}

TEST_CASE("gradients also match finite differences under dropout") {
  // Masks are a pure function of the seed, so the finite-difference
  // evaluations see the same dropout pattern as the analytic pass.
  ModelConfig cfg = test::tiny_config(56, true);
  Seq2SeqModel model = Seq2SeqModel::build(cfg, 57);
  std::vector<DialoguePair> pairs = {test::random_pair(cfg, 58),
                                     test::random_pair(cfg, 59)};
  ForwardOptions opts;
  opts.train_mode = true;
  opts.dropout_rate = 0.3;
  opts.dropout_seed = 60;
  test::GradCheckResult r = test::finite_diff_check(model, pairs, 1e-5, opts);
  INFO("worst parameter: " << r.worst_param);
  CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("persona rows of absent speakers get exactly zero gradient") {
  ModelConfig cfg = test::tiny_config(57, true);
  cfg.num_speakers = 3;
  Seq2SeqModel model = Seq2SeqModel::build(cfg, 58);
  DialoguePair pair = test::random_pair(cfg, 59);
  pair.speaker = 1;

  model.params().zero_grads();
  ForwardResult fr = forward_loss(model, pair);
  backward(model, fr.cache);

  const Matrix& grad = model.persona_table()->grad;
  double in_batch = 0.0;
  for (std::size_t s = 0; s < cfg.num_speakers; ++s) {
    for (std::size_t k = 0; k < cfg.persona_dim; ++k) {
      double g = grad.at(s, k);
      if (s == 1) {
        in_batch += std::fabs(g);
      } else {
        CHECK(g == 0.0);
      }
    }
  }
  CHECK(in_batch > 0.0);
}

TEST_CASE("accumulating the same pair twice doubles the gradients") {
  ModelConfig cfg = test::tiny_config(61, true);
  Seq2SeqModel model = Seq2SeqModel::build(cfg, 62);
  DialoguePair pair = test::random_pair(cfg, 63);

  model.params().zero_grads();
  ForwardResult fr = forward_loss(model, pair);
  backward(model, fr.cache);
  ParamSet single;
  for (const auto& [name, t] : model.params().tensors()) {
    auto& added = single.add(name, t.value, t.tag);
    added.grad = t.grad;
  }

  model.params().zero_grads();
  backward(model, fr.cache);
  backward(model, fr.cache);
  for (const auto& [name, t] : model.params().tensors()) {
    const Matrix& one = single.at(name).grad;
    for (std::size_t i = 0; i < t.grad.size(); ++i) {
      CHECK(t.grad.data[i] ==
            doctest::Approx(2.0 * one.data[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("backward rejects a cache from a stale model") {
  ModelConfig cfg = test::tiny_config(65, false);
  Seq2SeqModel model = Seq2SeqModel::build(cfg, 66);
  DialoguePair pair = test::random_pair(cfg, 67);
  ForwardResult fr = forward_loss(model, pair);
  model.sgd_step(0.01);
  try {
    backward(model, fr.cache);
    FAIL("expected internal error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kInternal);
  }
}

TEST_CASE("train_epoch with lr 0 leaves the model bytes unchanged") {
  ModelConfig cfg = test::tiny_config(69, true);
  Seq2SeqModel model = Seq2SeqModel::build(cfg, 70);
  std::vector<DialoguePair> pairs;
  for (std::uint64_t i = 0; i < 6; ++i) {
    pairs.push_back(test::random_pair(cfg, derive_seed(71, i)));
  }
  ParamSet before = model.params();

  TrainConfig tc;
  tc.batch_size = 2;
  tc.lr = 0.0;
  tc.dropout_rate = 0.0;
  double mean_nll = train_epoch(model, pairs, tc, 72);
  CHECK(values_equal(model.params(), before));

  double total = 0.0;
  std::size_t tokens = 0;
  for (const DialoguePair& p : pairs) {
    ForwardResult fr = forward_loss(model, p);
    total += fr.nll;
    tokens += fr.tokens;
  }
  CHECK(mean_nll ==
        doctest::Approx(total / static_cast<double>(tokens)).epsilon(1e-12));
}

TEST_CASE("train_epoch is deterministic under a fixed seed") {
  ModelConfig cfg = test::tiny_config(73, true);
  std::vector<DialoguePair> pairs;
  for (std::uint64_t i = 0; i < 8; ++i) {
    pairs.push_back(test::random_pair(cfg, derive_seed(74, i)));
  }
  TrainConfig tc;
  tc.batch_size = 3;
  tc.lr = 0.05;
  tc.dropout_rate = 0.2;

  Seq2SeqModel a = Seq2SeqModel::build(cfg, 75);
  Seq2SeqModel b = Seq2SeqModel::build(cfg, 75);
  double nll_a = train_epoch(a, pairs, tc, 76);
  double nll_b = train_epoch(b, pairs, tc, 76);
  CHECK(nll_a == nll_b);
  CHECK(values_equal(a.params(), b.params()));
}

TEST_CASE("thirty epochs on a toy corpus at least halve the loss") {
  auto corpus = test::make_synthetic_corpus(2, 25, 77);
  Vocab vocab = build_vocab(corpus.finetune, 500);
  SpeakerRegistry registry(corpus.speakers);
  auto pairs = encode_pairs(corpus.finetune, vocab, registry, 20);

  ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg.embed_dim = 12;
  cfg.hidden_size = 16;
  cfg.persona_dim = 8;
  cfg.num_layers = 2;
  cfg.persona_enabled = true;
  cfg.num_speakers = registry.size();
  cfg.max_len = 20;
  Seq2SeqModel model = Seq2SeqModel::build(cfg, 78);

  TrainConfig tc;
  tc.batch_size = 8;
  tc.lr = 0.2;
  tc.dropout_rate = 0.0;

  double initial = 0.0;
  double last = 0.0;
  for (std::size_t epoch = 0; epoch < 30; ++epoch) {
    last = train_epoch(model, pairs, tc, derive_seed(79, epoch));
    if (epoch == 0) initial = last;
  }
  CHECK(last < 0.5 * initial);
}

TEST_CASE("checkpoint save/load/save is byte-identical") {
  ModelConfig cfg = test::tiny_config(81, true);
  Seq2SeqModel model = Seq2SeqModel::build(cfg, 82);
  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.vocab_tokens = {"<pad>", "<bos>", "<eos>", "<unk>", "hello"};
  ckpt.speaker_names = {"a", "b"};
  ckpt.params = model.params();

  std::string dir = test::make_temp_dir("ckpt");
  save_checkpoint(dir + "/one.ckpt", ckpt);
  Checkpoint loaded = load_checkpoint(dir + "/one.ckpt");
  CHECK(loaded.config.vocab_size == cfg.vocab_size);
  CHECK(loaded.vocab_tokens == ckpt.vocab_tokens);
  CHECK(loaded.speaker_names == ckpt.speaker_names);
  CHECK(values_equal(loaded.params, ckpt.params));
  save_checkpoint(dir + "/two.ckpt", loaded);
  CHECK(test::files_equal(dir + "/one.ckpt", dir + "/two.ckpt"));

  CHECK_THROWS_AS(load_checkpoint(dir + "/missing.ckpt"), Error);
}

TEST_CASE("expand_pretrained copies, initializes, and validates") {
  ModelConfig pre_cfg = test::tiny_config(83, false);
  Seq2SeqModel pretrained = Seq2SeqModel::build(pre_cfg, 84);

  ModelConfig target = pre_cfg;
  target.persona_enabled = true;
  target.persona_dim = 4;
  target.num_speakers = 3;

  ParamSet expanded = expand_pretrained(pretrained.params(), target, 85);
  for (const auto& [name, t] : pretrained.params().tensors()) {
    const ParamTensor& e = expanded.at(name);
    CHECK(e.tag == t.tag);
    CHECK(e.value.data == t.value.data);
  }
  CHECK(expanded.contains(decoder_persona_weight_name()));
  CHECK(expanded.at(persona_table_name()).tag == ParamTag::kPrivate);
  const Matrix& table = expanded.at(persona_table_name()).value;
  CHECK(table.rows == 3);
  for (double v : table.data) CHECK(v == 0.0);

  // A model built from the expansion must load and run.
  Seq2SeqModel fine(target, expanded);
  DialoguePair pair = test::random_pair(target, 86);
  CHECK(std::isfinite(forward_loss(fine, pair).nll));

  ModelConfig wrong = target;
  wrong.hidden_size += 1;
  CHECK_THROWS_AS(expand_pretrained(pretrained.params(), wrong, 87), Error);
}

TEST_CASE("checkpoints reject garbage and truncated files") {
  std::string dir = test::make_temp_dir("ckpt_bad");
  {
    std::ofstream out(dir + "/garbage.ckpt", std::ios::binary);
    out << "definitely not a checkpoint";
  }
  CHECK_THROWS_AS(load_checkpoint(dir + "/garbage.ckpt"), Error);

  ModelConfig cfg = test::tiny_config(91, false);
  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.params = Seq2SeqModel::build(cfg, 92).params();
  save_checkpoint(dir + "/full.ckpt", ckpt);
  std::string bytes = test::read_file(dir + "/full.ckpt");
  {
    std::ofstream out(dir + "/cut.ckpt", std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  try {
    load_checkpoint(dir + "/cut.ckpt");
    FAIL("expected format error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kFormat);
  }
}

TEST_CASE("full-scale model dimensions build and train a step") {
  // The published configuration: 4x100 LSTM, 30k vocabulary, persona
  // dimension 128. One forward/backward keeps this shape honest.
  ModelConfig cfg;
  cfg.vocab_size = 30000;
  cfg.embed_dim = 100;
  cfg.hidden_size = 100;
  cfg.persona_dim = 128;
  cfg.num_layers = 4;
  cfg.persona_enabled = true;
  cfg.num_speakers = 7;
  cfg.max_len = 20;
  Seq2SeqModel model = Seq2SeqModel::build(cfg, 93);

  DialoguePair pair;
  pair.question = {5, 17, 29000, 4};
  pair.response = {12, 29999, kEosId};
  pair.speaker = 6;
  ForwardResult fr = forward_loss(model, pair);
  CHECK(std::isfinite(fr.nll));
  CHECK(fr.nll > 0.0);
  backward(model, fr.cache);
  model.params().clip_gradients(5.0);
  model.sgd_step(0.01);
  ForwardResult after = forward_loss(model, pair);
  CHECK(after.nll < fr.nll);
}

TEST_CASE("model structure invariants are enforced") {
  ModelConfig cfg = test::tiny_config(89, true);
  Seq2SeqModel model = Seq2SeqModel::build(cfg, 90);

  // Exactly the persona table is private.
  for (const auto& [name, t] : model.params().tensors()) {
    if (name == persona_table_name()) {
      CHECK(t.tag == ParamTag::kPrivate);
    } else {
      CHECK(t.tag == ParamTag::kFederated);
    }
  }

  // Missing tensors are rejected.
  ParamSet broken = model.params();
  ParamSet missing;
  for (const auto& [name, t] : broken.tensors()) {
    if (name != output_bias_name()) missing.add(name, t.value, t.tag);
  }
  CHECK_THROWS_AS(Seq2SeqModel(cfg, std::move(missing)), Error);
}
