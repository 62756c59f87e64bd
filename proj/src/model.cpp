#include "model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "common.hpp"
#include "rng.hpp"

namespace fedgen {

std::string word_embedding_name() { return "embedding.word"; }
std::string encoder_weight_name(std::size_t layer) {
  return "encoder.l" + std::to_string(layer) + ".weight";
}
std::string encoder_bias_name(std::size_t layer) {
  return "encoder.l" + std::to_string(layer) + ".bias";
}
std::string decoder_weight_name(std::size_t layer) {
  return "decoder.l" + std::to_string(layer) + ".weight";
}
std::string decoder_bias_name(std::size_t layer) {
  return "decoder.l" + std::to_string(layer) + ".bias";
}
std::string decoder_persona_weight_name() {
  return "decoder.l0.weight_persona";
}
std::string output_weight_name() { return "output.weight"; }
std::string output_bias_name() { return "output.bias"; }
std::string persona_table_name() { return "persona.table"; }

void validate_config(const ModelConfig& cfg) {
  if (cfg.vocab_size < kNumReserved) {
    fail(ErrorCode::kConfig, "vocab_size must cover the reserved ids");
  }
  if (cfg.embed_dim == 0 || cfg.hidden_size == 0 || cfg.num_layers == 0 ||
      cfg.max_len < 2) {
    fail(ErrorCode::kConfig, "model dimensions must be positive");
  }
  if (cfg.persona_enabled && (cfg.persona_dim == 0 || cfg.num_speakers == 0)) {
    fail(ErrorCode::kConfig,
         "persona models need persona_dim and num_speakers");
  }
}

LstmState zero_state(const ModelConfig& cfg) {
  LstmState st;
  st.h.assign(cfg.num_layers, col_vector(cfg.hidden_size));
  st.c.assign(cfg.num_layers, col_vector(cfg.hidden_size));
  return st;
}

namespace {

std::size_t layer_input_dim(const ModelConfig& cfg, std::size_t layer) {
  return layer == 0 ? cfg.embed_dim : cfg.hidden_size;
}

Matrix embed_col(const Matrix& table, std::size_t row) {
  Matrix out(table.cols, 1);
  const double* src = &table.data[row * table.cols];
  std::copy(src, src + table.cols, out.data.begin());
  return out;
}

Matrix slice_rows(const Matrix& v, std::size_t start, std::size_t len) {
  Matrix out(len, 1);
  std::copy(v.data.begin() + static_cast<std::ptrdiff_t>(start),
            v.data.begin() + static_cast<std::ptrdiff_t>(start + len),
            out.data.begin());
  return out;
}

// y = W^T dz without materializing the transpose.
Matrix matvec_transposed(const Matrix& w, const Matrix& dz) {
  Matrix out(w.cols, 1);
  for (std::size_t i = 0; i < w.rows; ++i) {
    double d = dz.data[i];
    if (d == 0.0) continue;
    const double* wrow = &w.data[i * w.cols];
    for (std::size_t j = 0; j < w.cols; ++j) {
      out.data[j] += wrow[j] * d;
    }
  }
  return out;
}

void check_tokens(const std::vector<VocabId>& tokens, std::size_t vocab,
                  const char* side) {
  for (VocabId t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      fail(ErrorCode::kVocab, std::string(side) + " token id " +
                                  std::to_string(t) +
                                  " outside vocabulary of size " +
                                  std::to_string(vocab));
    }
  }
}

// Forward of one cell with every intermediate kept for the backward
// pass. `input` is the masked non-recurrent input; for the persona layer
// it is [x; persona] and `wp` multiplies the trailing persona block.
StepTrace cell_forward(const Matrix& w, const Matrix* wp, const Matrix& b,
                       Matrix h_prev, Matrix c_prev, Matrix input,
                       Matrix mask) {
  std::size_t hidden = h_prev.rows;
  std::size_t w_input = w.cols - hidden;

  Matrix z;
  if (wp != nullptr) {
    if (input.rows != w_input + wp->cols) {
      fail(ErrorCode::kDimension,
           "lstm cell: input size " + std::to_string(input.rows) +
               " does not match gate matrices expecting " +
               std::to_string(w_input + wp->cols));
    }
    Matrix hx = concat_rows(h_prev, slice_rows(input, 0, w_input));
    z = affine(w, hx, b);
    add_matvec(z, *wp, slice_rows(input, w_input, wp->cols));
  } else {
    if (input.rows != w_input) {
      fail(ErrorCode::kDimension,
           "lstm cell: input size " + std::to_string(input.rows) +
               " does not match gate matrix expecting " +
               std::to_string(w_input));
    }
    Matrix hx = concat_rows(h_prev, input);
    z = affine(w, hx, b);
  }

  StepTrace tr;
  tr.f = Matrix(hidden, 1);
  tr.i = Matrix(hidden, 1);
  tr.o = Matrix(hidden, 1);
  tr.j = Matrix(hidden, 1);
  for (std::size_t k = 0; k < hidden; ++k) {
    tr.f.data[k] = sigmoid_scalar(z.data[k]);
    tr.i.data[k] = sigmoid_scalar(z.data[hidden + k]);
    tr.o.data[k] = sigmoid_scalar(z.data[2 * hidden + k]);
    tr.j.data[k] = std::tanh(z.data[3 * hidden + k]);
  }
  tr.c = Matrix(hidden, 1);
  tr.tanh_c = Matrix(hidden, 1);
  tr.h = Matrix(hidden, 1);
  for (std::size_t k = 0; k < hidden; ++k) {
    tr.c.data[k] = tr.f.data[k] * c_prev.data[k] + tr.i.data[k] * tr.j.data[k];
    tr.tanh_c.data[k] = std::tanh(tr.c.data[k]);
    tr.h.data[k] = tr.o.data[k] * tr.tanh_c.data[k];
  }
  tr.h_prev = std::move(h_prev);
  tr.c_prev = std::move(c_prev);
  tr.input = std::move(input);
  tr.mask = std::move(mask);
  return tr;
}

// One time step through the whole stack. `x0` is the raw layer-0 input
// (embedding, already concatenated with the persona vector for the
// decoder). Dropout masks are drawn from `mask_rng` when given.
std::vector<StepTrace> stack_step(const Seq2SeqModel& model, bool decoder,
                                  const Matrix& x0, LstmState& state,
                                  double dropout_rate, Rng* mask_rng) {
  const ModelConfig& cfg = model.config();
  std::vector<StepTrace> traces;
  traces.reserve(cfg.num_layers);
  Matrix cur = x0;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    Matrix mask;
    Matrix input = std::move(cur);
    if (mask_rng != nullptr && dropout_rate > 0.0) {
      double keep = 1.0 / (1.0 - dropout_rate);
      mask = Matrix(input.rows, 1);
      for (std::size_t k = 0; k < input.rows; ++k) {
        mask.data[k] = mask_rng->uniform01() < dropout_rate ? 0.0 : keep;
      }
      for (std::size_t k = 0; k < input.rows; ++k) {
        input.data[k] *= mask.data[k];
      }
    }
    const ParamTensor& w = decoder ? model.dec_w(l) : model.enc_w(l);
    const ParamTensor& b = decoder ? model.dec_b(l) : model.enc_b(l);
    const Matrix* wp = (decoder && l == 0 && model.dec_wp() != nullptr)
                           ? &model.dec_wp()->value
                           : nullptr;
    traces.push_back(cell_forward(w.value, wp, b.value, std::move(state.h[l]),
                                  std::move(state.c[l]), std::move(input),
                                  std::move(mask)));
    state.h[l] = traces.back().h;
    state.c[l] = traces.back().c;
    cur = traces.back().h;
  }
  return traces;
}

// Numerically stable log-softmax; returns (log Z, probabilities).
std::pair<double, Matrix> softmax(const Matrix& logits) {
  double m = logits.data[0];
  for (double v : logits.data) m = std::max(m, v);
  double sum = 0.0;
  Matrix probs(logits.rows, 1);
  for (std::size_t i = 0; i < logits.rows; ++i) {
    probs.data[i] = std::exp(logits.data[i] - m);
    sum += probs.data[i];
  }
  for (double& p : probs.data) p /= sum;
  return {m + std::log(sum), probs};
}

}  // namespace

Seq2SeqModel Seq2SeqModel::build(const ModelConfig& cfg, std::uint64_t seed) {
  validate_config(cfg);
  std::size_t h = cfg.hidden_size;
  ParamSet params;
  params.add(word_embedding_name(),
             xavier_init(cfg.vocab_size, cfg.embed_dim, derive_seed(seed, 1)),
             ParamTag::kFederated);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    std::size_t in = layer_input_dim(cfg, l);
    params.add(encoder_weight_name(l),
               xavier_init(4 * h, h + in, derive_seed(seed, 2, l)),
               ParamTag::kFederated);
    params.add(encoder_bias_name(l), Matrix(4 * h, 1, 0.0),
               ParamTag::kFederated);
    params.add(decoder_weight_name(l),
               xavier_init(4 * h, h + in, derive_seed(seed, 3, l)),
               ParamTag::kFederated);
    params.add(decoder_bias_name(l), Matrix(4 * h, 1, 0.0),
               ParamTag::kFederated);
  }
  params.add(output_weight_name(),
             xavier_init(cfg.vocab_size, h, derive_seed(seed, 4)),
             ParamTag::kFederated);
  params.add(output_bias_name(), Matrix(cfg.vocab_size, 1, 0.0),
             ParamTag::kFederated);
  if (cfg.persona_enabled) {
    params.add(decoder_persona_weight_name(),
               xavier_init(4 * h, cfg.persona_dim, derive_seed(seed, 5)),
               ParamTag::kFederated);
    Matrix table(cfg.num_speakers, cfg.persona_dim);
    for (std::size_t s = 0; s < cfg.num_speakers; ++s) {
      Matrix row = normal_init(1, cfg.persona_dim, 0.0, 0.1,
                               derive_seed(seed, 6, s));
      std::copy(row.data.begin(), row.data.end(),
                table.data.begin() +
                    static_cast<std::ptrdiff_t>(s * cfg.persona_dim));
    }
    params.add(persona_table_name(), std::move(table), ParamTag::kPrivate);
  }
  return Seq2SeqModel(cfg, std::move(params));
}

Seq2SeqModel::Seq2SeqModel(ModelConfig cfg, ParamSet params)
    : cfg_(cfg), params_(std::move(params)) {
  validate_config(cfg_);
  rebind();
}

Seq2SeqModel::Seq2SeqModel(const Seq2SeqModel& other)
    : cfg_(other.cfg_), params_(other.params_), revision_(other.revision_) {
  rebind();
}

Seq2SeqModel& Seq2SeqModel::operator=(const Seq2SeqModel& other) {
  if (this != &other) {
    cfg_ = other.cfg_;
    params_ = other.params_;
    revision_ = other.revision_ + 1;
    rebind();
  }
  return *this;
}

Seq2SeqModel::Seq2SeqModel(Seq2SeqModel&& other) noexcept
    : cfg_(other.cfg_),
      params_(std::move(other.params_)),
      revision_(other.revision_) {
  rebind();
}

Seq2SeqModel& Seq2SeqModel::operator=(Seq2SeqModel&& other) noexcept {
  if (this != &other) {
    cfg_ = other.cfg_;
    params_ = std::move(other.params_);
    revision_ = other.revision_ + 1;
    rebind();
  }
  return *this;
}

void Seq2SeqModel::rebind() {
  auto need = [&](const std::string& name) -> ParamTensor* {
    if (!params_.contains(name)) {
      fail(ErrorCode::kSchema, "model parameters missing tensor '" + name +
                                   "' required by the configuration");
    }
    return &params_.at(name);
  };
  embed_ = need(word_embedding_name());
  if (embed_->value.rows != cfg_.vocab_size ||
      embed_->value.cols != cfg_.embed_dim) {
    fail(ErrorCode::kSchema, "word embedding shape does not match config");
  }
  auto check_shape = [&](const ParamTensor* t, std::size_t rows,
                         std::size_t cols) {
    if (t->value.rows != rows || t->value.cols != cols) {
      fail(ErrorCode::kSchema, "tensor '" + t->name + "' has shape " +
                                   std::to_string(t->value.rows) + "x" +
                                   std::to_string(t->value.cols) +
                                   ", expected " + std::to_string(rows) +
                                   "x" + std::to_string(cols));
    }
  };
  std::size_t h = cfg_.hidden_size;
  enc_w_.clear();
  enc_b_.clear();
  dec_w_.clear();
  dec_b_.clear();
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
    std::size_t in = layer_input_dim(cfg_, l);
    enc_w_.push_back(need(encoder_weight_name(l)));
    enc_b_.push_back(need(encoder_bias_name(l)));
    dec_w_.push_back(need(decoder_weight_name(l)));
    dec_b_.push_back(need(decoder_bias_name(l)));
    check_shape(enc_w_.back(), 4 * h, h + in);
    check_shape(enc_b_.back(), 4 * h, 1);
    check_shape(dec_w_.back(), 4 * h, h + in);
    check_shape(dec_b_.back(), 4 * h, 1);
  }
  out_w_ = need(output_weight_name());
  out_b_ = need(output_bias_name());
  check_shape(out_w_, cfg_.vocab_size, h);
  check_shape(out_b_, cfg_.vocab_size, 1);
  if (cfg_.persona_enabled) {
    dec_wp_ = need(decoder_persona_weight_name());
    check_shape(dec_wp_, 4 * h, cfg_.persona_dim);
    persona_ = need(persona_table_name());
    if (persona_->tag != ParamTag::kPrivate) {
      fail(ErrorCode::kSchema, "persona table must carry the PRIVATE tag");
    }
    if (persona_->value.rows != cfg_.num_speakers ||
        persona_->value.cols != cfg_.persona_dim) {
      fail(ErrorCode::kSchema, "persona table shape does not match config");
    }
  } else {
    dec_wp_ = nullptr;
    persona_ = nullptr;
    if (params_.contains(persona_table_name())) {
      fail(ErrorCode::kSchema,
           "persona table present but persona is disabled");
    }
  }
  for (const auto& [name, t] : params_.tensors()) {
    if (name != persona_table_name() && t.tag != ParamTag::kFederated) {
      fail(ErrorCode::kSchema, "tensor '" + name + "' must be FEDERATED");
    }
  }
}

void Seq2SeqModel::sgd_step(double lr) {
  params_.sgd_step(lr);
  ++revision_;
}

void Seq2SeqModel::load_values(const ParamSet& src) {
  for (const auto& [name, t] : src.tensors()) {
    ParamTensor& dst = params_.at(name);
    if (!dst.value.same_shape(t.value)) {
      fail(ErrorCode::kSchema, "load_values: shape mismatch for '" + name + "'");
    }
    dst.value = t.value;
  }
  ++revision_;
}

Matrix Seq2SeqModel::persona_row(SpeakerId speaker) const {
  if (persona_ == nullptr) {
    fail(ErrorCode::kInvalidArgument, "model has no persona table");
  }
  if (speaker < 0 ||
      static_cast<std::size_t>(speaker) >= cfg_.num_speakers) {
    fail(ErrorCode::kDomain, "speaker id " + std::to_string(speaker) +
                                 " out of range [0, " +
                                 std::to_string(cfg_.num_speakers) + ")");
  }
  Matrix row(cfg_.persona_dim, 1);
  const double* src =
      &persona_->value.data[static_cast<std::size_t>(speaker) *
                            cfg_.persona_dim];
  std::copy(src, src + cfg_.persona_dim, row.data.begin());
  return row;
}

void Seq2SeqModel::set_persona_row(SpeakerId speaker, const Matrix& row) {
  if (persona_ == nullptr) {
    fail(ErrorCode::kInvalidArgument, "model has no persona table");
  }
  if (row.rows * row.cols != cfg_.persona_dim) {
    fail(ErrorCode::kDimension, "persona row has wrong size");
  }
  double* dst = &persona_->value.data[static_cast<std::size_t>(speaker) *
                                      cfg_.persona_dim];
  std::copy(row.data.begin(), row.data.end(), dst);
  ++revision_;
}

CellOutput lstm_cell_standard(const Matrix& w, const Matrix& b,
                              const Matrix& h_prev, const Matrix& c_prev,
                              const Matrix& x) {
  if (w.rows != 4 * h_prev.rows || b.rows != w.rows ||
      w.cols != h_prev.rows + x.rows) {
    fail(ErrorCode::kDimension,
         "lstm_cell_standard: W must map [h_prev; x] to 4H");
  }
  StepTrace tr = cell_forward(w, nullptr, b, h_prev, c_prev, x, Matrix());
  return CellOutput{tr.h, tr.c};
}

CellOutput lstm_cell_persona(const Matrix& w, const Matrix& wp,
                             const Matrix& b, const Matrix& h_prev,
                             const Matrix& c_prev, const Matrix& x,
                             const Matrix& persona) {
  if (w.rows != 4 * h_prev.rows || wp.rows != w.rows ||
      w.cols != h_prev.rows + x.rows || wp.cols != persona.rows) {
    fail(ErrorCode::kDimension,
         "lstm_cell_persona: [W | Wp] must map [h_prev; x; persona] to 4H");
  }
  StepTrace tr = cell_forward(w, &wp, b, h_prev, c_prev,
                              concat_rows(x, persona), Matrix());
  return CellOutput{tr.h, tr.c};
}

LstmState encode(const Seq2SeqModel& model,
                 const std::vector<VocabId>& question) {
  if (question.empty()) {
    fail(ErrorCode::kInvalidArgument, "encode: empty question");
  }
  check_tokens(question, model.config().vocab_size, "question");
  LstmState state = zero_state(model.config());
  for (VocabId tok : question) {
    Matrix x = embed_col(model.embedding().value,
                         static_cast<std::size_t>(tok));
    stack_step(model, /*decoder=*/false, x, state, 0.0, nullptr);
  }
  return state;
}

Matrix decode_step(const Seq2SeqModel& model, LstmState& state,
                   VocabId prev_token, const Matrix* persona_vec) {
  const ModelConfig& cfg = model.config();
  if (prev_token < 0 ||
      static_cast<std::size_t>(prev_token) >= cfg.vocab_size) {
    fail(ErrorCode::kVocab, "decode_step: token id out of range");
  }
  Matrix x = embed_col(model.embedding().value,
                       static_cast<std::size_t>(prev_token));
  if (cfg.persona_enabled) {
    if (persona_vec == nullptr) {
      fail(ErrorCode::kInvalidArgument,
           "decode_step: persona model needs a persona vector");
    }
    x = concat_rows(x, *persona_vec);
  }
  stack_step(model, /*decoder=*/true, x, state, 0.0, nullptr);
  Matrix logits =
      affine(model.out_w().value, state.h.back(), model.out_b().value);
  auto [logz, probs] = softmax(logits);
  Matrix logp(logits.rows, 1);
  for (std::size_t i = 0; i < logits.rows; ++i) {
    logp.data[i] = logits.data[i] - logz;
  }
  return logp;
}

ForwardResult forward_loss(const Seq2SeqModel& model, const DialoguePair& pair,
                           const ForwardOptions& opts) {
  const ModelConfig& cfg = model.config();
  if (pair.question.empty() || pair.response.empty()) {
    fail(ErrorCode::kInvalidArgument,
         "forward_loss: empty question or response");
  }
  check_tokens(pair.question, cfg.vocab_size, "question");
  check_tokens(pair.response, cfg.vocab_size, "response");
  if (cfg.persona_enabled &&
      (pair.speaker < 0 ||
       static_cast<std::size_t>(pair.speaker) >= cfg.num_speakers)) {
    fail(ErrorCode::kDomain, "forward_loss: speaker id out of range");
  }

  ForwardCache cache;
  cache.pair = pair;
  cache.persona_used = cfg.persona_enabled;
  cache.model_revision = model.revision();
  cache.model_id = &model;

  double rate = opts.train_mode ? opts.dropout_rate : 0.0;
  Rng mask_rng(derive_seed(opts.dropout_seed, 0x6d61736bULL));
  Rng* rng = rate > 0.0 ? &mask_rng : nullptr;

  LstmState state = zero_state(cfg);
  cache.enc.reserve(pair.question.size());
  for (VocabId tok : pair.question) {
    Matrix x = embed_col(model.embedding().value,
                         static_cast<std::size_t>(tok));
    cache.enc.push_back(stack_step(model, false, x, state, rate, rng));
  }

  Matrix persona_vec;
  if (cfg.persona_enabled) {
    persona_vec = model.persona_row(pair.speaker);
  }

  cache.dec.reserve(pair.response.size());
  cache.probs.reserve(pair.response.size());
  cache.dec_inputs.reserve(pair.response.size());
  for (std::size_t t = 0; t < pair.response.size(); ++t) {
    VocabId prev = t == 0 ? kBosId : pair.response[t - 1];
    cache.dec_inputs.push_back(prev);
    Matrix x = embed_col(model.embedding().value,
                         static_cast<std::size_t>(prev));
    if (cfg.persona_enabled) {
      x = concat_rows(x, persona_vec);
    }
    cache.dec.push_back(stack_step(model, true, x, state, rate, rng));
    Matrix logits =
        affine(model.out_w().value, state.h.back(), model.out_b().value);
    auto [logz, probs] = softmax(logits);
    VocabId target = pair.response[t];
    cache.nll += logz - logits.data[static_cast<std::size_t>(target)];
    cache.probs.push_back(std::move(probs));
  }
  cache.tokens = pair.response.size();

  ForwardResult result;
  result.nll = cache.nll;
  result.tokens = cache.tokens;
  result.cache = std::move(cache);
  return result;
}

namespace {

struct CellBackOut {
  Matrix dh_prev;
  Matrix dc_prev;
  Matrix dinput_raw;  // gradient w.r.t. the pre-dropout input
};

CellBackOut cell_backward(const Matrix& w, const Matrix* wp, Matrix& dw,
                          Matrix* dwp, Matrix& db, const StepTrace& tr,
                          const Matrix& dh, const Matrix& dc_in) {
  std::size_t hidden = dh.rows;
  Matrix dz(4 * hidden, 1);
  Matrix dc(hidden, 1);
  for (std::size_t k = 0; k < hidden; ++k) {
    double do_ = dh.data[k] * tr.tanh_c.data[k];
    double dck = dc_in.data[k] +
                 dh.data[k] * tr.o.data[k] *
                     (1.0 - tr.tanh_c.data[k] * tr.tanh_c.data[k]);
    dc.data[k] = dck;
    double df = dck * tr.c_prev.data[k];
    double di = dck * tr.j.data[k];
    double dj = dck * tr.i.data[k];
    dz.data[k] = df * tr.f.data[k] * (1.0 - tr.f.data[k]);
    dz.data[hidden + k] = di * tr.i.data[k] * (1.0 - tr.i.data[k]);
    dz.data[2 * hidden + k] = do_ * tr.o.data[k] * (1.0 - tr.o.data[k]);
    dz.data[3 * hidden + k] = dj * (1.0 - tr.j.data[k] * tr.j.data[k]);
  }

  std::size_t w_input = w.cols - hidden;
  Matrix hx = concat_rows(tr.h_prev, slice_rows(tr.input, 0, w_input));
  add_outer(dw, dz, hx);
  add_in_place(db, dz);

  Matrix dcat = matvec_transposed(w, dz);
  CellBackOut out;
  out.dh_prev = slice_rows(dcat, 0, hidden);
  out.dc_prev = hadamard(dc, tr.f);

  Matrix dinput = slice_rows(dcat, hidden, w_input);
  if (wp != nullptr) {
    Matrix vpart = slice_rows(tr.input, w_input, wp->cols);
    add_outer(*dwp, dz, vpart);
    Matrix dvpart = matvec_transposed(*wp, dz);
    dinput = concat_rows(dinput, dvpart);
  }
  if (!tr.mask.empty()) {
    for (std::size_t k = 0; k < dinput.rows; ++k) {
      dinput.data[k] *= tr.mask.data[k];
    }
  }
  out.dinput_raw = std::move(dinput);
  return out;
}

}  // namespace

void backward(Seq2SeqModel& model, const ForwardCache& cache) {
  if (cache.model_id != &model || cache.model_revision != model.revision()) {
    fail(ErrorCode::kInternal,
         "backward: cache does not match the current model state");
  }
  const ModelConfig& cfg = model.config();
  std::size_t layers = cfg.num_layers;
  std::size_t hidden = cfg.hidden_size;
  std::size_t embed = cfg.embed_dim;

  Matrix& dembed = model.embedding().grad;
  Matrix& dout_w = model.out_w().grad;
  Matrix& dout_b = model.out_b().grad;

  std::vector<Matrix> carry_dh(layers, col_vector(hidden));
  std::vector<Matrix> carry_dc(layers, col_vector(hidden));

  // Decoder, backwards through time.
  for (std::size_t ti = cache.dec.size(); ti-- > 0;) {
    const std::vector<StepTrace>& traces = cache.dec[ti];
    VocabId target = cache.pair.response[ti];

    Matrix dlogits = cache.probs[ti];
    dlogits.data[static_cast<std::size_t>(target)] -= 1.0;
    add_outer(dout_w, dlogits, traces.back().h);
    add_in_place(dout_b, dlogits);

    std::vector<Matrix> dh(layers);
    for (std::size_t l = 0; l < layers; ++l) dh[l] = std::move(carry_dh[l]);
    add_in_place(dh[layers - 1], matvec_transposed(model.out_w().value, dlogits));

    for (std::size_t l = layers; l-- > 0;) {
      const Matrix& w = model.dec_w(l).value;
      Matrix& dw = model.dec_w(l).grad;
      Matrix& db = model.dec_b(l).grad;
      const Matrix* wp = (l == 0 && model.dec_wp() != nullptr)
                             ? &model.dec_wp()->value
                             : nullptr;
      Matrix* dwp =
          (l == 0 && model.dec_wp() != nullptr) ? &model.dec_wp()->grad : nullptr;
      CellBackOut back =
          cell_backward(w, wp, dw, dwp, db, traces[l], dh[l], carry_dc[l]);
      carry_dh[l] = std::move(back.dh_prev);
      carry_dc[l] = std::move(back.dc_prev);
      if (l > 0) {
        add_in_place(dh[l - 1], back.dinput_raw);
      } else {
        std::size_t row =
            static_cast<std::size_t>(cache.dec_inputs[ti]) * embed;
        for (std::size_t k = 0; k < embed; ++k) {
          dembed.data[row + k] += back.dinput_raw.data[k];
        }
        if (cache.persona_used) {
          Matrix& dtable = model.persona_table()->grad;
          std::size_t prow =
              static_cast<std::size_t>(cache.pair.speaker) * cfg.persona_dim;
          for (std::size_t k = 0; k < cfg.persona_dim; ++k) {
            dtable.data[prow + k] += back.dinput_raw.data[embed + k];
          }
        }
      }
    }
  }

  // Encoder, seeded with the gradients flowing into its final state.
  for (std::size_t ti = cache.enc.size(); ti-- > 0;) {
    const std::vector<StepTrace>& traces = cache.enc[ti];
    std::vector<Matrix> dh(layers);
    for (std::size_t l = 0; l < layers; ++l) dh[l] = std::move(carry_dh[l]);

    for (std::size_t l = layers; l-- > 0;) {
      const Matrix& w = model.enc_w(l).value;
      Matrix& dw = model.enc_w(l).grad;
      Matrix& db = model.enc_b(l).grad;
      CellBackOut back =
          cell_backward(w, nullptr, dw, nullptr, db, traces[l], dh[l],
                        carry_dc[l]);
      carry_dh[l] = std::move(back.dh_prev);
      carry_dc[l] = std::move(back.dc_prev);
      if (l > 0) {
        add_in_place(dh[l - 1], back.dinput_raw);
      } else {
        std::size_t row =
            static_cast<std::size_t>(cache.pair.question[ti]) * embed;
        for (std::size_t k = 0; k < embed; ++k) {
          dembed.data[row + k] += back.dinput_raw.data[k];
        }
      }
    }
  }
}

double train_epoch(Seq2SeqModel& model, const std::vector<DialoguePair>& pairs,
                   const TrainConfig& cfg, std::uint64_t epoch_seed,
                   const BatchGradHook& batch_hook) {
  if (pairs.empty()) {
    fail(ErrorCode::kInvalidArgument, "train_epoch: no pairs");
  }
  if (cfg.batch_size == 0) {
    fail(ErrorCode::kInvalidArgument, "train_epoch: batch_size must be >= 1");
  }

  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(derive_seed(epoch_seed, 0x73687566ULL));
  shuffle_rng.shuffle(order);

  model.params().zero_grads();

  double total_nll = 0.0;
  std::size_t total_tokens = 0;
  std::size_t pos = 0;
  while (pos < order.size()) {
    std::size_t batch_end = std::min(pos + cfg.batch_size, order.size());
    std::size_t batch_count = batch_end - pos;
    for (std::size_t k = pos; k < batch_end; ++k) {
      ForwardOptions opts;
      opts.train_mode = true;
      opts.dropout_rate = cfg.dropout_rate;
      opts.dropout_seed = derive_seed(epoch_seed, 0x64726f70ULL, k);
      ForwardResult fr = forward_loss(model, pairs[order[k]], opts);
      backward(model, fr.cache);
      total_nll += fr.nll;
      total_tokens += fr.tokens;
    }
    model.params().scale_grads(1.0 / static_cast<double>(batch_count));
    if (batch_hook) {
      batch_hook(model.params());
    }
    model.params().clip_gradients(cfg.clip_threshold);
    model.sgd_step(cfg.lr);
    pos = batch_end;
  }
  return total_nll / static_cast<double>(total_tokens);
}

namespace {
constexpr char kCheckpointMagic[4] = {'F', 'G', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out.is_open()) {
    fail(ErrorCode::kIo, "cannot write checkpoint '" + path + "'");
  }
  out.write(kCheckpointMagic, 4);
  io::write_u32(out, kCheckpointVersion);
  io::write_string(out, ckpt.kind);
  io::write_string(out, ckpt.direction);
  const ModelConfig& c = ckpt.config;
  io::write_u64(out, c.vocab_size);
  io::write_u64(out, c.embed_dim);
  io::write_u64(out, c.hidden_size);
  io::write_u64(out, c.persona_dim);
  io::write_u64(out, c.num_layers);
  io::write_u8(out, c.persona_enabled ? 1 : 0);
  io::write_u64(out, c.num_speakers);
  io::write_u64(out, c.max_len);
  io::write_u64(out, ckpt.vocab_tokens.size());
  for (const std::string& t : ckpt.vocab_tokens) io::write_string(out, t);
  io::write_u64(out, ckpt.speaker_names.size());
  for (const std::string& s : ckpt.speaker_names) io::write_string(out, s);
  ckpt.params.write(out);
  if (!out.good()) {
    fail(ErrorCode::kIo, "error writing checkpoint '" + path + "'");
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.is_open()) {
    fail(ErrorCode::kIo, "cannot open checkpoint '" + path + "'");
  }
  char magic[4];
  in.read(magic, 4);
  if (!in.good() || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    fail(ErrorCode::kFormat, "'" + path + "' is not a model checkpoint");
  }
  std::uint32_t version = io::read_u32(in);
  if (version != kCheckpointVersion) {
    fail(ErrorCode::kFormat, "unsupported checkpoint version " +
                                 std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.kind = io::read_string(in);
  ckpt.direction = io::read_string(in);
  ckpt.config.vocab_size = io::read_u64(in);
  ckpt.config.embed_dim = io::read_u64(in);
  ckpt.config.hidden_size = io::read_u64(in);
  ckpt.config.persona_dim = io::read_u64(in);
  ckpt.config.num_layers = io::read_u64(in);
  ckpt.config.persona_enabled = io::read_u8(in) == 1;
  ckpt.config.num_speakers = io::read_u64(in);
  ckpt.config.max_len = io::read_u64(in);
  std::uint64_t vn = io::read_u64(in);
  ckpt.vocab_tokens.reserve(vn);
  for (std::uint64_t i = 0; i < vn; ++i) {
    ckpt.vocab_tokens.push_back(io::read_string(in));
  }
  std::uint64_t sn = io::read_u64(in);
  ckpt.speaker_names.reserve(sn);
  for (std::uint64_t i = 0; i < sn; ++i) {
    ckpt.speaker_names.push_back(io::read_string(in));
  }
  ckpt.params = ParamSet::read(in);
  return ckpt;
}

ParamSet expand_pretrained(const ParamSet& pretrained,
                           const ModelConfig& target_cfg, std::uint64_t seed) {
  validate_config(target_cfg);
  ParamSet out;
  for (const auto& [name, t] : pretrained.tensors()) {
    if (t.tag != ParamTag::kFederated) {
      fail(ErrorCode::kSchema,
           "pre-trained parameters may not contain private tensors");
    }
    out.add(name, t.value, t.tag);
  }
  // Shape check against the target by building a throwaway reference.
  Seq2SeqModel reference = Seq2SeqModel::build(target_cfg, 0);
  for (const auto& [name, t] : reference.params().tensors()) {
    if (name == decoder_persona_weight_name()) {
      if (!out.contains(name)) {
        out.add(name,
                xavier_init(t.value.rows, t.value.cols,
                            derive_seed(seed, 0x77705f69ULL)),
                ParamTag::kFederated);
      }
      continue;
    }
    if (name == persona_table_name()) {
      if (!out.contains(name)) {
        out.add(name, Matrix(t.value.rows, t.value.cols, 0.0),
                ParamTag::kPrivate);
      }
      continue;
    }
    if (!out.contains(name) || !out.at(name).value.same_shape(t.value)) {
      fail(ErrorCode::kSchema,
           "pre-trained checkpoint does not match the target configuration "
           "(tensor '" + name + "')");
    }
  }
  for (const auto& [name, t] : out.tensors()) {
    if (!reference.params().contains(name)) {
      fail(ErrorCode::kSchema,
           "pre-trained checkpoint carries unexpected tensor '" + name + "'");
    }
  }
  return out;
}

}  // namespace fedgen
