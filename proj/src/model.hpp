#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "matrix.hpp"
#include "params.hpp"

namespace fedgen {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 100;
  std::size_t hidden_size = 100;
  std::size_t persona_dim = 128;
  std::size_t num_layers = 4;
  bool persona_enabled = false;
  std::size_t num_speakers = 0;  // persona table rows
  std::size_t max_len = 20;
};

void validate_config(const ModelConfig& cfg);

// Tensor names inside the model's ParamSet. Everything is FEDERATED
// except the persona table. The persona gate block is kept as its own
// tensor ("decoder.l0.weight_persona") so a persona-free pre-trained
// checkpoint loads by plain name matching; mathematically the pair
// (weight, weight_persona) is one gate matrix over the concatenation
// [h_prev; x; persona].
std::string word_embedding_name();
std::string encoder_weight_name(std::size_t layer);
std::string encoder_bias_name(std::size_t layer);
std::string decoder_weight_name(std::size_t layer);
std::string decoder_bias_name(std::size_t layer);
std::string decoder_persona_weight_name();
std::string output_weight_name();
std::string output_bias_name();
std::string persona_table_name();

struct LstmState {
  std::vector<Matrix> h;  // per layer, hidden_size x 1
  std::vector<Matrix> c;
};

LstmState zero_state(const ModelConfig& cfg);

// Persona-conditioned seq2seq model over a tagged ParamSet.
class Seq2SeqModel {
 public:
  static Seq2SeqModel build(const ModelConfig& cfg, std::uint64_t seed);

  Seq2SeqModel(ModelConfig cfg, ParamSet params);
  Seq2SeqModel(const Seq2SeqModel& other);
  Seq2SeqModel& operator=(const Seq2SeqModel& other);
  Seq2SeqModel(Seq2SeqModel&& other) noexcept;
  Seq2SeqModel& operator=(Seq2SeqModel&& other) noexcept;

  const ModelConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  // Invalidate any outstanding forward caches (bumped by sgd_step and by
  // bulk parameter overwrites).
  std::uint64_t revision() const { return revision_; }
  void mark_params_changed() { ++revision_; }

  void sgd_step(double lr);

  // Overwrites the values of every tensor whose name appears in `src`.
  void load_values(const ParamSet& src);

  Matrix persona_row(SpeakerId speaker) const;  // persona_dim x 1
  void set_persona_row(SpeakerId speaker, const Matrix& row);

  // Hot-path tensor handles, bound once (map nodes are stable).
  ParamTensor& embedding() const { return *embed_; }
  ParamTensor& enc_w(std::size_t l) const { return *enc_w_[l]; }
  ParamTensor& enc_b(std::size_t l) const { return *enc_b_[l]; }
  ParamTensor& dec_w(std::size_t l) const { return *dec_w_[l]; }
  ParamTensor& dec_b(std::size_t l) const { return *dec_b_[l]; }
  ParamTensor* dec_wp() const { return dec_wp_; }  // null when persona off
  ParamTensor& out_w() const { return *out_w_; }
  ParamTensor& out_b() const { return *out_b_; }
  ParamTensor* persona_table() const { return persona_; }

 private:
  void rebind();

  ModelConfig cfg_;
  ParamSet params_;
  std::uint64_t revision_ = 0;

  ParamTensor* embed_ = nullptr;
  std::vector<ParamTensor*> enc_w_, enc_b_, dec_w_, dec_b_;
  ParamTensor* dec_wp_ = nullptr;
  ParamTensor* out_w_ = nullptr;
  ParamTensor* out_b_ = nullptr;
  ParamTensor* persona_ = nullptr;
};

struct CellOutput {
  Matrix h;
  Matrix c;
};

// One LSTM cell evaluation: [f,i,o,j] = [sig,sig,sig,tanh](W [h;x] + b),
// c = f.c_prev + i.j, h = o.tanh(c).
CellOutput lstm_cell_standard(const Matrix& w, const Matrix& b,
                              const Matrix& h_prev, const Matrix& c_prev,
                              const Matrix& x);

// Same cell over the three-way concatenation [h_prev; x; persona]; the
// persona block of the gate matrix is passed separately as `wp`.
CellOutput lstm_cell_persona(const Matrix& w, const Matrix& wp,
                             const Matrix& b, const Matrix& h_prev,
                             const Matrix& c_prev, const Matrix& x,
                             const Matrix& persona);

// Runs the question through the encoder stack (evaluation mode, persona
// never enters the encoder) and returns the final state.
LstmState encode(const Seq2SeqModel& model,
                 const std::vector<VocabId>& question);

// Advances the decoder one step in evaluation mode: feeds `prev_token`
// (plus the persona vector when given), mutates `state`, and returns
// log-probabilities over the vocabulary (V x 1).
Matrix decode_step(const Seq2SeqModel& model, LstmState& state,
                   VocabId prev_token, const Matrix* persona_vec);

struct ForwardOptions {
  bool train_mode = false;
  double dropout_rate = 0.0;
  std::uint64_t dropout_seed = 0;
};

struct StepTrace {
  Matrix h_prev, c_prev;
  Matrix input;  // masked non-recurrent input as seen by the cell
  Matrix mask;   // empty when no dropout was applied
  Matrix f, i, o, j, c, tanh_c, h;
};

struct ForwardCache {
  DialoguePair pair;
  bool persona_used = false;
  std::vector<std::vector<StepTrace>> enc;  // [time][layer]
  std::vector<std::vector<StepTrace>> dec;
  std::vector<Matrix> probs;       // softmax output per decoder step
  std::vector<VocabId> dec_inputs;  // token fed at each decoder step
  double nll = 0.0;
  std::size_t tokens = 0;
  std::uint64_t model_revision = 0;
  const void* model_id = nullptr;
};

struct ForwardResult {
  double nll = 0.0;
  std::size_t tokens = 0;
  ForwardCache cache;
};

// Teacher-forced forward pass; the summed cross-entropy covers every
// response token including the final EOS. The response is scored exactly
// as given (beam hypotheses that stopped at max_len rescore consistently).
ForwardResult forward_loss(const Seq2SeqModel& model, const DialoguePair& pair,
                           const ForwardOptions& opts = {});

// Accumulates d nll / d theta into the ParamSet grads. The cache must
// come from a forward_loss call against the same, unmodified model.
void backward(Seq2SeqModel& model, const ForwardCache& cache);

struct TrainConfig {
  std::size_t batch_size = 8;
  double lr = 0.01;
  double clip_threshold = 5.0;
  double dropout_rate = 0.0;
};

// Called once per batch after gradient accumulation and averaging,
// before clipping; lets callers add penalty gradients.
using BatchGradHook = std::function<void(ParamSet&)>;

// One epoch of shuffled mini-batch SGD; batch gradients are averaged
// over the pairs in the batch. Returns mean per-token NLL over the epoch.
double train_epoch(Seq2SeqModel& model, const std::vector<DialoguePair>& pairs,
                   const TrainConfig& cfg, std::uint64_t epoch_seed,
                   const BatchGradHook& batch_hook = {});

// On-disk model container: config header, vocabulary, speaker roster,
// then the ParamSet in its flat binary layout. Byte-stable.
struct Checkpoint {
  ModelConfig config;
  std::vector<std::string> vocab_tokens;
  std::vector<std::string> speaker_names;  // index = SpeakerId
  std::string kind = "model";       // "model" | "server" | "persona"
  std::string direction = "forward";  // "forward" | "inverse"
  ParamSet params;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Builds the fine-tuning parameter schema from a persona-free pre-trained
// model: matching tensors are copied, the persona gate block is Xavier
// initialized, and the persona table starts at zero (rows are seeded per
// client or per speaker by the caller).
ParamSet expand_pretrained(const ParamSet& pretrained,
                           const ModelConfig& target_cfg, std::uint64_t seed);

}  // namespace fedgen
