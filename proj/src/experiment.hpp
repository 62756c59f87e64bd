#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "decoding.hpp"
#include "federated.hpp"
#include "metrics.hpp"

namespace fedgen {

struct DataSource {
  std::string format;  // "script" | "cornell" | "pairs_jsonl"
  std::string path;
  std::string conversations_path;  // cornell only
};

// One fully validated, reproducible run description.
struct ExperimentConfig {
  int schema_version = 1;
  std::string profile = "tiny";
  std::uint64_t seed = 1;
  std::string output_dir = "out";
  std::string label = "run";

  DataSource pretrain_data;
  DataSource finetune_data;
  std::vector<std::string> speakers;  // fine-tune responder filter
  std::size_t speakers_top_k = 0;     // used when `speakers` is empty
  SplitSpec split;

  std::size_t vocab_cap = 500;
  std::size_t embed_dim = 32;
  std::size_t hidden_size = 32;
  std::size_t persona_dim = 16;
  std::size_t num_layers = 2;
  std::size_t max_len = 20;
  bool persona_enabled = true;

  TrainConfig train;
  std::size_t pretrain_epochs = 10;

  FedStrategy strategy = FedStrategy::kFedAvg;
  std::size_t local_epochs = 1;
  std::size_t rounds = 8;
  double mu = 0.01;
  double drop_fraction = 0.0;
  std::size_t workers = 1;
  bool private_update_scaling = false;
  bool emit_timings = false;

  BeamConfig beam;
  std::size_t nbest = 8;
  RerankGrid rerank;

  BleuConfig bleu_cfg;
  std::string eval_split = "test";

  // Directory the config file came from; data paths resolve against it.
  std::string base_dir = ".";
};

// Built-in defaults: "tiny" runs in seconds; "paper" mirrors the large
// experimental configuration (V=30000, H=100, 4 layers, beam 200, ...).
nlohmann::json profile_defaults(const std::string& name);

// Deep-merges `overlay` over `base` (objects recursively, scalars replace).
nlohmann::json merge_json(const nlohmann::json& base,
                          const nlohmann::json& overlay);

// Strict parse: unknown keys are rejected, types checked, environment
// overrides (FEDGEN_OUTPUT_DIR, FEDGEN_SEED) applied.
ExperimentConfig parse_config(const nlohmann::json& doc,
                              const std::string& base_dir);

// Reads the file, overlays it onto its profile's defaults, and returns
// the merged document plus the config directory. A non-empty
// profile_override wins over the file's own "profile" key.
std::pair<nlohmann::json, std::string> load_config_doc(
    const std::string& path, const std::string& profile_override = "");

// Sets a dotted key ("fed.rounds") to a value parsed as JSON when
// possible, as a string otherwise.
void set_config_key(nlohmann::json& doc, const std::string& dotted_key,
                    const std::string& value);

// Pipeline commands. Each returns a small JSON summary of what was
// produced; files land under cfg.output_dir.
nlohmann::json run_pretrain(const ExperimentConfig& cfg, bool inverse);
nlohmann::json run_fedtune(const ExperimentConfig& cfg,
                           const std::string& pretrained_ckpt);
nlohmann::json run_tune_rerank(const ExperimentConfig& cfg,
                               const std::string& model_ckpt,
                               const std::string& personas_dir,
                               const std::string& inverse_ckpt);
nlohmann::json run_evaluate(const ExperimentConfig& cfg,
                            const std::string& model_ckpt,
                            const std::string& personas_dir,
                            const std::string& inverse_ckpt,
                            const std::string& weights_path,
                            const std::string& split_name);
nlohmann::json run_generate(const ExperimentConfig& cfg,
                            const std::string& model_ckpt,
                            const std::string& personas_dir,
                            const std::string& inverse_ckpt,
                            const std::string& weights_path,
                            const std::string& speaker,
                            const std::string& question,
                            const std::string& nbest_path);

// Loads a checkpoint and, when it is a federated server checkpoint of a
// persona model, assembles the persona table from the per-client files
// in `personas_dir`. Returns the model plus its vocabulary and roster.
struct LoadedModel {
  Seq2SeqModel model;
  Vocab vocab;
  SpeakerRegistry speakers;
  std::string direction;
};
LoadedModel load_model(const std::string& ckpt_path,
                       const std::string& personas_dir);

}  // namespace fedgen
