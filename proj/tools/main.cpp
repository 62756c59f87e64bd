// Command-line front end for the federated dialogue-generation library.
// Links the public C API only.

#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedgen.h"

namespace {

int exit_code(fedgen_status st) {
  switch (st) {
    case FEDGEN_OK:
      return 0;
    case FEDGEN_E_INVALID:
    case FEDGEN_E_CONFIG:
    case FEDGEN_E_IO:
      return 2;
    case FEDGEN_E_SCHEMA:
      return 3;
    case FEDGEN_E_DOMAIN:
      return 4;
    case FEDGEN_E_INTERNAL:
      return 1;
  }
  return 1;
}

struct CommonOpts {
  std::string config_path;
  std::string profile;
  std::string output_dir;
  std::string seed;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "Experiment config (JSON)");
  cmd->add_option("--profile", opts.profile,
                  "Defaults profile: tiny or paper");
  cmd->add_option("--output-dir", opts.output_dir, "Output directory");
  cmd->add_option("--seed", opts.seed, "Global seed");
  cmd->add_option("--set", opts.sets,
                  "Override a config key, e.g. --set fed.rounds=16");
}

// nullptr on failure (message already printed).
fedgen_config* open_config(const CommonOpts& opts) {
  fedgen_config* cfg = fedgen_config_open(
      opts.config_path.empty() ? nullptr : opts.config_path.c_str(),
      opts.profile.empty() ? nullptr : opts.profile.c_str());
  if (cfg == nullptr) {
    std::fprintf(stderr, "error: %s\n", fedgen_last_error());
    return nullptr;
  }
  auto set = [&](const std::string& key, const std::string& value) {
    if (fedgen_config_set(cfg, key.c_str(), value.c_str()) != FEDGEN_OK) {
      std::fprintf(stderr, "error: %s\n", fedgen_last_error());
      fedgen_config_close(cfg);
      return false;
    }
    return true;
  };
  for (const std::string& kv : opts.sets) {
    std::size_t eq = kv.find('=');
    if (eq == std::string::npos) {
      std::fprintf(stderr, "error: --set expects key=value, got '%s'\n",
                   kv.c_str());
      fedgen_config_close(cfg);
      return nullptr;
    }
    if (!set(kv.substr(0, eq), kv.substr(eq + 1))) return nullptr;
  }
  if (!opts.output_dir.empty() && !set("output_dir", opts.output_dir)) {
    return nullptr;
  }
  if (!opts.seed.empty() && !set("seed", opts.seed)) return nullptr;
  return cfg;
}

int report(fedgen_status st, const char* summary) {
  if (st != FEDGEN_OK) {
    std::fprintf(stderr, "error: %s\n", fedgen_last_error());
    return exit_code(st);
  }
  std::printf("%s\n", summary);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated persona-conditioned dialogue generation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(fedgen_version()));

  char summary[65536];
  char response[8192];

  CommonOpts pretrain_opts;
  bool inverse = false;
  CLI::App* pretrain = app.add_subcommand(
      "pretrain", "Train the persona-free base model on the open corpus");
  add_common(pretrain, pretrain_opts);
  pretrain->add_flag("--inverse", inverse,
                     "Train on swapped pairs (response -> question)");

  CommonOpts fedtune_opts;
  std::string pretrained_ckpt;
  CLI::App* fedtune = app.add_subcommand(
      "fedtune", "Federated fine-tuning from a pre-trained checkpoint");
  add_common(fedtune, fedtune_opts);
  fedtune->add_option("--pretrained", pretrained_ckpt,
                      "Pre-trained checkpoint")
      ->required();

  CommonOpts tune_opts;
  std::string tune_model, tune_personas, tune_inverse;
  CLI::App* tune = app.add_subcommand(
      "tune-rerank", "Grid-search reranker weights on the dev split");
  add_common(tune, tune_opts);
  tune->add_option("--model", tune_model, "Forward model checkpoint")
      ->required();
  tune->add_option("--personas", tune_personas,
                   "Per-client persona checkpoint directory");
  tune->add_option("--inverse-model", tune_inverse,
                   "Inverse model checkpoint")
      ->required();

  CommonOpts eval_opts;
  std::string eval_model, eval_personas, eval_inverse, eval_weights,
      eval_split;
  CLI::App* evaluate =
      app.add_subcommand("evaluate", "BLEU/perplexity report on a split");
  add_common(evaluate, eval_opts);
  evaluate->add_option("--model", eval_model, "Model checkpoint")->required();
  evaluate->add_option("--personas", eval_personas,
                       "Per-client persona checkpoint directory");
  evaluate->add_option("--inverse-model", eval_inverse,
                       "Inverse model checkpoint");
  evaluate->add_option("--weights", eval_weights, "Reranker weights JSON");
  evaluate->add_option("--split", eval_split, "train, dev or test");

  CommonOpts gen_opts;
  std::string gen_model, gen_personas, gen_inverse, gen_weights, gen_speaker,
      gen_question, gen_nbest;
  CLI::App* generate =
      app.add_subcommand("generate", "Decode one personalized response");
  add_common(generate, gen_opts);
  generate->add_option("--model", gen_model, "Model checkpoint")->required();
  generate->add_option("--personas", gen_personas,
                       "Per-client persona checkpoint directory");
  generate->add_option("--inverse-model", gen_inverse,
                       "Inverse model checkpoint");
  generate->add_option("--weights", gen_weights, "Reranker weights JSON");
  generate->add_option("--speaker", gen_speaker, "Responding speaker")
      ->required();
  generate->add_option("--question", gen_question, "Question text")
      ->required();
  generate->add_option("--nbest", gen_nbest,
                       "Write the N-best list (line-delimited JSON) here");

  CLI11_PARSE(app, argc, argv);

  if (pretrain->parsed()) {
    fedgen_config* cfg = open_config(pretrain_opts);
    if (cfg == nullptr) return 2;
    fedgen_status st = fedgen_run_pretrain(cfg, inverse ? 1 : 0, summary,
                                           sizeof(summary));
    fedgen_config_close(cfg);
    return report(st, summary);
  }
  if (fedtune->parsed()) {
    fedgen_config* cfg = open_config(fedtune_opts);
    if (cfg == nullptr) return 2;
    fedgen_status st = fedgen_run_fedtune(cfg, pretrained_ckpt.c_str(),
                                          summary, sizeof(summary));
    fedgen_config_close(cfg);
    return report(st, summary);
  }
  if (tune->parsed()) {
    fedgen_config* cfg = open_config(tune_opts);
    if (cfg == nullptr) return 2;
    fedgen_status st = fedgen_run_tune_rerank(
        cfg, tune_model.c_str(), tune_personas.c_str(), tune_inverse.c_str(),
        summary, sizeof(summary));
    fedgen_config_close(cfg);
    return report(st, summary);
  }
  if (evaluate->parsed()) {
    fedgen_config* cfg = open_config(eval_opts);
    if (cfg == nullptr) return 2;
    fedgen_status st = fedgen_run_evaluate(
        cfg, eval_model.c_str(), eval_personas.c_str(), eval_inverse.c_str(),
        eval_weights.c_str(), eval_split.c_str(), summary, sizeof(summary));
    fedgen_config_close(cfg);
    return report(st, summary);
  }
  if (generate->parsed()) {
    fedgen_config* cfg = open_config(gen_opts);
    if (cfg == nullptr) return 2;
    fedgen_status st = fedgen_generate(
        cfg, gen_model.c_str(), gen_personas.c_str(), gen_inverse.c_str(),
        gen_weights.c_str(), gen_speaker.c_str(), gen_question.c_str(),
        gen_nbest.c_str(), response, sizeof(response), summary,
        sizeof(summary));
    fedgen_config_close(cfg);
    if (st != FEDGEN_OK) {
      std::fprintf(stderr, "error: %s\n", fedgen_last_error());
      return exit_code(st);
    }
    std::printf("%s\n", response);
    return 0;
  }
  return 1;
}
