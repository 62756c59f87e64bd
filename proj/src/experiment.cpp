#include "experiment.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "common.hpp"
#include "rng.hpp"

namespace fs = std::filesystem;

namespace fedgen {

namespace {

nlohmann::json base_defaults() {
  nlohmann::json d;
  d["schema_version"] = 1;
  d["profile"] = "tiny";
  d["seed"] = 1;
  d["output_dir"] = "out";
  d["label"] = "run";
  d["data"] = {
      {"pretrain", {{"format", "script"}, {"path", ""}, {"conversations_path", ""}}},
      {"finetune", {{"format", "script"}, {"path", ""}, {"conversations_path", ""}}},
      {"speakers", nlohmann::json::array()},
      {"speakers_top_k", 0},
      {"split", {{"train", 0.8}, {"dev", 0.1}, {"test", 0.1}, {"seed", 13}}},
  };
  d["model"] = {{"vocab_cap", 500},   {"embed_dim", 32},
                {"hidden_size", 32},  {"persona_dim", 16},
                {"num_layers", 2},    {"max_len", 20},
                {"persona_enabled", true}};
  d["train"] = {{"batch_size", 8},
                {"lr", 0.15},
                {"dropout", 0.1},
                {"clip_threshold", 5.0},
                {"pretrain_epochs", 12}};
  d["fed"] = {{"strategy", "fedavg"},
              {"local_epochs", 2},
              {"rounds", 20},
              {"mu", 0.01},
              {"drop_fraction", 0.0},
              {"workers", 1},
              {"private_update_scaling", false},
              {"emit_timings", false}};
  d["decode"] = {{"beam_size", 8}, {"max_len", 20}, {"nbest", 8}};
  d["rerank"] = {{"lambda_min", 0.0}, {"lambda_max", 1.0},
                 {"lambda_step", 0.05}, {"gamma_min", -0.5},
                 {"gamma_max", 0.5},  {"gamma_step", 0.05}};
  d["eval"] = {{"bleu_order", 4}, {"bleu_smoothing", "add_one"},
               {"split", "test"}};
  return d;
}

}  // namespace

nlohmann::json profile_defaults(const std::string& name) {
  nlohmann::json d = base_defaults();
  if (name == "tiny") {
    return d;
  }
  if (name == "paper") {
    d["profile"] = "paper";
    d["model"] = {{"vocab_cap", 30000}, {"embed_dim", 100},
                  {"hidden_size", 100}, {"persona_dim", 128},
                  {"num_layers", 4},    {"max_len", 20},
                  {"persona_enabled", true}};
    d["train"] = {{"batch_size", 1024},
                  {"lr", 0.01},
                  {"dropout", 0.2},
                  {"clip_threshold", 5.0},
                  {"pretrain_epochs", 60}};
    d["fed"]["rounds"] = 90;
    d["fed"]["local_epochs"] = 1;
    d["decode"]["beam_size"] = 200;
    return d;
  }
  fail(ErrorCode::kConfig, "unknown profile '" + name + "'");
}

nlohmann::json merge_json(const nlohmann::json& base,
                          const nlohmann::json& overlay) {
  if (!base.is_object() || !overlay.is_object()) {
    return overlay;
  }
  nlohmann::json out = base;
  for (auto it = overlay.begin(); it != overlay.end(); ++it) {
    if (out.contains(it.key())) {
      out[it.key()] = merge_json(out[it.key()], it.value());
    } else {
      out[it.key()] = it.value();
    }
  }
  return out;
}

std::pair<nlohmann::json, std::string> load_config_doc(
    const std::string& path, const std::string& profile_override) {
  std::ifstream in(path);
  if (!in.is_open()) {
    fail(ErrorCode::kIo, "cannot open config '" + path + "'");
  }
  nlohmann::json file_doc = nlohmann::json::parse(in, nullptr, false);
  if (file_doc.is_discarded() || !file_doc.is_object()) {
    fail(ErrorCode::kConfig, "'" + path + "' is not a JSON object");
  }
  std::string profile = "tiny";
  if (file_doc.contains("profile")) {
    if (!file_doc["profile"].is_string()) {
      fail(ErrorCode::kConfig, "profile must be a string");
    }
    profile = file_doc["profile"].get<std::string>();
  }
  if (!profile_override.empty()) {
    profile = profile_override;
  }
  nlohmann::json doc = merge_json(profile_defaults(profile), file_doc);
  doc["profile"] = profile;
  std::string base_dir = fs::path(path).parent_path().string();
  if (base_dir.empty()) base_dir = ".";
  return {doc, base_dir};
}

void set_config_key(nlohmann::json& doc, const std::string& dotted_key,
                    const std::string& value) {
  if (dotted_key.empty()) {
    fail(ErrorCode::kConfig, "empty config key");
  }
  std::vector<std::string> parts;
  std::size_t pos = 0;
  while (true) {
    std::size_t dot = dotted_key.find('.', pos);
    if (dot == std::string::npos) {
      parts.push_back(dotted_key.substr(pos));
      break;
    }
    parts.push_back(dotted_key.substr(pos, dot - pos));
    pos = dot + 1;
  }
  nlohmann::json* cur = &doc;
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    cur = &(*cur)[parts[i]];
  }
  nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
  if (parsed.is_discarded()) {
    (*cur)[parts.back()] = value;
  } else {
    (*cur)[parts.back()] = parsed;
  }
}

namespace {

void check_keys(const nlohmann::json& obj, const std::string& where,
                const std::set<std::string>& allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (allowed.count(it.key()) == 0) {
      fail(ErrorCode::kConfig,
           "unknown config key '" + where + it.key() + "'");
    }
  }
}

double get_double(const nlohmann::json& obj, const std::string& key) {
  if (!obj.contains(key) || !obj[key].is_number()) {
    fail(ErrorCode::kConfig, "config key '" + key + "' must be a number");
  }
  return obj[key].get<double>();
}

std::size_t get_size(const nlohmann::json& obj, const std::string& key) {
  if (!obj.contains(key) || !obj[key].is_number_integer()) {
    fail(ErrorCode::kConfig,
         "config key '" + key + "' must be a non-negative integer");
  }
  if (obj[key].is_number_unsigned()) {
    return obj[key].get<std::size_t>();
  }
  long long v = obj[key].get<long long>();
  if (v < 0) {
    fail(ErrorCode::kConfig,
         "config key '" + key + "' must be a non-negative integer");
  }
  return static_cast<std::size_t>(v);
}

bool get_bool(const nlohmann::json& obj, const std::string& key) {
  if (!obj.contains(key) || !obj[key].is_boolean()) {
    fail(ErrorCode::kConfig, "config key '" + key + "' must be a boolean");
  }
  return obj[key].get<bool>();
}

std::string get_string(const nlohmann::json& obj, const std::string& key) {
  if (!obj.contains(key) || !obj[key].is_string()) {
    fail(ErrorCode::kConfig, "config key '" + key + "' must be a string");
  }
  return obj[key].get<std::string>();
}

DataSource parse_data_source(const nlohmann::json& obj,
                             const std::string& where) {
  check_keys(obj, where, {"format", "path", "conversations_path"});
  DataSource src;
  src.format = get_string(obj, "format");
  src.path = get_string(obj, "path");
  src.conversations_path = get_string(obj, "conversations_path");
  if (src.format != "script" && src.format != "cornell" &&
      src.format != "pairs_jsonl") {
    fail(ErrorCode::kConfig, "unknown data format '" + src.format + "'");
  }
  return src;
}

std::string resolve_path(const std::string& base, const std::string& path) {
  if (path.empty()) return path;
  fs::path p(path);
  if (p.is_absolute()) return path;
  return (fs::path(base) / p).string();
}

}  // namespace

ExperimentConfig parse_config(const nlohmann::json& doc,
                              const std::string& base_dir) {
  check_keys(doc, "", {"schema_version", "profile", "seed", "output_dir",
                       "label", "data", "model", "train", "fed", "decode",
                       "rerank", "eval"});
  ExperimentConfig cfg;
  cfg.base_dir = base_dir.empty() ? "." : base_dir;

  if (!doc.contains("schema_version") ||
      !doc["schema_version"].is_number_integer() ||
      doc["schema_version"].get<int>() != 1) {
    fail(ErrorCode::kConfig, "schema_version must be 1");
  }
  cfg.profile = get_string(doc, "profile");
  cfg.seed = get_size(doc, "seed");
  cfg.output_dir = get_string(doc, "output_dir");
  cfg.label = get_string(doc, "label");

  const nlohmann::json& data = doc.at("data");
  check_keys(data, "data.",
             {"pretrain", "finetune", "speakers", "speakers_top_k", "split"});
  cfg.pretrain_data = parse_data_source(data.at("pretrain"), "data.pretrain.");
  cfg.finetune_data = parse_data_source(data.at("finetune"), "data.finetune.");
  if (!data.at("speakers").is_array()) {
    fail(ErrorCode::kConfig, "data.speakers must be an array of strings");
  }
  for (const auto& s : data.at("speakers")) {
    if (!s.is_string()) {
      fail(ErrorCode::kConfig, "data.speakers must be an array of strings");
    }
    cfg.speakers.push_back(s.get<std::string>());
  }
  cfg.speakers_top_k = get_size(data, "speakers_top_k");
  const nlohmann::json& split = data.at("split");
  check_keys(split, "data.split.", {"train", "dev", "test", "seed"});
  cfg.split.train = get_double(split, "train");
  cfg.split.dev = get_double(split, "dev");
  cfg.split.test = get_double(split, "test");
  cfg.split.seed = get_size(split, "seed");

  const nlohmann::json& model = doc.at("model");
  check_keys(model, "model.",
             {"vocab_cap", "embed_dim", "hidden_size", "persona_dim",
              "num_layers", "max_len", "persona_enabled"});
  cfg.vocab_cap = get_size(model, "vocab_cap");
  cfg.embed_dim = get_size(model, "embed_dim");
  cfg.hidden_size = get_size(model, "hidden_size");
  cfg.persona_dim = get_size(model, "persona_dim");
  cfg.num_layers = get_size(model, "num_layers");
  cfg.max_len = get_size(model, "max_len");
  cfg.persona_enabled = get_bool(model, "persona_enabled");

  const nlohmann::json& train = doc.at("train");
  check_keys(train, "train.",
             {"batch_size", "lr", "dropout", "clip_threshold",
              "pretrain_epochs"});
  cfg.train.batch_size = get_size(train, "batch_size");
  cfg.train.lr = get_double(train, "lr");
  cfg.train.dropout_rate = get_double(train, "dropout");
  cfg.train.clip_threshold = get_double(train, "clip_threshold");
  cfg.pretrain_epochs = get_size(train, "pretrain_epochs");
  if (cfg.train.lr < 0.0 || cfg.train.dropout_rate < 0.0 ||
      cfg.train.dropout_rate >= 1.0 || cfg.train.clip_threshold <= 0.0 ||
      cfg.train.batch_size == 0) {
    fail(ErrorCode::kConfig, "invalid train section");
  }

  const nlohmann::json& fed = doc.at("fed");
  check_keys(fed, "fed.",
             {"strategy", "local_epochs", "rounds", "mu", "drop_fraction",
              "workers", "private_update_scaling", "emit_timings"});
  cfg.strategy = fed_strategy_from_name(get_string(fed, "strategy"));
  cfg.local_epochs = get_size(fed, "local_epochs");
  cfg.rounds = get_size(fed, "rounds");
  cfg.mu = get_double(fed, "mu");
  cfg.drop_fraction = get_double(fed, "drop_fraction");
  cfg.workers = get_size(fed, "workers");
  cfg.private_update_scaling = get_bool(fed, "private_update_scaling");
  cfg.emit_timings = get_bool(fed, "emit_timings");

  const nlohmann::json& decode = doc.at("decode");
  check_keys(decode, "decode.", {"beam_size", "max_len", "nbest"});
  cfg.beam.beam_size = get_size(decode, "beam_size");
  cfg.beam.max_len = get_size(decode, "max_len");
  cfg.nbest = get_size(decode, "nbest");
  if (cfg.beam.beam_size == 0 || cfg.beam.max_len == 0 || cfg.nbest == 0) {
    fail(ErrorCode::kConfig, "invalid decode section");
  }

  const nlohmann::json& rerank = doc.at("rerank");
  check_keys(rerank, "rerank.",
             {"lambda_min", "lambda_max", "lambda_step", "gamma_min",
              "gamma_max", "gamma_step"});
  cfg.rerank.lambda_min = get_double(rerank, "lambda_min");
  cfg.rerank.lambda_max = get_double(rerank, "lambda_max");
  cfg.rerank.lambda_step = get_double(rerank, "lambda_step");
  cfg.rerank.gamma_min = get_double(rerank, "gamma_min");
  cfg.rerank.gamma_max = get_double(rerank, "gamma_max");
  cfg.rerank.gamma_step = get_double(rerank, "gamma_step");

  const nlohmann::json& eval = doc.at("eval");
  check_keys(eval, "eval.", {"bleu_order", "bleu_smoothing", "split"});
  cfg.bleu_cfg.max_order = get_size(eval, "bleu_order");
  std::string smoothing = get_string(eval, "bleu_smoothing");
  if (smoothing == "add_one") {
    cfg.bleu_cfg.add_one_smoothing = true;
  } else if (smoothing == "none") {
    cfg.bleu_cfg.add_one_smoothing = false;
  } else {
    fail(ErrorCode::kConfig, "eval.bleu_smoothing must be add_one or none");
  }
  cfg.eval_split = get_string(eval, "split");
  if (cfg.eval_split != "train" && cfg.eval_split != "dev" &&
      cfg.eval_split != "test") {
    fail(ErrorCode::kConfig, "eval.split must be train, dev or test");
  }

  // Environment overrides for the two keys that move between machines.
  if (const char* env = std::getenv("FEDGEN_OUTPUT_DIR")) {
    cfg.output_dir = env;
  }
  if (const char* env = std::getenv("FEDGEN_SEED")) {
    try {
      cfg.seed = std::stoull(env);
    } catch (const std::exception&) {
      fail(ErrorCode::kConfig, "FEDGEN_SEED must be an unsigned integer");
    }
  }
  return cfg;
}

namespace {

std::vector<RawPair> load_pairs(const DataSource& src,
                                const std::string& base_dir,
                                const std::optional<std::set<std::string>>&
                                    filter) {
  if (src.path.empty()) {
    fail(ErrorCode::kConfig, "data path not set");
  }
  std::string path = resolve_path(base_dir, src.path);
  if (src.format == "pairs_jsonl") {
    std::vector<RawPair> pairs = read_pairs_jsonl(path);
    if (!filter) return pairs;
    std::vector<RawPair> kept;
    for (RawPair& p : pairs) {
      if (filter->count(p.speaker) != 0) kept.push_back(std::move(p));
    }
    return kept;
  }
  ParseResult parsed;
  if (src.format == "cornell") {
    if (src.conversations_path.empty()) {
      fail(ErrorCode::kConfig,
           "cornell format needs data.*.conversations_path");
    }
    parsed = parse_cornell(path,
                           resolve_path(base_dir, src.conversations_path));
  } else {
    parsed = parse_tv_script(path);
  }
  return make_raw_pairs(parsed.utterances, filter);
}

// Explicit speaker list when given, otherwise the top-k responders by
// pair count (count desc, name asc).
std::vector<std::string> choose_speakers(const ExperimentConfig& cfg,
                                         const std::vector<RawPair>& pairs) {
  if (!cfg.speakers.empty()) {
    return cfg.speakers;
  }
  if (cfg.speakers_top_k == 0) {
    fail(ErrorCode::kConfig,
         "set data.speakers or data.speakers_top_k for fine-tuning");
  }
  std::map<std::string, std::size_t> counts;
  for (const RawPair& p : pairs) ++counts[p.speaker];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(),
                                                          counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < ranked.size() && i < cfg.speakers_top_k; ++i) {
    out.push_back(ranked[i].first);
  }
  if (out.empty()) {
    fail(ErrorCode::kConfig, "no speakers found in the fine-tuning corpus");
  }
  return out;
}

Vocab vocab_from_tokens(const std::vector<std::string>& tokens) {
  Vocab v;
  if (tokens.size() < kNumReserved) {
    fail(ErrorCode::kFormat, "checkpoint vocabulary is too small");
  }
  for (std::size_t i = kNumReserved; i < tokens.size(); ++i) {
    v.add_token(tokens[i]);
  }
  return v;
}

std::vector<std::string> tokens_from_vocab(const Vocab& vocab) {
  std::vector<std::string> out;
  out.reserve(vocab.size());
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    out.push_back(vocab.token(static_cast<VocabId>(i)));
  }
  return out;
}

void ensure_dir(const std::string& path) {
  std::error_code ec;
  fs::create_directories(path, ec);
  if (ec) {
    fail(ErrorCode::kIo, "cannot create directory '" + path + "'");
  }
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out.is_open()) {
    fail(ErrorCode::kIo, "cannot write '" + path + "'");
  }
  return out;
}

// Fine-tuning corpus, split and encoded; shared by fedtune, tune-rerank
// and evaluate so the splits always line up for one config.
struct FinetuneData {
  SpeakerRegistry registry;
  std::vector<RawPair> raw_all;
  std::vector<DialoguePair> train, dev, test;
};

FinetuneData prepare_finetune(const ExperimentConfig& cfg, const Vocab& vocab,
                              const std::vector<std::string>& roster) {
  FinetuneData data;
  std::vector<std::string> names = roster;
  if (names.empty()) {
    std::vector<RawPair> unfiltered =
        load_pairs(cfg.finetune_data, cfg.base_dir, std::nullopt);
    names = choose_speakers(cfg, unfiltered);
  }
  data.registry = SpeakerRegistry(names);
  std::set<std::string> filter(data.registry.names().begin(),
                               data.registry.names().end());
  data.raw_all = load_pairs(cfg.finetune_data, cfg.base_dir, filter);
  if (data.raw_all.empty()) {
    fail(ErrorCode::kConfig,
         "no fine-tuning pairs for the configured speakers");
  }
  for (const std::string& name : data.registry.names()) {
    bool found = false;
    for (const RawPair& p : data.raw_all) {
      if (p.speaker == name) {
        found = true;
        break;
      }
    }
    if (!found) {
      fail(ErrorCode::kConfig,
           "speaker '" + name + "' has no pairs in the fine-tuning corpus");
    }
  }
  SplitResult split = split_pairs(data.raw_all, cfg.split);
  data.train = encode_pairs(split.train, vocab, data.registry, cfg.max_len);
  data.dev = encode_pairs(split.dev, vocab, data.registry, cfg.max_len);
  data.test = encode_pairs(split.test, vocab, data.registry, cfg.max_len);
  return data;
}

RerankWeights load_weights(const std::string& path) {
  if (path.empty()) return RerankWeights{};
  std::ifstream in(path);
  if (!in.is_open()) {
    fail(ErrorCode::kIo, "cannot open weights '" + path + "'");
  }
  nlohmann::json doc = nlohmann::json::parse(in, nullptr, false);
  if (doc.is_discarded() || !doc.contains("lambda") ||
      !doc.contains("gamma")) {
    fail(ErrorCode::kFormat, "'" + path + "' is not a weights file");
  }
  return RerankWeights{doc["lambda"].get<double>(),
                       doc["gamma"].get<double>()};
}

std::string detokenize_ids(const std::vector<VocabId>& ids,
                           const Vocab& vocab) {
  std::vector<std::string> words;
  for (VocabId id : ids) {
    if (id == kPadId || id == kBosId || id == kEosId) continue;
    words.push_back(vocab.token(id));
  }
  return detokenize(words);
}

}  // namespace

nlohmann::json run_pretrain(const ExperimentConfig& cfg, bool inverse) {
  std::vector<RawPair> raw =
      load_pairs(cfg.pretrain_data, cfg.base_dir, std::nullopt);
  SplitResult split = split_pairs(raw, cfg.split);
  if (inverse) {
    for (RawPair& p : split.train) std::swap(p.question, p.response);
  }
  Vocab vocab = build_vocab(split.train, cfg.vocab_cap);

  std::vector<std::string> speaker_names;
  {
    std::set<std::string> seen;
    for (const RawPair& p : split.train) seen.insert(p.speaker);
    speaker_names.assign(seen.begin(), seen.end());
  }
  SpeakerRegistry registry(speaker_names);
  std::vector<DialoguePair> train_pairs =
      encode_pairs(split.train, vocab, registry, cfg.max_len);

  ModelConfig mc;
  mc.vocab_size = vocab.size();
  mc.embed_dim = cfg.embed_dim;
  mc.hidden_size = cfg.hidden_size;
  mc.persona_dim = cfg.persona_dim;
  mc.num_layers = cfg.num_layers;
  mc.persona_enabled = false;
  mc.num_speakers = 0;
  mc.max_len = cfg.max_len;
  Seq2SeqModel model = Seq2SeqModel::build(
      mc, derive_seed(cfg.seed, 0x70726574ULL, inverse ? 1 : 0));

  std::string dir = cfg.output_dir +
                    (inverse ? "/pretrain_inverse" : "/pretrain");
  ensure_dir(dir);
  ensure_dir(cfg.output_dir + "/cache");
  write_pairs_jsonl(cfg.output_dir + "/cache/" +
                        (inverse ? "pretrain_inverse_pairs.jsonl"
                                 : "pretrain_pairs.jsonl"),
                    split.train);

  std::ofstream log = open_out(dir + "/log.jsonl");
  double nll = 0.0;
  for (std::size_t epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
    nll = train_epoch(model, train_pairs, cfg.train,
                      derive_seed(cfg.seed, 0x65706f63ULL, epoch,
                                  inverse ? 1 : 0));
    nlohmann::json row;
    row["epoch"] = epoch;
    row["train_nll"] = nll;
    log << row.dump() << "\n";
  }

  Checkpoint ckpt;
  ckpt.config = mc;
  ckpt.vocab_tokens = tokens_from_vocab(vocab);
  ckpt.kind = "model";
  ckpt.direction = inverse ? "inverse" : "forward";
  ckpt.params = model.params();
  std::string ckpt_path = dir + "/model.ckpt";
  save_checkpoint(ckpt_path, ckpt);

  nlohmann::json summary;
  summary["checkpoint"] = ckpt_path;
  summary["log"] = dir + "/log.jsonl";
  summary["epochs"] = cfg.pretrain_epochs;
  summary["final_train_nll"] = nll;
  summary["vocab_size"] = vocab.size();
  summary["train_pairs"] = train_pairs.size();
  return summary;
}

nlohmann::json run_fedtune(const ExperimentConfig& cfg,
                           const std::string& pretrained_ckpt) {
  Checkpoint pre = load_checkpoint(pretrained_ckpt);
  if (pre.config.persona_enabled || pre.direction != "forward") {
    fail(ErrorCode::kSchema,
         "fedtune needs a persona-free forward pre-trained checkpoint");
  }
  if (pre.config.embed_dim != cfg.embed_dim ||
      pre.config.hidden_size != cfg.hidden_size ||
      pre.config.num_layers != cfg.num_layers ||
      pre.config.max_len != cfg.max_len) {
    fail(ErrorCode::kSchema,
         "pre-trained checkpoint does not match the configured model shape");
  }
  Vocab vocab = vocab_from_tokens(pre.vocab_tokens);

  FinetuneData data = prepare_finetune(cfg, vocab, {});
  ensure_dir(cfg.output_dir + "/cache");
  write_pairs_jsonl(cfg.output_dir + "/cache/finetune_pairs.jsonl",
                    data.raw_all);

  ModelConfig target = pre.config;
  target.persona_enabled = cfg.persona_enabled;
  target.persona_dim = cfg.persona_dim;
  target.num_speakers = data.registry.size();
  ParamSet expanded = expand_pretrained(pre.params, target,
                                        derive_seed(cfg.seed, 0x65787061ULL));

  std::map<SpeakerId, ClientData> grouped;
  for (std::size_t i = 0; i < data.registry.size(); ++i) {
    SpeakerId id = static_cast<SpeakerId>(i);
    grouped[id] = ClientData{id, {}, {}};
  }
  for (const DialoguePair& p : data.train) grouped[p.speaker].train.push_back(p);
  for (const DialoguePair& p : data.dev) grouped[p.speaker].dev.push_back(p);
  std::vector<ClientData> client_data;
  client_data.reserve(grouped.size());
  for (auto& [id, cd] : grouped) client_data.push_back(std::move(cd));

  FedConfig fed;
  fed.strategy = cfg.strategy;
  fed.local_epochs = cfg.local_epochs;
  fed.total_rounds = cfg.rounds;
  fed.mu = cfg.mu;
  fed.drop_fraction = cfg.drop_fraction;
  fed.train = cfg.train;
  fed.seed = derive_seed(cfg.seed, 0x66656465ULL);
  fed.workers = cfg.workers;
  fed.private_update_scaling = cfg.private_update_scaling;

  std::string server_dir = cfg.output_dir + "/fedtune/server";
  std::string clients_dir = cfg.output_dir + "/fedtune/clients";
  ensure_dir(server_dir);
  ensure_dir(clients_dir);

  std::ofstream rounds_log = open_out(server_dir + "/rounds.jsonl");
  SimulationHooks hooks;
  hooks.on_round = [&](const RoundRecord& record) {
    nlohmann::json row;
    row["round"] = record.round;
    row["strategy"] = fed_strategy_name(record.strategy);
    std::vector<std::string> participants;
    for (SpeakerId id : record.participants) {
      participants.push_back(data.registry.name(id));
    }
    row["participants"] = participants;
    nlohmann::json per_client = nlohmann::json::object();
    for (const RoundClientMetrics& m : record.per_client) {
      nlohmann::json entry;
      entry["delta_l2"] = m.delta_l2;
      entry["train_nll"] = m.train_nll;
      entry["dev_ppl"] = m.dev_ppl;
      per_client[data.registry.name(m.client_id)] = entry;
    }
    row["per_client"] = per_client;
    row["aggregate_delta_l2"] = record.aggregate_delta_l2;
    row["wallclock_ms"] = cfg.emit_timings ? record.wallclock_ms : 0;
    rounds_log << row.dump() << "\n";
  };

  std::vector<ClientState> clients;
  SimulationResult sim =
      run_simulation(expanded, target, client_data, fed, clients, hooks);

  Checkpoint server_ckpt;
  server_ckpt.config = target;
  server_ckpt.vocab_tokens = pre.vocab_tokens;
  server_ckpt.speaker_names = data.registry.names();
  server_ckpt.kind = "server";
  server_ckpt.direction = "forward";
  server_ckpt.params = sim.server_federated;
  save_checkpoint(server_dir + "/model.ckpt", server_ckpt);

  if (target.persona_enabled) {
    for (const ClientState& client : clients) {
      const std::string& name = data.registry.name(client.client_id);
      Checkpoint pc;
      pc.config = target;
      pc.speaker_names = {name};
      pc.kind = "persona";
      pc.direction = "forward";
      Matrix row(1, target.persona_dim);
      Matrix full = client.model.persona_row(client.client_id);
      std::copy(full.data.begin(), full.data.end(), row.data.begin());
      pc.params.add(persona_table_name(), std::move(row), ParamTag::kPrivate);
      save_checkpoint(clients_dir + "/" + name + ".persona.ckpt", pc);
    }
  }

  double mean_dev_ppl = 0.0;
  std::size_t with_dev = 0;
  if (!sim.rounds.empty()) {
    for (const RoundClientMetrics& m : sim.rounds.back().per_client) {
      if (m.dev_ppl > 0.0) {
        mean_dev_ppl += m.dev_ppl;
        ++with_dev;
      }
    }
    if (with_dev > 0) mean_dev_ppl /= static_cast<double>(with_dev);
  }

  nlohmann::json summary;
  summary["server_checkpoint"] = server_dir + "/model.ckpt";
  summary["clients_dir"] = clients_dir;
  summary["rounds_log"] = server_dir + "/rounds.jsonl";
  summary["rounds"] = sim.rounds.size();
  summary["strategy"] = fed_strategy_name(cfg.strategy);
  summary["clients"] = clients.size();
  summary["final_mean_dev_ppl"] = mean_dev_ppl;
  return summary;
}

LoadedModel load_model(const std::string& ckpt_path,
                       const std::string& personas_dir) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  Vocab vocab = vocab_from_tokens(ckpt.vocab_tokens);
  SpeakerRegistry registry(ckpt.speaker_names);

  ParamSet params = ckpt.params;
  if (ckpt.config.persona_enabled &&
      !params.contains(persona_table_name())) {
    if (personas_dir.empty()) {
      fail(ErrorCode::kSchema,
           "checkpoint '" + ckpt_path +
               "' holds no persona table; pass the per-client persona "
               "directory");
    }
    Matrix table(ckpt.config.num_speakers, ckpt.config.persona_dim, 0.0);
    std::vector<bool> filled(ckpt.config.num_speakers, false);
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(personas_dir)) {
      if (entry.path().extension() == ".ckpt") {
        files.push_back(entry.path().string());
      }
    }
    std::sort(files.begin(), files.end());
    for (const std::string& file : files) {
      Checkpoint pc = load_checkpoint(file);
      if (pc.kind != "persona" || pc.speaker_names.size() != 1) {
        fail(ErrorCode::kSchema, "'" + file + "' is not a persona checkpoint");
      }
      const Matrix& row = pc.params.at(persona_table_name()).value;
      if (row.size() != ckpt.config.persona_dim) {
        fail(ErrorCode::kSchema,
             "persona dimension mismatch in '" + file + "'");
      }
      SpeakerId id = registry.id(pc.speaker_names[0]);
      std::copy(row.data.begin(), row.data.end(),
                table.data.begin() +
                    static_cast<std::ptrdiff_t>(
                        static_cast<std::size_t>(id) *
                        ckpt.config.persona_dim));
      filled[static_cast<std::size_t>(id)] = true;
    }
    for (std::size_t i = 0; i < filled.size(); ++i) {
      if (!filled[i]) {
        fail(ErrorCode::kSchema,
             "no persona checkpoint for speaker '" +
                 registry.name(static_cast<SpeakerId>(i)) + "'");
      }
    }
    params.add(persona_table_name(), std::move(table), ParamTag::kPrivate);
  }

  LoadedModel out{Seq2SeqModel(ckpt.config, std::move(params)),
                  std::move(vocab), std::move(registry), ckpt.direction};
  return out;
}

namespace {

Seq2SeqModel load_inverse_model(const std::string& path,
                                const Vocab& main_vocab) {
  LoadedModel inv = load_model(path, "");
  if (inv.direction != "inverse" || inv.model.config().persona_enabled) {
    fail(ErrorCode::kSchema,
         "'" + path + "' is not a persona-free inverse checkpoint");
  }
  if (inv.vocab.size() != main_vocab.size()) {
    fail(ErrorCode::kSchema,
         "inverse model vocabulary does not match the forward model");
  }
  for (std::size_t i = 0; i < main_vocab.size(); ++i) {
    if (inv.vocab.token(static_cast<VocabId>(i)) !=
        main_vocab.token(static_cast<VocabId>(i))) {
      fail(ErrorCode::kSchema,
           "inverse model vocabulary does not match the forward model");
    }
  }
  return std::move(inv.model);
}

const std::vector<DialoguePair>& pick_split(const FinetuneData& data,
                                            const std::string& name) {
  if (name == "train") return data.train;
  if (name == "dev") return data.dev;
  if (name == "test") return data.test;
  fail(ErrorCode::kInvalidArgument,
       "split must be train, dev or test, got '" + name + "'");
}

}  // namespace

nlohmann::json run_tune_rerank(const ExperimentConfig& cfg,
                               const std::string& model_ckpt,
                               const std::string& personas_dir,
                               const std::string& inverse_ckpt) {
  if (inverse_ckpt.empty()) {
    fail(ErrorCode::kConfig, "tune-rerank needs an inverse checkpoint");
  }
  LoadedModel main = load_model(model_ckpt, personas_dir);
  Seq2SeqModel inverse = load_inverse_model(inverse_ckpt, main.vocab);
  FinetuneData data =
      prepare_finetune(cfg, main.vocab, main.speakers.names());
  if (data.dev.empty()) {
    fail(ErrorCode::kInvalidArgument, "dev split is empty");
  }

  BeamConfig beam = cfg.beam;
  beam.nbest = cfg.nbest;
  MertResult result =
      mert_tune(main.model, &inverse, data.dev, beam, cfg.rerank);

  ensure_dir(cfg.output_dir + "/rerank");
  std::string weights_path = cfg.output_dir + "/rerank/weights.json";
  nlohmann::json weights;
  weights["lambda"] = result.weights.lambda;
  weights["gamma"] = result.weights.gamma;
  weights["dev_bleu"] = result.dev_bleu;
  weights["baseline_bleu"] = result.baseline_bleu;
  open_out(weights_path) << weights.dump(2) << "\n";

  nlohmann::json summary = weights;
  summary["weights_file"] = weights_path;
  summary["dev_pairs"] = data.dev.size();
  return summary;
}

nlohmann::json run_evaluate(const ExperimentConfig& cfg,
                            const std::string& model_ckpt,
                            const std::string& personas_dir,
                            const std::string& inverse_ckpt,
                            const std::string& weights_path,
                            const std::string& split_name) {
  LoadedModel main = load_model(model_ckpt, personas_dir);
  std::optional<Seq2SeqModel> inverse;
  if (!inverse_ckpt.empty()) {
    inverse = load_inverse_model(inverse_ckpt, main.vocab);
  }
  RerankWeights weights = load_weights(weights_path);
  FinetuneData data =
      prepare_finetune(cfg, main.vocab, main.speakers.names());
  std::string split = split_name.empty() ? cfg.eval_split : split_name;
  const std::vector<DialoguePair>& pairs = pick_split(data, split);
  if (pairs.empty()) {
    fail(ErrorCode::kInvalidArgument, "split '" + split + "' is empty");
  }

  BeamConfig beam = cfg.beam;
  beam.nbest = cfg.nbest;
  EvalReport report =
      evaluate(main.model, inverse ? &*inverse : nullptr, pairs, weights,
               beam, cfg.bleu_cfg);

  std::string dataset = fs::path(cfg.finetune_data.path).stem().string();
  nlohmann::json doc;
  doc["label"] = cfg.label;
  doc["dataset"] = dataset;
  doc["strategy"] = fed_strategy_name(cfg.strategy);
  doc["persona"] = main.model.config().persona_enabled;
  doc["split"] = split;
  doc["bleu"] = report.bleu;
  doc["perplexity"] = report.perplexity;
  doc["n_examples"] = report.n_examples;
  nlohmann::json per_speaker = nlohmann::json::object();
  for (const auto& [id, score] : report.per_speaker) {
    nlohmann::json entry;
    entry["bleu"] = score.bleu;
    entry["perplexity"] = score.perplexity;
    entry["n_examples"] = score.n_examples;
    per_speaker[data.registry.name(id)] = entry;
  }
  doc["per_speaker"] = per_speaker;

  ensure_dir(cfg.output_dir + "/eval");
  std::string json_path = cfg.output_dir + "/eval/report.json";
  std::string csv_path = cfg.output_dir + "/eval/report.csv";
  open_out(json_path) << doc.dump(2) << "\n";

  std::ofstream csv = open_out(csv_path);
  csv << "dataset,strategy,scope,name,bleu,perplexity,n_examples\n";
  csv << dataset << "," << fed_strategy_name(cfg.strategy) << ",corpus,all,"
      << report.bleu << "," << report.perplexity << "," << report.n_examples
      << "\n";
  for (const auto& [id, score] : report.per_speaker) {
    csv << dataset << "," << fed_strategy_name(cfg.strategy) << ",speaker,"
        << data.registry.name(id) << "," << score.bleu << ","
        << score.perplexity << "," << score.n_examples << "\n";
  }

  nlohmann::json summary;
  summary["report_json"] = json_path;
  summary["report_csv"] = csv_path;
  summary["bleu"] = report.bleu;
  summary["perplexity"] = report.perplexity;
  summary["n_examples"] = report.n_examples;
  return summary;
}

nlohmann::json run_generate(const ExperimentConfig& cfg,
                            const std::string& model_ckpt,
                            const std::string& personas_dir,
                            const std::string& inverse_ckpt,
                            const std::string& weights_path,
                            const std::string& speaker,
                            const std::string& question,
                            const std::string& nbest_path) {
  LoadedModel main = load_model(model_ckpt, personas_dir);
  std::optional<Seq2SeqModel> inverse;
  if (!inverse_ckpt.empty()) {
    inverse = load_inverse_model(inverse_ckpt, main.vocab);
  }
  RerankWeights weights = load_weights(weights_path);

  SpeakerId speaker_id = 0;
  if (main.model.config().persona_enabled) {
    if (!main.speakers.contains(speaker)) {
      std::ostringstream msg;
      msg << "unknown speaker '" << speaker << "'; known speakers:";
      for (const std::string& name : main.speakers.names()) {
        msg << " " << name;
      }
      fail(ErrorCode::kDomain, msg.str());
    }
    speaker_id = main.speakers.id(speaker);
  }

  std::vector<std::string> words = tokenize(question);
  if (words.empty()) {
    fail(ErrorCode::kInvalidArgument, "empty question");
  }
  if (words.size() > cfg.max_len) words.resize(cfg.max_len);
  std::vector<VocabId> ids = main.vocab.encode_all(words);

  BeamConfig beam = cfg.beam;
  beam.nbest = cfg.nbest;
  std::vector<ScoredHypothesis> nbest = build_nbest(
      main.model, inverse ? &*inverse : nullptr, ids, speaker_id, beam);
  std::size_t best = rerank_best(nbest, weights);
  std::string response = detokenize_ids(nbest[best].tokens, main.vocab);

  if (!nbest_path.empty()) {
    std::ofstream out = open_out(nbest_path);
    write_nbest_jsonl(out, "q0", nbest, main.vocab);
  }

  nlohmann::json summary;
  summary["speaker"] = speaker;
  summary["question"] = question;
  summary["response"] = response;
  summary["fwd_logp"] = nbest[best].fwd_logp;
  summary["hypotheses"] = nbest.size();
  if (!nbest_path.empty()) summary["nbest_file"] = nbest_path;
  return summary;
}

}  // namespace fedgen
