#include "fedgen.h"

#include <cstring>
#include <string>

#include "common.hpp"
#include "experiment.hpp"

using fedgen::ErrorCode;

namespace {

constexpr const char* kVersion = "0.1.0";

thread_local std::string g_last_error = "";

fedgen_status status_from_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kDimension:
    case ErrorCode::kVocab:
      return FEDGEN_E_INVALID;
    case ErrorCode::kIo:
      return FEDGEN_E_IO;
    case ErrorCode::kFormat:
    case ErrorCode::kConfig:
      return FEDGEN_E_CONFIG;
    case ErrorCode::kSchema:
      return FEDGEN_E_SCHEMA;
    case ErrorCode::kDomain:
      return FEDGEN_E_DOMAIN;
    case ErrorCode::kAggregation:
    case ErrorCode::kInternal:
      return FEDGEN_E_INTERNAL;
  }
  return FEDGEN_E_INTERNAL;
}

void copy_out(const std::string& s, char* buf, size_t cap) {
  if (buf == nullptr || cap == 0) return;
  size_t n = std::min(s.size(), cap - 1);
  std::memcpy(buf, s.data(), n);
  buf[n] = '\0';
}

std::string arg_or_empty(const char* s) { return s == nullptr ? "" : s; }

template <typename Fn>
fedgen_status guarded(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return FEDGEN_OK;
  } catch (const fedgen::Error& e) {
    g_last_error = e.what();
    return status_from_code(e.code());
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return FEDGEN_E_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return FEDGEN_E_INTERNAL;
  }
}

}  // namespace

struct fedgen_config {
  nlohmann::json doc;
  std::string base_dir;

  fedgen::ExperimentConfig materialize() const {
    return fedgen::parse_config(doc, base_dir);
  }
};

extern "C" {

const char* fedgen_version(void) { return kVersion; }

const char* fedgen_last_error(void) { return g_last_error.c_str(); }

fedgen_config* fedgen_config_open(const char* path, const char* profile) {
  fedgen_config* cfg = nullptr;
  fedgen_status st = guarded([&]() {
    auto out = new fedgen_config();
    if (path != nullptr && path[0] != '\0') {
      std::string override_profile =
          profile != nullptr ? std::string(profile) : std::string();
      auto [doc, base_dir] = fedgen::load_config_doc(path, override_profile);
      out->doc = std::move(doc);
      out->base_dir = base_dir;
    } else {
      out->doc = fedgen::profile_defaults(
          profile != nullptr && profile[0] != '\0' ? profile : "tiny");
      out->base_dir = ".";
    }
    cfg = out;
  });
  (void)st;
  return cfg;
}

void fedgen_config_close(fedgen_config* cfg) { delete cfg; }

fedgen_status fedgen_config_set(fedgen_config* cfg, const char* key,
                                const char* value) {
  if (cfg == nullptr || key == nullptr || value == nullptr) {
    g_last_error = "null argument";
    return FEDGEN_E_INVALID;
  }
  return guarded([&]() { fedgen::set_config_key(cfg->doc, key, value); });
}

size_t fedgen_config_dump(const fedgen_config* cfg, char* buf, size_t cap) {
  if (cfg == nullptr) return 0;
  std::string s = cfg->doc.dump(2);
  copy_out(s, buf, cap);
  return s.size();
}

fedgen_status fedgen_run_pretrain(const fedgen_config* cfg, int inverse,
                                  char* summary_buf, size_t summary_cap) {
  if (cfg == nullptr) {
    g_last_error = "null config";
    return FEDGEN_E_INVALID;
  }
  return guarded([&]() {
    nlohmann::json summary =
        fedgen::run_pretrain(cfg->materialize(), inverse != 0);
    copy_out(summary.dump(), summary_buf, summary_cap);
  });
}

fedgen_status fedgen_run_fedtune(const fedgen_config* cfg,
                                 const char* pretrained_ckpt,
                                 char* summary_buf, size_t summary_cap) {
  if (cfg == nullptr || pretrained_ckpt == nullptr) {
    g_last_error = "null argument";
    return FEDGEN_E_INVALID;
  }
  return guarded([&]() {
    nlohmann::json summary =
        fedgen::run_fedtune(cfg->materialize(), pretrained_ckpt);
    copy_out(summary.dump(), summary_buf, summary_cap);
  });
}

fedgen_status fedgen_run_tune_rerank(const fedgen_config* cfg,
                                     const char* model_ckpt,
                                     const char* personas_dir,
                                     const char* inverse_ckpt,
                                     char* summary_buf, size_t summary_cap) {
  if (cfg == nullptr || model_ckpt == nullptr) {
    g_last_error = "null argument";
    return FEDGEN_E_INVALID;
  }
  return guarded([&]() {
    nlohmann::json summary = fedgen::run_tune_rerank(
        cfg->materialize(), model_ckpt, arg_or_empty(personas_dir),
        arg_or_empty(inverse_ckpt));
    copy_out(summary.dump(), summary_buf, summary_cap);
  });
}

fedgen_status fedgen_run_evaluate(const fedgen_config* cfg,
                                  const char* model_ckpt,
                                  const char* personas_dir,
                                  const char* inverse_ckpt,
                                  const char* weights_path, const char* split,
                                  char* summary_buf, size_t summary_cap) {
  if (cfg == nullptr || model_ckpt == nullptr) {
    g_last_error = "null argument";
    return FEDGEN_E_INVALID;
  }
  return guarded([&]() {
    nlohmann::json summary = fedgen::run_evaluate(
        cfg->materialize(), model_ckpt, arg_or_empty(personas_dir),
        arg_or_empty(inverse_ckpt), arg_or_empty(weights_path),
        arg_or_empty(split));
    copy_out(summary.dump(), summary_buf, summary_cap);
  });
}

fedgen_status fedgen_generate(const fedgen_config* cfg,
                              const char* model_ckpt,
                              const char* personas_dir,
                              const char* inverse_ckpt,
                              const char* weights_path, const char* speaker,
                              const char* question, const char* nbest_path,
                              char* response_buf, size_t response_cap,
                              char* summary_buf, size_t summary_cap) {
  if (cfg == nullptr || model_ckpt == nullptr || speaker == nullptr ||
      question == nullptr) {
    g_last_error = "null argument";
    return FEDGEN_E_INVALID;
  }
  return guarded([&]() {
    nlohmann::json summary = fedgen::run_generate(
        cfg->materialize(), model_ckpt, arg_or_empty(personas_dir),
        arg_or_empty(inverse_ckpt), arg_or_empty(weights_path), speaker,
        question, arg_or_empty(nbest_path));
    copy_out(summary["response"].get<std::string>(), response_buf,
             response_cap);
    copy_out(summary.dump(), summary_buf, summary_cap);
  });
}

}  // extern "C"
