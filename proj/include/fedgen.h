/* C interface to the federated dialogue-generation library.
 *
 * Handles are opaque; every function that can fail returns a
 * fedgen_status, and fedgen_last_error() holds a human-readable message
 * for the calling thread's most recent failure.
 */
#ifndef FEDGEN_H_
#define FEDGEN_H_

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum fedgen_status {
  FEDGEN_OK = 0,
  FEDGEN_E_INVALID = 1,  /* bad argument or input */
  FEDGEN_E_CONFIG = 2,   /* configuration or input-file problem */
  FEDGEN_E_IO = 3,       /* filesystem problem */
  FEDGEN_E_SCHEMA = 4,   /* checkpoint/parameter schema mismatch */
  FEDGEN_E_DOMAIN = 5,   /* unknown speaker or similar domain error */
  FEDGEN_E_INTERNAL = 6  /* invariant violation */
} fedgen_status;

const char* fedgen_version(void);

/* Message for the current thread's most recent error; never NULL. */
const char* fedgen_last_error(void);

/* Experiment configuration: profile defaults ("tiny" or "paper"),
 * optionally overlaid with a JSON config file, then key overrides. */
typedef struct fedgen_config fedgen_config;

/* path may be NULL (pure profile defaults); profile may be NULL (the
 * file's profile key, or "tiny"). Returns NULL on failure. */
fedgen_config* fedgen_config_open(const char* path, const char* profile);
void fedgen_config_close(fedgen_config* cfg);

/* Sets a dotted key, e.g. ("fed.rounds", "16"). The value is parsed as
 * JSON when possible and treated as a string otherwise. */
fedgen_status fedgen_config_set(fedgen_config* cfg, const char* key,
                                const char* value);

/* Serializes the merged configuration into buf (JSON). Returns the
 * number of bytes that would be written; truncates when cap is small. */
size_t fedgen_config_dump(const fedgen_config* cfg, char* buf, size_t cap);

/* Pipeline commands. Artifacts land under the configured output_dir.
 * Each fills summary_buf (JSON, NUL-terminated, possibly truncated)
 * when the buffer is non-NULL. */
fedgen_status fedgen_run_pretrain(const fedgen_config* cfg, int inverse,
                                  char* summary_buf, size_t summary_cap);

fedgen_status fedgen_run_fedtune(const fedgen_config* cfg,
                                 const char* pretrained_ckpt,
                                 char* summary_buf, size_t summary_cap);

/* personas_dir may be NULL or empty when the checkpoint is
 * self-contained (persona-free models, full model checkpoints). */
fedgen_status fedgen_run_tune_rerank(const fedgen_config* cfg,
                                     const char* model_ckpt,
                                     const char* personas_dir,
                                     const char* inverse_ckpt,
                                     char* summary_buf, size_t summary_cap);

/* inverse_ckpt, weights_path, split may be NULL/empty for defaults. */
fedgen_status fedgen_run_evaluate(const fedgen_config* cfg,
                                  const char* model_ckpt,
                                  const char* personas_dir,
                                  const char* inverse_ckpt,
                                  const char* weights_path, const char* split,
                                  char* summary_buf, size_t summary_cap);

/* Decodes one response. nbest_path, inverse_ckpt and weights_path may be
 * NULL. response_buf receives the plain-text response. */
fedgen_status fedgen_generate(const fedgen_config* cfg,
                              const char* model_ckpt,
                              const char* personas_dir,
                              const char* inverse_ckpt,
                              const char* weights_path, const char* speaker,
                              const char* question, const char* nbest_path,
                              char* response_buf, size_t response_cap,
                              char* summary_buf, size_t summary_cap);

#ifdef __cplusplus
}
#endif

#endif /* FEDGEN_H_ */
