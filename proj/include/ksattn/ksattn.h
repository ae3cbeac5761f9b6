/* SPDX-License-Identifier: Apache-2.0
 *
 * C interface to the knowledge-sharing attention library. All entry points
 * are synchronous and single-threaded; strings returned through out-params
 * are heap-allocated and released with ks_string_free.
 */
#ifndef KSATTN_KSATTN_H_
#define KSATTN_KSATTN_H_

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ks_status {
  KS_OK = 0,
  KS_ERR_USAGE = 1,
  KS_ERR_NUMERIC = 2,
  KS_ERR_GRADCHECK = 3,
  KS_ERR_IO = 4,
  KS_ERR_CONTRACT = 5,
  KS_ERR_SHAPE = 6,
  KS_ERR_INTERNAL = 7
} ks_status;

/* Opaque handle owning the last error message. Not thread-safe. */
typedef struct ks_ctx ks_ctx;

ks_ctx* ks_ctx_new(void);
void ks_ctx_free(ks_ctx* ctx);

/* Message of the most recent failing call on this handle; "" if none. The
 * pointer stays valid until the next call with this handle. */
const char* ks_last_error(const ks_ctx* ctx);

/* Process exit-code convention: 0 ok, 2 numeric failure, 3 failed
 * gradcheck, 1 everything else. */
int ks_status_exit_code(ks_status s);

/* Runs a training loop described by a JSON config (all keys optional;
 * unknown keys rejected). Writes metrics.csv, config.json and model.ksat
 * into out_dir. */
ks_status ks_train(ks_ctx* ctx, const char* config_json, const char* out_dir);

/* Scores a checkpoint on n_scenes seeded scenes. selection is "infer"
 * (plain inference path, one stream) or "all_train_streams" (every stream
 * of `mode`, teacher streams consuming ground-truth masks). Returns a JSON
 * report through *report_json. */
ks_status ks_eval(ks_ctx* ctx, const char* checkpoint_path, long long n_scenes,
                  const char* selection, const char* mode,
                  unsigned long long eval_seed, char** report_json);

/* Trains baseline, dual_share_a, dual_share_v and triple under one budget
 * and writes ablation.csv plus per-mode artifacts into out_dir. The table
 * is also returned through *table_csv when non-null. */
ks_status ks_ablate(ks_ctx* ctx, const char* config_json, const char* out_dir,
                    char** table_csv);

/* Central-difference and gradient-decomposition audit; *report receives the
 * per-op table even when the suite fails. */
ks_status ks_gradcheck(ks_ctx* ctx, int instances_per_op, char** report);

/* Renders one encoder attention map on the scene generated from scene_seed
 * as a binary PGM. row is a query token index or -1 for the row mean;
 * source is "student" or "teacher". */
ks_status ks_inspect(ks_ctx* ctx, const char* checkpoint_path,
                     unsigned long long scene_seed, long long layer,
                     long long head, long long row, const char* source,
                     const char* out_pgm);

/* Copies a checkpoint without its teacher parameters. */
ks_status ks_strip(ks_ctx* ctx, const char* checkpoint_path,
                   const char* out_path);

void ks_string_free(char* s);
const char* ks_version(void);

#ifdef __cplusplus
}
#endif

#endif /* KSATTN_KSATTN_H_ */
