#ifndef CCMLOPS_CCMLOPS_H
#define CCMLOPS_CCMLOPS_H

/*
 * C interface to the ccmlops cell-counting pipeline.
 *
 * Conventions:
 *  - Every function returns a ccm_status; CCM_OK is 0.
 *  - On failure, ccm_last_error() describes the error for the calling thread
 *    until its next ccm_* call.
 *  - Structured results are returned as UTF-8 JSON in *out strings that the
 *    caller releases with ccm_free_string().
 *  - Handles are opaque and must be released with their *_close/_free/
 *    _destroy function. A handle may be used from several threads unless
 *    noted otherwise.
 */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define CCM_API __declspec(dllexport)
#elif defined(__GNUC__)
#define CCM_API __attribute__((visibility("default")))
#else
#define CCM_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ccm_status {
  CCM_OK = 0,
  CCM_ERR_INVALID_ARGUMENT = 1, /* bad config, flag value or payload */
  CCM_ERR_SHAPE = 2,
  CCM_ERR_IO = 3,
  CCM_ERR_CORRUPT = 4, /* digest mismatch, truncated or malformed file */
  CCM_ERR_NOT_FOUND = 5,
  CCM_ERR_REFUSED = 6, /* duplicate run id, promotion below threshold, ... */
  CCM_ERR_NO_MODEL = 7,
  CCM_ERR_INTERNAL = 8
} ccm_status;

typedef struct ccm_store ccm_store;
typedef struct ccm_network ccm_network;
typedef struct ccm_server ccm_server;

CCM_API const char* ccm_version(void);
CCM_API const char* ccm_last_error(void);
CCM_API const char* ccm_status_name(ccm_status status);
CCM_API void ccm_free_string(char* s);

/* "trace", "debug", "info", "warn", "error" or "off". */
CCM_API ccm_status ccm_set_log_level(const char* level);

/*
 * Resolves a pipeline config from an optional file and "a.b.c=value"
 * overrides (applied in order, after the file).
 * *out_json: {"config": {...}, "config_hash": "..."}.
 */
CCM_API ccm_status ccm_config_resolve(const char* path_or_null, const char* const* overrides,
                                      size_t n_overrides, char** out_json);

/* Pipeline operations. config_json is a full or partial pipeline config. */

/* Writes count synthetic images (count <= 0: synth_count) to out_dir. */
CCM_API ccm_status ccm_synth(const char* config_json, const char* out_dir, int count,
                             char** out_json);

/* Splits the dataset under data_root by train.seed and writes out_path. */
CCM_API ccm_status ccm_split(const char* config_json, const char* data_root,
                             const char* out_path, char** out_json);

/* One training run on paths.data_root, recorded in paths.run_store.
 * *out_json is the run record. A failed run still returns CCM_OK; check
 * its "status". */
CCM_API ccm_status ccm_train(const char* config_json, char** out_json);

/* Cross product of seeds and losses ("dice", "focal").
 * *out_json: {"summary": [...], "runs": [...], "table": "..."}. */
CCM_API ccm_status ccm_ablate(const char* config_json, const uint64_t* seeds, size_t n_seeds,
                              const char* const* losses, size_t n_losses, int jobs,
                              char** out_json);

/* Evaluates weights on data_root (restricted to the validation ids of
 * split_path when given). *out_json is the evaluation report. */
CCM_API ccm_status ccm_evaluate(const char* config_json, const char* weights_path,
                                const char* data_root, const char* split_path_or_null,
                                char** out_json);

/* Per-run emissions and the per-loss comparison for a run store.
 * *out_json: {"runs": [...], "compare": [...], "table": "...", "csv": "..."}. */
CCM_API ccm_status ccm_emissions_report(const char* store_root, char** out_json);

/* Networks */

CCM_API ccm_status ccm_network_load(const char* weights_path, ccm_network** out);
CCM_API void ccm_network_free(ccm_network* net);
/* {"config": ..., "config_hash", "weights_hash", "layers": [...], "parameters"} */
CCM_API ccm_status ccm_network_info(const ccm_network* net, char** out_json);
/* Counts cells in one image file. postproc_json may be NULL for defaults.
 * *out_json has the same fields as a /predict response. */
CCM_API ccm_status ccm_network_predict(const ccm_network* net, const char* image_path,
                                       const char* postproc_json, char** out_json);
/* Grad-CAM overlay of one image written as PNG to out_png. layer NULL or ""
 * selects the default layer. */
CCM_API ccm_status ccm_network_explain(const ccm_network* net, const char* image_path,
                                       const char* layer, double alpha, const char* out_png,
                                       char** out_json);

/* Run store and registry */

CCM_API ccm_status ccm_store_open(const char* root, double promotion_threshold, ccm_store** out);
CCM_API void ccm_store_close(ccm_store* store);
/* filter_json: {"loss"?, "seed"?, "status"?, "min_det_f1"?}, NULL for all. */
CCM_API ccm_status ccm_store_query(const ccm_store* store, const char* filter_json,
                                   char** out_json);
CCM_API ccm_status ccm_store_get(const ccm_store* store, const char* run_id, char** out_json);
CCM_API ccm_status ccm_store_append(ccm_store* store, const char* record_json);
CCM_API ccm_status ccm_store_promote(ccm_store* store, const char* run_id, const char* note,
                                     char** out_json);
CCM_API ccm_status ccm_store_registry(const ccm_store* store, char** out_json);
/* JSON null when nothing is active. */
CCM_API ccm_status ccm_store_active(const ccm_store* store, char** out_json);
/* policy_json: {"periodic_days"?, "honour_drift_flag"?}. now_unix_s <= 0
 * means the current time. *out_json: {"due": bool, "reason": "..."}. */
CCM_API ccm_status ccm_store_retrain_due(const ccm_store* store, const char* policy_json,
                                         double now_unix_s, char** out_json);

/* Inference service */

/* service_json: {"store_root", "promotion_threshold"?, "drift"?, "explain_alpha"?} */
CCM_API ccm_status ccm_server_create(const char* service_json, ccm_server** out);
/* port 0 picks a free port, reported in *bound_port. */
CCM_API ccm_status ccm_server_bind(ccm_server* server, const char* host, int port,
                                   int* bound_port);
/* Blocks until ccm_server_stop() is called from another thread. */
CCM_API ccm_status ccm_server_run(ccm_server* server);
CCM_API ccm_status ccm_server_stop(ccm_server* server);
/* Evaluates the open monitoring window now. *out_json is a drift report or
 * null when no monitor is active. */
CCM_API ccm_status ccm_server_monitor_tick(ccm_server* server, char** out_json);
CCM_API void ccm_server_destroy(ccm_server* server);

#ifdef __cplusplus
}
#endif

#endif /* CCMLOPS_CCMLOPS_H */
