#ifndef NCCE_H
#define NCCE_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NcceStatus {
  NCCE_STATUS_OK = 0,
  NCCE_STATUS_NULL_POINTER = 1,
  NCCE_STATUS_INVALID_UTF8 = 2,
  NCCE_STATUS_INVALID_ARGUMENT = 3,
  NCCE_STATUS_IO = 4,
  NCCE_STATUS_DIMENSION_MISMATCH = 5,
  NCCE_STATUS_BUFFER_TOO_SMALL = 6,
  NCCE_STATUS_PANIC = 7,
  NCCE_STATUS_ERROR = 8,
} NcceStatus;

/**
 * Strategies with their embeddings and canonical texts.
 */
typedef struct NcceCatalog NcceCatalog;

/**
 * Hashed-feature text embedder.
 */
typedef struct NcceEmbedder NcceEmbedder;

/**
 * Trained preference model.
 */
typedef struct NcceModel NcceModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` and returns
 * its size including the NUL (1 when there is no error). Truncates to fit.
 *
 * # Safety
 * `buf` must be null or valid for `buf_len` bytes.
 */
size_t ncce_last_error_message(char *buf, size_t buf_len);

/**
 * # Safety
 * `out` must be valid for writes.
 */
enum NcceStatus ncce_embedder_new(size_t dimension, uint64_t seed, struct NcceEmbedder **out);

/**
 * # Safety
 * `embedder` must come from [`ncce_embedder_new`] and not be used afterwards.
 */
void ncce_embedder_free(struct NcceEmbedder *embedder);

/**
 * 0 for a null handle.
 *
 * # Safety
 * `embedder` must be null or a live handle.
 */
size_t ncce_embedder_dimension(const struct NcceEmbedder *embedder);

/**
 * Unit-norm embedding of `text` into `out`, which must hold exactly the
 * embedder's dimension.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` valid for `out_len` doubles.
 */
enum NcceStatus ncce_embed_text(const struct NcceEmbedder *embedder,
                                const char *text,
                                double *out,
                                size_t out_len);

/**
 * Loads a checkpoint written by `ncce train` or `ncce evolve`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for writes.
 */
enum NcceStatus ncce_model_load(const char *path, struct NcceModel **out);

/**
 * # Safety
 * `model` must come from [`ncce_model_load`] and not be used afterwards.
 */
void ncce_model_free(struct NcceModel *model);

/**
 * 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t ncce_model_embedding_dim(const struct NcceModel *model);

/**
 * Logit and preference score `σ(logit/τ)` for an instance embedding `e` and
 * a strategy embedding `h`. Either output may be null.
 *
 * # Safety
 * `e` and `h` must be valid for `e_len` and `h_len` doubles.
 */
enum NcceStatus ncce_model_score(const struct NcceModel *model,
                                 const double *e,
                                 size_t e_len,
                                 const double *h,
                                 size_t h_len,
                                 double *out_logit,
                                 double *out_score);

/**
 * Loads a catalog (JSONL) and embeds every strategy's canonical text.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `embedder` a live handle and
 * `out` valid for writes.
 */
enum NcceStatus ncce_catalog_load(const char *path,
                                  const struct NcceEmbedder *embedder,
                                  struct NcceCatalog **out);

/**
 * # Safety
 * `catalog` must come from [`ncce_catalog_load`] and not be used afterwards.
 */
void ncce_catalog_free(struct NcceCatalog *catalog);

/**
 * 0 for a null handle.
 *
 * # Safety
 * `catalog` must be null or a live handle.
 */
size_t ncce_catalog_len(const struct NcceCatalog *catalog);

/**
 * Id of strategy `index`.
 *
 * # Safety
 * `buf` must be null or valid for `buf_len` bytes; `needed` null or valid.
 */
enum NcceStatus ncce_catalog_id(const struct NcceCatalog *catalog,
                                size_t index,
                                char *buf,
                                size_t buf_len,
                                size_t *needed);

/**
 * Canonical text of strategy `index`, the string its embedding is built from.
 *
 * # Safety
 * `buf` must be null or valid for `buf_len` bytes; `needed` null or valid.
 */
enum NcceStatus ncce_catalog_canonical_text(const struct NcceCatalog *catalog,
                                            size_t index,
                                            char *buf,
                                            size_t buf_len,
                                            size_t *needed);

/**
 * Catalog index with the highest logit for `text`; ties go to the lowest
 * index. The embedder must be the one the model was trained with.
 *
 * # Safety
 * All handles must be live and `text` a NUL-terminated string.
 */
enum NcceStatus ncce_route(const struct NcceModel *model,
                           const struct NcceCatalog *catalog,
                           const struct NcceEmbedder *embedder,
                           const char *text,
                           size_t *out_index);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NCCE_H */
