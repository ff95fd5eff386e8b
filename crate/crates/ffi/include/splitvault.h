#ifndef SPLITVAULT_H
#define SPLITVAULT_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SvStatus {
  SV_STATUS_OK = 0,
  SV_STATUS_INVALID_ARGUMENT = 1,
  SV_STATUS_BAD_PASSWORD = 2,
  SV_STATUS_NOT_FOUND = 3,
  SV_STATUS_CONFLICT = 4,
  SV_STATUS_TOKEN_UNREACHABLE = 5,
  SV_STATUS_TOKEN_DENIED = 6,
  SV_STATUS_CORRUPT = 7,
  SV_STATUS_IO = 8,
  SV_STATUS_INTERNAL = 9,
  SV_STATUS_PANIC = 10,
} SvStatus;

/**
 * Decrypted document. Wiped by [`sv_buffer_destroy`].
 */
typedef struct SvBuffer SvBuffer;

/**
 * Connection to a token service.
 */
typedef struct SvToken SvToken;

/**
 * Unlocked phone-side document store.
 */
typedef struct SvVault SvVault;

typedef struct SvEntropy {
  double exact_log2;
  double asymptotic_log2;
  double refined_log2;
  double combined_exact_log2;
  double combined_asymptotic_log2;
  double combined_refined_log2;
  double upper_bound_bits;
} SvEntropy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread. Valid until the next
 * call into this library on the same thread; empty after a success.
 */
const char *sv_last_error_message(void);

/**
 * Splits `len` key bytes into two halves written to `half_a` and `half_b`,
 * each `len` bytes. Either half alone is uniformly distributed.
 *
 * # Safety
 * `key` must be readable and both outputs writable for `len` bytes.
 */
enum SvStatus sv_split(const uint8_t *key, size_t len, uint8_t *half_a, uint8_t *half_b);

/**
 * Recombines two `len`-byte halves into `out`.
 *
 * # Safety
 * Inputs must be readable and `out` writable for `len` bytes.
 */
enum SvStatus sv_combine(const uint8_t *half_a, const uint8_t *half_b, size_t len, uint8_t *out);

/**
 * Connects to a token service at `addr` ("host:port"). `device_id` may be
 * null for a personal token; enterprise tokens require one.
 *
 * # Safety
 * Strings must be NUL-terminated; `out` must be writable.
 */
enum SvStatus sv_token_connect(const char *addr, const char *device_id, struct SvToken **out);

/**
 * # Safety
 * `token` must come from [`sv_token_connect`] and not be used afterwards.
 */
void sv_token_free(struct SvToken *token);

/**
 * Creates a new store at `path` and returns it unlocked. `kdf_iterations`
 * of 0 selects the default cost.
 *
 * # Safety
 * `path` must be NUL-terminated, `password` readable for `password_len`
 * bytes and `out` writable.
 */
enum SvStatus sv_vault_create(const char *path,
                              const uint8_t *password,
                              size_t password_len,
                              uint32_t kdf_iterations,
                              struct SvVault **out);

/**
 * Opens and unlocks an existing store.
 *
 * # Safety
 * As for [`sv_vault_create`].
 */
enum SvStatus sv_vault_open(const char *path,
                            const uint8_t *password,
                            size_t password_len,
                            struct SvVault **out);

/**
 * Encrypts `len` bytes as document `doc_id`, storing the token's part on
 * `token`.
 *
 * # Safety
 * Handles must be live, `doc_id` NUL-terminated, `data` readable for `len`.
 */
enum SvStatus sv_vault_encrypt(struct SvVault *vault,
                               struct SvToken *token,
                               const char *doc_id,
                               const uint8_t *data,
                               size_t len);

/**
 * Decrypts document `doc_id` into a new buffer.
 *
 * # Safety
 * Handles must be live, `doc_id` NUL-terminated, `out` writable.
 */
enum SvStatus sv_vault_read(struct SvVault *vault,
                            struct SvToken *token,
                            const char *doc_id,
                            struct SvBuffer **out);

/**
 * Removes document `doc_id` from the store and the token.
 *
 * # Safety
 * Handles must be live and `doc_id` NUL-terminated.
 */
enum SvStatus sv_vault_remove(struct SvVault *vault, struct SvToken *token, const char *doc_id);

/**
 * Locks and releases a store handle.
 *
 * # Safety
 * `vault` must come from this library and not be used afterwards.
 */
void sv_vault_free(struct SvVault *vault);

/**
 * Pointer to the buffer's bytes, with the length in `len`. Null once the
 * buffer has been destroyed.
 *
 * # Safety
 * `buffer` must be live; `len` must be writable.
 */
const uint8_t *sv_buffer_data(const struct SvBuffer *buffer, size_t *len);

/**
 * Wipes and releases a document buffer.
 *
 * # Safety
 * `buffer` must come from [`sv_vault_read`] and not be used afterwards.
 */
void sv_buffer_destroy(struct SvBuffer *buffer);

/**
 * Entropy of `passes` card passes over a `deck_size`-card deck with
 * `discarded` cards thrown out of each.
 *
 * # Safety
 * `out` must be writable.
 */
enum SvStatus sv_entropy_estimate(size_t deck_size,
                                  size_t discarded,
                                  uint32_t passes,
                                  struct SvEntropy *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPLITVAULT_H */
