/* C interface for the mdnet multi-domain network toolkit. */

#ifndef MDNET_H
#define MDNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status of an FFI call. Matches the CLI's exit codes.
 */
typedef enum MdnetStatus {
  /**
   * The call succeeded.
   */
  MDNET_STATUS_OK = 0,
  /**
   * The caller's fault: null or mismatched arguments, unknown domain,
   * malformed file.
   */
  MDNET_STATUS_USAGE = 1,
  /**
   * A runtime failure: I/O, numeric trouble, or an internal panic.
   */
  MDNET_STATUS_RUNTIME = 2,
} MdnetStatus;

/**
 * An immutable loaded network. Create with [`mdnet_load`], destroy with
 * [`mdnet_free`].
 */
typedef struct MdnetModel MdnetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread, or null if
 * the last call succeeded. The pointer stays valid until the next mdnet
 * call on the same thread.
 */
const char *mdnet_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mdnet_version(void);

/**
 * Loads a checkpoint file into a model handle. Returns null on failure
 * (see [`mdnet_last_error`]). Compressed checkpoints are reconstructed
 * on load; fused checkpoints evaluate their fused domain.
 */
struct MdnetModel *mdnet_load(const char *path);

/**
 * Releases a model handle. Passing null is a no-op.
 */
void mdnet_free(struct MdnetModel *model);

/**
 * Number of domains the model serves.
 */
size_t mdnet_domains(const struct MdnetModel *model);

/**
 * Number of classes of `domain`, or 0 if the domain does not exist.
 */
size_t mdnet_classes(const struct MdnetModel *model, size_t domain);

/**
 * Number of input channels the model expects.
 */
size_t mdnet_input_channels(const struct MdnetModel *model);

/**
 * Evaluates `count` images (row-major `[count, height, width, channels]`
 * f32) on `domain` and writes `count * classes` logits into `logits_out`.
 * `logits_len` must be exactly `count * mdnet_classes(model, domain)`.
 */
enum MdnetStatus mdnet_eval(const struct MdnetModel *model,
                            size_t domain,
                            const float *images,
                            size_t count,
                            size_t height,
                            size_t width,
                            size_t channels,
                            float *logits_out,
                            size_t logits_len);

/**
 * Classifies `count` images on `domain`, writing one label per image.
 * Ties resolve to the lowest class index.
 */
enum MdnetStatus mdnet_predict(const struct MdnetModel *model,
                               size_t domain,
                               const float *images,
                               size_t count,
                               size_t height,
                               size_t width,
                               size_t channels,
                               uint32_t *labels_out);

/**
 * Writes the hex digest of the model's shared convolutional weights into
 * `out` (at least 65 bytes: 64 hex characters plus NUL). Two models with
 * equal digests share their universal parameters byte for byte.
 */
enum MdnetStatus mdnet_universal_digest(const struct MdnetModel *model, char *out, size_t capacity);

/**
 * Folds `domain`'s adapters into the filters of the checkpoint at `src`
 * and writes the result to `dst`. The original records ride along, so
 * [`mdnet_unfuse_file`] restores `src` bitwise.
 */
enum MdnetStatus mdnet_fuse_file(const char *src, size_t domain, const char *dst);

/**
 * Inverse of [`mdnet_fuse_file`]: restores the original checkpoint
 * bitwise from a fused one.
 */
enum MdnetStatus mdnet_unfuse_file(const char *src, const char *dst);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MDNET_H */
