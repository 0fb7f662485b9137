#ifndef LAYOUTPAINT_H
#define LAYOUTPAINT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes.
 */
typedef enum LpStatus {
  LP_STATUS_OK = 0,
  /*
   A required pointer argument was NULL.
   */
  LP_STATUS_NULL_ARGUMENT = 1,
  /*
   A string argument was not valid UTF-8.
   */
  LP_STATUS_INVALID_UTF8 = 2,
  /*
   The layout or config was rejected.
   */
  LP_STATUS_VALIDATION = 3,
  LP_STATUS_NOT_FOUND = 4,
  /*
   A backend or pipeline stage failed.
   */
  LP_STATUS_PIPELINE = 5,
  LP_STATUS_IO = 6,
  /*
   The output buffer is smaller than required.
   */
  LP_STATUS_BUFFER_TOO_SMALL = 7,
  /*
   A Rust panic was caught at the boundary.
   */
  LP_STATUS_INTERNAL = 8,
} LpStatus;

/*
 Engine with its configuration and worker pool.
 */
typedef struct LpEngine LpEngine;

/*
 A validated layout.
 */
typedef struct LpLayout LpLayout;

/*
 Result of a full run: the composed image plus the per-object images.
 */
typedef struct LpScene LpScene;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. Valid until
 the next call into this library on the same thread.
 */
const char *lp_last_error_message(void);

/*
 Creates an engine from a TOML config document; NULL means defaults.

 # Safety
 `config_toml` is NULL or a NUL-terminated string; `out` is writable.
 */
enum LpStatus lp_engine_new(const char *config_toml, struct LpEngine **out);

/*
 # Safety
 `engine` is NULL or a handle from [`lp_engine_new`] not yet freed.
 */
void lp_engine_free(struct LpEngine *engine);

/*
 Parses a layout document. Relative mask paths resolve against
 `base_dir` (NULL: the working directory).

 # Safety
 String arguments are NULL or NUL-terminated; `out` is writable.
 */
enum LpStatus lp_layout_from_json(const char *json, const char *base_dir, struct LpLayout **out);

/*
 # Safety
 `path` is NUL-terminated; `out` is writable.
 */
enum LpStatus lp_layout_load_file(const char *path, struct LpLayout **out);

/*
 Number of objects, or 0 for NULL.

 # Safety
 `layout` is NULL or a live handle.
 */
size_t lp_layout_object_count(const struct LpLayout *layout);

/*
 # Safety
 `layout` is NULL or a live handle.
 */
void lp_layout_free(struct LpLayout *layout);

/*
 Runs both stages in memory.

 # Safety
 Handles are live; `out` is writable.
 */
enum LpStatus lp_engine_run(const struct LpEngine *engine,
                            const struct LpLayout *layout,
                            struct LpScene **out);

/*
 Runs both stages and writes a job directory.

 # Safety
 Handles are live; `job_dir` is NUL-terminated; `out` is writable.
 */
enum LpStatus lp_engine_run_job(const struct LpEngine *engine,
                                const struct LpLayout *layout,
                                const char *job_dir,
                                struct LpScene **out);

/*
 Regenerates `object_id` of the job in `from_dir` into `job_dir`. The
 new seed is used when `seed` is non-NULL. The other objects are copied.

 # Safety
 `engine` is live; strings are NUL-terminated; `seed` is NULL or
 readable; `out` is writable.
 */
enum LpStatus lp_engine_regenerate_job(const struct LpEngine *engine,
                                       const char *from_dir,
                                       const char *object_id,
                                       const uint64_t *seed,
                                       const char *job_dir,
                                       struct LpScene **out);

/*
 Canvas size of the scene.

 # Safety
 `scene` is live; `height` and `width` are writable.
 */
enum LpStatus lp_scene_dims(const struct LpScene *scene, size_t *height, size_t *width);

/*
 Number of objects in the scene.

 # Safety
 `scene` is NULL or live.
 */
size_t lp_scene_object_count(const struct LpScene *scene);

/*
 Copies the composed image as row-major 8-bit RGB (`height·width·3`
 bytes).

 # Safety
 `scene` is live; `buf` has room for `len` bytes.
 */
enum LpStatus lp_scene_rgb8(const struct LpScene *scene, uint8_t *buf, size_t len);

/*
 Copies the stage-1 image of object `index` (layout order).

 # Safety
 `scene` is live; `buf` has room for `len` bytes.
 */
enum LpStatus lp_scene_object_rgb8(const struct LpScene *scene,
                                   size_t index,
                                   uint8_t *buf,
                                   size_t len);

/*
 # Safety
 `scene` is NULL or a live handle.
 */
void lp_scene_free(struct LpScene *scene);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LAYOUTPAINT_H */
