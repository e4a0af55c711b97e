/* C interface to the anyup feature upsampler.
 *
 * Every function that can fail returns an anyup_status. On failure the
 * message is available from anyup_last_error() on the calling thread until
 * the next failing call. Objects returned through out-parameters are owned by
 * the caller and released with the matching *_free function.
 *
 * Feature maps and images are row-major height x width x channels float32.
 */
#ifndef ANYUP_H
#define ANYUP_H

#include <stddef.h>
#include <stdint.h>

#if defined(ANYUP_BUILDING_LIBRARY)
#define ANYUP_API __attribute__((visibility("default")))
#else
#define ANYUP_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum anyup_status {
  ANYUP_OK = 0,
  ANYUP_ERR_IO = 1,
  ANYUP_ERR_FORMAT = 2,
  ANYUP_ERR_UNSUPPORTED = 3,
  ANYUP_ERR_SHAPE = 4,
  ANYUP_ERR_VALIDATION = 5,
  ANYUP_ERR_NUMERICAL = 6,
  ANYUP_ERR_INVALID_ARGUMENT = 7,
  ANYUP_ERR_INTERNAL = 8
} anyup_status;

typedef struct anyup_features anyup_features;
typedef struct anyup_image anyup_image;
typedef struct anyup_model anyup_model;
typedef struct anyup_report anyup_report;

ANYUP_API const char* anyup_version(void);
ANYUP_API const char* anyup_status_string(anyup_status status);
/* Message of the last failure on this thread; "" if none. */
ANYUP_API const char* anyup_last_error(void);

/* ---- feature maps ---------------------------------------------------- */

/* data may be NULL for a zero-filled map. */
ANYUP_API anyup_status anyup_features_create(int height, int width, int channels, const float* data,
                                             anyup_features** out);
ANYUP_API anyup_status anyup_features_read(const char* path, anyup_features** out);
ANYUP_API anyup_status anyup_features_write(const anyup_features* features, const char* path);
ANYUP_API anyup_status anyup_features_shape(const anyup_features* features, int* height, int* width, int* channels);
ANYUP_API const float* anyup_features_data(const anyup_features* features);
ANYUP_API void anyup_features_free(anyup_features* features);

/* ---- guidance images (RGB in [0, 1]) ---------------------------------- */

ANYUP_API anyup_status anyup_image_create(int height, int width, const float* rgb, anyup_image** out);
ANYUP_API anyup_status anyup_image_load(const char* path, anyup_image** out);
ANYUP_API anyup_status anyup_image_save(const anyup_image* image, const char* path);
/* Procedural polygons-on-gradient scene, size x size. */
ANYUP_API anyup_status anyup_image_synthetic(int size, uint64_t seed, anyup_image** out);
/* Bilinear resize. */
ANYUP_API anyup_status anyup_image_resize(const anyup_image* image, int height, int width, anyup_image** out);
ANYUP_API anyup_status anyup_image_shape(const anyup_image* image, int* height, int* width);
ANYUP_API const float* anyup_image_data(const anyup_image* image);
ANYUP_API void anyup_image_free(anyup_image* image);

/* ---- toy encoder ------------------------------------------------------ */

typedef struct anyup_encoder_options {
  int patch_size;
  int feature_dim;
  int hidden_dim;
  uint64_t seed;
} anyup_encoder_options;

ANYUP_API void anyup_encoder_options_default(anyup_encoder_options* options);
/* stride 0 encodes non-overlapping patches; otherwise every stride-spaced window. */
ANYUP_API anyup_status anyup_encode(const anyup_image* image, const anyup_encoder_options* options, int stride,
                                    anyup_features** out);

/* ---- upsampler -------------------------------------------------------- */

typedef struct anyup_model_options {
  int query_dim;
  int key_dim;
  int num_res_blocks;
  int window_radius;
  int pos_enc_frequencies;
  int agnostic_m;
  int agnostic_k;
  int image_dim;
  uint64_t seed;
} anyup_model_options;

ANYUP_API void anyup_model_options_default(anyup_model_options* options);
/* Freshly initialized, untrained weights. */
ANYUP_API anyup_status anyup_model_create(const anyup_model_options* options, anyup_model** out);
ANYUP_API anyup_status anyup_model_load(const char* checkpoint_dir, anyup_model** out);
/* Writes weights only (no optimizer state) as a checkpoint directory. */
ANYUP_API anyup_status anyup_model_save(const anyup_model* model, const char* checkpoint_dir);
ANYUP_API anyup_status anyup_model_options_get(const anyup_model* model, anyup_model_options* options);
/* The radius is a pure inference setting; weights do not depend on it. */
ANYUP_API anyup_status anyup_model_set_window_radius(anyup_model* model, int radius);
ANYUP_API void anyup_model_free(anyup_model* model);

/* out_height / out_width of 0 select the guidance image resolution. */
ANYUP_API anyup_status anyup_upsample(const anyup_model* model, const anyup_image* image,
                                      const anyup_features* features, int out_height, int out_width,
                                      anyup_features** out);

/* ---- training --------------------------------------------------------- */

typedef struct anyup_train_row {
  int64_t step;
  double loss_main;
  double loss_input;
  double loss_self;
  double loss_total;
  double wall_ms;
} anyup_train_row;

typedef void (*anyup_train_callback)(const anyup_train_row* row, void* user_data);

typedef struct anyup_train_options {
  double learning_rate;
  int batch_size;
  int crops_per_image;
  int steps;
  int image_size;
  int crop_size;
  uint64_t seed;
  double weight_main;
  double weight_input;
  double weight_self;
  double weight_decay;
  double grad_clip;
  int checkpoint_interval;
  int source_augmentation; /* nonzero: random flips/rotations and RGB order per drawn image */
  anyup_encoder_options encoder;
  anyup_model_options model;

  /* Dataset: PNG paths, or synthetic_count procedural images when
   * image_path_count is 0. */
  const char* const* image_paths;
  int image_path_count;
  int synthetic_count;

  const char* out_dir;     /* required */
  const char* resume_from; /* optional checkpoint directory */
  anyup_train_callback on_step;
  void (*on_warning)(const char* message, void* user_data); /* unreadable images */
  void* user_data;
} anyup_train_options;

ANYUP_API void anyup_train_options_default(anyup_train_options* options);
/* Trains and writes the final checkpoint and train_log.csv to out_dir.
 * model may be NULL. */
ANYUP_API anyup_status anyup_train(const anyup_train_options* options, anyup_model** model);

/* ---- evaluation ------------------------------------------------------- */

typedef enum anyup_eval_method {
  ANYUP_METHOD_MODEL = 0,
  ANYUP_METHOD_BILINEAR = 1,
  ANYUP_METHOD_NEAREST = 2
} anyup_eval_method;

typedef enum anyup_eval_protocol {
  ANYUP_PROTOCOL_PROBE = 0,    /* probe fit on upsampled training features */
  ANYUP_PROTOCOL_PRESERVE = 1  /* probe fit on raw low-res features */
} anyup_eval_protocol;

typedef enum anyup_eval_task { ANYUP_TASK_SEGMENTATION = 0, ANYUP_TASK_DEPTH = 1 } anyup_eval_task;

typedef struct anyup_eval_options {
  anyup_eval_method method;
  anyup_eval_protocol protocol;
  anyup_eval_task task;
  int image_count;
  int image_size;
  int downsample_ratio;
  int num_classes;
  int probe_steps;
  double probe_learning_rate;
  uint64_t seed;
  anyup_encoder_options encoder;
} anyup_eval_options;

ANYUP_API void anyup_eval_options_default(anyup_eval_options* options);
/* model is required only for ANYUP_METHOD_MODEL. */
ANYUP_API anyup_status anyup_evaluate(const anyup_model* model, const anyup_eval_options* options,
                                      anyup_report** out);
ANYUP_API anyup_status anyup_report_get(const anyup_report* report, const char* name, double* value);
/* key=value lines; valid until the report is freed. */
ANYUP_API const char* anyup_report_text(const anyup_report* report);
ANYUP_API anyup_status anyup_report_write(const anyup_report* report, const char* path);
ANYUP_API void anyup_report_free(anyup_report* report);

/* ---- visualization ---------------------------------------------------- */

/* Top three principal components as RGB in [0, 1]. basis may be NULL. */
ANYUP_API anyup_status anyup_pca_rgb(const anyup_features* features, const anyup_features* basis, anyup_image** out);

#ifdef __cplusplus
}
#endif

#endif /* ANYUP_H */
