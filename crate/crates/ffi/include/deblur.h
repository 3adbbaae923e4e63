#ifndef DEBLUR_H
#define DEBLUR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DeblurStatus {
  DEBLUR_STATUS_OK = 0,
  DEBLUR_STATUS_NULL_POINTER = 1,
  DEBLUR_STATUS_INVALID_ARGUMENT = 2,
  DEBLUR_STATUS_SHAPE_MISMATCH = 3,
  DEBLUR_STATUS_SINGULAR = 4,
  DEBLUR_STATUS_DIVERGENCE = 5,
  DEBLUR_STATUS_IO = 6,
  DEBLUR_STATUS_FORMAT = 7,
  DEBLUR_STATUS_PANIC = 8,
} DeblurStatus;

// A loaded VAE with its kernel generator.
typedef struct DeblurModel DeblurModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null after a success.
// Valid until the next call into this library on the same thread.
const char *deblur_last_error(void);

// Loads a checkpoint written by the trainer.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum DeblurStatus deblur_model_load(const char *path, struct DeblurModel **out);

// Releases a model; null is ignored.
//
// # Safety
// `model` must come from [`deblur_model_load`] and not be used afterwards.
void deblur_model_free(struct DeblurModel *model);

// Image side, channel count, latent size and kernel size of a model.
//
// # Safety
// `model` must be a live handle; each output pointer may be null.
enum DeblurStatus deblur_model_dims(const struct DeblurModel *model,
                                    size_t *image_size,
                                    size_t *channels,
                                    size_t *latent_dim,
                                    size_t *kernel_size);

// Posterior-mean reconstructions of `n` images.
//
// # Safety
// `x` and `out` must each hold `n · channels · size²` values.
enum DeblurStatus deblur_model_reconstruct(struct DeblurModel *model,
                                           const double *x,
                                           size_t n,
                                           double *out);

// Decodes `n` prior samples drawn from a stream seeded by `seed`.
//
// # Safety
// `out` must hold `n · channels · size²` values.
enum DeblurStatus deblur_model_generate(struct DeblurModel *model,
                                        size_t n,
                                        uint64_t seed,
                                        double *out);

// Generator kernels (unit-sum, `kernel_size²` each) at the posterior means of `n` images.
//
// # Safety
// `x` must hold `n · channels · size²` values and `out` `n · kernel_size²`.
enum DeblurStatus deblur_model_estimate_kernels(struct DeblurModel *model,
                                                const double *x,
                                                size_t n,
                                                double *out);

// Wiener-weighted squared error of one `height × width` plane pair under a
// unit-sum kernel of odd side `kernel_size`.
//
// # Safety
// `x`, `xhat` hold `height · width` values, `kernel` `kernel_size²`, `out` one.
enum DeblurStatus deblur_weighted_error(const double *x,
                                        const double *xhat,
                                        size_t height,
                                        size_t width,
                                        const double *kernel,
                                        size_t kernel_size,
                                        double c,
                                        double *out);

// `log|det(K + εI)|` for the block-circulant operator of a raw kernel.
//
// # Safety
// `kernel` holds `kernel_size²` values and `out` one.
enum DeblurStatus deblur_bccb_logdet(const double *kernel,
                                     size_t kernel_size,
                                     size_t height,
                                     size_t width,
                                     double epsilon,
                                     double *out);

// Least-squares kernel with `x ⊛ k ≈ xhat` (raw weights, not normalized).
//
// # Safety
// `x`, `xhat` hold `height · width` values and `out` `kernel_size²`.
enum DeblurStatus deblur_fit_kernel(const double *x,
                                    const double *xhat,
                                    size_t height,
                                    size_t width,
                                    size_t kernel_size,
                                    double ridge,
                                    double *out);

// PSNR and SSIM of one plane pair in `[-1, 1]`; either output may be null.
//
// # Safety
// `x`, `y` hold `height · width` values.
enum DeblurStatus deblur_quality(const double *x,
                                 const double *y,
                                 size_t height,
                                 size_t width,
                                 double *psnr,
                                 double *ssim);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEBLUR_H */
