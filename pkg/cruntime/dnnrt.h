/*
 * dnnrt: portable C99 operator library for generated inference code.
 *
 * All functions are reentrant and allocate nothing; callers provide every
 * buffer (generated code passes slices of one static heap array sized by
 * the offline memory planner). Activations are channel-major (C, H, W),
 * conv weights are (F, C, K, K) flattened row-major, linear weights are
 * (out, in) row-major.
 *
 * Numeric contract: float reductions accumulate sequentially in program
 * order (compile without FMA contraction, e.g. -ffp-contract=off, to keep
 * results bit-identical to the reference interpreter). Quantized operators
 * use a 32-bit signed accumulator and a single double-precision
 * requantization multiplier; rounding is half away from zero everywhere.
 *
 * Sparse weights use compressed row storage exactly as laid out in the
 * packed weight stream: values, column indices (16- or 32-bit), and row
 * pointers, each 4-byte aligned. Absent entries mean 0.0f for float
 * tensors and the weight zero point for quantized ones.
 *
 * Streams and this library assume a little-endian host.
 */
#ifndef DNNRT_H
#define DNNRT_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

enum {
    DNNRT_OK = 0,
    DNNRT_ERR_BADMAGIC = 1,
    DNNRT_ERR_VERSION = 2,
    DNNRT_ERR_TRUNCATED = 3,
    DNNRT_ERR_BADARG = 4,
    DNNRT_ERR_NOSCRATCH = 5
};

/* ------------------------------------------------------------------ */
/* packed weight stream                                                */

#define DNNRT_STREAM_MAGIC "TFWS"
#define DNNRT_STREAM_VERSION 1u
#define DNNRT_STREAM_HEADER_SIZE 16u
#define DNNRT_STREAM_DESC_SIZE 48u

typedef struct {
    uint8_t dtype;      /* 0 = f32, 1 = u8, 2 = i32 */
    uint8_t layout;     /* 0 = dense, 1 = crs */
    uint8_t ndim;
    uint8_t col_width;  /* crs column index width in bytes (2 or 4) */
    uint8_t zero_point;
    uint32_t dims[4];
    uint32_t offset;    /* into the payload, 4-byte aligned */
    uint32_t nbytes;
    uint32_t nnz;
    double scale;       /* 0.0 when unquantized */
} dnnrt_desc;

/* Validates magic, version, and the length bookkeeping of a stream. */
int dnnrt_stream_check(const uint8_t *stream, uint32_t len);
uint32_t dnnrt_stream_desc_count(const uint8_t *stream);
int dnnrt_stream_desc(const uint8_t *stream, uint32_t index, dnnrt_desc *out);
const uint8_t *dnnrt_stream_payload(const uint8_t *stream);

/* ------------------------------------------------------------------ */
/* float operators                                                     */

int dnnrt_linear_f32(const float *wt, const float *bias, const float *x,
                     float *y, uint32_t out_n, uint32_t in_n);
int dnnrt_linear_f32_crs(const float *vals, const void *col_ind,
                         uint32_t col_width, const int32_t *row_ptr,
                         const float *bias, const float *x, float *y,
                         uint32_t out_n, uint32_t in_n);

/* scratch holds the im2col matrix, (c*k*k) x (ho*wo) elements; it may be
 * NULL only for the identity unroll (k == 1, stride == 1, pad == 0). */
int dnnrt_conv2d_f32(const float *wt, const float *bias, const float *x,
                     float *y, float *scratch, uint32_t c, uint32_t h,
                     uint32_t w, uint32_t f, uint32_t k, uint32_t stride,
                     uint32_t pad);
int dnnrt_conv2d_f32_crs(const float *vals, const void *col_ind,
                         uint32_t col_width, const int32_t *row_ptr,
                         const float *bias, const float *x, float *y,
                         float *scratch, uint32_t c, uint32_t h, uint32_t w,
                         uint32_t f, uint32_t k, uint32_t stride, uint32_t pad);

int dnnrt_relu_f32(const float *x, float *y, uint32_t n);
int dnnrt_maxpool_f32(const float *x, float *y, uint32_t c, uint32_t h,
                      uint32_t w, uint32_t pool);
int dnnrt_batchnorm_f32(const float *gamma, const float *beta,
                        const float *mean, const float *var, float eps,
                        const float *x, float *y, uint32_t c, uint32_t spatial);
int dnnrt_softmax_f32(const float *x, float *y, uint32_t n);
int dnnrt_add_f32(const float *a, const float *b, float *y, uint32_t n);

/* ------------------------------------------------------------------ */
/* quantized operators (affine u8; m = (s_a * s_b) / s_c)              */

int dnnrt_quantize(const float *x, uint8_t *y, uint32_t n, double scale,
                   int32_t zp);
int dnnrt_dequantize(const uint8_t *x, float *y, uint32_t n, double scale,
                     int32_t zp);

/* clamp_lo tightens the output floor; fused ReLU passes the zero point */
int dnnrt_qlinear(const uint8_t *wt, const int32_t *bias, const uint8_t *x,
                  uint8_t *y, uint32_t out_n, uint32_t in_n, double m,
                  int32_t zp_w, int32_t zp_x, int32_t zp_y, int32_t clamp_lo);
int dnnrt_qlinear_crs(const uint8_t *vals, const void *col_ind,
                      uint32_t col_width, const int32_t *row_ptr,
                      const int32_t *bias, const uint8_t *x, uint8_t *y,
                      uint32_t out_n, uint32_t in_n, double m, int32_t zp_w,
                      int32_t zp_x, int32_t zp_y, int32_t clamp_lo);
int dnnrt_qconv2d(const uint8_t *wt, const int32_t *bias, const uint8_t *x,
                  uint8_t *y, uint8_t *scratch, uint32_t c, uint32_t h,
                  uint32_t w, uint32_t f, uint32_t k, uint32_t stride,
                  uint32_t pad, double m, int32_t zp_w, int32_t zp_x,
                  int32_t zp_y, int32_t clamp_lo);
int dnnrt_qconv2d_crs(const uint8_t *vals, const void *col_ind,
                      uint32_t col_width, const int32_t *row_ptr,
                      const int32_t *bias, const uint8_t *x, uint8_t *y,
                      uint8_t *scratch, uint32_t c, uint32_t h, uint32_t w,
                      uint32_t f, uint32_t k, uint32_t stride, uint32_t pad,
                      double m, int32_t zp_w, int32_t zp_x, int32_t zp_y,
                      int32_t clamp_lo);

int dnnrt_relu_u8(const uint8_t *x, uint8_t *y, uint32_t n, int32_t zp);
int dnnrt_maxpool_u8(const uint8_t *x, uint8_t *y, uint32_t c, uint32_t h,
                     uint32_t w, uint32_t pool);

/* memmove-backed copy; used for Flatten and identity graphs */
int dnnrt_copy(const void *src, void *dst, uint32_t nbytes);

#ifdef __cplusplus
}
#endif

#endif /* DNNRT_H */
