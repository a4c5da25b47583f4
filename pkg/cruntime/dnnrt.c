/* dnnrt implementation. C99, no dynamic allocation, no static state. */

#include "dnnrt.h"

#include <math.h>
#include <string.h>

/* round to nearest, ties away from zero; shared with the offline tools */
static double round_away(double v)
{
    return (v >= 0.0) ? floor(v + 0.5) : ceil(v - 0.5);
}

static uint8_t clamp_u8(double v, int32_t lo)
{
    if (v < (double)lo) {
        return (uint8_t)lo;
    }
    if (v > 255.0) {
        return 255u;
    }
    return (uint8_t)v;
}

static uint32_t crs_col(const void *col_ind, uint32_t col_width, uint32_t j)
{
    if (col_width == 2u) {
        uint16_t v;
        memcpy(&v, (const uint8_t *)col_ind + 2u * j, 2u);
        return v;
    }
    uint32_t v;
    memcpy(&v, (const uint8_t *)col_ind + 4u * j, 4u);
    return v;
}

/* ------------------------------------------------------------------ */
/* stream access                                                       */

static uint32_t rd_u32(const uint8_t *p)
{
    uint32_t v;
    memcpy(&v, p, 4u);
    return v;
}

int dnnrt_stream_check(const uint8_t *stream, uint32_t len)
{
    uint32_t count;
    uint32_t payload;
    uint16_t version;
    if (stream == NULL || len < DNNRT_STREAM_HEADER_SIZE) {
        return DNNRT_ERR_TRUNCATED;
    }
    if (memcmp(stream, DNNRT_STREAM_MAGIC, 4u) != 0) {
        return DNNRT_ERR_BADMAGIC;
    }
    memcpy(&version, stream + 4u, 2u);
    if (version != DNNRT_STREAM_VERSION) {
        return DNNRT_ERR_VERSION;
    }
    count = rd_u32(stream + 8u);
    payload = rd_u32(stream + 12u);
    if (len < DNNRT_STREAM_HEADER_SIZE + count * DNNRT_STREAM_DESC_SIZE + payload) {
        return DNNRT_ERR_TRUNCATED;
    }
    return DNNRT_OK;
}

uint32_t dnnrt_stream_desc_count(const uint8_t *stream)
{
    return rd_u32(stream + 8u);
}

int dnnrt_stream_desc(const uint8_t *stream, uint32_t index, dnnrt_desc *out)
{
    const uint8_t *rec;
    uint32_t i;
    if (out == NULL || index >= dnnrt_stream_desc_count(stream)) {
        return DNNRT_ERR_BADARG;
    }
    rec = stream + DNNRT_STREAM_HEADER_SIZE + index * DNNRT_STREAM_DESC_SIZE;
    out->dtype = rec[0];
    out->layout = rec[1];
    out->ndim = rec[2];
    out->col_width = rec[3];
    out->zero_point = rec[4];
    for (i = 0; i < 4u; ++i) {
        out->dims[i] = rd_u32(rec + 8u + 4u * i);
    }
    out->offset = rd_u32(rec + 24u);
    out->nbytes = rd_u32(rec + 28u);
    out->nnz = rd_u32(rec + 32u);
    memcpy(&out->scale, rec + 40u, 8u);
    return DNNRT_OK;
}

const uint8_t *dnnrt_stream_payload(const uint8_t *stream)
{
    return stream + DNNRT_STREAM_HEADER_SIZE +
           dnnrt_stream_desc_count(stream) * DNNRT_STREAM_DESC_SIZE;
}

/* ------------------------------------------------------------------ */
/* float operators                                                     */

int dnnrt_linear_f32(const float *wt, const float *bias, const float *x,
                     float *y, uint32_t out_n, uint32_t in_n)
{
    uint32_t o, k;
    for (o = 0; o < out_n; ++o) {
        const float *row = wt + (size_t)o * in_n;
        float acc = 0.0f;
        for (k = 0; k < in_n; ++k) {
            acc += row[k] * x[k];
        }
        y[o] = acc + bias[o];
    }
    return DNNRT_OK;
}

int dnnrt_linear_f32_crs(const float *vals, const void *col_ind,
                         uint32_t col_width, const int32_t *row_ptr,
                         const float *bias, const float *x, float *y,
                         uint32_t out_n, uint32_t in_n)
{
    uint32_t o;
    int32_t j;
    (void)in_n;
    for (o = 0; o < out_n; ++o) {
        float acc = 0.0f;
        for (j = row_ptr[o]; j < row_ptr[o + 1]; ++j) {
            acc += vals[j] * x[crs_col(col_ind, col_width, (uint32_t)j)];
        }
        y[o] = acc + bias[o];
    }
    return DNNRT_OK;
}

static void im2col_f32(const float *x, float *cols, uint32_t c, uint32_t h,
                       uint32_t w, uint32_t k, uint32_t stride, uint32_t pad,
                       uint32_t ho, uint32_t wo)
{
    uint32_t ci, kh, kw, oh, ow;
    uint32_t row = 0;
    const uint32_t l = ho * wo;
    for (ci = 0; ci < c; ++ci) {
        for (kh = 0; kh < k; ++kh) {
            for (kw = 0; kw < k; ++kw) {
                float *dst = cols + (size_t)row * l;
                for (oh = 0; oh < ho; ++oh) {
                    for (ow = 0; ow < wo; ++ow) {
                        int32_t ih = (int32_t)(oh * stride + kh) - (int32_t)pad;
                        int32_t iw = (int32_t)(ow * stride + kw) - (int32_t)pad;
                        float v = 0.0f;
                        if (ih >= 0 && ih < (int32_t)h && iw >= 0 && iw < (int32_t)w) {
                            v = x[((size_t)ci * h + (size_t)ih) * w + (size_t)iw];
                        }
                        dst[oh * wo + ow] = v;
                    }
                }
                row++;
            }
        }
    }
}

static void im2col_u8(const uint8_t *x, uint8_t *cols, uint32_t c, uint32_t h,
                      uint32_t w, uint32_t k, uint32_t stride, uint32_t pad,
                      uint32_t ho, uint32_t wo, uint8_t fill)
{
    uint32_t ci, kh, kw, oh, ow;
    uint32_t row = 0;
    const uint32_t l = ho * wo;
    for (ci = 0; ci < c; ++ci) {
        for (kh = 0; kh < k; ++kh) {
            for (kw = 0; kw < k; ++kw) {
                uint8_t *dst = cols + (size_t)row * l;
                for (oh = 0; oh < ho; ++oh) {
                    for (ow = 0; ow < wo; ++ow) {
                        int32_t ih = (int32_t)(oh * stride + kh) - (int32_t)pad;
                        int32_t iw = (int32_t)(ow * stride + kw) - (int32_t)pad;
                        uint8_t v = fill;
                        if (ih >= 0 && ih < (int32_t)h && iw >= 0 && iw < (int32_t)w) {
                            v = x[((size_t)ci * h + (size_t)ih) * w + (size_t)iw];
                        }
                        dst[oh * wo + ow] = v;
                    }
                }
                row++;
            }
        }
    }
}

static int conv_dims(uint32_t h, uint32_t w, uint32_t k, uint32_t stride,
                     uint32_t pad, uint32_t *ho, uint32_t *wo)
{
    if (k == 0 || stride == 0 || h + 2u * pad < k || w + 2u * pad < k) {
        return DNNRT_ERR_BADARG;
    }
    *ho = (h + 2u * pad - k) / stride + 1u;
    *wo = (w + 2u * pad - k) / stride + 1u;
    return DNNRT_OK;
}

int dnnrt_conv2d_f32(const float *wt, const float *bias, const float *x,
                     float *y, float *scratch, uint32_t c, uint32_t h,
                     uint32_t w, uint32_t f, uint32_t k, uint32_t stride,
                     uint32_t pad)
{
    uint32_t ho, wo, fi, li, kk;
    const float *cols;
    int rc = conv_dims(h, w, k, stride, pad, &ho, &wo);
    const uint32_t kdim = c * k * k;
    const uint32_t l = (rc == DNNRT_OK) ? ho * wo : 0;
    if (rc != DNNRT_OK) {
        return rc;
    }
    if (k == 1u && stride == 1u && pad == 0u) {
        cols = x; /* identity unroll: the input already is the column matrix */
    } else {
        if (scratch == NULL) {
            return DNNRT_ERR_NOSCRATCH;
        }
        im2col_f32(x, scratch, c, h, w, k, stride, pad, ho, wo);
        cols = scratch;
    }
    for (fi = 0; fi < f; ++fi) {
        const float *row = wt + (size_t)fi * kdim;
        for (li = 0; li < l; ++li) {
            float acc = 0.0f;
            for (kk = 0; kk < kdim; ++kk) {
                acc += row[kk] * cols[(size_t)kk * l + li];
            }
            y[(size_t)fi * l + li] = acc + bias[fi];
        }
    }
    return DNNRT_OK;
}

int dnnrt_conv2d_f32_crs(const float *vals, const void *col_ind,
                         uint32_t col_width, const int32_t *row_ptr,
                         const float *bias, const float *x, float *y,
                         float *scratch, uint32_t c, uint32_t h, uint32_t w,
                         uint32_t f, uint32_t k, uint32_t stride, uint32_t pad)
{
    uint32_t ho, wo, fi, li;
    int32_t j;
    const float *cols;
    int rc = conv_dims(h, w, k, stride, pad, &ho, &wo);
    const uint32_t l = (rc == DNNRT_OK) ? ho * wo : 0;
    if (rc != DNNRT_OK) {
        return rc;
    }
    if (k == 1u && stride == 1u && pad == 0u) {
        cols = x;
    } else {
        if (scratch == NULL) {
            return DNNRT_ERR_NOSCRATCH;
        }
        im2col_f32(x, scratch, c, h, w, k, stride, pad, ho, wo);
        cols = scratch;
    }
    for (fi = 0; fi < f; ++fi) {
        for (li = 0; li < l; ++li) {
            float acc = 0.0f;
            for (j = row_ptr[fi]; j < row_ptr[fi + 1]; ++j) {
                acc += vals[j] * cols[(size_t)crs_col(col_ind, col_width, (uint32_t)j) * l + li];
            }
            y[(size_t)fi * l + li] = acc + bias[fi];
        }
    }
    return DNNRT_OK;
}

int dnnrt_relu_f32(const float *x, float *y, uint32_t n)
{
    uint32_t i;
    for (i = 0; i < n; ++i) {
        y[i] = (x[i] > 0.0f) ? x[i] : 0.0f;
    }
    return DNNRT_OK;
}

int dnnrt_maxpool_f32(const float *x, float *y, uint32_t c, uint32_t h,
                      uint32_t w, uint32_t pool)
{
    uint32_t ci, oh, ow, ph, pw;
    const uint32_t ho = h / pool;
    const uint32_t wo = w / pool;
    if (pool == 0 || ho == 0 || wo == 0) {
        return DNNRT_ERR_BADARG;
    }
    for (ci = 0; ci < c; ++ci) {
        for (oh = 0; oh < ho; ++oh) {
            for (ow = 0; ow < wo; ++ow) {
                float m = x[((size_t)ci * h + oh * pool) * w + ow * pool];
                for (ph = 0; ph < pool; ++ph) {
                    for (pw = 0; pw < pool; ++pw) {
                        float v = x[((size_t)ci * h + oh * pool + ph) * w + ow * pool + pw];
                        if (v > m) {
                            m = v;
                        }
                    }
                }
                y[((size_t)ci * ho + oh) * wo + ow] = m;
            }
        }
    }
    return DNNRT_OK;
}

int dnnrt_batchnorm_f32(const float *gamma, const float *beta,
                        const float *mean, const float *var, float eps,
                        const float *x, float *y, uint32_t c, uint32_t spatial)
{
    uint32_t ci, i;
    for (ci = 0; ci < c; ++ci) {
        const float scale = gamma[ci] / sqrtf(var[ci] + eps);
        const float *src = x + (size_t)ci * spatial;
        float *dst = y + (size_t)ci * spatial;
        for (i = 0; i < spatial; ++i) {
            dst[i] = (src[i] - mean[ci]) * scale + beta[ci];
        }
    }
    return DNNRT_OK;
}

int dnnrt_softmax_f32(const float *x, float *y, uint32_t n)
{
    uint32_t i;
    float m, sum;
    if (n == 0) {
        return DNNRT_ERR_BADARG;
    }
    m = x[0];
    for (i = 1; i < n; ++i) {
        if (x[i] > m) {
            m = x[i];
        }
    }
    sum = 0.0f;
    for (i = 0; i < n; ++i) {
        y[i] = expf(x[i] - m);
        sum += y[i];
    }
    for (i = 0; i < n; ++i) {
        y[i] = y[i] / sum;
    }
    return DNNRT_OK;
}

int dnnrt_add_f32(const float *a, const float *b, float *y, uint32_t n)
{
    uint32_t i;
    for (i = 0; i < n; ++i) {
        y[i] = a[i] + b[i];
    }
    return DNNRT_OK;
}

/* ------------------------------------------------------------------ */
/* quantized operators                                                 */

int dnnrt_quantize(const float *x, uint8_t *y, uint32_t n, double scale,
                   int32_t zp)
{
    uint32_t i;
    for (i = 0; i < n; ++i) {
        double r = round_away((double)x[i] / scale) + (double)zp;
        y[i] = clamp_u8(r, 0);
    }
    return DNNRT_OK;
}

int dnnrt_dequantize(const uint8_t *x, float *y, uint32_t n, double scale,
                     int32_t zp)
{
    uint32_t i;
    for (i = 0; i < n; ++i) {
        y[i] = (float)(scale * (double)((int32_t)x[i] - zp));
    }
    return DNNRT_OK;
}

static uint8_t requant(int32_t acc, double m, int32_t zp_y, int32_t clamp_lo)
{
    return clamp_u8((double)zp_y + round_away(m * (double)acc), clamp_lo);
}

int dnnrt_qlinear(const uint8_t *wt, const int32_t *bias, const uint8_t *x,
                  uint8_t *y, uint32_t out_n, uint32_t in_n, double m,
                  int32_t zp_w, int32_t zp_x, int32_t zp_y, int32_t clamp_lo)
{
    uint32_t o, k;
    for (o = 0; o < out_n; ++o) {
        const uint8_t *row = wt + (size_t)o * in_n;
        int32_t acc = bias[o];
        for (k = 0; k < in_n; ++k) {
            acc += ((int32_t)row[k] - zp_w) * ((int32_t)x[k] - zp_x);
        }
        y[o] = requant(acc, m, zp_y, clamp_lo);
    }
    return DNNRT_OK;
}

int dnnrt_qlinear_crs(const uint8_t *vals, const void *col_ind,
                      uint32_t col_width, const int32_t *row_ptr,
                      const int32_t *bias, const uint8_t *x, uint8_t *y,
                      uint32_t out_n, uint32_t in_n, double m, int32_t zp_w,
                      int32_t zp_x, int32_t zp_y, int32_t clamp_lo)
{
    uint32_t o;
    int32_t j;
    (void)in_n;
    for (o = 0; o < out_n; ++o) {
        int32_t acc = bias[o];
        for (j = row_ptr[o]; j < row_ptr[o + 1]; ++j) {
            /* absent entries hold the weight zero point: (zp - zp) adds 0 */
            acc += ((int32_t)vals[j] - zp_w) *
                   ((int32_t)x[crs_col(col_ind, col_width, (uint32_t)j)] - zp_x);
        }
        y[o] = requant(acc, m, zp_y, clamp_lo);
    }
    return DNNRT_OK;
}

int dnnrt_qconv2d(const uint8_t *wt, const int32_t *bias, const uint8_t *x,
                  uint8_t *y, uint8_t *scratch, uint32_t c, uint32_t h,
                  uint32_t w, uint32_t f, uint32_t k, uint32_t stride,
                  uint32_t pad, double m, int32_t zp_w, int32_t zp_x,
                  int32_t zp_y, int32_t clamp_lo)
{
    uint32_t ho, wo, fi, li, kk;
    const uint8_t *cols;
    int rc = conv_dims(h, w, k, stride, pad, &ho, &wo);
    const uint32_t kdim = c * k * k;
    const uint32_t l = (rc == DNNRT_OK) ? ho * wo : 0;
    if (rc != DNNRT_OK) {
        return rc;
    }
    if (k == 1u && stride == 1u && pad == 0u) {
        cols = x;
    } else {
        if (scratch == NULL) {
            return DNNRT_ERR_NOSCRATCH;
        }
        im2col_u8(x, scratch, c, h, w, k, stride, pad, ho, wo, (uint8_t)zp_x);
        cols = scratch;
    }
    for (fi = 0; fi < f; ++fi) {
        const uint8_t *row = wt + (size_t)fi * kdim;
        for (li = 0; li < l; ++li) {
            int32_t acc = bias[fi];
            for (kk = 0; kk < kdim; ++kk) {
                acc += ((int32_t)row[kk] - zp_w) *
                       ((int32_t)cols[(size_t)kk * l + li] - zp_x);
            }
            y[(size_t)fi * l + li] = requant(acc, m, zp_y, clamp_lo);
        }
    }
    return DNNRT_OK;
}

int dnnrt_qconv2d_crs(const uint8_t *vals, const void *col_ind,
                      uint32_t col_width, const int32_t *row_ptr,
                      const int32_t *bias, const uint8_t *x, uint8_t *y,
                      uint8_t *scratch, uint32_t c, uint32_t h, uint32_t w,
                      uint32_t f, uint32_t k, uint32_t stride, uint32_t pad,
                      double m, int32_t zp_w, int32_t zp_x, int32_t zp_y,
                      int32_t clamp_lo)
{
    uint32_t ho, wo, fi, li;
    int32_t j;
    const uint8_t *cols;
    int rc = conv_dims(h, w, k, stride, pad, &ho, &wo);
    const uint32_t l = (rc == DNNRT_OK) ? ho * wo : 0;
    if (rc != DNNRT_OK) {
        return rc;
    }
    if (k == 1u && stride == 1u && pad == 0u) {
        cols = x;
    } else {
        if (scratch == NULL) {
            return DNNRT_ERR_NOSCRATCH;
        }
        im2col_u8(x, scratch, c, h, w, k, stride, pad, ho, wo, (uint8_t)zp_x);
        cols = scratch;
    }
    for (fi = 0; fi < f; ++fi) {
        for (li = 0; li < l; ++li) {
            int32_t acc = bias[fi];
            for (j = row_ptr[fi]; j < row_ptr[fi + 1]; ++j) {
                acc += ((int32_t)vals[j] - zp_w) *
                       ((int32_t)cols[(size_t)crs_col(col_ind, col_width, (uint32_t)j) * l + li] - zp_x);
            }
            y[(size_t)fi * l + li] = requant(acc, m, zp_y, clamp_lo);
        }
    }
    return DNNRT_OK;
}

int dnnrt_relu_u8(const uint8_t *x, uint8_t *y, uint32_t n, int32_t zp)
{
    uint32_t i;
    for (i = 0; i < n; ++i) {
        y[i] = (x[i] < zp) ? (uint8_t)zp : x[i];
    }
    return DNNRT_OK;
}

int dnnrt_maxpool_u8(const uint8_t *x, uint8_t *y, uint32_t c, uint32_t h,
                     uint32_t w, uint32_t pool)
{
    uint32_t ci, oh, ow, ph, pw;
    const uint32_t ho = h / pool;
    const uint32_t wo = w / pool;
    if (pool == 0 || ho == 0 || wo == 0) {
        return DNNRT_ERR_BADARG;
    }
    for (ci = 0; ci < c; ++ci) {
        for (oh = 0; oh < ho; ++oh) {
            for (ow = 0; ow < wo; ++ow) {
                uint8_t m = x[((size_t)ci * h + oh * pool) * w + ow * pool];
                for (ph = 0; ph < pool; ++ph) {
                    for (pw = 0; pw < pool; ++pw) {
                        uint8_t v = x[((size_t)ci * h + oh * pool + ph) * w + ow * pool + pw];
                        if (v > m) {
                            m = v;
                        }
                    }
                }
                y[((size_t)ci * ho + oh) * wo + ow] = m;
            }
        }
    }
    return DNNRT_OK;
}

int dnnrt_copy(const void *src, void *dst, uint32_t nbytes)
{
    memmove(dst, src, nbytes);
    return DNNRT_OK;
}
