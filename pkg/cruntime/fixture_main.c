/*
 * Operator fixture runner: executes one dnnrt call on raw binary inputs.
 *
 *   dnnrt_fixture <op> <in.bin> <out.bin> [op-specific args...]
 *
 * Scalar floats arrive as C99 hex literals (exact), integers as decimal.
 * Buffers live in static arenas; the binary performs no dynamic allocation
 * so the whole link can be audited for allocator symbols.
 */

#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "dnnrt.h"

#define ARENA (1u << 24)

static uint8_t in_buf[ARENA];
static uint8_t out_buf[ARENA];
static uint8_t aux1[ARENA];   /* weights / values */
static uint8_t aux2[ARENA];   /* bias / col_ind */
static uint8_t aux3[ARENA];   /* row_ptr / extra operand */
static uint8_t aux4[ARENA];   /* batch-norm tails */
static uint8_t aux5[ARENA];
static uint8_t scratch[ARENA];

static uint32_t load(const char *path, uint8_t *dst)
{
    FILE *f = fopen(path, "rb");
    size_t n;
    if (f == NULL) {
        fprintf(stderr, "cannot open %s\n", path);
        exit(10);
    }
    n = fread(dst, 1, ARENA, f);
    fclose(f);
    return (uint32_t)n;
}

static void store(const char *path, const void *src, size_t nbytes)
{
    FILE *f = fopen(path, "wb");
    if (f == NULL || fwrite(src, 1, nbytes, f) != nbytes) {
        fprintf(stderr, "cannot write %s\n", path);
        exit(11);
    }
    fclose(f);
}

static uint32_t argu(const char *s) { return (uint32_t)strtoul(s, NULL, 0); }
static int32_t argi(const char *s) { return (int32_t)strtol(s, NULL, 0); }
static double argd(const char *s) { return strtod(s, NULL); }

int main(int argc, char **argv)
{
    const char *op;
    const char *out_path;
    int rc = DNNRT_ERR_BADARG;
    size_t out_bytes = 0;

    if (argc < 4) {
        fprintf(stderr, "usage: %s <op> <in.bin> <out.bin> [args...]\n", argv[0]);
        return 12;
    }
    op = argv[1];
    load(argv[2], in_buf);
    out_path = argv[3];

    if (strcmp(op, "linear_f32") == 0) {
        uint32_t out_n = argu(argv[4]), in_n = argu(argv[5]);
        load(argv[6], aux1);
        load(argv[7], aux2);
        rc = dnnrt_linear_f32((const float *)aux1, (const float *)aux2,
                              (const float *)in_buf, (float *)out_buf, out_n, in_n);
        out_bytes = out_n * 4u;
    } else if (strcmp(op, "linear_f32_crs") == 0) {
        uint32_t out_n = argu(argv[4]), in_n = argu(argv[5]), colw = argu(argv[9]);
        load(argv[6], aux1);
        load(argv[7], aux2);
        load(argv[8], aux3);
        load(argv[10], aux4);
        rc = dnnrt_linear_f32_crs((const float *)aux1, aux2, colw,
                                  (const int32_t *)aux3, (const float *)aux4,
                                  (const float *)in_buf, (float *)out_buf, out_n, in_n);
        out_bytes = out_n * 4u;
    } else if (strcmp(op, "conv2d_f32") == 0) {
        uint32_t c = argu(argv[4]), h = argu(argv[5]), w = argu(argv[6]);
        uint32_t f = argu(argv[7]), k = argu(argv[8]), s = argu(argv[9]), p = argu(argv[10]);
        uint32_t ho = (h + 2 * p - k) / s + 1, wo = (w + 2 * p - k) / s + 1;
        load(argv[11], aux1);
        load(argv[12], aux2);
        rc = dnnrt_conv2d_f32((const float *)aux1, (const float *)aux2,
                              (const float *)in_buf, (float *)out_buf,
                              (float *)scratch, c, h, w, f, k, s, p);
        out_bytes = (size_t)f * ho * wo * 4u;
    } else if (strcmp(op, "conv2d_f32_crs") == 0) {
        uint32_t c = argu(argv[4]), h = argu(argv[5]), w = argu(argv[6]);
        uint32_t f = argu(argv[7]), k = argu(argv[8]), s = argu(argv[9]), p = argu(argv[10]);
        uint32_t ho = (h + 2 * p - k) / s + 1, wo = (w + 2 * p - k) / s + 1;
        uint32_t colw = argu(argv[14]);
        load(argv[11], aux1);
        load(argv[12], aux2);
        load(argv[13], aux3);
        load(argv[15], aux4);
        rc = dnnrt_conv2d_f32_crs((const float *)aux1, aux2, colw,
                                  (const int32_t *)aux3, (const float *)aux4,
                                  (const float *)in_buf, (float *)out_buf,
                                  (float *)scratch, c, h, w, f, k, s, p);
        out_bytes = (size_t)f * ho * wo * 4u;
    } else if (strcmp(op, "qlinear") == 0) {
        uint32_t out_n = argu(argv[4]), in_n = argu(argv[5]);
        load(argv[6], aux1);
        load(argv[7], aux2);
        rc = dnnrt_qlinear(aux1, (const int32_t *)aux2, in_buf, out_buf, out_n, in_n,
                           argd(argv[8]), argi(argv[9]), argi(argv[10]),
                           argi(argv[11]), argi(argv[12]));
        out_bytes = out_n;
    } else if (strcmp(op, "qlinear_crs") == 0) {
        uint32_t out_n = argu(argv[4]), in_n = argu(argv[5]), colw = argu(argv[9]);
        load(argv[6], aux1);
        load(argv[7], aux2);
        load(argv[8], aux3);
        load(argv[10], aux4);
        rc = dnnrt_qlinear_crs(aux1, aux2, colw, (const int32_t *)aux3,
                               (const int32_t *)aux4, in_buf, out_buf, out_n, in_n,
                               argd(argv[11]), argi(argv[12]), argi(argv[13]),
                               argi(argv[14]), argi(argv[15]));
        out_bytes = out_n;
    } else if (strcmp(op, "qconv2d") == 0) {
        uint32_t c = argu(argv[4]), h = argu(argv[5]), w = argu(argv[6]);
        uint32_t f = argu(argv[7]), k = argu(argv[8]), s = argu(argv[9]), p = argu(argv[10]);
        uint32_t ho = (h + 2 * p - k) / s + 1, wo = (w + 2 * p - k) / s + 1;
        load(argv[11], aux1);
        load(argv[12], aux2);
        rc = dnnrt_qconv2d(aux1, (const int32_t *)aux2, in_buf, out_buf, scratch,
                           c, h, w, f, k, s, p, argd(argv[13]), argi(argv[14]),
                           argi(argv[15]), argi(argv[16]), argi(argv[17]));
        out_bytes = (size_t)f * ho * wo;
    } else if (strcmp(op, "qconv2d_crs") == 0) {
        uint32_t c = argu(argv[4]), h = argu(argv[5]), w = argu(argv[6]);
        uint32_t f = argu(argv[7]), k = argu(argv[8]), s = argu(argv[9]), p = argu(argv[10]);
        uint32_t ho = (h + 2 * p - k) / s + 1, wo = (w + 2 * p - k) / s + 1;
        uint32_t colw = argu(argv[14]);
        load(argv[11], aux1);
        load(argv[12], aux2);
        load(argv[13], aux3);
        load(argv[15], aux4);
        rc = dnnrt_qconv2d_crs(aux1, aux2, colw, (const int32_t *)aux3,
                               (const int32_t *)aux4, in_buf, out_buf, scratch,
                               c, h, w, f, k, s, p, argd(argv[16]), argi(argv[17]),
                               argi(argv[18]), argi(argv[19]), argi(argv[20]));
        out_bytes = (size_t)f * ho * wo;
    } else if (strcmp(op, "relu_f32") == 0) {
        uint32_t n = argu(argv[4]);
        rc = dnnrt_relu_f32((const float *)in_buf, (float *)out_buf, n);
        out_bytes = n * 4u;
    } else if (strcmp(op, "relu_u8") == 0) {
        uint32_t n = argu(argv[4]);
        rc = dnnrt_relu_u8(in_buf, out_buf, n, argi(argv[5]));
        out_bytes = n;
    } else if (strcmp(op, "maxpool_f32") == 0) {
        uint32_t c = argu(argv[4]), h = argu(argv[5]), w = argu(argv[6]), pl = argu(argv[7]);
        rc = dnnrt_maxpool_f32((const float *)in_buf, (float *)out_buf, c, h, w, pl);
        out_bytes = (size_t)c * (h / pl) * (w / pl) * 4u;
    } else if (strcmp(op, "maxpool_u8") == 0) {
        uint32_t c = argu(argv[4]), h = argu(argv[5]), w = argu(argv[6]), pl = argu(argv[7]);
        rc = dnnrt_maxpool_u8(in_buf, out_buf, c, h, w, pl);
        out_bytes = (size_t)c * (h / pl) * (w / pl);
    } else if (strcmp(op, "batchnorm_f32") == 0) {
        uint32_t c = argu(argv[4]), spatial = argu(argv[5]);
        load(argv[6], aux1);
        load(argv[7], aux2);
        load(argv[8], aux3);
        load(argv[9], aux4);
        rc = dnnrt_batchnorm_f32((const float *)aux1, (const float *)aux2,
                                 (const float *)aux3, (const float *)aux4,
                                 (float)argd(argv[10]), (const float *)in_buf,
                                 (float *)out_buf, c, spatial);
        out_bytes = (size_t)c * spatial * 4u;
    } else if (strcmp(op, "softmax_f32") == 0) {
        uint32_t n = argu(argv[4]);
        rc = dnnrt_softmax_f32((const float *)in_buf, (float *)out_buf, n);
        out_bytes = n * 4u;
    } else if (strcmp(op, "add_f32") == 0) {
        uint32_t n = argu(argv[4]);
        load(argv[5], aux3);
        rc = dnnrt_add_f32((const float *)in_buf, (const float *)aux3,
                           (float *)out_buf, n);
        out_bytes = n * 4u;
    } else if (strcmp(op, "quantize") == 0) {
        uint32_t n = argu(argv[4]);
        rc = dnnrt_quantize((const float *)in_buf, out_buf, n, argd(argv[5]),
                            argi(argv[6]));
        out_bytes = n;
    } else if (strcmp(op, "dequantize") == 0) {
        uint32_t n = argu(argv[4]);
        rc = dnnrt_dequantize(in_buf, (float *)out_buf, n, argd(argv[5]),
                              argi(argv[6]));
        out_bytes = n * 4u;
    } else if (strcmp(op, "copy") == 0) {
        uint32_t n = argu(argv[4]);
        rc = dnnrt_copy(in_buf, out_buf, n);
        out_bytes = n;
    } else {
        fprintf(stderr, "unknown op %s\n", op);
        return 13;
    }

    if (rc != DNNRT_OK) {
        fprintf(stderr, "%s failed with status %d\n", op, rc);
        return rc;
    }
    store(out_path, out_buf, out_bytes);
    return 0;
}
