"""C source emission: two-function API over the packed stream and memory plan.

Emits three files. ``model_data.c`` holds the packed weight stream as one
constant array of 32-bit words (guaranteeing 4-byte alignment portably).
``model.c`` holds ``<name>_init()``, which only verifies the stream magic
and version, and ``<name>_infer(input, output)``, which calls one runtime
function per serialized operator with compile-time constant descriptor
arguments: all offsets into the weight array and into the single static
heap array come from the packed stream and the memory plan. ``model.h``
declares the API. Emitted sources are self-contained C99 against the
runtime header ``dnnrt.h``; no dynamic allocation appears anywhere.

Generated code is byte-for-byte deterministic for identical inputs. The
inference function is not reentrant: all intermediates share one static
heap array sized exactly to the planner's peak.
"""

from __future__ import annotations

import json
import os
import re

import numpy as np

from . import quant
from .ir import ELEM_SIZE, Graph, Node, ValidationError, toposort
from .memplan import MemoryPlan, align_up
from .pack import PackedStream, StreamDescriptor, crs_feasible
from .prune import effective_param_count, realized_sparsity

# fixed SRAM overhead added on top of the planned peak in reports
SRAM_OVERHEAD = 0

_CTYPE = {"f32": "float", "u8": "uint8_t", "i32": "int32_t"}


def sanitize_name(name: str) -> str:
    """Make a valid C identifier prefix: non-alnum -> '_', leading digit -> 'm_'."""
    s = re.sub(r"[^0-9A-Za-z_]", "_", name)
    if not s or s[0].isdigit():
        s = "m_" + s
    return s


def _dhex(x: float) -> str:
    """Exact C99 hex literal for a double."""
    return float(x).hex()


def _f32(x) -> str:
    return f"{np.float32(x):.9g}f"


class _Emitter:
    def __init__(self, g: Graph, stream: PackedStream, plan: MemoryPlan, name: str):
        self.g = g
        self.plan = plan
        self.name = name
        self.descs: dict[str, StreamDescriptor] = {d.name: d for d in stream.descriptors}
        self.payload_base = stream.payload_offset
        self.stream_len = len(stream)
        self.lines: list[str] = []

    # -- pointer expressions --------------------------------------------------

    def wptr(self, pname: str, ctype: str, sub_offset: int = 0) -> str:
        d = self.descs[pname]
        off = self.payload_base + d.offset + sub_offset
        return f"(const {ctype} *)({self.name}_w + {off})"

    def crs_ptrs(self, pname: str) -> tuple[str, str, int, str]:
        d = self.descs[pname]
        esize = ELEM_SIZE[d.dtype]
        vals_off = 0
        ci_off = vals_off + align_up(d.nnz * esize)
        rp_off = ci_off + align_up(d.nnz * d.col_width)
        vals = self.wptr(pname, _CTYPE[d.dtype], vals_off)
        ci = self.wptr(pname, "void", ci_off)
        rp = self.wptr(pname, "int32_t", rp_off)
        return vals, ci, d.col_width, rp

    def eptr(self, edge: str) -> str:
        desc = self.g.edges[edge]
        ctype = _CTYPE[desc.dtype]
        if edge in self.g.inputs:
            return "input"
        if edge in self.g.outputs:
            return "output"
        off, _ = self.plan.offsets[edge]
        return f"({ctype} *)({self.name}_heap + {off})"

    def scratch_ptr(self, node: Node, ctype: str) -> str:
        key = f"{node.name}#scratch"
        if key not in self.plan.offsets:
            return "NULL"
        off, _ = self.plan.offsets[key]
        return f"({ctype} *)({self.name}_heap + {off})"

    def call(self, expr: str, comment: str = "") -> None:
        suffix = f"  /* {comment} */" if comment else ""
        self.lines.append(f"    {self.name.upper()}_CALL({expr});{suffix}")

    # -- per-op emission --------------------------------------------------------

    def emit_node(self, n: Node) -> None:
        g = self.g
        x = self.eptr(n.inputs[0])
        y = self.eptr(n.outputs[0])
        ind = g.edges[n.inputs[0]]
        outd = g.edges[n.outputs[0]]
        if n.op in ("Conv2D", "QLinearConv"):
            c, h, w = ind.shape
            wname = n.params["weight"]
            d = self.descs[wname]
            f = d.shape[0]
            k, s, p = int(n.attr("kernel")), int(n.attr("stride")), int(n.attr("pad"))
            if n.op == "Conv2D":
                b = self.wptr(n.params["bias"], "float")
                scr = self.scratch_ptr(n, "float")
                dims = f"{x}, {y}, {scr}, {c}, {h}, {w}, {f}, {k}, {s}, {p}"
                if d.layout == "dense":
                    wp = self.wptr(wname, "float")
                    self.call(f"dnnrt_conv2d_f32({wp}, {b}, {dims})", n.name)
                else:
                    vals, ci, cw, rp = self.crs_ptrs(wname)
                    self.call(f"dnnrt_conv2d_f32_crs({vals}, {ci}, {cw}, {rp}, {b}, {dims})", n.name)
            else:
                b = self.wptr(n.params["bias"], "int32_t")
                scr = self.scratch_ptr(n, "uint8_t")
                m = quant.requant_multiplier(ind.quant, g.params[wname].desc.quant, outd.quant)
                qargs = (f"{_dhex(m)}, {g.params[wname].desc.quant.zero_point}, "
                         f"{ind.quant.zero_point}, {outd.quant.zero_point}, "
                         f"{int(n.attr('clamp_min'))}")
                dims = f"{x}, {y}, {scr}, {c}, {h}, {w}, {f}, {k}, {s}, {p}"
                if d.layout == "dense":
                    wp = self.wptr(wname, "uint8_t")
                    self.call(f"dnnrt_qconv2d({wp}, {b}, {dims}, {qargs})", n.name)
                else:
                    vals, ci, cw, rp = self.crs_ptrs(wname)
                    self.call(f"dnnrt_qconv2d_crs({vals}, {ci}, {cw}, {rp}, {b}, {dims}, {qargs})",
                              n.name)
        elif n.op in ("Linear", "QLinearMatMul"):
            wname = n.params["weight"]
            d = self.descs[wname]
            out_n, in_n = d.shape
            if n.op == "Linear":
                b = self.wptr(n.params["bias"], "float")
                dims = f"{x}, {y}, {out_n}, {in_n}"
                if d.layout == "dense":
                    self.call(f"dnnrt_linear_f32({self.wptr(wname, 'float')}, {b}, {dims})", n.name)
                else:
                    vals, ci, cw, rp = self.crs_ptrs(wname)
                    self.call(f"dnnrt_linear_f32_crs({vals}, {ci}, {cw}, {rp}, {b}, {dims})", n.name)
            else:
                b = self.wptr(n.params["bias"], "int32_t")
                m = quant.requant_multiplier(ind.quant, g.params[wname].desc.quant, outd.quant)
                qargs = (f"{_dhex(m)}, {g.params[wname].desc.quant.zero_point}, "
                         f"{ind.quant.zero_point}, {outd.quant.zero_point}, "
                         f"{int(n.attr('clamp_min'))}")
                dims = f"{x}, {y}, {out_n}, {in_n}"
                if d.layout == "dense":
                    self.call(f"dnnrt_qlinear({self.wptr(wname, 'uint8_t')}, {b}, {dims}, {qargs})",
                              n.name)
                else:
                    vals, ci, cw, rp = self.crs_ptrs(wname)
                    self.call(f"dnnrt_qlinear_crs({vals}, {ci}, {cw}, {rp}, {b}, {dims}, {qargs})",
                              n.name)
        elif n.op == "BatchNorm":
            c = ind.shape[0]
            spatial = ind.numel // c
            ps = [self.wptr(n.params[r], "float") for r in ("gamma", "beta", "mean", "var")]
            self.call(f"dnnrt_batchnorm_f32({', '.join(ps)}, {_f32(n.attr('epsilon'))}, "
                      f"{x}, {y}, {c}, {spatial})", n.name)
        elif n.op == "MaxPool":
            c, h, w = ind.shape
            fn = "dnnrt_maxpool_u8" if ind.dtype == "u8" else "dnnrt_maxpool_f32"
            self.call(f"{fn}({x}, {y}, {c}, {h}, {w}, {int(n.attr('pool'))})", n.name)
        elif n.op == "ReLU":
            if ind.dtype == "u8":
                self.call(f"dnnrt_relu_u8({x}, {y}, {ind.numel}, {ind.quant.zero_point})", n.name)
            else:
                self.call(f"dnnrt_relu_f32({x}, {y}, {ind.numel})", n.name)
        elif n.op == "Softmax":
            self.call(f"dnnrt_softmax_f32({x}, {y}, {ind.numel})", n.name)
        elif n.op == "Flatten":
            self.call(f"dnnrt_copy({x}, {y}, {ind.nbytes})", n.name)
        elif n.op == "Add":
            x2 = self.eptr(n.inputs[1])
            self.call(f"dnnrt_add_f32({x}, {x2}, {y}, {ind.numel})", n.name)
        elif n.op == "QuantizeLinear":
            q = outd.quant
            self.call(f"dnnrt_quantize({x}, {y}, {ind.numel}, {_dhex(q.scale)}, {q.zero_point})",
                      n.name)
        elif n.op == "DequantizeLinear":
            q = ind.quant
            self.call(f"dnnrt_dequantize({x}, {y}, {ind.numel}, {_dhex(q.scale)}, {q.zero_point})",
                      n.name)
        else:
            raise ValidationError(f"node {n.name!r}: op {n.op} has no runtime implementation")


def emit(g: Graph, stream: PackedStream, plan: MemoryPlan, name: str | None = None) -> dict[str, str]:
    """Emit {model.h, model.c, model_data.c} contents for a finished graph."""
    if len(g.inputs) != 1 or len(g.outputs) != 1:
        raise ValidationError("emission supports single-input single-output graphs")
    name = sanitize_name(name or g.name)
    em = _Emitter(g, stream, plan, name)
    for n in toposort(g):
        for pname in n.params.values():
            if pname not in em.descs:
                raise ValidationError(f"parameter {pname!r} missing from packed stream")
        em.emit_node(n)

    in_desc = g.edges[g.inputs[0]]
    out_desc = g.edges[g.outputs[0]]
    in_t, out_t = _CTYPE[in_desc.dtype], _CTYPE[out_desc.dtype]
    guard = f"{name.upper()}_MODEL_H"

    header = f"""/* Generated inference API for model '{name}'. Do not edit. */
#ifndef {guard}
#define {guard}

#include <stdint.h>

#ifdef __cplusplus
extern "C" {{
#endif

/* Verifies the embedded weight stream; returns 0 on success. */
int {name}_init(void);

/* Runs one inference. input: {in_t}[{in_desc.numel}] ({_shape_str(in_desc.shape)}),
 * output: {out_t}[{out_desc.numel}] ({_shape_str(out_desc.shape)}).
 * Not reentrant: all intermediates live in one static heap array. */
int {name}_infer(const {in_t} *input, {out_t} *output);

#ifdef __cplusplus
}}
#endif

#endif /* {guard} */
"""

    body = [f'/* Generated inference implementation for model \'{name}\'. Do not edit. */',
            '#include <string.h>',
            '#include "dnnrt.h"',
            '#include "model.h"',
            '',
            f'extern const uint32_t {name}_weights_words[];',
            f'extern const uint32_t {name}_weights_len;',
            f'#define {name}_w ((const uint8_t *){name}_weights_words)',
            '']
    if plan.peak > 0:
        body.append(f'static uint8_t {name}_heap[{plan.peak}];')
        body.append('')
    body.append(f'''#ifdef NDEBUG
#define {name.upper()}_CALL(call) (rc |= (call))
#else
#define {name.upper()}_CALL(call) do {{ int rc_ = (call); if (rc_ != 0) return rc_; }} while (0)
#endif
''')
    body.append(f'int {name}_init(void)')
    body.append('{')
    body.append(f'    return dnnrt_stream_check({name}_w, {name}_weights_len);')
    body.append('}')
    body.append('')
    body.append(f'int {name}_infer(const {in_t} *input, {out_t} *output)')
    body.append('{')
    body.append('    int rc = 0;')
    if not g.nodes:
        body.append(f'    memcpy(output, input, {in_desc.nbytes});')
    body.extend(em.lines)
    body.append('    return rc;')
    body.append('}')

    data = [f'/* Packed weight stream for model \'{name}\' ({em.stream_len} bytes). Do not edit. */',
            '#include <stdint.h>',
            '']
    raw = stream.to_bytes()
    padded = raw + b"\x00" * (-len(raw) % 4)
    words = np.frombuffer(padded, dtype="<u4")
    data.append(f'const uint32_t {name}_weights_len = {len(raw)}u;')
    data.append(f'const uint32_t {name}_weights_words[{len(words)}] = {{')
    for i in range(0, len(words), 8):
        chunk = ", ".join(f"0x{w:08x}u" for w in words[i:i + 8])
        data.append(f'    {chunk},')
    data.append('};')

    return {
        "model.h": header,
        "model.c": "\n".join(body) + "\n",
        "model_data.c": "\n".join(data) + "\n",
    }


def _shape_str(shape) -> str:
    return "x".join(str(d) for d in shape)


def write_emit(files: dict[str, str], out_dir: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for fname, text in files.items():
        path = os.path.join(out_dir, fname)
        with open(path, "w") as f:
            f.write(text)
        paths.append(path)
    return paths


def emit_report(g: Graph, stream: PackedStream, plan: MemoryPlan) -> dict:
    """Machine-readable memory/size report for sweep-style plots."""
    baseline = int(g.meta.get("baseline_params", g.param_count()))
    nonzero = effective_param_count(g)
    tensors = []
    for d in stream.descriptors:
        p = g.params.get(d.name)
        if p is not None and len(p.desc.shape) >= 2 and p.desc.dtype in ("f32", "u8"):
            flat_shape = (p.desc.shape[0], p.desc.numel // p.desc.shape[0])
            zero = p.desc.quant.zero_point if (p.desc.dtype == "u8" and p.desc.quant) else 0
            if p.desc.dtype == "u8":
                nnz = int(np.count_nonzero(p.values != zero))
            else:
                nnz = int(np.count_nonzero(p.values))
            _feasible, dense_b, crs_b = crs_feasible(flat_shape, nnz, p.desc.dtype)
        else:
            dense_b = d.nbytes if d.layout == "dense" else None
            crs_b = None
        tensors.append({
            "name": d.name, "dtype": d.dtype, "layout": d.layout,
            "region_bytes": d.nbytes, "dense_bytes": dense_b, "crs_bytes": crs_b,
        })
    return {
        "model": g.name,
        "flash_bytes": len(stream),
        "sram_bytes": plan.peak + SRAM_OVERHEAD,
        "params_baseline": baseline,
        "params_total": int(g.param_count()),
        "params_nonzero": int(nonzero),
        "realized_sparsity": realized_sparsity(g),
        "tensors": tensors,
        "plan": plan.to_json(),
    }


def save_report(report: dict, path: str) -> str:
    with open(path, "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
        f.write("\n")
    return path
