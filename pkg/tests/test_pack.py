import numpy as np
import pytest

from dnnforge import prune, quant
from dnnforge import pack as packmod
from dnnforge.ir import Graph, QuantParams, TensorDesc
from dnnforge.pack import (PackedStream, crs_decode, crs_encode, crs_feasible,
                           pack, unpack)

from conftest import two_conv_graph

FIG3 = np.array([[10, 0, 0, 0, 1],
                 [0, 7, 0, 2, 0],
                 [0, 0, 8, 0, 0],
                 [14, 0, 0, 0, 6]], dtype=np.float32)


def test_crs_encode_golden():
    crs = crs_encode(FIG3)
    assert crs.values.tolist() == [10, 1, 7, 2, 8, 14, 6]
    assert crs.col_ind.tolist() == [0, 4, 1, 3, 2, 0, 4]
    assert crs.row_ptr.tolist() == [0, 2, 4, 5, 7]
    crs.validate(cols=5)


def test_crs_all_zero_matrix():
    crs = crs_encode(np.zeros((3, 4), dtype=np.float32))
    assert crs.values.size == 0
    assert crs.col_ind.size == 0
    assert crs.row_ptr.tolist() == [0, 0, 0, 0]
    assert np.array_equal(crs_decode(crs, (3, 4), dtype=np.float32),
                          np.zeros((3, 4), dtype=np.float32))


def test_crs_roundtrip_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        rows = int(rng.integers(1, 15))
        cols = int(rng.integers(1, 15))
        m = rng.standard_normal((rows, cols)).astype(np.float32)
        m[rng.random((rows, cols)) < rng.uniform(0, 0.95)] = 0.0
        back = crs_decode(crs_encode(m), (rows, cols), dtype=np.float32)
        assert np.array_equal(back, m)


def test_crs_roundtrip_keeps_negative_zero():
    m = np.array([[0.0, -0.0], [1.0, 0.0]], dtype=np.float32)
    crs = crs_encode(m)
    assert crs.nnz == 2  # -0.0 is stored explicitly
    back = crs_decode(crs, (2, 2), dtype=np.float32)
    assert np.array_equal(back.view(np.uint32), m.view(np.uint32))


def test_crs_roundtrip_u8_zero_point():
    rng = np.random.default_rng(1)
    zp = 117
    m = rng.integers(0, 256, (6, 9)).astype(np.uint8)
    m[rng.random((6, 9)) < 0.6] = zp
    crs = crs_encode(m, zero=zp)
    back = crs_decode(crs, (6, 9), zero=zp, dtype=np.uint8)
    assert np.array_equal(back, m)


def test_crs_requires_2d():
    with pytest.raises(ValueError, match="2-D"):
        crs_encode(np.zeros((2, 2, 2)))


def test_crs_feasible_hand_values():
    feasible, dense, crs = crs_feasible((100, 100), 5000, "f32")
    assert (feasible, dense, crs) == (True, 40000, 30404)
    feasible, dense, crs = crs_feasible((100, 100), 5000, "u8")
    assert (feasible, dense, crs) == (False, 10000, 15404)


def test_crs_feasible_empty_tensor():
    feasible, dense, crs = crs_feasible((100, 100), 0, "f32")
    assert feasible and crs == 101 * 4
    # tiny tensors may not even pay for the row pointers
    feasible, dense, crs = crs_feasible((100, 1), 0, "u8")
    assert not feasible


def test_crs_flip_point_u8_strictly_higher():
    shape = (32, 32)
    def flip_nnz(dtype):
        for nnz in range(shape[0] * shape[1], -1, -1):
            if crs_feasible(shape, nnz, dtype)[0]:
                return nnz  # highest nnz (lowest sparsity) where crs wins
        return -1
    f32_nnz = flip_nnz("f32")
    u8_nnz = flip_nnz("u8")
    assert u8_nnz < f32_nnz  # u8 needs strictly fewer nonzeros => more sparsity


def test_col_width_selection():
    assert packmod.crs_col_width(65535) == 2
    assert packmod.crs_col_width(65536) == 4


def _params_only_graph(tensors):
    g = Graph(name="p", inputs=["x"], outputs=["x"])
    g.edges["x"] = TensorDesc((1,))
    for name, values, desc in tensors:
        g.add_param(name, values, desc)
    return g


def test_pack_alignment_two_f32():
    g = _params_only_graph([
        ("a", np.arange(3, dtype=np.float32), None),
        ("b", np.arange(4, dtype=np.float32), None),
    ])
    stream = pack(g)
    assert [d.offset for d in stream.descriptors] == [0, 12]


def test_pack_alignment_u8_then_f32():
    g = _params_only_graph([
        ("a", np.arange(5, dtype=np.uint8),
         TensorDesc((5,), dtype="u8", quant=QuantParams(1.0, 0))),
        ("b", np.arange(2, dtype=np.float32), None),
    ])
    stream = pack(g)
    assert [d.offset for d in stream.descriptors] == [0, 8]
    assert stream.payload[5:8] == b"\x00\x00\x00"


def test_pack_empty_param_set():
    g = _params_only_graph([])
    stream = pack(g)
    assert len(stream.descriptors) == 0
    assert stream.payload == b""
    assert len(stream) == packmod.HEADER_SIZE


def test_pack_unpack_bitexact_dense_and_crs():
    g = two_conv_graph(seed=7)
    # force c2's weight sparse enough that CRS wins
    w = g.params["c2.weight"].values
    w.reshape(-1)[: int(w.size * 0.9)] = 0.0
    stream = pack(g)
    layouts = {d.name: d.layout for d in stream.descriptors}
    assert layouts["c2.weight"] == "crs"
    assert layouts["c1.bias"] == "dense"
    order = packmod.packed_param_order(g)
    for d, arr in unpack(stream):
        assert np.array_equal(arr, g.params[d.name].values), d.name
    assert [d.name for d in stream.descriptors] == order


def test_pack_unpack_quantized_graph(trained_mlp, blobs):
    g, _ = trained_mlp
    qg = quant.ppq(g, blobs.train_x[:32])
    stream = pack(qg)
    for d, arr in unpack(stream):
        assert np.array_equal(arr, qg.params[d.name].values), d.name
        if d.dtype == "u8":
            assert d.scale == qg.params[d.name].desc.quant.scale
            assert d.zero_point == qg.params[d.name].desc.quant.zero_point


def test_stream_file_roundtrip(tmp_path):
    g = two_conv_graph(seed=8)
    stream = pack(g)
    path = str(tmp_path / "m.weights")
    stream.save(path)
    with open(path, "rb") as f:
        data = f.read()
    assert data[:4] == b"TFWS"
    back = PackedStream.from_bytes(data)
    assert len(back.descriptors) == len(stream.descriptors)
    for d1, d2 in zip(stream.descriptors, back.descriptors):
        assert (d1.dtype, d1.layout, d1.shape, d1.offset, d1.nbytes, d1.nnz,
                d1.col_width, d1.scale, d1.zero_point) == \
               (d2.dtype, d2.layout, d2.shape, d2.offset, d2.nbytes, d2.nnz,
                d2.col_width, d2.scale, d2.zero_point)
    assert back.payload == stream.payload


def test_stream_bad_magic():
    with pytest.raises(ValueError, match="magic"):
        PackedStream.from_bytes(b"NOPE" + b"\x00" * 32)


def test_offsets_four_byte_aligned():
    g = two_conv_graph(seed=9)
    g.params["c1.bias"].values[:] = 0  # dense 1-D stays dense regardless
    stream = pack(g)
    for d in stream.descriptors:
        assert d.offset % 4 == 0
    total = max(d.offset + d.nbytes for d in stream.descriptors)
    assert len(stream.payload) == packmod.align_up(total) or len(stream.payload) == total


def test_packed_size_monotone_in_structural_rate():
    from dnnforge import presets

    sizes = []
    for target in (0.0, 0.25, 0.5, 0.75):
        g = presets.build_mlp((2, 16, 16, 2), seed=0)
        if target > 0:
            keep_n = max(1, 16 - int(np.ceil(target * 16)))
            keep = {"fc1": list(range(keep_n)), "fc2": list(range(keep_n))}
            g = prune.shrink_structures(g, keep)
        sizes.append(len(pack(g)))
    assert all(b < a for a, b in zip(sizes, sizes[1:]))
