import numpy as np
import pytest

from dnnforge import presets, trainer
from dnnforge.ir import Graph, Node, TensorDesc, infer_shapes


def relu_chain(n_ops: int, shape=(4,)) -> Graph:
    """input -> ReLU x n -> output, useful for lifetime/identity tests."""
    g = Graph(name="chain", inputs=["e0"], outputs=[f"e{n_ops}"])
    g.edges["e0"] = TensorDesc(shape)
    for i in range(n_ops):
        g.nodes.append(Node(f"op{i + 1}", "ReLU", [f"e{i}"], [f"e{i + 1}"]))
    infer_shapes(g)
    return g


def two_conv_graph(seed=0, channels=(3, 3, 4), hw=6, kernel=2) -> Graph:
    """input -> conv1 -> ReLU -> conv2 -> Flatten, randomized parameters."""
    rng = np.random.default_rng(seed)
    c0, c1, c2 = channels
    g = Graph(name="twoconv", inputs=["x"], outputs=["e4"])
    g.edges["x"] = TensorDesc((c0, hw, hw))
    g.add_param("c1.weight", rng.standard_normal((c1, c0, kernel, kernel)).astype(np.float32))
    g.add_param("c1.bias", rng.standard_normal(c1).astype(np.float32))
    g.add_param("c2.weight", rng.standard_normal((c2, c1, kernel, kernel)).astype(np.float32))
    g.add_param("c2.bias", rng.standard_normal(c2).astype(np.float32))
    g.nodes.append(Node("c1", "Conv2D", ["x"], ["e1"], attrs={"kernel": kernel},
                        params={"weight": "c1.weight", "bias": "c1.bias"}))
    g.nodes.append(Node("r1", "ReLU", ["e1"], ["e2"]))
    g.nodes.append(Node("c2", "Conv2D", ["e2"], ["e3"], attrs={"kernel": kernel},
                        params={"weight": "c2.weight", "bias": "c2.bias"}))
    g.nodes.append(Node("fl", "Flatten", ["e3"], ["e4"]))
    infer_shapes(g)
    g.meta["baseline_params"] = g.param_count()
    return g


def make_digits(n: int, seed: int, hw: int = 12) -> trainer.Dataset:
    """Synthetic two-class bar images: vertical bar = 0, horizontal bar = 1."""
    r = np.random.default_rng(seed)
    xs, ys = [], []
    for _ in range(n):
        img = r.random((1, hw, hw), dtype=np.float32) * 0.2
        c = int(r.integers(0, 2))
        pos = int(r.integers(2, hw - 2))
        if c == 0:
            img[0, :, pos] += 0.8
        else:
            img[0, pos, :] += 0.8
        xs.append(img)
        ys.append(c)
    n_test = n // 4
    return trainer.Dataset(np.stack(xs), np.array(ys),
                           np.arange(n_test, n), np.arange(n_test), 2)


@pytest.fixture(scope="session")
def blobs():
    return trainer.make_blobs(400, 2, seed=0)


@pytest.fixture(scope="session")
def trained_mlp(blobs):
    g = presets.build_mlp((2, 32, 32, 2), seed=0)
    g, metrics = trainer.train(g, blobs, trainer.TrainConfig(lr=1e-2, epochs=25,
                                                             batch_size=32, seed=0))
    return g, metrics
