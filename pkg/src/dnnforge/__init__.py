"""dnnforge: a compression compiler for small feed-forward neural networks.

Pipeline stages, each a module of its own:

    ir        graph representation, model bundle I/O, shape inference
    trainer   minimal SGD training engine (forward/backward on numpy)
    prune     element-wise and structural pruning schedules and heuristics
    quant     affine uint8 quantization (calibration, PPQ, QAT, integer ops)
    graphopt  inference-graph rewrites (batch-norm folding, ReLU fusion)
    pack      parameter serialization into an aligned byte stream (dense/CRS)
    memplan   static activation lifetime analysis and first-fit placement
    codegen   C source emission implementing a two-function inference API
    refrun    reference interpreter; the semantic oracle for every stage
    cli       pipeline orchestration front-end
"""

__version__ = "0.1.0"
