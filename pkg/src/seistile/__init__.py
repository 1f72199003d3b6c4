"""seistile: encoder-decoder facies segmentation for seismic volumes.

From-scratch numpy stack: a taped autodiff core, residual and transposed
residual building blocks, a topology DSL with analytic parameter/operation
counters, the volume tiling/splitting data pipeline, RMSProp training with
best-validation-mIOU checkpointing, and the tile-reassembly mIOU test
protocol.
"""

__version__ = "0.1.0"
