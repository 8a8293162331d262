"""adunit: zero-copy shared-memory pub/sub transport, perception kernels
(point cloud generation, obstacle grid, lane detection), and a
multi-process transport-comparison benchmark harness."""

__version__ = "0.1.0"
