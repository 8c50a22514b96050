"""Split-policy inference toolkit.

A small convolutional encoder that compiles to fragment-shader passes, a
wire protocol for raw frames or quantized feature maps, and latency and
scalability harnesses for the bandwidth trade-off between the two.
"""

__version__ = "0.1.0"
