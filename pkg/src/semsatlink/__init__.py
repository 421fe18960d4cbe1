"""Semantic image transmission over a regenerative LEO satellite link.

Desk-scale, self-contained simulator: NTN multipath channel, OFDM PHY,
a quantized convolutional semantic codec with channel-adaptive rate
selection and correlation-aided reconstruction, learned two-level
semantic error detection, HARQ delay accounting, and a block-DCT+LDPC
classic baseline for comparison.
"""

__version__ = "0.1.0"
