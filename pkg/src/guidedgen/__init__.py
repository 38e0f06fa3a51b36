"""Oracle-guided decoding for a frozen autoregressive model.

The package provides a toy n-gram base model, sequence oracles (lexical,
tuple-based commonsense, joint), the expected-oracle predictor used to
reweight the base model token by token, and an evaluation harness.
"""

__version__ = "0.1.0"
