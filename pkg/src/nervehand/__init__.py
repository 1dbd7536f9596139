"""Software motor-decoding engine for a nerve-driven prosthetic hand.

Emulated nerve-signal devices feed a three-stage real-time pipeline
(acquisition, pre-processing, deep-learning inference) that drives an emulated
five-finger hand.  Training, evaluation and benchmarking tools sit alongside.
"""

__version__ = "0.1.0"
