"""melmo: masked bidirectional projected-LSTM language model pretraining.

A small, self-contained pretraining stack: numpy tensor kernels with a
reverse-mode tape, word-piece tokenization, stateful segment batching
with bidirectional truncated backpropagation through time, masked-LM
corruption with mask accumulation, and an Adam training loop -- plus a
CLI for pretraining, evaluation, embedding extraction, gradient
verification, cell benchmarking and ablation grids.
"""

__version__ = "0.1.0"

from . import corpus, masking, model, numkernel, trainer, wordpiece  # noqa: F401
