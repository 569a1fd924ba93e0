"""Few-shot classification with a frozen, once-trained embedding.

An MLP embedder is trained on the union of the meta-training classes
(optionally refined by sequential self-distillation); every few-shot episode
then fits its own small classifier on the frozen features.
"""

__version__ = "0.1.0"
