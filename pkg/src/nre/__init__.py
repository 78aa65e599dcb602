"""Neural relation extraction toolkit.

Sentence-level, bag-level and few-shot relation extraction built on a
minimal reverse-mode autodiff tensor core, with training, evaluation,
checkpointing, a CLI and an HTTP inference service.
"""

__version__ = "0.1.0"
