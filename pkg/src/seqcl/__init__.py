"""seqcl: desk-scale continual-learning workbench for a hybrid CTC/CE recognizer."""

__version__ = "0.1.0"
