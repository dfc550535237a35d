"""Desk-scale lab for staged text-then-speech adaptation of an
encoder-decoder ASR model on synthetic code-switched data."""

__version__ = "0.1.0"
