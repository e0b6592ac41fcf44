"""Micro-expression recognition from onset-to-apex optical flow.

Pipeline stages: manifest ingestion and label remapping, LBP-based apex
spotting, TV-L1 optical flow between onset and apex frames, a two-stream
convolutional classifier over the resized flow components, and a
leave-one-subject-out evaluation harness.
"""

__version__ = "0.1.0"
