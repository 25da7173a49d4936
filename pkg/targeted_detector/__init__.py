"""
Language-targeted object detector: a transformer detector whose decoder is
conditioned on target-text tokens, with data preparation, set-prediction
training and COCO-style evaluation.
"""

__version__ = "0.1.0"
