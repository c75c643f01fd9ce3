"""Two-branch synthetic-speech detector.

CM1 models the temporal consistency of intra-utterance speaker features
(frame differencing + a gated recurrent network); CM2 detects shifts in the
distribution of inter-utterance speaker embeddings (frozen encoder below
the feature-aggregation tap, retrained head).  Scores fuse with equal
weights.  Ships a synthetic-trajectory simulator so the full pipeline is
testable at desk scale.
"""

__version__ = "0.1.0"
