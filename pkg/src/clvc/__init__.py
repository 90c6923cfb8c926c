"""Cross-lingual voice conversion pipeline.

Stages: DSP feature extraction, a speaker-independent phoneme
recognizer supplying content features, a d-vector speaker encoder, a
windowed-attention mel converter, and Griffin-Lim / flow vocoders,
orchestrated by the ``clvc`` command line tool.
"""

__version__ = "0.1.0"
