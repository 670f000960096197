"""seqmotion: probabilistic motion modeling for 2-D image sequences.

Registers a sequence against its first frame with diffeomorphic
deformations, encodes the motion in a low-dimensional motion matrix, and
supports tracking, motion compensation, reconstruction from sparse
frames, motion simulation and motion transport.
"""

__version__ = "0.1.0"
