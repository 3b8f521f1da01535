"""Speaker-verification toolkit: TDNN speaker embeddings trained with
softmax, angular-margin softmax, or triplet losses; cosine / Euclidean /
PLDA scoring; EER and DET evaluation."""

__version__ = "0.1.0"
