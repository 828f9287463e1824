"""unconked: unsupervised contrastive keypoint detection and description.

Trains dense descriptors on randomly sampled points with a ranking
average-precision loss, derives keypoint detectors by regressing descriptor
performance heatmaps, and registers image pairs via mutual-NN matching and
robust homography fitting.
"""

__version__ = "0.1.0"
