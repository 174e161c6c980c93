"""mvr: multi-view reconstruction anomaly detection for point clouds.

Point clouds are rendered to depth views, a frozen vision transformer
(teacher) encodes each view, a student network learns to rebuild the
teacher's features on normal data, and per-point cosine residuals after
back-projection to 3D are the anomaly scores.
"""

__version__ = "0.1.0"
