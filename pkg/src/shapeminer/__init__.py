"""shapeminer: mine 3D shapes from unannotated image corpora.

Stages: geometric clustering of images, keypoint tracks from dense features,
orthographic rigid factorization, and a bundle-adjusting neural occupancy
field trained on silhouettes, plus a synthetic oracle harness that makes the
whole pipeline testable without real data or pretrained models.
"""

__version__ = "0.1.0"

__all__ = [
    "cameras",
    "cli",
    "clustering",
    "corpus",
    "correspondence",
    "evaluation",
    "extract",
    "factorization",
    "field",
    "pipeline",
    "synth",
]
