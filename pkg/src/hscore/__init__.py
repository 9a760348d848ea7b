"""H-score quantification for IHC-stained tissue tiles.

Post-processes per-class nucleus heatmaps into keypoints, classifies each
nucleus by the HSV colour of a small patch around it, and aggregates the
weak/moderate/strong counts into per-compartment H-scores. Also ships the
per-annotator threshold calibration, keypoint mAP evaluation with paired
bootstrap intervals, and a synthetic tile generator used as a test oracle.
"""

__version__ = "0.1.0"

COMPARTMENTS = ("stroma", "epithelium")
STAIN_CLASSES = ("none", "weak", "moderate", "strong")
