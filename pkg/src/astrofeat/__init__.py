"""Feature-matching evaluation and training-support toolkit for vision-based
asteroid proximity navigation.

Subpackages cover the full pipeline: radiance-image preprocessing, ground-truth
pair construction from georeferenced imagery, data augmentation, sparse feature
extraction and matching, matching metrics, robust pose estimation, detector /
descriptor loss evaluation, and ASHA + GP-based hyperparameter search.
"""

__version__ = "0.1.0"
