"""Two-stage anchor-free pedestrian detection at desk scale.

Center/scale heatmap detector, a light suppression head that rescores
detections, score fusion, and the log-average miss rate benchmark, all
trained on a deterministic synthetic scene generator.
"""

from focaldet.boxes import Annotation, BBox, Detection, GridShape, ioa, iou

__all__ = ["Annotation", "BBox", "Detection", "GridShape", "ioa", "iou"]
__version__ = "0.1.0"
