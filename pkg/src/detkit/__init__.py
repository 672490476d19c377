"""Detection-pipeline kernels for YOLO-style detectors.

Grid-sensitive head decoding, target assignment, losses with analytic
gradients, EMA, DropBlock/CoordConv/SPP, greedy/Soft/Matrix NMS and
COCO-style mAP evaluation.
"""

from .geometry import Box, giou, iou, iou_matrix
from .headcodec import DecodeConfig, HeadLayout, PyramidLevel, decode_center, decode_level, decode_size, encode
from .nms import Detection, NmsConfig, fuse_scores, greedy_nms, matrix_nms, soft_nms_sequential

__version__ = "0.1.0"

__all__ = [
    "Box", "iou", "giou", "iou_matrix",
    "HeadLayout", "PyramidLevel", "DecodeConfig", "decode_center", "decode_size", "decode_level", "encode",
    "Detection", "NmsConfig", "fuse_scores", "greedy_nms", "matrix_nms", "soft_nms_sequential",
]
