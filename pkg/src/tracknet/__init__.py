"""Simultaneous detection and tracking of moving objects as bounding tubes."""

from .geometry import Box, Tube, box_iou, tube_iou_3d, tube_nms, tube_union_box

__version__ = "0.1.0"

__all__ = ["Box", "Tube", "box_iou", "tube_iou_3d", "tube_nms", "tube_union_box"]
