"""Batch coercion and validation shared by the estimator facade.

Images in this package are single-channel rasters that may differ in
extent between samples, so batches travel as lists of 2-D arrays rather
than one rectangular matrix.
"""

from __future__ import annotations

import numpy as np

from .density import AnnotationSet
from .errors import DataError, DimensionError


def as_image_list(X) -> list:
    """Coerce a batch into a list of 2-D arrays.

    Accepts one ``[H,W]`` array, an ``[N,H,W]`` stack, or any sequence of
    2-D arrays.
    """
    if isinstance(X, np.ndarray):
        if X.ndim == 2:
            return [X]
        if X.ndim == 3:
            return [X[i] for i in range(X.shape[0])]
        raise DimensionError(f"image batch must be 2-D or 3-D, got shape {X.shape}")
    images = []
    for i, item in enumerate(X):
        arr = item if isinstance(item, np.ndarray) else np.asarray(item)
        if arr.ndim != 2:
            raise DimensionError(f"image {i} must be 2-D, got shape {arr.shape}")
        images.append(arr)
    if not images:
        raise DataError("empty image batch")
    return images


def as_annotation_list(y, images=None) -> list:
    """Coerce targets into :class:`AnnotationSet` objects.

    Accepts AnnotationSets, ``{"width", "height", "points"}`` dicts, or bare
    ``[N,2]`` point arrays; the last form takes its extents from the paired
    image. When images are given, extents are cross-checked.
    """
    items = list(y)
    if images is not None and len(items) != len(images):
        raise DataError(f"{len(items)} annotation sets for {len(images)} images")
    out = []
    for i, item in enumerate(items):
        if isinstance(item, AnnotationSet):
            ann = item
        elif isinstance(item, dict):
            try:
                ann = AnnotationSet(width=int(item["width"]), height=int(item["height"]),
                                    points=np.asarray(item.get("points", []), dtype=np.float64))
            except KeyError as exc:
                raise DataError(f"annotation {i} is missing key {exc}") from None
        else:
            if images is None:
                raise DataError(
                    f"annotation {i} is a bare point array; extents are unknown "
                    "without a paired image")
            h, w = images[i].shape
            ann = AnnotationSet(width=w, height=h,
                                points=np.asarray(item, dtype=np.float64))
        if images is not None:
            h, w = images[i].shape
            if (ann.height, ann.width) != (h, w):
                raise DataError(
                    f"annotation {i} covers {ann.width}x{ann.height} but its image "
                    f"is {w}x{h}")
        out.append(ann)
    if not out:
        raise DataError("empty annotation batch")
    return out
