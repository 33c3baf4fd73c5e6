# Copyright (c) 2024 flowspan developers
"""
Monocular depth evaluation metrics.

The standard set: mean absolute relative error, mean absolute log10
error, RMS error and the fractions of pixels whose ratio to ground truth
is within ``1.25``, ``1.25 ** 2`` and ``1.25 ** 3``.

Depth predicted from flow is only known up to scale, so predictions are
by default aligned to the ground truth by the median ratio before the
metrics are computed.
"""

from dataclasses import asdict, dataclass
from logging import getLogger
from typing import Iterable, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .geometry import DisparityMap
from .impl.exceptions import FlowspanException

logger = getLogger(__name__)


DISPARITY_FLOOR = 1e-6
"""Disparities are clipped to at least this before inverting to depth."""

SIGMA_BASE = 1.25
"""Threshold ``i`` for the accuracy fractions is ``SIGMA_BASE ** i``."""

Alignment = Literal["none", "median"]
"""
How predictions are scaled before evaluation.

``"none"`` leaves them alone. ``"median"`` multiplies them by the median
of ``gt / pred`` over valid pixels.
"""

METRIC_COLUMNS = ["REL", "LOG10", "RMS", "SIGMA1", "SIGMA2", "SIGMA3"]
"""Report columns, in the order depth benchmarks usually print them."""


class MetricsException(FlowspanException):
    """An exception raised by the `flowspan.metrics` module."""


@dataclass(frozen=True)
class DepthEvalReport:
    """
    Depth metrics for one image.

    Parameters
    ----------
    rel
        Mean of ``|p - g| / g``.
    log10
        Mean of ``|log10 p - log10 g|``.
    rms
        ``sqrt(mean((p - g) ** 2))``, in depth units.
    sigma
        Fractions of pixels with ``max(p / g, g / p) < 1.25 ** i`` for
        ``i = 1, 2, 3``.
    n_pixels
        The number of valid pixels.
    scale_applied
        The factor predictions were multiplied by.
    """

    rel: float
    log10: float
    rms: float
    sigma: Tuple[float, float, float]
    n_pixels: int
    scale_applied: float = 1.0

    def to_record(self) -> dict:
        record = asdict(self)
        record["sigma"] = list(self.sigma)
        return record

    def to_frame(self) -> pd.DataFrame:
        """A one-row data frame with the metric columns first."""
        row = dict(
            zip(METRIC_COLUMNS, (self.rel, self.log10, self.rms) + tuple(self.sigma))
        )
        row["N_PIXELS"] = self.n_pixels
        row["SCALE"] = self.scale_applied
        return pd.DataFrame([row])


def depth_from_disparity(
    disparity: Union[DisparityMap, np.ndarray], floor: float = DISPARITY_FLOOR
) -> np.ndarray:
    """Invert disparity to depth, clipping disparity below at `floor`."""
    if isinstance(disparity, DisparityMap):
        disparity = disparity.data
    data = np.asarray(disparity)
    if floor <= 0:
        raise MetricsException(f"The disparity floor must be positive, not {floor}.")
    return 1.0 / np.maximum(data, floor)


def _valid_pixels(
    pred: np.ndarray, gt: np.ndarray, valid: Optional[np.ndarray], crop: int
) -> np.ndarray:
    if pred.shape != gt.shape or pred.ndim != 2:
        raise MetricsException(
            f"Prediction {pred.shape} and ground truth {gt.shape} "
            "must be the same (H, W)."
        )

    if valid is None:
        mask = np.isfinite(gt) & (gt > 0)
    else:
        mask = np.asarray(valid, dtype=bool)
        if mask.shape != gt.shape:
            raise MetricsException(
                f"Mask {mask.shape} does not match depth {gt.shape}."
            )
        mask = mask.copy()

    if crop < 0:
        raise MetricsException(f"Crop must be non-negative, not {crop}.")
    if crop > 0:
        border = np.ones_like(mask)
        border[crop:-crop, crop:-crop] = False
        mask[border] = False

    return mask


def evaluate_depth(
    pred: np.ndarray,
    gt: np.ndarray,
    valid: Optional[np.ndarray] = None,
    alignment: Alignment = "median",
    *,
    crop: int = 0,
) -> DepthEvalReport:
    """
    Compare predicted depth to ground truth.

    Parameters
    ----------
    pred
        Predicted depth, ``(H, W)``.
    gt
        Ground-truth depth, ``(H, W)``.
    valid
        Which pixels to evaluate. Defaults to those where `gt` is finite
        and positive.
    alignment
        See :py:data:`Alignment`.
    crop
        Also ignore this many pixels at each image border.

    Returns
    -------
        The metrics.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)

    mask = _valid_pixels(pred, gt, valid, crop)

    n_pixels = int(mask.sum())
    if n_pixels == 0:
        raise MetricsException("There are no valid pixels to evaluate.")

    p = pred[mask]
    g = gt[mask]

    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(g))):
        raise MetricsException("Depths must be finite on valid pixels.")
    if np.any(p <= 0) or np.any(g <= 0):
        raise MetricsException("Depths must be positive on valid pixels.")

    if alignment == "median":
        scale = float(np.median(g / p))
    elif alignment == "none":
        scale = 1.0
    else:
        raise MetricsException(f"Unknown alignment '{alignment}'.")

    p = p * scale

    ratio = np.maximum(p / g, g / p)
    sigma = tuple(float(np.mean(ratio < SIGMA_BASE**i)) for i in (1, 2, 3))

    report = DepthEvalReport(
        rel=float(np.mean(np.abs(p - g) / g)),
        log10=float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
        rms=float(np.sqrt(np.mean((p - g) ** 2))),
        sigma=sigma,
        n_pixels=n_pixels,
        scale_applied=scale,
    )

    logger.debug("Evaluated %d pixels: %s.", n_pixels, report)

    return report


def reports_frame(
    reports: Iterable[DepthEvalReport], names: Optional[Iterable[str]] = None
) -> pd.DataFrame:
    """
    Stack per-image reports into one data frame.

    Parameters
    ----------
    reports
        The reports.
    names
        Optional name for each report, used as the index.

    Returns
    -------
        One row per report.
    """
    frames = [report.to_frame() for report in reports]
    if not frames:
        return pd.DataFrame(columns=METRIC_COLUMNS + ["N_PIXELS", "SCALE"])

    df = pd.concat(frames, ignore_index=True)
    if names is not None:
        df.index = pd.Index(list(names), name="NAME")

    return df
