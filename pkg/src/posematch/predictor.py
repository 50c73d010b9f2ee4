"""Intermediate-flow prediction from a sampled correlation map.

This is the deterministic stand-in for a learned recurrent update: it takes
the same inputs (correlation map, previous flow, iteration index) and
returns a flow at grid resolution. A learned predictor can replace
:func:`predict_intermediate_flow` as long as it honours that signature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .correlation import window_offsets
from .flow import FlowField, upsample_flow  # noqa: F401  (re-exported)

AMBIGUITY_THRESHOLD = 0.3
TIE_TOLERANCE = 1e-4


@dataclass(eq=False)
class PredictorInput:
    correlation: np.ndarray    # (h, w, levels * (2r+1)**2)
    lookup_flow: FlowField     # flow the windows were centered on, grid units
    prev_flow: FlowField | None
    iteration: int
    radius: int = 4

    def __post_init__(self):
        if self.correlation.shape[:2] != self.lookup_flow.shape:
            raise ValueError("correlation map and flow grid differ in size")


@dataclass(eq=False)
class PredictedFlow:
    flow: FlowField
    confidence: np.ndarray  # (h, w) max softmax weight, 0 for ambiguous/invalid
    residual: np.ndarray    # (h, w, 2) window-relative displacement


def _local_soft_argmax(c: np.ndarray, offs: np.ndarray, side: int, temperature: float) -> np.ndarray:
    """Integer argmax refined by a softmax-weighted centroid of its 3x3 neighbourhood.

    Near-ties (within ``TIE_TOLERANCE``) go to the smallest displacement, so
    textureless cells stay put instead of drifting toward the first index.
    """
    n = len(c)
    near = c >= c.max(axis=1, keepdims=True) - TIE_TOLERANCE
    dist = np.einsum("kc,kc->k", offs, offs)
    best = np.argmin(np.where(near, dist[None, :], np.inf), axis=1)
    by, bx = np.divmod(best, side)
    dy, dx = np.meshgrid([-1, 0, 1], [-1, 0, 1], indexing="ij")
    ny = by[:, None] + dy.ravel()
    nx = bx[:, None] + dx.ravel()
    inside = (ny >= 0) & (ny < side) & (nx >= 0) & (nx < side)
    idx = np.clip(ny, 0, side - 1) * side + np.clip(nx, 0, side - 1)
    vals = c[np.arange(n)[:, None], idx]
    e = np.where(inside, np.exp((vals - c[np.arange(n), best][:, None]) / temperature), 0.0)
    e /= e.sum(axis=1, keepdims=True)
    return np.einsum("nk,nkc->nc", e, offs[idx])


def predict_intermediate_flow(inp: PredictorInput, temperature: float = 0.1,
                              ambiguity: float = AMBIGUITY_THRESHOLD) -> PredictedFlow:
    """Local soft-argmax over each valid cell's level-0 window.

    The residual is the best window offset, refined to sub-cell precision by
    the softmax(c / temperature)-weighted centroid of its 3x3 neighbourhood;
    it is added to the lookup flow. Confidence is the largest weight of the
    softmax over the whole window. Cells whose best level-0 correlation is
    below ``ambiguity`` keep the lookup flow with zero confidence.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    r = inp.radius
    side = 2 * r + 1
    offs = window_offsets(r)
    h, w = inp.lookup_flow.shape
    valid = inp.lookup_flow.valid
    residual = np.zeros((h, w, 2))
    conf = np.zeros((h, w))
    c = inp.correlation[valid][:, :side * side].astype(np.float64)
    if c.size:
        cmax = c.max(axis=1)
        e = np.exp((c - cmax[:, None]) / temperature)
        pmax = 1.0 / e.sum(axis=1)
        d = _local_soft_argmax(c, offs, side, temperature)
        ok = cmax >= ambiguity
        d[~ok] = 0.0
        residual[valid] = d
        conf[valid] = np.where(ok, pmax, 0.0)
    flow = FlowField(inp.lookup_flow.flow + residual, valid)
    return PredictedFlow(flow, conf, residual)
