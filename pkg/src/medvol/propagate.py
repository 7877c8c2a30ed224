"""Lifting a 2D box prompt on one axial slice into a volumetric mask.

The reference propagator is a deterministic region grower standing in for a
promptable video/volume segmenter.  Any callable with the
:class:`Propagator` signature can replace it, including an external program
speaking the ``.evv``/``.evm`` file protocol (:class:`ExternalCommandPropagator`).
"""

from __future__ import annotations

import subprocess
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage

from medvol.targets import Box2D
from medvol.volmask import Volume, VoxelMask, read_mask, write_volume

KINDS = ("reference-regiongrow", "box-extrude", "external-command")
_PLANE8 = np.zeros((3, 3, 3), dtype=bool)
_PLANE8[1] = True


class PropagationError(RuntimeError):
    pass


class Propagator(Protocol):
    def __call__(self, volume: Volume, key_slice: int, boxes: Sequence[Box2D]) -> VoxelMask: ...


@dataclass(frozen=True)
class PropagatorSpec:
    """Propagator selection and parameters.

    ``max_span`` is the largest ``|t - k|`` the mask may reach; ``None`` means
    ``2 * delta + 8`` for the reward's neighborhood half-width ``delta``.
    """

    kind: str = "reference-regiongrow"
    tau: float = 1.5
    margin: int = 2
    max_span: int | None = None
    command: tuple[str, ...] = ()
    timeout: float = 120.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown propagator kind {self.kind!r}")
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.max_span is not None and self.max_span < 0:
            raise ValueError("max_span must be >= 0")
        if self.kind == "external-command" and not self.command:
            raise ValueError("external-command propagator needs a command")

    def span_for(self, delta: int) -> int:
        return 2 * delta + 8 if self.max_span is None else self.max_span


def _check_prompt(volume: Volume, key_slice: int, boxes: Sequence[Box2D]) -> None:
    h, w, d = volume.dims
    if not 0 <= key_slice < d:
        raise IndexError(f"key slice {key_slice} out of range [0, {d})")
    for box in boxes:
        if not box.within(h, w):
            raise ValueError(f"box {box.as_list()} outside {w}x{h} slice")


def _dilated(box: Box2D, margin: int, h: int, w: int) -> tuple[slice, slice]:
    return (slice(max(0, box.y0 - margin), min(h, box.y1 + margin)),
            slice(max(0, box.x0 - margin), min(w, box.x1 + margin)))


class RegionGrowPropagator:
    """Intensity-band region growing from the prompt boxes.

    On the key slice the accepted band is ``median +/- tau * std`` of the
    box's pixels.  Pixels of the box inside the band seed an 8-connected
    growth that may not leave the box dilated by ``margin``.  Each following
    slice (both directions) is seeded by the previous slice's mask within the
    band; a direction stops when its mask empties or ``max_span`` is reached.
    A box whose median sits strictly inside the band of its surrounding
    margin ring is treated as background and produces nothing.  Per-box
    results are unioned.
    """

    def __init__(self, tau: float = 1.5, margin: int = 2, max_span: int = 18):
        self.tau = tau
        self.margin = margin
        self.max_span = max_span

    def __call__(self, volume: Volume, key_slice: int, boxes: Sequence[Box2D]) -> VoxelMask:
        _check_prompt(volume, key_slice, boxes)
        out = np.zeros(volume.voxels.shape, dtype=bool)
        for box in boxes:
            self._grow(volume.voxels, key_slice, box, out)
        return VoxelMask(out)

    def _band(self, key: np.ndarray, box: Box2D, window: tuple[slice, slice]) -> tuple[float, float] | None:
        inner = key[box.y0:box.y1, box.x0:box.x1].astype(np.float64)
        median = float(np.median(inner))
        half = self.tau * float(inner.std())
        ring_sel = np.ones(key[window].shape, dtype=bool)
        ring_sel[box.y0 - window[0].start:box.y1 - window[0].start,
                 box.x0 - window[1].start:box.x1 - window[1].start] = False
        ring = key[window][ring_sel]
        if ring.size and abs(median - float(np.median(ring))) < half:
            return None
        return median - half, median + half

    def _grow(self, voxels: np.ndarray, k: int, box: Box2D, out: np.ndarray) -> None:
        d, h, w = voxels.shape
        window = _dilated(box, self.margin, h, w)
        band = self._band(voxels[k], box, window)
        if band is None:
            return
        lo, hi = band
        first, last = max(0, k - self.max_span), min(d, k + self.max_span + 1)
        crop = voxels[first:last, window[0], window[1]]
        # in-plane components of every slice at once; slices are linked below
        labels, n = ndimage.label((crop >= lo) & (crop <= hi), structure=_PLANE8)

        def region(t: int, seeds: np.ndarray) -> np.ndarray:
            plane = labels[t - first]
            keep = np.zeros(n + 1, dtype=bool)
            keep[plane[seeds]] = True
            keep[0] = False
            return keep[plane]

        seeds = np.zeros(crop.shape[1:], dtype=bool)
        seeds[box.y0 - window[0].start:box.y1 - window[0].start,
              box.x0 - window[1].start:box.x1 - window[1].start] = True
        key_region = region(k, seeds)
        if not key_region.any():
            return
        out[k][window] |= key_region
        for step in (1, -1):
            prev = key_region
            t = k + step
            while first <= t < last:
                prev = region(t, prev)
                if not prev.any():
                    break
                out[t][window] |= prev
                t += step


class BoxExtrudePropagator:
    """Union of the prompt boxes copied onto every slice within ``max_span``."""

    def __init__(self, max_span: int = 18):
        self.max_span = max_span

    def __call__(self, volume: Volume, key_slice: int, boxes: Sequence[Box2D]) -> VoxelMask:
        _check_prompt(volume, key_slice, boxes)
        out = np.zeros(volume.voxels.shape, dtype=bool)
        lo = max(0, key_slice - self.max_span)
        hi = min(volume.depth, key_slice + self.max_span + 1)
        for box in boxes:
            out[lo:hi, box.y0:box.y1, box.x0:box.x1] = True
        return VoxelMask(out)


class ExternalCommandPropagator:
    """Runs ``command + [volume.evv, out.evm, k, "x0,y0,x1,y1", ...]``.

    The program must exit 0 after writing the output mask.  One request is in
    flight per instance.
    """

    def __init__(self, command: Sequence[str], timeout: float = 120.0):
        self.command = list(command)
        self.timeout = timeout
        self._lock = threading.Lock()

    def __call__(self, volume: Volume, key_slice: int, boxes: Sequence[Box2D]) -> VoxelMask:
        _check_prompt(volume, key_slice, boxes)
        with self._lock, tempfile.TemporaryDirectory(prefix="medvol-prop-") as tmp:
            vol_path = Path(tmp) / "volume.evv"
            mask_path = Path(tmp) / "mask.evm"
            write_volume(volume, vol_path)
            args = self.command + [str(vol_path), str(mask_path), str(key_slice)]
            args += [",".join(str(v) for v in b.as_list()) for b in boxes]
            try:
                proc = subprocess.run(args, capture_output=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise PropagationError(f"propagator command failed to run: {exc}") from exc
            if proc.returncode != 0:
                raise PropagationError(
                    f"propagator exited {proc.returncode}: {proc.stderr.decode(errors='replace').strip()}")
            if not mask_path.exists():
                raise PropagationError("propagator did not write an output mask")
            try:
                mask = read_mask(mask_path)
            except ValueError as exc:
                raise PropagationError(f"unreadable propagator output: {exc}") from exc
        if mask.dims != volume.dims:
            raise PropagationError(f"propagator returned dims {mask.dims}, expected {volume.dims}")
        return mask


def make_propagator(spec: PropagatorSpec, delta: int = 5) -> Propagator:
    span = spec.span_for(delta)
    if spec.kind == "reference-regiongrow":
        return RegionGrowPropagator(spec.tau, spec.margin, span)
    if spec.kind == "box-extrude":
        return BoxExtrudePropagator(span)
    return ExternalCommandPropagator(spec.command, spec.timeout)


def propagate(volume: Volume, key_slice: int, boxes: Sequence[Box2D],
              spec: PropagatorSpec | None = None, delta: int = 5) -> VoxelMask:
    return make_propagator(spec or PropagatorSpec(), delta)(volume, key_slice, boxes)
