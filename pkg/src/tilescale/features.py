"""Five-channel feature stacks, the vegetation index, and standardization."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, astuple, dataclass, fields
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .grid import Grid, GridStack, check_coregistered

logger = logging.getLogger(__name__)

CHANNELS = ("radiation", "shade", "skyview", "tgi", "height")
STACK_VERSION = 1
VEGETATION_TGI = 0.04


@dataclass(frozen=True)
class MetVector:
    """Scene-wide meteorological inputs, in fixed order."""

    albedo: float = 0.25
    S_g: float = 900.0
    T_a: float = 303.15
    P: float = 104500.0
    RH: float = 30.0
    soil_temp_10cm: float = 305.0
    soil_moist_10cm: float = 0.08
    T_g_init: float = 308.0

    def __post_init__(self):
        if not 0 <= self.albedo <= 1:
            raise ValueError(f"albedo {self.albedo} outside [0, 1]")
        if not 0 <= self.RH <= 100:
            raise ValueError(f"RH {self.RH} outside [0, 100]")
        if not all(np.isfinite(astuple(self))):
            raise ValueError("met variables must be finite")

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    def to_dict(self) -> dict:
        return asdict(self)


N_MET = len(fields(MetVector))


class FeatureStack(GridStack):
    """GridStack with exactly the five feature channels in canonical order."""

    def __post_init__(self):
        super().__post_init__()
        if tuple(self.names) != CHANNELS:
            raise ValueError(f"feature stack channels must be {CHANNELS}, got {tuple(self.names)}")


def tgi(red: Grid, green: Grid, blue: Grid) -> Grid:
    """Triangular greenness index G - 0.39 R - 0.61 B on [0, 1] reflectances."""
    check_coregistered([red, green, blue], "rgb channels")
    r = red.values.astype(np.float64)
    g = green.values.astype(np.float64)
    b = blue.values.astype(np.float64)
    return green.like(g - 0.39 * r - 0.61 * b, name="tgi")


def vegetation_mask(tgi_grid: Grid, threshold: float = VEGETATION_TGI) -> Grid:
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    with np.errstate(invalid="ignore"):
        mask = tgi_grid.values > np.float32(threshold)
    return tgi_grid.like(mask.astype(np.float32), name="vegetation")


def assemble_stack(*grids: Grid) -> FeatureStack:
    """Stack radiation, shade, skyview, tgi and height, in that order."""
    if len(grids) != len(CHANNELS):
        raise ValueError(f"expected {len(CHANNELS)} grids, got {len(grids)}")
    return FeatureStack(tuple((name, g.like(g.values, name=name)) for name, g in zip(CHANNELS, grids)))


class Standardizer(BaseEstimator, TransformerMixin):
    """Pooled z-scoring of feature channels and met variables, plus label centring.

    ``fit`` takes a sequence of ``(FeatureStack, MetVector, thermal Grid)``
    training scenes. Channel statistics pool every finite pixel; met
    statistics are taken across scenes; the label mean covers finite,
    non-vegetated thermal pixels.

    A met variable that is constant across the training scenes keeps SD 1.
    """

    def __init__(self, vegetation_threshold: float = VEGETATION_TGI):
        self.vegetation_threshold = vegetation_threshold

    def fit(self, scenes, y=None):
        scenes = list(scenes)
        if not scenes:
            raise ValueError("fit_standardizer needs at least one training scene")
        means, sds = [], []
        for ci, name in enumerate(CHANNELS):
            pooled = np.concatenate(
                [np.asarray(stack.grids[ci].values, dtype=np.float64).ravel() for stack, _, _ in scenes]
            )
            pooled = pooled[np.isfinite(pooled)]
            if pooled.size == 0:
                raise ValueError(f"channel {name!r} has no finite training pixels")
            mu = float(pooled.mean())
            sd = float(np.sqrt(np.mean((pooled - mu) ** 2)))
            if not sd > 0:
                raise ValueError(f"degenerate channel {name!r}: SD is 0 over the training pixels")
            means.append(mu)
            sds.append(sd)
        met = np.stack([m.as_array() for _, m, _ in scenes])
        met_mean = met.mean(axis=0)
        met_sd = np.sqrt(np.mean((met - met_mean) ** 2, axis=0))
        constant = ~(met_sd > 0)
        if constant.any():
            logger.info(
                "met variables constant over training scenes, SD set to 1: %s",
                [MetVector.names()[i] for i in np.flatnonzero(constant)],
            )
        met_sd = np.where(constant, 1.0, met_sd)
        labels = []
        for stack, _, thermal in scenes:
            t = np.asarray(thermal.values, dtype=np.float64)
            with np.errstate(invalid="ignore"):
                keep = np.isfinite(t) & ~(stack["tgi"].values > np.float32(self.vegetation_threshold))
            labels.append(t[keep])
        labels = np.concatenate(labels)
        if labels.size == 0:
            raise ValueError("no valid (finite, non-vegetated) thermal pixels to centre labels")
        self.channel_mean_ = np.array(means)
        self.channel_sd_ = np.array(sds)
        self.met_mean_ = met_mean
        self.met_sd_ = met_sd
        self.label_mean_ = float(labels.mean())
        return self

    def _check(self):
        if not hasattr(self, "label_mean_"):
            raise NotFittedError("Standardizer is not fitted")

    def transform_stack(self, stack: GridStack | np.ndarray) -> np.ndarray:
        """(5, H, W) float64 standardized channels."""
        self._check()
        x = stack.array() if isinstance(stack, GridStack) else np.asarray(stack)
        x = x.astype(np.float64)
        return (x - self.channel_mean_[:, None, None]) / self.channel_sd_[:, None, None]

    def inverse_transform_stack(self, z: np.ndarray) -> np.ndarray:
        self._check()
        return np.asarray(z, dtype=np.float64) * self.channel_sd_[:, None, None] + self.channel_mean_[:, None, None]

    def transform_met(self, met: MetVector | np.ndarray) -> np.ndarray:
        self._check()
        m = met.as_array() if isinstance(met, MetVector) else np.asarray(met, dtype=np.float64)
        return (m - self.met_mean_) / self.met_sd_

    def inverse_transform_met(self, z: np.ndarray) -> np.ndarray:
        self._check()
        return np.asarray(z, dtype=np.float64) * self.met_sd_ + self.met_mean_

    def transform_label(self, label):
        self._check()
        return np.asarray(label, dtype=np.float64) - self.label_mean_

    def inverse_transform_label(self, z):
        self._check()
        return np.asarray(z, dtype=np.float64) + self.label_mean_

    def transform(self, X):
        """Standardize one ``(stack, met, label)`` triple."""
        stack, met, label = X
        label = label.values if isinstance(label, Grid) else label
        return self.transform_stack(stack), self.transform_met(met), self.transform_label(label)

    def inverse_transform(self, X):
        stack, met, label = X
        return (
            self.inverse_transform_stack(stack),
            self.inverse_transform_met(met),
            self.inverse_transform_label(label),
        )

    def to_dict(self) -> dict:
        self._check()
        return {
            "version": STACK_VERSION,
            "channels": list(CHANNELS),
            "channel_mean": self.channel_mean_.tolist(),
            "channel_sd": self.channel_sd_.tolist(),
            "met_names": MetVector.names(),
            "met_mean": self.met_mean_.tolist(),
            "met_sd": self.met_sd_.tolist(),
            "label_mean": self.label_mean_,
            "vegetation_threshold": self.vegetation_threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        if list(d["channels"]) != list(CHANNELS):
            raise ValueError(f"standardizer channels {d['channels']} do not match {CHANNELS}")
        std = cls(vegetation_threshold=d.get("vegetation_threshold", VEGETATION_TGI))
        std.channel_mean_ = np.array(d["channel_mean"], dtype=np.float64)
        std.channel_sd_ = np.array(d["channel_sd"], dtype=np.float64)
        std.met_mean_ = np.array(d["met_mean"], dtype=np.float64)
        std.met_sd_ = np.array(d["met_sd"], dtype=np.float64)
        std.label_mean_ = float(d["label_mean"])
        return std

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Standardizer":
        return cls.from_dict(json.loads(text))

    def fingerprint(self) -> str:
        """SHA-256 over the stored statistics."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def fit_standardizer(train_scenes: Iterable[Sequence]) -> Standardizer:
    return Standardizer().fit(train_scenes)


def apply_standardizer(std: Standardizer, stack, met, label):
    return std.transform((stack, met, label))
