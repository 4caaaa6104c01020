"""Closed-form Gaussian-mixture teachers.

A teacher plays the role of a pretrained epsilon-prediction network.  For a
mixture of isotropic Gaussians sum_k w_k N(mu_k, s_k^2 I) the diffused
marginal at time t is sum_k w_k N(alpha_t mu_k, (sigma_t^2 + alpha_t^2 s_k^2) I),
so score, epsilon prediction and posterior mean are all exact.

Images are arrays of shape (H, W, C); any number of leading batch axes is
accepted by the evaluation methods.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateDensityError, DomainError
from .schedule import Schedule


@dataclass
class GaussianMixtureTeacher:
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    schedule: Schedule
    conditions: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        self.stds = np.asarray(self.stds, dtype=float)
        if self.means.ndim != 4:
            raise DomainError("means must have shape (K, H, W, C)")
        k = self.means.shape[0]
        if self.weights.shape != (k,) or self.stds.shape != (k,):
            raise DomainError("weights and stds need one entry per component")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise DomainError("weights must be non-negative and sum to 1")
        if np.any(self.stds < 0):
            raise DomainError("component stds must be non-negative")
        for label, idx in self.conditions.items():
            if not idx or any(not 0 <= i < k for i in idx):
                raise DomainError(f"condition {label!r} references unknown components {idx}")
        self.conditions = {label: list(idx) for label, idx in self.conditions.items()}

    @classmethod
    def single(cls, mean, std: float, schedule: Schedule) -> "GaussianMixtureTeacher":
        mean = np.asarray(mean, dtype=float)
        return cls(np.ones(1), mean[None], np.array([float(std)]), schedule)

    @property
    def shape(self) -> tuple:
        return self.means.shape[1:]

    def _subset(self, y):
        if y is None:
            return np.arange(len(self.weights))
        try:
            return np.asarray(self.conditions[y])
        except KeyError:
            raise DomainError(f"unknown condition label {y!r}") from None

    def _terms(self, x, t, y):
        x = np.asarray(x, dtype=float)
        if x.shape[-3:] != self.shape:
            raise DomainError(f"image shape {x.shape[-3:]} does not match teacher shape {self.shape}")
        alpha, sigma = self.schedule.alpha_sigma(t)
        idx = self._subset(y)
        var = sigma**2 + alpha**2 * self.stds[idx] ** 2
        keep = var > 0
        if not np.any(keep):
            raise DegenerateDensityError(f"every component has zero variance at t={t}")
        # zero-variance components carry no density off their mean
        idx, var = idx[keep], var[keep]
        w = self.weights[idx]
        w = w / w.sum()
        diff = alpha * self.means[idx] - x[..., None, :, :, :]
        sq = np.sum(diff**2, axis=(-3, -2, -1))
        dim = math.prod(self.shape)
        logits = np.log(w) - 0.5 * dim * np.log(2 * np.pi * var) - sq / (2 * var)
        return alpha, sigma, idx, var, diff, logits

    def log_density(self, x, t, y=None):
        *_, logits = self._terms(x, t, y)
        return logsumexp(logits, axis=-1)

    def responsibilities(self, x, t, y=None):
        *_, logits = self._terms(x, t, y)
        return np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))

    def score(self, x, t, y=None):
        """Gradient of log p_t(x | y)."""
        _, _, _, var, diff, logits = self._terms(x, t, y)
        resp = np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
        coef = resp / var
        return np.einsum("...k,...khwc->...hwc", coef, diff)

    def eps_pred(self, x, t, y=None):
        _, sigma = self.schedule.alpha_sigma(t)
        return -sigma * self.score(x, t, y)

    def sample_prediction(self, x, t, y=None):
        """(x - sigma eps) / alpha, i.e. E[x_0 | x_t]."""
        alpha, sigma = self.schedule.alpha_sigma(t)
        return (np.asarray(x, dtype=float) - sigma * self.eps_pred(x, t, y)) / alpha

    def eps_guided(self, x, t, y=None, w=None):
        """Guided prediction; ``w=None`` means plain conditional prediction."""
        if w is None or y is None:
            return self.eps_pred(x, t, y)
        return cfg_combine(self.eps_pred(x, t, y), self.eps_pred(x, t, None), w)

    def denoiser(self, y=None):
        return lambda x, t: self.sample_prediction(x, t, y)

    def sample(self, n: int, rng: np.random.Generator, y=None) -> np.ndarray:
        """Draw n clean images from the (conditional) mixture."""
        idx = self._subset(y)
        w = self.weights[idx] / self.weights[idx].sum()
        comp = idx[rng.choice(len(idx), size=n, p=w)]
        noise = rng.standard_normal((n, *self.shape))
        return self.means[comp] + self.stds[comp, None, None, None] * noise


def cfg_combine(eps_cond, eps_uncond, w: float):
    eps_cond = np.asarray(eps_cond, dtype=float)
    eps_uncond = np.asarray(eps_uncond, dtype=float)
    if eps_cond.shape != eps_uncond.shape:
        raise DomainError(f"shape mismatch {eps_cond.shape} vs {eps_uncond.shape}")
    return eps_uncond + w * (eps_cond - eps_uncond)


def load_teacher(spec, schedule: Schedule, base_dir: str | Path = ".") -> GaussianMixtureTeacher:
    """Build a teacher from a JSON file path or an already-parsed dict.

    Layout::

        {"shape": [H, W, C],
         "components": [{"weight": 0.5, "std": 0.1, "fill": [0.2, -0.4, 0.9]},
                        {"weight": 0.5, "std": 0.1, "image": "cat.png"}],
         "conditions": {"warm": [0]}}

    Image files are read with Pillow, resized to (H, W) and mapped from
    [0, 255] to [-1, 1].  Weights are normalized.
    """
    if not isinstance(spec, dict):
        path = Path(spec)
        base_dir = path.parent
        spec = json.loads(path.read_text())
    h, w, c = (int(v) for v in spec["shape"])
    comps = spec["components"]
    if not comps:
        raise DomainError("teacher needs at least one component")
    means, weights, stds = [], [], []
    for comp in comps:
        if "fill" in comp:
            fill = np.broadcast_to(np.asarray(comp["fill"], dtype=float), (c,))
            means.append(np.broadcast_to(fill, (h, w, c)).copy())
        elif "image" in comp:
            means.append(_read_mean_image(Path(base_dir) / comp["image"], (h, w, c)))
        else:
            raise DomainError("component needs either 'fill' or 'image'")
        weights.append(float(comp.get("weight", 1.0)))
        stds.append(float(comp.get("std", 0.0)))
    weights = np.asarray(weights)
    return GaussianMixtureTeacher(
        weights / weights.sum(), np.stack(means), np.asarray(stds), schedule, dict(spec.get("conditions", {}))
    )


def _read_mean_image(path: Path, shape) -> np.ndarray:
    from PIL import Image

    h, w, c = shape
    with Image.open(path) as img:
        img = img.convert("L" if c == 1 else "RGB").resize((w, h), Image.BILINEAR)
        arr = np.asarray(img, dtype=float) / 127.5 - 1.0
    return arr.reshape(h, w, -1)[..., :c]
