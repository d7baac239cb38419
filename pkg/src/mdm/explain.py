"""Multiple dynamic masks: per-scale mask training, fusion and composite images.

Each scale owns a small grid ``d`` initialised to 0.5.  It is upsampled to
the image size, multiplied into the image, and trained so the selected
activation of the frozen model stays close to its unmasked value while the
mean absolute mask value stays small.  The trained scales are summed,
thresholded and normalised into a heatmap and a binary decision mask.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import tensorcore as tc
from .models import ActivationSelector, TrainingError, forward_activation
from .tensorcore import Tensor


class ContractViolation(RuntimeError):
    """The model's parameters changed while a mask was being trained."""


class DegenerateExplanationWarning(UserWarning):
    pass


@dataclass
class MaskVector:
    d: Tensor
    lam: float

    @property
    def extents(self) -> tuple[int, int]:
        return self.d.shape


@dataclass(frozen=True)
class MdmConfig:
    """Hyperparameters.  Defaults are a desk-scale profile; see :meth:`full_size`.

    ``lambdas`` is ``"auto"``, one number for every scale, or one number per
    scale.  Under ``"auto"`` each weight is ``lambda_factor`` times the ratio
    of the initial consistency loss to the initial L1 loss.
    """

    n_scales: int = 8
    scale_base: int = 2
    extents: tuple[tuple[int, int], ...] | None = None
    iterations: int = 300
    lr: float = 3e-3
    threshold_ratio: float = 5 / 27
    lambdas: Union[str, float, tuple[float, ...]] = "auto"
    lambda_factor: float = 1.0
    alpha: float = 0.5
    beta: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_scales < 1:
            raise ValueError("n_scales must be >= 1")
        if not 0 < self.threshold_ratio < 1:
            raise ValueError("threshold_ratio must lie in (0, 1)")
        if self.iterations < 1 or self.lr <= 0:
            raise ValueError("iterations must be >= 1 and lr > 0")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        ext = self.scale_extents()
        if len(set(ext)) != len(ext):
            raise ValueError("scale extents must be pairwise distinct")
        if min(min(e) for e in ext) < 1:
            raise ValueError("smallest scale must be at least 1×1")
        if isinstance(self.lambdas, str):
            if self.lambdas != "auto":
                raise ValueError(f"unknown lambda schedule {self.lambdas!r}")
        elif isinstance(self.lambdas, (tuple, list)):
            if len(self.lambdas) != self.n_scales:
                raise ValueError("per-scale lambda list must have n_scales entries")

    @classmethod
    def full_size(cls, lam: float = 1e2) -> "MdmConfig":
        """The full-size setting: 27 scales of 6..32, gamma 5, 2000 iterations."""
        return cls(n_scales=27, scale_base=5, iterations=2000, lr=3e-3,
                   threshold_ratio=5 / 27, lambdas=float(lam))

    def scale_extents(self) -> list[tuple[int, int]]:
        if self.extents is not None:
            if len(self.extents) != self.n_scales:
                raise ValueError("explicit extents must have n_scales entries")
            return [tuple(int(v) for v in e) for e in self.extents]
        return [(self.scale_base + i, self.scale_base + i) for i in range(1, self.n_scales + 1)]

    @property
    def gamma(self) -> float:
        return self.threshold_ratio * self.n_scales

    def lambda_schedule(self, initial_consistency: float | None = None) -> list[float]:
        if isinstance(self.lambdas, str):
            if initial_consistency is None:
                raise ValueError("auto lambda needs the initial consistency loss")
            return [self.lambda_factor * initial_consistency / 0.5] * self.n_scales
        if isinstance(self.lambdas, (tuple, list)):
            return [float(v) for v in self.lambdas]
        return [float(self.lambdas)] * self.n_scales


@dataclass
class TrainTrace:
    extents: tuple[int, int]
    consistency: list[float] = field(default_factory=list)
    l1: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    d_min: list[float] = field(default_factory=list)
    d_max: list[float] = field(default_factory=list)


@dataclass
class FusedExplanation:
    fused: np.ndarray
    binary: np.ndarray
    heatmap: np.ndarray
    heatmap_image: np.ndarray
    binary_mask_image: np.ndarray
    masks: list[np.ndarray]
    extents: list[tuple[int, int]]
    gamma: float
    lambdas: list[float]
    traces: list[TrainTrace]
    degenerate: bool = False
    mask_vectors: list[np.ndarray] = field(default_factory=list)


def init_masks(cfg: MdmConfig, image_hw: tuple[int, int],
               lambdas: Sequence[float] | None = None) -> list[MaskVector]:
    h, w = image_hw
    ext = cfg.scale_extents()
    if any(a > h or b > w for a, b in ext):
        raise ValueError(f"scale extents {ext} exceed image size {h}×{w}")
    lams = list(lambdas) if lambdas is not None else [math.nan] * len(ext)
    return [MaskVector(Tensor(np.full((a, b), 0.5), requires_grad=True), float(lam))
            for (a, b), lam in zip(ext, lams)]


def upsample_mask(m: MaskVector | Tensor, h: int, w: int) -> Tensor:
    d = m.d if isinstance(m, MaskVector) else m
    return tc.clamp01(tc.bilinear_upsample(d, (h, w)))


def apply_mask(mask_hw: Tensor, image: Tensor) -> Tensor:
    """Multiply an H×W mask into every channel of a C×H×W image."""
    return tc.mul(tc.repeat_channels(mask_hw, image.shape[0]), image)


def consistency_loss(model, image: Tensor, mask_hw: Tensor, sel: ActivationSelector,
                     reference: Tensor) -> Tensor:
    return tc.sq_l2(forward_activation(model, apply_mask(mask_hw, image), sel), reference)


def reference_activation(model, image, sel: ActivationSelector) -> Tensor:
    return Tensor(forward_activation(model, tc.as_tensor(image), sel).data)


def _model_image(model, image) -> Tensor:
    x = np.asarray(image, dtype=np.float64)
    if x.shape != tuple(model.input_shape):
        if x.size == int(np.prod(model.input_shape)):
            x = x.reshape(model.input_shape)
        else:
            raise tc.ShapeError(f"image {x.shape} does not match model input {model.input_shape}")
    return Tensor(x)


def train_mask(model, image, sel: ActivationSelector, m: MaskVector, cfg: MdmConfig,
               reference: Tensor | None = None) -> tuple[MaskVector, TrainTrace]:
    """Adam descent on ``||A - f_t(M X)||^2 + lam * mean|d|`` over ``d`` alone.

    ``d`` is clamped to [0, 1] after every step.  The model is never written
    to; its parameter fingerprint is compared before and after.
    """
    x = _model_image(model, image)
    _, h, w = x.shape
    if reference is None:
        reference = reference_activation(model, x, sel)
    lam = float(m.lam)
    if not math.isfinite(lam) or lam < 0:
        raise ValueError(f"mask weight must be a finite nonnegative number, got {m.lam}")
    before = model.fingerprint()

    d = Tensor(m.d.data, requires_grad=True)
    state = tc.AdamState.for_params([d], lr=cfg.lr)
    trace = TrainTrace(d.shape)
    for it in range(cfg.iterations):
        try:
            with tc.Session() as s:
                lc = consistency_loss(model, x, upsample_mask(d, h, w), sel, reference)
                ll = tc.l1_mean(d)
                total = tc.add(lc, tc.scale(ll, lam))
                s.backward(total)
            tc.adam_step([d], [d.grad], state)
            if not np.isfinite(d.data).all():
                raise tc.NonFiniteError("mask became non-finite")
        except tc.NonFiniteError as exc:
            raise TrainingError(f"{d.shape[0]}×{d.shape[1]} mask, iteration {it}: {exc}") from None
        np.clip(d.data, 0.0, 1.0, out=d.data)
        trace.consistency.append(lc.item())
        trace.l1.append(ll.item())
        trace.total.append(total.item())
        trace.d_min.append(float(d.data.min()))
        trace.d_max.append(float(d.data.max()))

    if model.fingerprint() != before:
        raise ContractViolation("model parameters changed during mask training")
    d.grad = None
    return MaskVector(d, lam), trace


def fuse_masks(masks: Sequence, gamma: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sum, threshold at ``>= gamma`` and divide-by-max normalise the retained cells."""
    if not masks:
        raise ValueError("no masks to fuse")
    stack = [np.asarray(mk, dtype=np.float64) for mk in masks]
    shape = stack[0].shape
    if any(mk.shape != shape for mk in stack):
        raise tc.ShapeError("masks to fuse must share one shape")
    fused = np.zeros(shape)
    for mk in stack:
        fused = fused + mk
    binary = (fused >= gamma).astype(np.float64)
    kept = binary * fused
    peak = kept.max()
    heat = kept / peak if peak > 0 else np.zeros(shape)
    return fused, binary, heat


def heatmap_image(x, heat, alpha: float, beta: float) -> np.ndarray:
    """``alpha * X + beta * M_h``, the heatmap broadcast over channels.  Not clipped."""
    x = np.asarray(x, dtype=np.float64)
    heat = np.asarray(heat, dtype=np.float64)
    if x.shape[-2:] != heat.shape:
        raise tc.ShapeError(f"heatmap {heat.shape} does not match image {x.shape}")
    return alpha * x + beta * heat


def binary_mask_image(x, binary) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    binary = np.asarray(binary, dtype=np.float64)
    if x.shape[-2:] != binary.shape:
        raise tc.ShapeError(f"binary mask {binary.shape} does not match image {x.shape}")
    return binary * x


def run_mdm(model, image, sel: ActivationSelector, cfg: MdmConfig) -> FusedExplanation:
    """Train every scale from one shared reference activation, then fuse."""
    x = _model_image(model, image)
    _, h, w = x.shape
    reference = reference_activation(model, x, sel)
    half = Tensor(np.full((h, w), 0.5))
    initial = consistency_loss(model, x, half, sel, reference).item()
    lambdas = cfg.lambda_schedule(initial)
    masks = init_masks(cfg, (h, w), lambdas)

    trained, traces = [], []
    for mv in masks:
        out, trace = train_mask(model, x, sel, mv, cfg, reference)
        trained.append(out)
        traces.append(trace)

    # reduce in canonical extent order so the sum is independent of scale order
    order = sorted(range(len(trained)), key=lambda i: trained[i].extents)
    upsampled = [upsample_mask(trained[i], h, w).data for i in order]
    fused, binary, heat = fuse_masks(upsampled, cfg.gamma)
    degenerate = not binary.any()
    if degenerate:
        warnings.warn("no pixel reached the fusion threshold; binary mask is empty",
                      DegenerateExplanationWarning, stacklevel=2)
    return FusedExplanation(
        fused=fused, binary=binary, heatmap=heat,
        heatmap_image=heatmap_image(x.data, heat, cfg.alpha, cfg.beta),
        binary_mask_image=binary_mask_image(x.data, binary),
        masks=upsampled,
        extents=[trained[i].extents for i in order],
        gamma=cfg.gamma,
        lambdas=[trained[i].lam for i in order],
        traces=[traces[i] for i in order],
        degenerate=degenerate,
        mask_vectors=[trained[i].d.data.copy() for i in order],
    )


# --- MDMM text matrices -------------------------------------------------------------
# MDMM
# <name> <H> <W>
# H rows of W space-separated values (repr floats, exact round trip)
# ... repeated per matrix


def write_mdmm(path, matrices: dict[str, np.ndarray]) -> None:
    lines = ["MDMM"]
    for name, mat in matrices.items():
        mat = np.asarray(mat, dtype=np.float64)
        if mat.ndim != 2 or " " in name:
            raise ValueError(f"matrix {name!r} must be 2-d with a space-free name")
        lines.append(f"{name} {mat.shape[0]} {mat.shape[1]}")
        lines.extend(" ".join(repr(float(v)) for v in row) for row in mat)
    Path(path).write_text("\n".join(lines) + "\n")


def read_mdmm(path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "MDMM":
        raise ValueError(f"{path}: not an MDMM matrix file")
    out, i = {}, 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        name, h, w = lines[i].split()
        h, w = int(h), int(w)
        rows = [[float(v) for v in lines[i + 1 + r].split()] for r in range(h)]
        mat = np.array(rows, dtype=np.float64).reshape(h, w)
        out[name] = mat
        i += 1 + h
    return out


def explanation_matrices(exp: FusedExplanation) -> dict[str, np.ndarray]:
    return {"M_F": exp.fused, "M_b": exp.binary, "M_h": exp.heatmap}


def with_lambda_scale(cfg: MdmConfig, factor: float) -> MdmConfig:
    return replace(cfg, lambda_factor=cfg.lambda_factor * factor)
