"""Weak/strong image augmentation and text-synchronized block patch mixing.

Images, probability maps, and masks are 2D float numpy arrays in [0,1]
(masks in {0,1}). Block masks are boolean arrays at (H/block)x(W/block)
granularity and expand to pixels by repetition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .postext import ReferringExpression, laterality_conflict, parse_positions, span_mix

DEFAULT_SIZE = 224
DEFAULT_BLOCK = 16


# ---------------------------------------------------------------------------
# block masks


def empty_block_mask(h: int, w: int, block_size: int = DEFAULT_BLOCK) -> np.ndarray:
    _check_divisible(h, w, block_size)
    return np.zeros((h // block_size, w // block_size), dtype=bool)


def _check_divisible(h: int, w: int, block_size: int) -> None:
    if h % block_size or w % block_size:
        raise ValueError(f"image size {h}x{w} not divisible by block size {block_size}")


def expand_blocks(mask: np.ndarray, block_size: int = DEFAULT_BLOCK) -> np.ndarray:
    """Expand a block-level binary mask to pixel resolution."""
    return np.kron(mask.astype(np.float64), np.ones((block_size, block_size)))


# ---------------------------------------------------------------------------
# weak / strong augmentation


@dataclass(frozen=True)
class ZoomRecord:
    """Geometry of one weak augmentation, replayable on a paired view."""

    scale: float
    height: int
    width: int


def weak_augment(image, mask=None, scale_range=(0.9, 1.1), rng=None, record=None):
    """Center zoom by a uniform scale, crop/pad back to the input size.

    Image is resampled bilinearly, mask by nearest neighbor; out-of-frame area
    is zero. Returns (image, mask, record); pass ``record`` to replay the same
    geometry instead of sampling.
    """
    h, w = image.shape
    if record is None:
        lo, hi = scale_range
        if lo > hi or lo <= 0:
            raise ValueError(f"bad scale range {scale_range}")
        record = ZoomRecord(scale=float(rng.uniform(lo, hi)), height=h, width=w)
    if record.scale <= 0:
        raise ValueError("non-positive zoom scale")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    coords = np.stack([(yy - cy) / record.scale + cy, (xx - cx) / record.scale + cx])
    out_image = ndimage.map_coordinates(image, coords, order=1, mode="constant", cval=0.0)
    out_mask = None
    if mask is not None:
        out_mask = ndimage.map_coordinates(mask, coords, order=0, mode="constant", cval=0.0)
    return out_image, out_mask, record


def strong_photometric(image, rng, brightness=0.4, contrast=0.4,
                       blur_sigma_range=(0.1, 2.0)):
    """Additive brightness and mean-preserving contrast jitter, then Gaussian
    blur; result clamped to [0,1]. Geometry is unchanged."""
    shift = rng.uniform(-brightness, brightness)
    factor = rng.uniform(1.0 - contrast, 1.0 + contrast)
    sigma = rng.uniform(*blur_sigma_range)
    out = (image - image.mean()) * factor + image.mean() + shift
    if sigma > 0:
        out = ndimage.gaussian_filter(out, sigma=sigma, mode="nearest")
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# T-PatchMix


def label_to_region_cells(label: np.ndarray, h: int = DEFAULT_SIZE, w: int = DEFAULT_SIZE,
                          block_size: int = DEFAULT_BLOCK) -> np.ndarray:
    """Block mask of all blocks whose centers fall in a label-active cell.

    Rows partition at floor(h/3) and floor(2h/3); columns at w/2.
    """
    _check_divisible(h, w, block_size)
    out = empty_block_mask(h, w, block_size)
    row_bounds = [0, h // 3, (2 * h) // 3, h]
    for by in range(out.shape[0]):
        cy = by * block_size + block_size // 2
        row = next(r for r in range(3) if row_bounds[r] <= cy < row_bounds[r + 1])
        for bx in range(out.shape[1]):
            cx = bx * block_size + block_size // 2
            col = 0 if cx < w // 2 else 1
            out[by, bx] = bool(label[row * 2 + col])
    return out


def _select_blocks(candidates: np.ndarray, ratio_range, rng) -> np.ndarray:
    """Pick round(phi*|C|) candidate blocks (min 1) uniformly, phi ~ U(range)."""
    idx = np.flatnonzero(candidates.ravel())
    phi = rng.uniform(*ratio_range)
    k = max(1, round(phi * len(idx)))
    chosen = rng.choice(idx, size=k, replace=False)
    out = np.zeros(candidates.size, dtype=bool)
    out[chosen] = True
    return out.reshape(candidates.shape)


def sample_mask_position_constrained(q_i, q_j, rng, ratio_range=(0.25, 0.5),
                                     h=DEFAULT_SIZE, w=DEFAULT_SIZE,
                                     block_size=DEFAULT_BLOCK):
    """Sample mix blocks inside the donor's coarse region.

    Returns None (skip mixing) on laterality conflict or when the donor label
    is empty.
    """
    if laterality_conflict(q_i, q_j) or not q_j.any():
        return None
    candidates = label_to_region_cells(q_j, h, w, block_size)
    return _select_blocks(candidates, ratio_range, rng)


def sample_mask_probability_driven(p_donor, rng, delta_gate=0.5, ratio_range=(0.25, 0.5),
                                   block_size=DEFAULT_BLOCK):
    """Sample mix blocks among those whose mean donor probability >= delta_gate."""
    h, w = p_donor.shape
    _check_divisible(h, w, block_size)
    bh, bw = h // block_size, w // block_size
    means = p_donor.reshape(bh, block_size, bw, block_size).mean(axis=(1, 3))
    candidates = means >= delta_gate
    if not candidates.any():
        return None
    return _select_blocks(candidates, ratio_range, rng)


def lesion_gate(p_donor, m: np.ndarray, delta_gate=0.5, eps=1e-6, block_size=DEFAULT_BLOCK):
    """Lesion-fraction gating of a candidate mix mask.

    r = sum(P * M_px) / (sum(M_px) + eps) over the pixel expansion of M; the
    mask is kept iff r >= delta_gate, otherwise zeroed. Raises on an empty
    input mask.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not m.any():
        raise ValueError("lesion_gate requires a non-empty candidate mask")
    m_px = expand_blocks(m, block_size)
    r = float(np.sum(p_donor * m_px) / (np.sum(m_px) + eps))
    if r >= delta_gate:
        return m, r
    return np.zeros_like(m), r


def mix_images(i_i, i_j, m: np.ndarray, block_size=DEFAULT_BLOCK) -> np.ndarray:
    """Blockwise mix: receiver pixels where M=0, donor pixels where M=1."""
    if i_i.shape != i_j.shape:
        raise ValueError("shape mismatch")
    m_px = expand_blocks(m, block_size)
    return (1.0 - m_px) * i_i + m_px * i_j


def mix_pseudo_masks(p_i, p_j, m_hat: np.ndarray, block_size=DEFAULT_BLOCK) -> np.ndarray:
    """Mix teacher probability maps blockwise and threshold at 0.5 (inclusive)."""
    if p_i.shape != p_j.shape:
        raise ValueError("shape mismatch")
    m_px = expand_blocks(m_hat, block_size)
    mixed = (1.0 - m_px) * p_i + m_px * p_j
    return (mixed >= 0.5).astype(np.float64)


@dataclass
class MixOutcome:
    mixed_image: np.ndarray
    mixed_pseudo_mask: np.ndarray
    mixed_text: ReferringExpression
    applied: bool
    mode: str  # position_constrained | probability_driven | none
    gate_ratio: float


@dataclass(frozen=True)
class MixConfig:
    block_size: int = DEFAULT_BLOCK
    delta_gate: float = 0.5
    ratio_range: tuple = (0.25, 0.5)
    eps: float = 1e-6


def tpatchmix(pair_i, pair_j, p_i, p_j, config: MixConfig, rng) -> MixOutcome:
    """Cross-modal patch mixing of two unlabeled pairs with synchronized text.

    Mode is a fair coin between position-constrained and probability-driven
    sampling, falling back to the other when the chosen sampler declines; the
    candidate mask then passes the lesion gate. Any failure degrades to an
    identity outcome (receiver image/text unchanged, pseudo-mask from p_i).
    """
    image_i, expr_i = pair_i
    image_j, expr_j = pair_j

    def identity(mode="none", gate_ratio=0.0):
        return MixOutcome(
            mixed_image=image_i,
            mixed_pseudo_mask=(p_i >= 0.5).astype(np.float64),
            mixed_text=expr_i,
            applied=False,
            mode=mode,
            gate_ratio=gate_ratio,
        )

    q_i, q_j = expr_i.label, expr_j.label
    modes = ["position_constrained", "probability_driven"]
    if rng.random() >= 0.5:
        modes.reverse()
    m, mode = None, "none"
    for candidate_mode in modes:
        if candidate_mode == "position_constrained":
            m = sample_mask_position_constrained(
                q_i, q_j, rng, config.ratio_range,
                h=image_i.shape[0], w=image_i.shape[1], block_size=config.block_size)
        else:
            m = sample_mask_probability_driven(
                p_j, rng, config.delta_gate, config.ratio_range, config.block_size)
        if m is not None:
            mode = candidate_mode
            break
    if m is None:
        return identity()

    m_hat, r = lesion_gate(p_j, m, config.delta_gate, config.eps, config.block_size)
    if not m_hat.any():
        return identity(mode=mode, gate_ratio=r)

    mixed_image = mix_images(image_i, image_j, m_hat, config.block_size)
    mixed_mask = mix_pseudo_masks(p_i, p_j, m_hat, config.block_size)
    if expr_j.spans:
        pos_j = expr_j.spans[0].surface
        if expr_i.spans:
            mixed_text = span_mix(expr_i, pos_j)
        else:
            mixed_text = parse_positions(f"{expr_i.text}, {pos_j}")
    else:
        mixed_text = expr_i
    return MixOutcome(
        mixed_image=mixed_image,
        mixed_pseudo_mask=mixed_mask,
        mixed_text=mixed_text,
        applied=True,
        mode=mode,
        gate_ratio=r,
    )
