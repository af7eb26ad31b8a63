"""Image-level uncertainty scores for the automaton's predictions.

Six methods share the signature (params, image, seed, config) and return an
UncertaintyReport. ``resilience`` perturbs the final state with Gaussian
noise, relaxes for a few extra steps, and scores one minus the IoU between
the masks before and after; it is a direct scalar. The five baselines
(single-pass entropy, stopping-time disagreement, late-stage drift, binary
flicker, test-time augmentation) build per-pixel maps and aggregate them
over a thin boundary band around the predicted mask (dilation minus
erosion), ranking by the band mean; the in-band 95th percentile is carried
along for reporting only.

Every method is a pure function of (params, image, seed, config).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import nca
from .metrics import iou
from .nca import NcaParams, NcaState, TrajectoryPolicy

def _seed_list(seed, *extra) -> list[int]:
    base = list(seed) if isinstance(seed, (list, tuple)) else [seed]
    return base + [int(e) for e in extra]


# the 8 symmetries of the square as (quarter_turns, flip) pairs
DIHEDRAL_GROUP = tuple((k, f) for f in (False, True) for k in range(4))
# shape-preserving subgroup for non-square images
RECT_SUBGROUP = ((0, False), (2, False), (0, True), (2, True))


@dataclass
class UncertaintyConfig:
    sigma: float = 0.02          # perturbation magnitude
    relax_steps: int = 12        # recovery steps after the perturbation
    rollout_steps: int = 64      # inference rollout length T
    window: int = 8              # W for stability / flicker
    stoptime_samples: int = 8    # K stopping times
    t_min: int = 32
    t_max: int = 64
    band_radius: int = 2
    threshold: float = 0.5
    tta_transforms: tuple[tuple[int, bool], ...] | None = None  # None = auto

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.relax_steps < 1:
            raise ValueError(f"relax_steps must be >= 1, got {self.relax_steps}")
        if self.window < 2:
            raise ValueError(f"window must be >= 2, got {self.window}")
        if self.stoptime_samples < 1:
            raise ValueError(f"stoptime_samples must be >= 1, got {self.stoptime_samples}")
        if self.band_radius < 1:
            raise ValueError(f"band_radius must be >= 1, got {self.band_radius}")


@dataclass
class UncertaintyReport:
    method: str
    u: float
    pixel_map: np.ndarray | None = None
    band_mean: float | None = None
    band_p95: float | None = None
    fallback: bool = False
    pred_mask: np.ndarray | None = None  # the prediction the score refers to


# ---------------------------------------------------------------------------
# boundary band aggregation
# ---------------------------------------------------------------------------

def boundary_band(mask: np.ndarray, radius: int) -> np.ndarray:
    """Dilation minus erosion with a (2r+1) square element.

    Pixels outside the image count as background, so a full-foreground mask
    erodes away at the border and its band is the border ring.
    """
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    m = mask.astype(np.uint8)
    size = 2 * radius + 1
    dilated = ndimage.maximum_filter(m, size=size, mode="constant", cval=0)
    eroded = ndimage.minimum_filter(m, size=size, mode="constant", cval=0)
    return dilated.astype(bool) & ~eroded.astype(bool)


def aggregate_map(pixel_map: np.ndarray, band: np.ndarray) -> tuple[float, float, bool]:
    """(band mean, nearest-rank p95 in band, fallback flag).

    An empty band falls back to whole-image statistics and sets the flag.
    """
    if pixel_map.shape != band.shape:
        raise ValueError(f"map {pixel_map.shape} and band {band.shape} disagree")
    values = pixel_map[band]
    fallback = values.size == 0
    if fallback:
        values = pixel_map.ravel()
    ordered = np.sort(values)
    p95_idx = int(np.ceil(0.95 * ordered.size)) - 1
    return float(values.mean()), float(ordered[p95_idx]), fallback


def _banded_report(method: str, pixel_map: np.ndarray, mask: np.ndarray,
                   config: UncertaintyConfig) -> UncertaintyReport:
    band = boundary_band(mask, config.band_radius)
    mean, p95, fallback = aggregate_map(pixel_map, band)
    return UncertaintyReport(method=method, u=mean, pixel_map=pixel_map,
                             band_mean=mean, band_p95=p95, fallback=fallback,
                             pred_mask=mask)


def binary_entropy(p: np.ndarray) -> np.ndarray:
    """Two-class Shannon entropy in nats, with 0 log 0 := 0."""
    p = np.asarray(p, dtype=np.float64)
    ent = np.zeros_like(p)
    for q in (p, 1.0 - p):
        inside = q > 0
        ent -= np.where(inside, q * np.log(np.where(inside, q, 1.0)), 0.0)
    return ent


def stoptime_map(stop_masks: list[np.ndarray], final_mask: np.ndarray) -> np.ndarray:
    """Per-pixel fraction of stopping-time masks that disagree with the final one."""
    disagree = np.zeros(final_mask.shape, dtype=np.float64)
    for mask in stop_masks:
        disagree += mask != final_mask
    return disagree / len(stop_masks)


def stability_map(probs: list[np.ndarray]) -> np.ndarray:
    """Mean absolute successive difference over W transitions (W+1 maps)."""
    drift = np.zeros(probs[0].shape, dtype=np.float64)
    for prev, cur in zip(probs, probs[1:]):
        drift += np.abs(cur.astype(np.float64) - prev.astype(np.float64))
    return drift / (len(probs) - 1)


def flicker_map(masks: list[np.ndarray]) -> np.ndarray:
    """Per-pixel flip count between consecutive masks over W states, / (W-1)."""
    flips = np.zeros(masks[0].shape, dtype=np.float64)
    for prev, cur in zip(masks, masks[1:]):
        flips += prev != cur
    return flips / (len(masks) - 1)


# ---------------------------------------------------------------------------
# methods
# ---------------------------------------------------------------------------

def resilience(params: NcaParams, image: np.ndarray, seed: int,
               config: UncertaintyConfig) -> UncertaintyReport:
    """Perturb the final state with elementwise Gaussian noise, relax, and
    score 1 - IoU between the masks before and after.

    Noise is drawn independently for every pixel and every channel; the
    image channels are re-clamped immediately, so the effective
    perturbation lands on the latent state only. The fire-mask stream
    continues through the relaxation steps. One perturb-and-recover
    rollout per image.
    """
    rng = np.random.default_rng(seed)
    state, _ = nca.rollout(nca.init_state(image, params), params,
                           config.rollout_steps, rng)
    mask_before = nca.readout(state).mask
    perturbed = state.s + rng.normal(0.0, config.sigma, state.s.shape).astype(np.float32)
    perturbed[:, :, :nca.IMAGE_CHANNELS] = state.s[:, :, :nca.IMAGE_CHANNELS]
    relaxed, _ = nca.rollout(NcaState(perturbed, state.step_count), params,
                             config.relax_steps, rng)
    mask_after = nca.readout(relaxed).mask
    u = 1.0 - iou(mask_before, mask_after)
    if not 0.0 <= u <= 1.0:
        raise RuntimeError(f"resilience out of bounds: {u}")
    return UncertaintyReport(method="resilience", u=u, pred_mask=mask_before)


def entropy_single(params: NcaParams, image: np.ndarray, seed: int,
                   config: UncertaintyConfig) -> UncertaintyReport:
    """Per-pixel entropy of one rollout's softmax output."""
    rng = np.random.default_rng(seed)
    state, _ = nca.rollout(nca.init_state(image, params), params,
                           config.rollout_steps, rng)
    pred = nca.readout(state)
    return _banded_report("single", binary_entropy(pred.prob), pred.mask, config)


def stoptime(params: NcaParams, image: np.ndarray, seed: int,
             config: UncertaintyConfig) -> UncertaintyReport:
    """Fraction of sampled stopping times whose mask disagrees with the
    final mask, per pixel."""
    rng = np.random.default_rng(seed)
    stops = rng.integers(config.t_min, config.t_max + 1, size=config.stoptime_samples)
    policy = TrajectoryPolicy(mask_steps=tuple(int(t) for t in stops))
    state, traj = nca.rollout(nca.init_state(image, params), params,
                              config.t_max, rng, record=policy)
    final = nca.readout(state).mask
    pixel_map = stoptime_map([traj.masks_at[int(t)] for t in stops], final)
    return _banded_report("stoptime", pixel_map, final, config)


def stability(params: NcaParams, image: np.ndarray, seed: int,
              config: UncertaintyConfig) -> UncertaintyReport:
    """Mean absolute per-pixel change in foreground probability over the
    last W transitions of the rollout."""
    w = config.window
    if config.rollout_steps < w + 1:
        raise ValueError(f"rollout of {config.rollout_steps} steps cannot cover "
                         f"window {w} (+1)")
    rng = np.random.default_rng(seed)
    policy = TrajectoryPolicy(probs_last=w + 1)
    state, traj = nca.rollout(nca.init_state(image, params), params,
                              config.rollout_steps, rng, record=policy)
    pixel_map = stability_map([p for _, p in traj.probs])
    return _banded_report("stability", pixel_map, nca.readout(state).mask, config)


def flicker(params: NcaParams, image: np.ndarray, seed: int,
            config: UncertaintyConfig) -> UncertaintyReport:
    """Per-pixel flip frequency of the thresholded mask over the last W
    rollout states."""
    w = config.window
    if config.rollout_steps < w:
        raise ValueError(f"rollout of {config.rollout_steps} steps cannot cover window {w}")
    rng = np.random.default_rng(seed)
    policy = TrajectoryPolicy(probs_last=w)
    state, traj = nca.rollout(nca.init_state(image, params), params,
                              config.rollout_steps, rng, record=policy)
    pixel_map = flicker_map([p > config.threshold for _, p in traj.probs])
    return _banded_report("flicker", pixel_map, nca.readout(state).mask, config)


def _warp(arr: np.ndarray, quarter_turns: int, flip: bool) -> np.ndarray:
    if flip:
        arr = np.flip(arr, axis=1)
    return np.rot90(arr, quarter_turns, axes=(0, 1)).copy()


def _unwarp(arr: np.ndarray, quarter_turns: int, flip: bool) -> np.ndarray:
    arr = np.rot90(arr, -quarter_turns, axes=(0, 1))
    if flip:
        arr = np.flip(arr, axis=1)
    return arr.copy()


def tta(params: NcaParams, image: np.ndarray, seed: int,
        config: UncertaintyConfig) -> UncertaintyReport:
    """Entropy of the probability map averaged over warped rollouts.

    Square images use all 8 dihedral transforms; non-square images fall
    back to the 4 shape-preserving ones. Each transform gets a fresh
    init + rollout with its own derived RNG; predictions are inverse-warped
    before averaging. The band comes from the identity transform's mask.
    """
    transforms = config.tta_transforms
    if transforms is None:
        square = image.shape[0] == image.shape[1]
        transforms = DIHEDRAL_GROUP if square else RECT_SUBGROUP
    prob_sum = np.zeros(image.shape[:2], dtype=np.float64)
    identity_mask = None
    for i, (turns, flip) in enumerate(transforms):
        rng = np.random.default_rng(_seed_list(seed, i))
        warped = _warp(image, turns, flip)
        state, _ = nca.rollout(nca.init_state(warped, params), params,
                               config.rollout_steps, rng)
        pred = nca.readout(state)
        prob_sum += _unwarp(pred.prob, turns, flip)
        if (turns, flip) == (0, False):
            identity_mask = pred.mask
    mean_prob = prob_sum / len(transforms)
    if identity_mask is None:  # group without identity: threshold the average
        identity_mask = mean_prob > config.threshold
    return _banded_report("tta", binary_entropy(mean_prob), identity_mask, config)


METHODS = {
    "resilience": resilience,
    "single": entropy_single,
    "stoptime": stoptime,
    "stability": stability,
    "flicker": flicker,
    "tta": tta,
}
