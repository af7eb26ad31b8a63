"""The cellular-automaton dynamical system.

A state tensor S of shape (H, W, C) carries the RGB image in channels 0-2
and latent values elsewhere. Each step applies a local rule identically at
every pixel: fixed perception filters (identity + Sobel pair, per channel),
a 1x1 layer with ReLU, a second zero-initialized 1x1 layer producing a
residual update for the latent channels, gated by a per-pixel Bernoulli
fire mask. Image channels are never written; they are re-imposed every
step. Segmentation is read out as a softmax over the last two channels.

``step``/``rollout`` run on plain arrays (inference). ``traced_step``
builds the equivalent computation on autodiff tensors for training; the
two paths share the same kernels and RNG draw order, so with equal seeds
they produce bit-identical states.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

IDENTITY_KERNEL = np.array([[0, 0, 0], [0, 1, 0], [0, 0, 0]], dtype=np.float32)
SOBEL_X_KERNEL = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float32)
SOBEL_Y_KERNEL = np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]], dtype=np.float32)
PERCEPTION_KERNELS = np.stack([IDENTITY_KERNEL, SOBEL_X_KERNEL, SOBEL_Y_KERNEL])

IMAGE_CHANNELS = 3


class DynamicsError(RuntimeError):
    """Raised when an update produces non-finite values."""


@dataclass
class NcaParams:
    """Learnable weights of the update rule plus fixed hyperparameters.

    w1: (hidden, 3C) over perception features, b1: (hidden,), and
    w2: (C-3, hidden) with no bias. w2 starts at zero so the untrained
    automaton is the identity map on its latent channels.
    """

    num_channels: int
    hidden_size: int
    fire_rate: float
    w1: ad.Tensor
    b1: ad.Tensor
    w2: ad.Tensor

    def __post_init__(self):
        c, h = self.num_channels, self.hidden_size
        if c <= 5:
            raise ValueError(f"num_channels must exceed 5 (3 image + 2 logit), got {c}")
        if not 0.0 <= self.fire_rate <= 1.0:
            raise ValueError(f"fire_rate must lie in [0, 1], got {self.fire_rate}")
        if self.w1.data.shape != (h, 3 * c):
            raise ValueError(f"w1 shape {self.w1.data.shape} != {(h, 3 * c)}")
        if self.b1.data.shape != (h,):
            raise ValueError(f"b1 shape {self.b1.data.shape} != {(h,)}")
        if self.w2.data.shape != (c - 3, h):
            raise ValueError(f"w2 shape {self.w2.data.shape} != {(c - 3, h)}")

    @classmethod
    def init(cls, rng: np.random.Generator, num_channels: int = 64,
             hidden_size: int = 128, fire_rate: float = 0.5) -> "NcaParams":
        """Fresh parameters: fan-in uniform w1, zero b1, zero w2."""
        bound = np.sqrt(1.0 / (3 * num_channels))
        w1 = rng.uniform(-bound, bound, size=(hidden_size, 3 * num_channels))
        return cls(
            num_channels=num_channels,
            hidden_size=hidden_size,
            fire_rate=fire_rate,
            w1=ad.Tensor(w1, requires_grad=True),
            b1=ad.Tensor(np.zeros(hidden_size), requires_grad=True),
            w2=ad.Tensor(np.zeros((num_channels - 3, hidden_size)), requires_grad=True),
        )

    def tensors(self) -> dict[str, ad.Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2}

    def zero_grad(self) -> None:
        for t in self.tensors().values():
            t.zero_grad()


@dataclass
class NcaState:
    s: np.ndarray  # (H, W, C) float32; channels 0-2 hold the image
    step_count: int = 0


@dataclass
class SegPrediction:
    prob: np.ndarray  # (H, W) foreground probability
    mask: np.ndarray  # (H, W) bool, prob > 0.5


@dataclass
class TrajectoryPolicy:
    """What a rollout should retain for the uncertainty methods."""

    probs_last: int = 0           # keep foreground-prob maps of the last N steps
    masks_last: int = 0           # keep binary masks of the last N steps
    mask_steps: tuple[int, ...] = ()  # also keep masks at these absolute step counts


@dataclass
class Trajectory:
    probs: deque = field(default_factory=deque)   # (step_count, prob map)
    masks: deque = field(default_factory=deque)   # (step_count, bool mask)
    masks_at: dict = field(default_factory=dict)  # step_count -> bool mask


def init_state(image: np.ndarray, params: NcaParams) -> NcaState:
    """Concatenate the image with zero latent channels; t = 0."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != IMAGE_CHANNELS:
        raise ValueError(f"expected an (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    if h < 3 or w < 3:
        raise ValueError(f"image must be at least 3x3, got {h}x{w}")
    s = np.zeros((h, w, params.num_channels), dtype=np.float32)
    s[:, :, :IMAGE_CHANNELS] = image
    return NcaState(s=s, step_count=0)


def _fire_mask(rng: np.random.Generator, h: int, w: int, fire_rate: float) -> np.ndarray:
    # one draw per pixel, shared across channels; the stream is consumed
    # even when fire_rate is 0 so rollouts stay composable
    return (rng.random((h, w, 1)) < fire_rate).astype(np.float32)


def step(state: NcaState, params: NcaParams, rng: np.random.Generator) -> NcaState:
    """One update S -> S': residual latent update under the fire mask."""
    s = state.s
    if s.shape[2] != params.num_channels:
        raise ValueError(f"state has {s.shape[2]} channels, params expect {params.num_channels}")
    percep = ad.conv3x3_replicate(s, PERCEPTION_KERNELS)
    hidden = ad.affine_map(percep, params.w1.data, params.b1.data)
    np.maximum(hidden, 0, out=hidden)
    delta = ad.affine_map(hidden, params.w2.data, None)
    if not np.all(np.isfinite(delta)):
        raise DynamicsError(f"non-finite update delta at step {state.step_count}")
    fire = _fire_mask(rng, s.shape[0], s.shape[1], params.fire_rate)
    out = np.empty_like(s)
    out[:, :, :IMAGE_CHANNELS] = s[:, :, :IMAGE_CHANNELS]
    out[:, :, IMAGE_CHANNELS:] = s[:, :, IMAGE_CHANNELS:] + fire * delta
    return NcaState(s=out, step_count=state.step_count + 1)


def rollout(state: NcaState, params: NcaParams, steps: int, rng: np.random.Generator,
            record: TrajectoryPolicy | None = None) -> tuple[NcaState, Trajectory | None]:
    """Apply ``step`` repeatedly, optionally retaining per-step readouts.

    Successive calls that share an RNG continue the same mask stream, so
    rollout(s, a) followed by rollout(., b) equals rollout(s, a + b).
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    traj = None
    if record is not None:
        traj = Trajectory(
            probs=deque(maxlen=record.probs_last or None),
            masks=deque(maxlen=record.masks_last or None),
        )
    for _ in range(steps):
        state = step(state, params, rng)
        if traj is not None:
            want_prob = record.probs_last > 0
            want_mask = record.masks_last > 0
            want_at = state.step_count in record.mask_steps
            if want_prob or want_mask or want_at:
                pred = readout(state)
                if want_prob:
                    traj.probs.append((state.step_count, pred.prob))
                if want_mask:
                    traj.masks.append((state.step_count, pred.mask))
                if want_at:
                    traj.masks_at[state.step_count] = pred.mask
    return state, traj


def readout(state: NcaState) -> SegPrediction:
    """Softmax over the two trailing logit channels; ties go to background."""
    c = state.s.shape[2]
    if c < 5:
        raise ValueError(f"readout needs at least 5 channels, got {c}")
    prob = ad.softmax2(state.s[:, :, c - 2:c])[:, :, 1]
    return SegPrediction(prob=prob, mask=prob > 0.5)


def predict(params: NcaParams, image: np.ndarray, steps: int,
            rng: np.random.Generator) -> tuple[NcaState, SegPrediction]:
    """Init + rollout + readout in one call."""
    state, _ = rollout(init_state(image, params), params, steps, rng)
    return state, readout(state)


# ---------------------------------------------------------------------------
# traced path (training)
# ---------------------------------------------------------------------------

def traced_step(latent: ad.Tensor, image: ad.Tensor, params: NcaParams,
                rng: np.random.Generator) -> ad.Tensor:
    """Graph-recording twin of ``step`` on the latent channels."""
    full = ad.concat_channels(image, latent)
    percep = ad.depthwise_conv3x3(full, PERCEPTION_KERNELS)
    hidden = ad.relu(ad.pointwise_affine(percep, params.w1, params.b1))
    delta = ad.pointwise_affine(hidden, params.w2, None)
    h, w = image.data.shape[:2]
    fire = _fire_mask(rng, h, w, params.fire_rate)
    return ad.add(latent, ad.gate(delta, fire))


def traced_rollout(image: np.ndarray, params: NcaParams, steps: int,
                   rng: np.random.Generator) -> ad.Tensor:
    """Unrolled rollout from a fresh state; returns the final latent tensor."""
    image_t = ad.Tensor(image)
    h, w = image_t.data.shape[:2]
    latent = ad.Tensor(np.zeros((h, w, params.num_channels - 3), dtype=np.float32))
    for i in range(steps):
        latent = traced_step(latent, image_t, params, rng)
        if not np.all(np.isfinite(latent.data)):
            raise DynamicsError(f"non-finite update delta at step {i}")
    return latent


def traced_logits(latent: ad.Tensor, params: NcaParams) -> ad.Tensor:
    """The two trailing logit channels of the latent block."""
    c = params.num_channels
    return ad.slice_channels(latent, c - 5, c - 3)
