"""DDIM machinery.

Noise schedule, closed-form forward diffusion, x0 prediction, the
deterministic (eta = 0) DDIM update, DDIM inversion and the timestep plan
both defenses walk.

Timesteps index the schedule directly: ``alpha_bar(0) == 1`` so timestep 0
is the clean image, and ``alpha_bar(t)`` for ``t >= 1`` is the cumulative
product of the first ``t`` alphas.
"""

import logging
import math

import numpy as np
import torch

from trajguard.exc import ParameterError

LOG = logging.getLogger(__name__)

DEFAULT_TOTAL_STEPS = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


class NoiseSchedule(object):
    """Beta, alpha and cumulative alpha tables of a diffusion process.

    ``betas`` and ``alphas`` hold T values for timesteps 1..T;
    ``alpha_bars`` holds T + 1 values for timesteps 0..T.
    """

    def __init__(self, betas):
        """Build the tables from a sequence of betas."""
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ParameterError("betas must be a non-empty 1-D sequence")
        if not np.all((betas > 0) & (betas < 1)):
            raise ParameterError("every beta must lie in (0, 1)")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = np.concatenate(([1.0], np.cumprod(self.alphas)))

    def __repr__(self):
        """Return value for the repr function."""
        return ("NoiseSchedule(total_steps=%d, beta_start=%g, beta_end=%g)"
                % (self.total_steps, self.betas[0], self.betas[-1]))

    @property
    def total_steps(self):
        """Number of diffusion steps T."""
        return int(self.betas.size)

    def alpha_bar(self, t):
        """Cumulative alpha at timestep t as a python float."""
        self.check_timestep(t)
        return float(self.alpha_bars[t])

    def check_timestep(self, t):
        """Raise ParameterError unless 0 <= t <= T."""
        if int(t) != t or not 0 <= t <= self.total_steps:
            raise ParameterError("timestep %r outside [0, %d]"
                                 % (t, self.total_steps))

    def describe(self):
        """Return a JSON-able summary used in traces and reports."""
        return {'total_steps': self.total_steps,
                'beta_start': float(self.betas[0]),
                'beta_end': float(self.betas[-1])}


class LatentImage(object):  # pylint: disable=too-few-public-methods
    """A (channels, height, width) tensor tagged with its timestep."""

    __slots__ = ('data', 'timestep')

    def __init__(self, data, timestep=0):
        """Wrap a tensor; data must be 3-D."""
        if not isinstance(data, torch.Tensor):
            data = torch.as_tensor(data, dtype=torch.float64)
        if data.dim() != 3:
            raise ParameterError("latent data must be shaped (C, H, W), "
                                 "got %s" % (tuple(data.shape),))
        self.data = data
        self.timestep = int(timestep)

    def __repr__(self):
        """Return value for the repr function."""
        return "LatentImage(shape=%s, timestep=%d)" % (
            tuple(self.data.shape), self.timestep)

    @property
    def shape(self):
        """Shape of the wrapped tensor."""
        return tuple(self.data.shape)

    def replace(self, data=None, timestep=None):
        """Return a copy with data and/or timestep swapped."""
        return LatentImage(self.data if data is None else data,
                           self.timestep if timestep is None else timestep)

    def clamped(self):
        """Return a copy with values clamped to [-1, 1]."""
        return self.replace(data=self.data.clamp(-1.0, 1.0))


class TimestepPlan(object):
    """Ordered timestep pairs for one inversion and one denoising pass.

    ``points`` runs from T1 down to 0 and has T2 + 1 entries;
    ``denoise_steps`` pairs consecutive points as ``(t, t_prev)``;
    ``inversion_steps`` walks the same points upwards as ``(t, t_next)``.
    """

    def __init__(self, points):
        """Build a plan from a strictly decreasing list ending at 0."""
        points = [int(p) for p in points]
        if len(points) < 2 or points[-1] != 0:
            raise ParameterError("a plan needs at least two points ending "
                                 "at 0, got %r" % (points,))
        if any(a <= b for a, b in zip(points, points[1:])):
            raise ParameterError("plan points must be strictly decreasing, "
                                 "got %r" % (points,))
        self.points = points

    def __repr__(self):
        """Return value for the repr function."""
        return "TimestepPlan(T1=%d, T2=%d)" % (self.T1, self.T2)

    def __eq__(self, other):
        """Plans are equal when their points are."""
        return isinstance(other, TimestepPlan) and \
            self.points == other.points

    def __hash__(self):
        """Hash of the points."""
        return hash(tuple(self.points))

    @property
    def T1(self):  # pylint: disable=invalid-name
        """Inversion depth."""
        return self.points[0]

    @property
    def T2(self):  # pylint: disable=invalid-name
        """Number of denoising steps."""
        return len(self.points) - 1

    @property
    def denoise_steps(self):
        """Decreasing ``(t, t_prev)`` pairs, T2 of them."""
        return list(zip(self.points[:-1], self.points[1:]))

    @property
    def inversion_steps(self):
        """Increasing ``(t, t_next)`` pairs from 0 up to T1."""
        rising = self.points[::-1]
        return list(zip(rising[:-1], rising[1:]))


def build_linear_schedule(T=DEFAULT_TOTAL_STEPS,  # pylint: disable=C0103
                          beta_start=DEFAULT_BETA_START,
                          beta_end=DEFAULT_BETA_END):
    """Return a NoiseSchedule with betas spaced linearly, endpoints included.

    :param int T: number of diffusion steps, at least 1.
    :param float beta_start: first beta, in (0, beta_end].
    :param float beta_end: last beta, below 1.
    """
    if int(T) != T or T < 1:
        raise ParameterError("T must be a positive integer, got %r" % (T,))
    if not 0 < beta_start <= beta_end < 1:
        raise ParameterError("need 0 < beta_start <= beta_end < 1, got "
                             "%r, %r" % (beta_start, beta_end))
    return NoiseSchedule(np.linspace(beta_start, beta_end, int(T),
                                     dtype=np.float64))


def _check_shapes(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ParameterError("%s shape %s does not match latent shape %s"
                             % (what, tuple(b.shape), tuple(a.shape)))


def forward_diffuse(x0, t, eps, sched):
    """Sample x_t in closed form: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    sched.check_timestep(t)
    _check_shapes(x0.data, eps, 'noise')
    alpha_bar = sched.alpha_bar(t)
    data = math.sqrt(alpha_bar) * x0.data + math.sqrt(1.0 - alpha_bar) * eps
    return LatentImage(data, t)


def predict_x0(x_t, eps_pred, t, sched):
    """Estimate the clean image from x_t and a noise prediction.

    No clamping is applied. Timestep 0 is rejected.
    """
    sched.check_timestep(t)
    if t < 1:
        raise ParameterError("predict_x0 needs t >= 1, got %r" % (t,))
    _check_shapes(x_t.data, eps_pred, 'noise prediction')
    alpha_bar = sched.alpha_bar(t)
    return (x_t.data - math.sqrt(1.0 - alpha_bar) * eps_pred) / \
        math.sqrt(alpha_bar)


def ddim_step(x_t, eps_pred, t, t_prev, sched):
    """Apply one deterministic DDIM update from t down to t_prev."""
    sched.check_timestep(t)
    sched.check_timestep(t_prev)
    if not t_prev < t:
        raise ParameterError("ddim_step needs t_prev < t, got t=%r, "
                             "t_prev=%r" % (t, t_prev))
    x0_hat = predict_x0(x_t, eps_pred, t, sched)
    alpha_bar_prev = sched.alpha_bar(t_prev)
    if t_prev == 0:
        return LatentImage(x0_hat, 0)
    data = math.sqrt(alpha_bar_prev) * x0_hat + \
        math.sqrt(1.0 - alpha_bar_prev) * eps_pred
    return LatentImage(data, t_prev)


def _inversion_update(x_t, eps_pred, t, t_next, sched):
    alpha_bar = sched.alpha_bar(t)
    alpha_bar_next = sched.alpha_bar(t_next)
    x0_hat = (x_t.data - math.sqrt(1.0 - alpha_bar) * eps_pred) / \
        math.sqrt(alpha_bar)
    data = math.sqrt(alpha_bar_next) * x0_hat + \
        math.sqrt(1.0 - alpha_bar_next) * eps_pred
    return LatentImage(data, t_next)


def ddim_inversion(x0, T1, denoiser, sched, plan=None):  # noqa: N803
    """Map a clean image to its deterministic latent at timestep T1.

    The DDIM update is run in reverse time over ``plan.inversion_steps``,
    with the noise prediction evaluated at the current (lower) timestep.

    :param LatentImage x0: clean image at timestep 0.
    :param int T1: target timestep; ``plan.T1`` must equal it.
    :param denoiser: DifferentiableMap called as ``denoiser(x, t)``.
    :param NoiseSchedule sched: the schedule.
    :param TimestepPlan plan: defaults to a full-resolution plan.
    """
    sched.check_timestep(T1)
    if T1 == 0:
        return x0.replace(timestep=0)
    if plan is None:
        plan = make_timestep_plan(T1, T1)
    if plan.T1 != T1:
        raise ParameterError("plan ends at %d, inversion asked for %d"
                             % (plan.T1, T1))
    latent = x0.replace(timestep=0)
    for t, t_next in plan.inversion_steps:
        eps_pred = denoiser(latent.data, t)
        latent = _inversion_update(latent, eps_pred, t, t_next, sched)
    LOG.debug("inverted %s to timestep %d over %d steps",
              x0.shape, T1, plan.T2)
    return latent


def denoise(latent, denoiser, sched, plan):
    """Run plain DDIM over ``plan.denoise_steps`` from ``latent``."""
    for t, t_prev in plan.denoise_steps:
        latent = ddim_step(latent, denoiser(latent.data, t), t, t_prev, sched)
    return latent


def reconstruct(x0, denoiser, sched, plan):
    """Invert to ``plan.T1`` and denoise back: the unguided baseline."""
    latent = ddim_inversion(x0, plan.T1, denoiser, sched, plan)
    return denoise(latent, denoiser, sched, plan)


def make_timestep_plan(T1, T2):  # noqa: N803 pylint: disable=invalid-name
    """Return a uniform-stride plan of T2 denoising steps from T1 to 0.

    Points are ``floor(T1 * (1 - i / T2))`` for i = 0..T2, so both
    endpoints are kept and ties round down.
    """
    if int(T1) != T1 or int(T2) != T2:
        raise ParameterError("T1 and T2 must be integers")
    if not 1 <= T2 <= T1:
        raise ParameterError("need 1 <= T2 <= T1, got T1=%r, T2=%r"
                             % (T1, T2))
    points = [(int(T1) * (int(T2) - i)) // int(T2) for i in range(int(T2) + 1)]
    return TimestepPlan(points)
