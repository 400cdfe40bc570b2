"""White-box trajectory defense.

Guides the DDIM reconstruction of an image with exact input gradients of
the manipulation model: on each selected denoising step the latent is
pushed up the adversarial loss, and between passes the starting latent is
moved by the merged disruption and fidelity gradients.
"""

import logging
import math
import time

import torch

from trajguard import distortions
from trajguard import utils
from trajguard.diffusion import LatentImage, ddim_inversion, ddim_step
from trajguard.diffusion import forward_diffuse, make_timestep_plan
from trajguard.exc import CapabilityError, NumericalError, ParameterError

LOG = logging.getLogger(__name__)

CONFLICTING = 'conflicting'
ALIGNED = 'aligned'


class WhiteBoxConfig(object):
    """Hyperparameters of the white-box defense.

    :param T1: inversion depth.
    :param T2: number of denoising steps.
    :param K: outer iterations.
    :param alpha: injection strength per step. The adversarial loss is a
        per-pixel mean, so useful values are large; 15 suits the 3x16x16
        toy batch.
    :param lambda1, mu1: weights of the conflicting (projected) branch.
    :param lambda2, mu2: weights of the plain branch.
    :param inject_steps: inject on the last ``inject_steps`` of the T2 steps.
    :param noise_kernel, noise_sigma: Gaussian noise layer.
    :param clamp_final: clamp the returned image to [-1, 1].
    :param gradient_projection: use cross-projection when gradients conflict.
    :param projection_sign: ``descend`` subtracts the disruption gradient in
        the outer update, ``ascend`` adds it.
    :param inversion: ``ddim`` or ``stochastic`` forward diffusion.
    :param seed: noise seed of the stochastic forward.
    """

    # pylint: disable=too-many-instance-attributes,too-many-arguments
    # pylint: disable=invalid-name,too-many-locals

    FIELDS = ('T1', 'T2', 'K', 'alpha', 'lambda1', 'mu1', 'lambda2', 'mu2',
              'inject_steps', 'noise_kernel', 'noise_sigma', 'clamp_final',
              'gradient_projection', 'projection_sign', 'inversion', 'seed')

    def __init__(self, T1=50, T2=10, K=3, alpha=15.0, lambda1=1.0, mu1=1.0,
                 lambda2=1.0, mu2=1.0, inject_steps=None, noise_kernel=3,
                 noise_sigma=1.0, clamp_final=True, gradient_projection=True,
                 projection_sign='descend', inversion='ddim', seed=0):
        """Store and validate the hyperparameters."""
        self.T1 = T1
        self.T2 = T2
        self.K = K
        self.alpha = alpha
        self.lambda1 = lambda1
        self.mu1 = mu1
        self.lambda2 = lambda2
        self.mu2 = mu2
        self.inject_steps = T2 if inject_steps is None else inject_steps
        self.noise_kernel = noise_kernel
        self.noise_sigma = noise_sigma
        self.clamp_final = clamp_final
        self.gradient_projection = gradient_projection
        self.projection_sign = projection_sign
        self.inversion = inversion
        self.seed = seed
        self.validate()

    def __repr__(self):
        """Return value for the repr function."""
        return "WhiteBoxConfig(%s)" % ', '.join(
            '%s=%r' % (key, getattr(self, key)) for key in self.FIELDS)

    def validate(self):
        """Raise ParameterError when a hyperparameter is out of range."""
        validate_trajectory(self)
        for name in ('lambda1', 'mu1', 'lambda2', 'mu2'):
            if getattr(self, name) < 0:
                raise ParameterError("%s must be >= 0" % name)
        if self.projection_sign not in ('descend', 'ascend'):
            raise ParameterError("projection_sign must be 'descend' or "
                                 "'ascend', got %r" % self.projection_sign)

    def to_dict(self):
        """Return the hyperparameters as a plain dict."""
        return dict((key, getattr(self, key)) for key in self.FIELDS)


def validate_trajectory(cfg):
    """Checks shared by the white-box and black-box configs."""
    if not 1 <= cfg.T2 <= cfg.T1:
        raise ParameterError("need 1 <= T2 <= T1, got T1=%r, T2=%r"
                             % (cfg.T1, cfg.T2))
    if not 1 <= cfg.inject_steps <= cfg.T2:
        raise ParameterError("inject_steps must be in [1, T2], got %r"
                             % cfg.inject_steps)
    if cfg.K < 1:
        raise ParameterError("K must be >= 1, got %r" % cfg.K)
    if not cfg.alpha >= 0:
        raise ParameterError("alpha must be >= 0, got %r" % cfg.alpha)
    distortions.check_kernel(cfg.noise_kernel)
    if cfg.noise_sigma <= 0:
        raise ParameterError("noise_sigma must be positive")
    if cfg.inversion not in ('ddim', 'stochastic'):
        raise ParameterError("inversion must be 'ddim' or 'stochastic', "
                             "got %r" % cfg.inversion)


class ProtectionResult(object):
    """Adversarial image plus the per-step trace of how it was made."""

    def __init__(self, adversarial_image, trace, wall_time, queries=None,
                 metadata=None):
        """Store the result; the trace is not modified afterwards."""
        self.adversarial_image = adversarial_image
        self.trace = list(trace)
        self.wall_time = wall_time
        self.queries = queries
        self.metadata = dict(metadata or {})

    def __repr__(self):
        """Return value for the repr function."""
        return "ProtectionResult(shape=%s, records=%d, queries=%s)" % (
            self.adversarial_image.shape, len(self.trace), self.queries)

    def records(self, kind):
        """Trace records of one kind (inject, projection, iteration)."""
        return [rec for rec in self.trace if rec['kind'] == kind]

    def trace_lines(self, include_time=False):
        """Line-delimited JSON of the trace, metadata line first.

        Wall time is left out unless asked for, so the lines are
        reproducible byte for byte.
        """
        header = dict(self.metadata)
        header['kind'] = 'metadata'
        if self.queries is not None:
            header['queries'] = self.queries
        if include_time:
            header['wall_time'] = self.wall_time
        lines = [utils.canonical_json(header)]
        lines.extend(utils.canonical_json(rec) for rec in self.trace)
        return '\n'.join(lines) + '\n'

    def write_trace(self, path, include_time=False):
        """Atomically write trace_lines() to path."""
        utils.atomic_write(path, self.trace_lines(include_time))
        return path


def adversarial_loss(clean_out, candidate_out):
    """Mean squared difference of two manipulator outputs."""
    if tuple(clean_out.shape) != tuple(candidate_out.shape):
        raise ParameterError("output shapes differ: %s vs %s"
                             % (tuple(clean_out.shape),
                                tuple(candidate_out.shape)))
    return ((candidate_out - clean_out) ** 2).mean()


def _require_gradient(manipulator):
    if not callable(getattr(manipulator, 'input_gradient', None)):
        raise CapabilityError("%r exposes no input gradient; use the "
                              "black-box defense" % (manipulator,))


def disruption_gradient(manipulator, x, clean_out):
    """Gradient of adversarial_loss(clean_out, M(x)) with respect to x.

    Returns ``(gradient, loss)``.
    """
    _require_gradient(manipulator)
    losses = []

    def loss_fn(out):
        loss = adversarial_loss(clean_out, out)
        losses.append(float(loss.detach()))
        return loss

    grad = manipulator.input_gradient(x, loss_fn)
    return grad, losses[0]


def inject_step(x_t2, denoiser, manipulator, x_clean, t2, t2_prev, alpha,
                sched, active=True, clean_out=None, trace=None):
    """One DDIM step from t2 to t2_prev, then a gradient push if active.

    :param LatentImage x_t2: latent at timestep t2.
    :param LatentImage x_clean: the image being protected.
    :param clean_out: cached ``M(x_clean)``; computed when omitted.
    :param list trace: if given, an ``inject`` record is appended.
    """
    x_prev = ddim_step(x_t2, denoiser(x_t2.data, t2), t2, t2_prev, sched)
    record = {'kind': 'inject', 't': t2, 't_prev': t2_prev,
              'active': bool(active)}
    if active and alpha != 0:
        if clean_out is None:
            clean_out = manipulator.forward(x_clean.data)
        grad, loss = disruption_gradient(manipulator, x_prev.data, clean_out)
        record.update({'adv_loss': loss, 'grad_norm': float(grad.norm())})
        _check_finite(loss, record, trace)
        x_prev = x_prev.replace(data=x_prev.data + alpha * grad)
    elif active:
        _require_gradient(manipulator)
    if trace is not None:
        trace.append(record)
    return x_prev


def _check_finite(value, record, trace):
    if not math.isfinite(value):
        partial = list(trace or []) + [record]
        raise NumericalError("non-finite adversarial loss at step %s"
                             % record.get('t'), trace=partial)


def noise_layer(x, kernel=3, sigma=1.0):
    """Gaussian smoothing of a LatentImage; kernel 1 is the identity."""
    return x.replace(data=distortions.gaussian_blur(x.data, kernel, sigma))


def guidance_gradients(x_clean, x_prime, manipulator, clean_out=None):
    """Disruption gradient g1 and fidelity gradient g2 at x_prime.

    g1 is the gradient of the adversarial loss of M(x_prime) against
    M(x_clean); g2 is the subgradient sign(x' - x) / numel of the mean
    absolute difference, with sign(0) = 0.
    """
    _require_gradient(manipulator)
    clean = getattr(x_clean, 'data', x_clean)
    prime = getattr(x_prime, 'data', x_prime)
    if tuple(clean.shape) != tuple(prime.shape):
        raise ParameterError("image shapes differ: %s vs %s"
                             % (tuple(clean.shape), tuple(prime.shape)))
    if clean_out is None:
        clean_out = manipulator.forward(clean)
    g1, _ = disruption_gradient(manipulator, prime, clean_out)
    g2 = torch.sign(prime - clean) / prime.numel()
    return g1, g2


def _inner(a, b):
    return float((a * b).sum())


def project_out(a, b):
    """Component of a orthogonal to b: a - <a, b> / |b|^2 * b."""
    denom = _inner(b, b)
    if denom == 0:
        return a.clone()
    return a - (_inner(a, b) / denom) * b


def projection_branch(g1, g2):
    """``conflicting`` when <g1, g2> <= 0 and both are non-zero."""
    if _inner(g1, g1) == 0 or _inner(g2, g2) == 0:
        return ALIGNED
    return CONFLICTING if _inner(g1, g2) <= 0 else ALIGNED


def gradient_projection(g1, g2, lambda1, mu1, lambda2, mu2):
    """Merge disruption and fidelity gradients.

    Conflicting gradients are each projected onto the other's normal plane:
    ``-lambda1 * Proj_g2(g1) + mu1 * Proj_g1(g2)``; otherwise
    ``-lambda2 * g1 + mu2 * g2``.
    """
    if tuple(g1.shape) != tuple(g2.shape):
        raise ParameterError("gradient shapes differ: %s vs %s"
                             % (tuple(g1.shape), tuple(g2.shape)))
    if projection_branch(g1, g2) == CONFLICTING:
        return -lambda1 * project_out(g1, g2) + mu1 * project_out(g2, g1)
    return -lambda2 * g1 + mu2 * g2


def initial_latent(x, denoiser, sched, cfg, plan):
    """Latent at T1: DDIM inversion, or seeded forward diffusion."""
    if cfg.inversion == 'stochastic':
        generator = torch.Generator().manual_seed(int(cfg.seed))
        eps = torch.randn(x.data.shape, generator=generator,
                          dtype=x.data.dtype)
        return forward_diffuse(x, cfg.T1, eps, sched)
    return ddim_inversion(x, cfg.T1, denoiser, sched, plan)


def protect_whitebox(x, manipulator, denoiser, cfg, sched):
    """Protect one image with exact manipulator gradients.

    Runs K passes of injected denoising from the starting latent. After each
    pass the result is smoothed by the noise layer, g1 and g2 are taken at
    the smoothed image, and the starting latent for the next pass becomes
    ``x_T2 + G(g1, g2)``. The image of the last pass is returned.
    """
    cfg.validate()
    _require_gradient(manipulator)
    started = time.time()
    plan = make_timestep_plan(cfg.T1, cfg.T2)
    x = x.replace(timestep=0)
    clean_out = manipulator.forward(x.data)

    x_T2 = initial_latent(x, denoiser, sched, cfg, plan)  # noqa: N806
    x_tmp = x_T2
    x_adv = x_T2
    first_active = cfg.T2 - cfg.inject_steps
    lam1, lam2 = cfg.lambda1, cfg.lambda2
    if cfg.projection_sign == 'ascend':
        lam1, lam2 = -lam1, -lam2
    trace = []

    for k in range(cfg.K):
        x_adv = x_tmp
        for i, (t2, t2_prev) in enumerate(plan.denoise_steps):
            x_adv = inject_step(x_adv, denoiser, manipulator, x, t2, t2_prev,
                                cfg.alpha, sched, active=i >= first_active,
                                clean_out=clean_out, trace=trace)
            trace[-1]['iteration'] = k

        x_prime = noise_layer(x_adv, cfg.noise_kernel, cfg.noise_sigma)
        g1, g2 = guidance_gradients(x, x_prime, manipulator, clean_out)
        if cfg.gradient_projection:
            branch = projection_branch(g1, g2)
            merged = gradient_projection(g1, g2, lam1, cfg.mu1, lam2,
                                         cfg.mu2)
        else:
            branch = 'disabled'
            merged = -lam2 * g1 + cfg.mu2 * g2
        adv_loss = float(adversarial_loss(clean_out,
                                          manipulator.forward(x_prime.data)))
        record = {'kind': 'projection', 'iteration': k,
                  'adv_loss': adv_loss,
                  'fidelity_loss': float((x_prime.data - x.data)
                                         .abs().mean()),
                  'g1_norm': float(g1.norm()), 'g2_norm': float(g2.norm()),
                  'inner': _inner(g1, g2), 'branch': branch}
        _check_finite(adv_loss, record, trace)
        trace.append(record)
        LOG.debug("pass %d/%d: adv_loss=%.6g branch=%s", k + 1, cfg.K,
                  adv_loss, branch)
        x_tmp = LatentImage(x_T2.data + merged, x_T2.timestep)

    if cfg.clamp_final:
        x_adv = x_adv.clamped()
    elapsed = time.time() - started
    LOG.info("white-box protection of %s done in %.2fs (%d records)",
             x.shape, elapsed, len(trace))
    metadata = {'mode': 'whitebox', 'config': cfg.to_dict(),
                'schedule': sched.describe(),
                'manipulator': manipulator.describe()
                if hasattr(manipulator, 'describe') else repr(manipulator)}
    return ProtectionResult(x_adv.replace(timestep=0), trace, elapsed,
                            metadata=metadata)
