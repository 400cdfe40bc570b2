"""Black-box trajectory defense.

Same trajectory as the white-box defense, but every manipulator gradient is
replaced by a natural-evolution-strategies estimate built from forward
queries only.
"""

import logging
import math
import time

from multiprocessing.pool import ThreadPool

import torch

from trajguard import utils
from trajguard.diffusion import ddim_inversion, ddim_step, denoise
from trajguard.diffusion import make_timestep_plan
from trajguard.exc import NumericalError, ParameterError
from trajguard.whitebox import ProtectionResult, adversarial_loss
from trajguard.whitebox import initial_latent, noise_layer
from trajguard.whitebox import validate_trajectory

LOG = logging.getLogger(__name__)


class NESConfig(object):
    """NES estimator settings.

    :param n: sampled directions per estimate.
    :param sigma: probe scale.
    :param antithetic: probe each direction at +sigma and -sigma; otherwise
        draw 2n independent one-sided probes.
    :param seed: seed of the direction generator.
    :param workers: threads issuing probe queries, 1 for sequential.
    """

    FIELDS = ('n', 'sigma', 'antithetic', 'seed', 'workers')

    # pylint: disable=too-many-arguments,invalid-name

    def __init__(self, n=32, sigma=0.01, antithetic=True, seed=0, workers=1):
        """Store and validate the settings."""
        self.n = n
        self.sigma = sigma
        self.antithetic = antithetic
        self.seed = seed
        self.workers = workers
        self.validate()

    def __repr__(self):
        """Return value for the repr function."""
        return "NESConfig(%s)" % ', '.join(
            '%s=%r' % (key, getattr(self, key)) for key in self.FIELDS)

    def validate(self):
        """Raise ParameterError when a setting is out of range."""
        if int(self.n) != self.n or self.n < 1:
            raise ParameterError("NES n must be an integer >= 1, got %r"
                                 % (self.n,))
        if not self.sigma > 0:
            raise ParameterError("NES sigma must be positive, got %r"
                                 % (self.sigma,))
        if int(self.workers) != self.workers or self.workers < 1:
            raise ParameterError("workers must be an integer >= 1, got %r"
                                 % (self.workers,))

    def to_dict(self):
        """Return the settings as a plain dict."""
        return dict((key, getattr(self, key)) for key in self.FIELDS)

    @property
    def queries_per_estimate(self):
        """Loss evaluations one estimate costs."""
        return 2 * int(self.n)


class BlackBoxConfig(object):
    """Hyperparameters of the black-box defense.

    Shares T1, T2, K, alpha, inject_steps, the noise layer, clamp_final and
    the inversion choice with WhiteBoxConfig; there are no projection
    weights. The default alpha is higher than the white-box one since the
    NES estimate is noisier than the exact gradient.
    """

    # pylint: disable=too-many-instance-attributes,too-many-arguments
    # pylint: disable=invalid-name

    FIELDS = ('T1', 'T2', 'K', 'alpha', 'inject_steps', 'noise_kernel',
              'noise_sigma', 'clamp_final', 'inversion', 'seed')

    def __init__(self, nes=None, T1=50, T2=10, K=3, alpha=20.0,
                 inject_steps=None, noise_kernel=3, noise_sigma=1.0,
                 clamp_final=True, inversion='ddim', seed=0):
        """Store and validate the hyperparameters."""
        self.nes = nes if nes is not None else NESConfig(seed=seed)
        self.T1 = T1
        self.T2 = T2
        self.K = K
        self.alpha = alpha
        self.inject_steps = T2 if inject_steps is None else inject_steps
        self.noise_kernel = noise_kernel
        self.noise_sigma = noise_sigma
        self.clamp_final = clamp_final
        self.inversion = inversion
        self.seed = seed
        self.validate()

    def __repr__(self):
        """Return value for the repr function."""
        return "BlackBoxConfig(%s, nes=%r)" % (', '.join(
            '%s=%r' % (key, getattr(self, key)) for key in self.FIELDS),
                                               self.nes)

    def validate(self):
        """Raise ParameterError when a hyperparameter is out of range."""
        validate_trajectory(self)
        self.nes.validate()

    def to_dict(self):
        """Return the hyperparameters as a plain dict, NES nested."""
        data = dict((key, getattr(self, key)) for key in self.FIELDS)
        data['nes'] = self.nes.to_dict()
        return data

    def expected_queries(self):
        """Manipulator queries one protect_blackbox run issues.

        One clean query, 2n per active step per pass, and one loss query
        per pass.
        """
        return (self.K * self.inject_steps * self.nes.queries_per_estimate
                + self.K + 1)


def _evaluate(loss_at, probes, workers):
    if workers > 1 and len(probes) > 1:
        pool = ThreadPool(min(int(workers), len(probes)))
        try:
            return pool.map(loss_at, probes)
        finally:
            pool.close()
            pool.join()
    return [loss_at(probe) for probe in probes]


def _check_probe_values(values, labels):
    for value, label in zip(values, labels):
        if not math.isfinite(value):
            raise NumericalError("non-finite loss at NES probe %d (%s)"
                                 % label, probe={'index': label[0],
                                                 'sign': label[1]})


def nes_gradient(loss_at, x, cfg, rng=None):
    """Estimate the gradient of a scalar function from forward queries.

    With antithetic sampling the estimate is
    ``sum_i [L(x + sigma u_i) - L(x - sigma u_i)] u_i / (n sigma)`` over n
    standard normal directions; otherwise 2n one-sided probes give
    ``sum_j L(x + sigma u_j) u_j / (2 n sigma)``. Either way exactly 2n
    evaluations of ``loss_at`` are issued.

    :param loss_at: callable tensor -> float.
    :param x: point to estimate at.
    :param NESConfig cfg: estimator settings.
    :param torch.Generator rng: direction source; seeded from ``cfg.seed``
        when omitted.
    """
    cfg.validate()
    if rng is None:
        rng = torch.Generator().manual_seed(int(cfg.seed))
    n, sigma = int(cfg.n), float(cfg.sigma)
    count = n if cfg.antithetic else 2 * n
    directions = torch.randn((count,) + tuple(x.shape), generator=rng,
                             dtype=x.dtype)

    if cfg.antithetic:
        probes, labels = [], []
        for i in range(n):
            probes.append(x + sigma * directions[i])
            labels.append((i, '+'))
            probes.append(x - sigma * directions[i])
            labels.append((i, '-'))
    else:
        probes = [x + sigma * directions[j] for j in range(count)]
        labels = [(j, '+') for j in range(count)]

    values = [float(v) for v in _evaluate(loss_at, probes, cfg.workers)]
    _check_probe_values(values, labels)

    if cfg.antithetic:
        weights = torch.tensor([values[2 * i] - values[2 * i + 1]
                                for i in range(n)], dtype=x.dtype)
        scale = n * sigma
    else:
        weights = torch.tensor(values, dtype=x.dtype)
        scale = 2 * n * sigma
    shape = (count,) + (1,) * x.dim()
    return (weights.reshape(shape) * directions).sum(dim=0) / scale


def adversarial_loss_fn(manipulator, clean_out):
    """Return tensor -> float, the adversarial loss of one manipulator query."""
    def loss_at(candidate):
        return float(adversarial_loss(clean_out, manipulator.forward(candidate)))
    return loss_at


def protect_blackbox(x, manipulator, denoiser, cfg, sched):
    """Protect one image with query access to the manipulator only.

    Each pass walks the denoising plan from the current starting latent,
    adding ``alpha`` times an NES estimate of the adversarial-loss gradient
    after every active step. Every pass starts from ``x_T2`` plus an offset:
    the inverted, smoothed pass result minus the inverted, smoothed plain
    reconstruction. With ``alpha = 0`` the offset is zero and every pass
    reproduces the reconstruction. No fidelity gradient is used and
    ``manipulator.input_gradient`` is never called.
    """
    cfg.validate()
    started = time.time()
    plan = make_timestep_plan(cfg.T1, cfg.T2)
    x = x.replace(timestep=0)
    queries_before = getattr(manipulator, 'query_count', None)
    clean_out = manipulator.forward(x.data)
    loss_at = adversarial_loss_fn(manipulator, clean_out)

    x_T2 = initial_latent(x, denoiser, sched, cfg, plan)  # noqa: N806
    reference = ddim_inversion(
        noise_layer(denoise(x_T2, denoiser, sched, plan), cfg.noise_kernel,
                    cfg.noise_sigma), cfg.T1, denoiser, sched, plan)
    x_tmp = x_T2
    x_adv = x_T2
    first_active = cfg.T2 - cfg.inject_steps
    trace = []

    for k in range(cfg.K):
        x_adv = x_tmp
        for i, (t2, t2_prev) in enumerate(plan.denoise_steps):
            x_adv = ddim_step(x_adv, denoiser(x_adv.data, t2), t2, t2_prev,
                              sched)
            record = {'kind': 'inject', 'iteration': k, 't': t2,
                      't_prev': t2_prev, 'active': i >= first_active}
            if record['active']:
                rng = torch.Generator().manual_seed(
                    utils.derive_seed(cfg.nes.seed, k, t2))
                try:
                    grad = nes_gradient(loss_at, x_adv.data, cfg.nes, rng)
                except NumericalError as err:
                    err.trace = trace + [record]
                    raise
                record['grad_norm'] = float(grad.norm())
                x_adv = x_adv.replace(data=x_adv.data + cfg.alpha * grad)
            trace.append(record)

        x_prime = noise_layer(x_adv, cfg.noise_kernel, cfg.noise_sigma)
        adv_loss = loss_at(x_prime.data)
        record = {'kind': 'iteration', 'iteration': k, 'adv_loss': adv_loss,
                  'fidelity_loss': float((x_prime.data - x.data)
                                         .abs().mean())}
        if not math.isfinite(adv_loss):
            raise NumericalError("non-finite adversarial loss after pass %d"
                                 % k, trace=trace + [record])
        offset = ddim_inversion(x_prime, cfg.T1, denoiser, sched,
                                plan).data - reference.data
        record['offset_norm'] = float(offset.norm())
        trace.append(record)
        LOG.debug("pass %d/%d: adv_loss=%.6g offset=%.6g", k + 1, cfg.K,
                  adv_loss, record['offset_norm'])
        x_tmp = x_T2.replace(data=x_T2.data + offset)

    if cfg.clamp_final:
        x_adv = x_adv.clamped()
    queries = cfg.expected_queries()
    if queries_before is not None:
        queries = manipulator.query_count - queries_before
    elapsed = time.time() - started
    LOG.info("black-box protection of %s done in %.2fs (%d queries)",
             x.shape, elapsed, queries)
    metadata = {'mode': 'blackbox', 'config': cfg.to_dict(),
                'schedule': sched.describe(),
                'manipulator': manipulator.describe()
                if hasattr(manipulator, 'describe') else repr(manipulator)}
    return ProtectionResult(x_adv.replace(timestep=0), trace, elapsed,
                            queries=queries, metadata=metadata)
