"""Model interfaces and desk-scale models.

A DifferentiableMap wraps a torch module and exposes ``forward`` and
``input_gradient``; a QueryOnlyModel exposes only counted queries. The toy
denoisers, manipulators and identity encoder here are fixed-weight float64
networks built from a seed, so every run and every gradient is reproducible.
"""

import json
import logging
import math
import threading

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from trajguard import utils
from trajguard.exc import CapabilityError, ModelError, ParameterError
from trajguard.exc import QueryBudgetExceeded

LOG = logging.getLogger(__name__)

DTYPE = torch.float64
WEIGHTS_FORMAT = 'trajguard-weights/1'

DENOISER_KINDS = ('linear', 'small-convolutional')
MANIPULATOR_KINDS = ('attribute-editor', 'face-swapper', 'linear', 'identity')


def _randn(generator, *shape):
    return torch.randn(*shape, generator=generator, dtype=DTYPE)


def _seeded_conv(generator, in_ch, out_ch, gain=1.0, kernel=3):
    conv = nn.Conv2d(in_ch, out_ch, kernel, padding=kernel // 2)
    conv = conv.to(DTYPE)
    fan_in = in_ch * kernel * kernel
    with torch.no_grad():
        conv.weight.copy_(_randn(generator, out_ch, in_ch, kernel, kernel) *
                          (gain / math.sqrt(fan_in)))
        conv.bias.copy_(_randn(generator, out_ch) * 0.1)
    return conv


def _seeded_linear(generator, in_features, out_features, gain=1.0):
    layer = nn.Linear(in_features, out_features).to(DTYPE)
    with torch.no_grad():
        layer.weight.copy_(_randn(generator, out_features, in_features) *
                           (gain / math.sqrt(in_features)))
        layer.bias.copy_(_randn(generator, out_features) * 0.1)
    return layer


def timestep_embedding(t, dim):
    """Sinusoidal embedding of an integer timestep, shape (dim,)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) *
                      torch.arange(half, dtype=DTYPE) / max(half, 1))
    args = float(t) * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)])
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(1, dtype=DTYPE)])
    return emb


class LinearDenoiser(nn.Module):
    """eps(x, t) = c * x."""

    def __init__(self, c=0.1):
        super(LinearDenoiser, self).__init__()
        self.register_buffer('c', torch.tensor(float(c), dtype=DTYPE))

    def forward(self, x, t):  # pylint: disable=unused-argument
        return self.c * x


class ConvDenoiser(nn.Module):
    """Two 3x3 convolutions with a sinusoidal time embedding added channelwise."""

    def __init__(self, generator, channels=3, hidden=8, scale=0.1):
        super(ConvDenoiser, self).__init__()
        self.hidden = hidden
        self.scale = scale
        self.conv_in = _seeded_conv(generator, channels, hidden, gain=1.5)
        self.conv_out = _seeded_conv(generator, hidden, channels)

    def forward(self, x, t):
        emb = 0.5 * timestep_embedding(t, self.hidden)
        h = torch.tanh(self.conv_in(x) + emb[None, :, None, None])
        return self.scale * self.conv_out(h)


class AttributeEditor(nn.Module):
    """Residual image-to-image editor with a fixed attribute shift."""

    def __init__(self, generator, channels=3, hidden=16, gain=1.5):
        super(AttributeEditor, self).__init__()
        self.conv1 = _seeded_conv(generator, channels, hidden, gain=gain)
        self.conv2 = _seeded_conv(generator, hidden, channels, gain=gain)
        self.register_buffer('attribute', _randn(generator, channels) * 0.3)

    def forward(self, x):
        h = torch.tanh(self.conv1(x))
        return torch.tanh(x + self.conv2(h) +
                          self.attribute[None, :, None, None])


class IdentityNet(nn.Module):
    """Pool, project, squash and L2-normalize an image into a unit vector."""

    def __init__(self, generator, channels=3, dim=32, pool=8, hidden=64):
        super(IdentityNet, self).__init__()
        self.pool = pool
        self.fc1 = _seeded_linear(generator, channels * pool * pool, hidden,
                                  gain=2.0)
        self.fc2 = _seeded_linear(generator, hidden, dim)

    def forward(self, x):
        pooled = F.adaptive_avg_pool2d(x, self.pool).flatten(1)
        emb = self.fc2(torch.tanh(self.fc1(pooled)))
        return emb / emb.norm(dim=1, keepdim=True).clamp_min(1e-12)


class FaceSwapper(nn.Module):
    """Blend a bound target with the source, mixed by the source identity."""

    def __init__(self, generator, target, dim=32):
        super(FaceSwapper, self).__init__()
        channels = target.shape[0]
        self.register_buffer('target', target.to(DTYPE))
        self.identity = IdentityNet(generator, channels=channels, dim=dim)
        self.mix = _seeded_linear(generator, dim, channels, gain=2.0)

    def forward(self, source, target=None):
        if target is None:
            target = self.target.unsqueeze(0).expand_as(source)
        weights = torch.sigmoid(self.mix(self.identity(source)))
        weights = weights[:, :, None, None]
        return (1.0 - weights) * target + weights * source


class LinearManipulator(nn.Module):
    """M(x) = B x on the flattened image."""

    def __init__(self, matrix, shape):
        super(LinearManipulator, self).__init__()
        matrix = torch.as_tensor(matrix, dtype=DTYPE)
        numel = int(np.prod(shape))
        if tuple(matrix.shape) != (numel, numel):
            raise ParameterError("matrix must be %dx%d for shape %s"
                                 % (numel, numel, tuple(shape)))
        self.shape = tuple(int(s) for s in shape)
        self.register_buffer('matrix', matrix)

    def forward(self, x):
        flat = x.reshape(x.shape[0], -1)
        return (flat @ self.matrix.t()).reshape((x.shape[0],) + self.shape)


class DifferentiableMap(object):
    """A model with a deterministic forward and an exact input gradient.

    Tensors are unbatched (C, H, W); extra positional arguments (the
    timestep of a denoiser) are passed through to the module.
    """

    def __init__(self, module, name, seed=None, kind=None, options=None,
                 role=None):
        """Wrap a torch module; the module is put in eval mode.

        :param role: ``denoiser`` or ``manipulator``; saved weights are
            rebuilt by role and kind.
        """
        # pylint: disable=too-many-arguments
        self.module = module.eval()
        self.name = name
        self.role = role
        self.seed = seed
        self.kind = kind
        self.options = dict(options or {})
        for param in self.module.parameters():
            param.requires_grad_(False)

    def __repr__(self):
        """Return value for the repr function."""
        return "DifferentiableMap(name=%s, seed=%s)" % (self.name, self.seed)

    def __call__(self, x, *args):
        """Alias of forward."""
        return self.forward(x, *args)

    def forward(self, x, *args):
        """Evaluate the model on one unbatched tensor."""
        try:
            with torch.no_grad():
                return self.module(x.unsqueeze(0), *args).squeeze(0)
        except RuntimeError as err:
            raise ModelError("%s forward failed: %s" % (self.name, err))

    def input_gradient(self, x, loss_fn, *args):
        """Gradient of ``loss_fn(forward(x))`` with respect to x."""
        x_req = x.detach().clone().requires_grad_(True)
        try:
            with torch.enable_grad():
                out = self.module(x_req.unsqueeze(0), *args).squeeze(0)
                loss = loss_fn(out)
                grad, = torch.autograd.grad(loss, x_req, allow_unused=True)
        except RuntimeError as err:
            raise ModelError("%s gradient failed: %s" % (self.name, err))
        if grad is None:
            return torch.zeros_like(x)
        return grad

    def describe(self):
        """Return a JSON-able summary for traces and reports."""
        return utils.non_empty_keys({'name': self.name, 'kind': self.kind,
                                     'seed': self.seed,
                                     'options': self.options})


class QueryOnlyModel(object):
    """Counted, gradient-free view of a model.

    :param forward: callable tensor -> tensor.
    :param name: used in logs and reports.
    :param max_queries: optional cap; the first query past it raises
        QueryBudgetExceeded.
    """

    def __init__(self, forward, name='query-only', max_queries=None):
        """Wrap a forward callable with a query counter starting at 0."""
        self._forward = forward
        self.name = name
        self.max_queries = max_queries
        self._lock = threading.Lock()
        self._count = 0

    def __repr__(self):
        """Return value for the repr function."""
        return "QueryOnlyModel(name=%s, queries=%d)" % (self.name,
                                                         self._count)

    @property
    def query_count(self):
        """Number of forward calls issued so far."""
        return self._count

    def __call__(self, x):
        """Alias of forward."""
        return self.forward(x)

    def forward(self, x):
        """Issue one query."""
        with self._lock:
            if self.max_queries is not None and \
                    self._count >= self.max_queries:
                raise QueryBudgetExceeded(
                    "%s: query budget of %d exhausted"
                    % (self.name, self.max_queries))
            self._count += 1
        return self._forward(x)

    def input_gradient(self, *args, **kwargs):
        """Query-only models have no gradient pathway."""
        raise CapabilityError("%s is query-only; use the black-box defense"
                              % self.name)

    def describe(self):
        """Return a JSON-able summary for traces and reports."""
        return utils.non_empty_keys({'name': self.name,
                                     'max_queries': self.max_queries,
                                     'query_only': True})


class IdentityEncoder(object):
    """Map an image to a unit-norm identity vector."""

    def __init__(self, net, seed=None):
        """Wrap an IdentityNet."""
        self.net = net.eval()
        self.seed = seed
        self.dim = net.fc2.out_features

    def __repr__(self):
        """Return value for the repr function."""
        return "IdentityEncoder(dim=%d, seed=%s)" % (self.dim, self.seed)

    def embed(self, x):
        """Return the (dim,) unit embedding of a (C, H, W) image."""
        with torch.no_grad():
            return self.net(x.unsqueeze(0)).squeeze(0)

    __call__ = embed


def make_toy_denoiser(seed=0, kind='small-convolutional', c=0.1, channels=3,
                      hidden=8, scale=0.1):
    """Build a toy noise predictor eps(x, t).

    ``linear`` returns ``c * x``; ``small-convolutional`` is a seeded
    two-layer convolutional network with time embedding.
    """
    if kind == 'linear':
        return DifferentiableMap(LinearDenoiser(c), 'denoiser-linear',
                                 seed=seed, kind=kind, options={'c': c},
                                 role='denoiser')
    if kind == 'small-convolutional':
        generator = torch.Generator().manual_seed(int(seed))
        module = ConvDenoiser(generator, channels=channels, hidden=hidden,
                              scale=scale)
        return DifferentiableMap(module, 'denoiser-conv', seed=seed,
                                 kind=kind,
                                 options={'channels': channels,
                                          'hidden': hidden, 'scale': scale},
                                 role='denoiser')
    raise ParameterError("unknown denoiser kind %r, expected one of %s"
                         % (kind, ', '.join(DENOISER_KINDS)))


def make_linear_manipulator(matrix, shape, name='manipulator-linear',
                            seed=None):
    """Wrap an explicit matrix B as the manipulator M(x) = B x."""
    module = LinearManipulator(matrix, shape)
    return DifferentiableMap(module, name, seed=seed, kind='linear',
                             options={'shape': list(module.shape)},
                             role='manipulator')


def make_toy_manipulator(seed=0, kind='attribute-editor', channels=3,
                         shape=None, target=None, hidden=16, gain=1.5,
                         dim=32):
    """Build a toy manipulation model.

    :param kind: ``attribute-editor``, ``face-swapper``, ``linear`` (seeded
        Gaussian B scaled by 1/sqrt(numel)) or ``identity`` (B = I).
    :param shape: image shape, required by the linear kinds and used to draw
        a face-swapper target when none is given.
    :param target: face-swapper target image (C, H, W).
    """
    generator = torch.Generator().manual_seed(int(seed))
    if kind == 'attribute-editor':
        module = AttributeEditor(generator, channels=channels, hidden=hidden,
                                 gain=gain)
        return DifferentiableMap(module, 'manipulator-editor', seed=seed,
                                 kind=kind,
                                 options={'channels': channels,
                                          'hidden': hidden, 'gain': gain},
                                 role='manipulator')
    if kind == 'face-swapper':
        if target is None:
            if shape is None:
                raise ParameterError("face-swapper needs a target or a shape")
            target = torch.tanh(_randn(generator, *shape))
        module = FaceSwapper(generator, torch.as_tensor(target), dim=dim)
        return DifferentiableMap(module, 'manipulator-swapper', seed=seed,
                                 kind=kind,
                                 options={'shape': list(module.target.shape),
                                          'dim': dim},
                                 role='manipulator')
    if kind in ('linear', 'identity'):
        if shape is None:
            raise ParameterError("%s manipulator needs a shape" % kind)
        numel = int(np.prod(shape))
        if kind == 'identity':
            matrix = torch.eye(numel, dtype=DTYPE)
        else:
            matrix = _randn(generator, numel, numel) / math.sqrt(numel)
        dmap = make_linear_manipulator(matrix, shape,
                                       name='manipulator-%s' % kind,
                                       seed=seed)
        dmap.kind = kind
        return dmap
    raise ParameterError("unknown manipulator kind %r, expected one of %s"
                         % (kind, ', '.join(MANIPULATOR_KINDS)))


def wrap_black_box(m, max_queries=None):
    """Return a counted, gradient-free view of a model's forward."""
    return QueryOnlyModel(m.forward, name='%s(query-only)' % m.name,
                          max_queries=max_queries)


def make_toy_identity_encoder(seed=0, d=32, channels=3):
    """Build a seeded projection + tanh + L2-normalization encoder."""
    if d < 2:
        raise ParameterError("identity dimension must be >= 2, got %r" % d)
    generator = torch.Generator().manual_seed(int(seed))
    return IdentityEncoder(IdentityNet(generator, channels=channels, dim=d),
                           seed=seed)


def gradient_audit(dmap, shape, probes=10, step=1e-4, seed=0, args=()):
    """Worst relative error of input_gradient against central differences.

    Each probe draws a random point and a random quadratic-plus-linear loss
    of the model output, then compares the analytic gradient with central
    differences of step ``step`` along every input coordinate.
    """
    generator = torch.Generator().manual_seed(int(seed))
    worst = 0.0
    for _ in range(probes):
        x = _randn(generator, *shape) * 0.5
        out_shape = dmap.forward(x, *args).shape
        weights = _randn(generator, *out_shape)

        def loss_fn(out, weights=weights):
            return (weights * out).sum() + 0.5 * (out * out).sum()

        analytic = dmap.input_gradient(x, loss_fn, *args)
        numeric = torch.zeros_like(x).reshape(-1)
        flat = x.reshape(-1)
        for i in range(flat.numel()):
            bump = torch.zeros_like(flat)
            bump[i] = step
            upper = loss_fn(dmap.forward((flat + bump).reshape(shape), *args))
            lower = loss_fn(dmap.forward((flat - bump).reshape(shape), *args))
            numeric[i] = (upper - lower) / (2.0 * step)
        numeric = numeric.reshape(shape)
        scale = max(float(analytic.norm()), float(numeric.norm()), 1e-12)
        worst = max(worst, float((analytic - numeric).norm()) / scale)
    LOG.debug("gradient audit of %s: worst relative error %.3g",
              dmap.name, worst)
    return worst


def model_from_spec(role, spec, shape=None):
    """Build a model from a config mapping.

    ``{"weights": path}`` loads saved weights; otherwise ``kind``, ``seed``
    and the factory options of the role are read.
    """
    spec = dict(spec)
    if 'weights' in spec:
        return load_weights(spec['weights'])
    try:
        if role == 'denoiser':
            return make_toy_denoiser(**spec)
        if role == 'manipulator':
            if shape is not None and spec.get('kind') in ('linear',
                                                          'identity',
                                                          'face-swapper'):
                spec.setdefault('shape', list(shape))
            return make_toy_manipulator(**spec)
        if role == 'identity_encoder':
            return make_toy_identity_encoder(**spec)
    except TypeError as err:
        raise ParameterError("bad %s options %r: %s" % (role, spec, err))
    raise ParameterError("unknown model role %r" % role)


def save_weights(dmap, path):
    """Write a DifferentiableMap as JSON text: role, kind, seed, tensors."""
    state = dmap.module.state_dict()
    payload = {
        'format': WEIGHTS_FORMAT,
        'name': dmap.name,
        'role': dmap.role,
        'kind': dmap.kind,
        'seed': dmap.seed,
        'options': dmap.options,
        'tensors': [{'name': key,
                     'shape': list(state[key].shape),
                     'values': state[key].reshape(-1).tolist()}
                    for key in sorted(state)],
    }
    utils.atomic_write(path, utils.canonical_json(payload) + '\n')
    return path


def _rebuild(role, kind, seed, options, tensors, name):
    # pylint: disable=too-many-arguments
    if role == 'denoiser' and kind in DENOISER_KINDS:
        return make_toy_denoiser(seed=seed, kind=kind, **options)
    if role != 'manipulator' or kind not in MANIPULATOR_KINDS:
        return None
    if kind in ('linear', 'identity'):
        dmap = make_linear_manipulator(tensors['matrix'], options['shape'],
                                       name=name, seed=seed)
        dmap.kind = kind
        return dmap
    if kind == 'face-swapper':
        return make_toy_manipulator(seed=seed, kind=kind,
                                    target=tensors['target'],
                                    dim=options.get('dim', 32))
    return make_toy_manipulator(seed=seed, kind=kind, **options)


def load_weights(path):
    """Rebuild a DifferentiableMap written by save_weights.

    Raises ModelError when the file is unreadable or names a role and kind
    no factory builds.
    """
    try:
        with open(path, 'r') as handle:
            payload = json.load(handle)
    except (IOError, OSError, ValueError) as err:
        raise ModelError("cannot read weights %s: %s" % (path, err))
    if payload.get('format') != WEIGHTS_FORMAT:
        raise ModelError("%s is not a %s file" % (path, WEIGHTS_FORMAT))

    role = payload.get('role')
    kind = payload.get('kind')
    try:
        tensors = dict((item['name'],
                        torch.tensor(item['values'], dtype=DTYPE)
                        .reshape(item['shape']))
                       for item in payload['tensors'])
        dmap = _rebuild(role, kind, payload.get('seed') or 0,
                        dict(payload.get('options') or {}), tensors,
                        payload.get('name'))
    except (KeyError, TypeError, ValueError, RuntimeError) as err:
        raise ModelError("%s: cannot rebuild %s %r: %s"
                         % (path, role, kind, err))
    if dmap is None:
        raise ModelError("%s: unknown %s kind %r" % (path, role, kind))
    try:
        dmap.module.load_state_dict(tensors)
    except RuntimeError as err:
        raise ModelError("%s does not fit a %s model: %s" % (path, kind, err))
    return dmap
