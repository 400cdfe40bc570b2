"""Post-processing distortions and robustness sweeps.

The four families are JPEG (P1), Gaussian blur (P2), average blur (P3) and
downscaling (P4). ``sweep`` turns a family and its parameter grid into a
metric-versus-parameter curve and ``auc`` summarizes a curve on a
normalized axis where larger means more distortion.
"""

import csv
import io
import logging

import numpy as np
import torch
import torch.nn.functional as F

from trajguard import images
from trajguard.diffusion import LatentImage
from trajguard.exc import ParameterError

LOG = logging.getLogger(__name__)

KINDS = ('jpeg', 'gaussian_blur', 'average_blur', 'downscale')
LABELS = {'jpeg': 'P1', 'gaussian_blur': 'P2', 'average_blur': 'P3',
          'downscale': 'P4'}

DEFAULT_GRIDS = {
    'jpeg': [10, 20, 30, 40, 50, 60, 70, 80, 90, 100],
    'gaussian_blur': [1, 3, 5, 7, 9, 11, 13, 15, 17, 19],
    'average_blur': [1, 3, 5, 7, 9, 11, 13, 15, 17, 19],
    'downscale': [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
}

IDENTITY_PARAMETER = {'jpeg': 100, 'gaussian_blur': 1, 'average_blur': 1,
                      'downscale': 1.0}

CSV_COLUMNS = ('kind', 'parameter', 'metric', 'value')


class DistortionSpec(object):
    """One distortion family with a parameter and an optional sweep grid."""

    def __init__(self, kind, parameter=None, grid=None):
        """Build and validate a spec; parameter defaults to the identity."""
        self.kind = kind
        if kind not in KINDS:
            raise ParameterError("unknown distortion %r, expected one of %s"
                                 % (kind, ', '.join(KINDS)))
        self.parameter = IDENTITY_PARAMETER[kind] if parameter is None \
            else parameter
        self.grid = list(grid) if grid is not None else None
        self.validate()

    def __repr__(self):
        """Return value for the repr function."""
        return "DistortionSpec(kind=%s, parameter=%r)" % (self.kind,
                                                          self.parameter)

    @property
    def label(self):
        """P1..P4 label of the family."""
        return LABELS[self.kind]

    def validate(self):
        """Raise ParameterError if the parameter or grid is out of range."""
        for value in [self.parameter] + list(self.grid or []):
            check_parameter(self.kind, value)
        if self.grid is not None and not self.grid:
            raise ParameterError("%s grid is empty" % self.kind)

    def at(self, parameter):
        """Return a single-parameter spec of the same family."""
        return DistortionSpec(self.kind, parameter)


def check_parameter(kind, value):
    """Raise ParameterError unless value is legal for the family."""
    if kind == 'jpeg':
        if int(value) != value or not 10 <= value <= 100:
            raise ParameterError("JPEG quality must be an integer in "
                                 "[10, 100], got %r" % (value,))
    elif kind in ('gaussian_blur', 'average_blur'):
        if int(value) != value or value < 1 or value > 19 or value % 2 == 0:
            raise ParameterError("%s kernel must be odd in [1, 19], got %r"
                                 % (kind, value))
    elif kind == 'downscale':
        if not 0 < value <= 1:
            raise ParameterError("downscale factor must be in (0, 1], "
                                 "got %r" % (value,))
    else:
        raise ParameterError("unknown distortion %r" % (kind,))


def normalize_parameter(kind, value):
    """Map a family parameter to [0, 1], 0 = untouched, 1 = harshest."""
    if kind == 'jpeg':
        return (100.0 - value) / 90.0
    if kind in ('gaussian_blur', 'average_blur'):
        return (value - 1.0) / 18.0
    if kind == 'downscale':
        return (1.0 - value) / 0.9
    return float(value)


def check_kernel(kernel):
    """Raise ParameterError unless kernel is an odd integer >= 1."""
    if int(kernel) != kernel or kernel < 1 or kernel % 2 == 0:
        raise ParameterError("kernel size must be an odd integer >= 1, "
                             "got %r" % (kernel,))


def gaussian_kernel1d(kernel, sigma):
    """Normalized 1-D Gaussian weights of odd length ``kernel``."""
    check_kernel(kernel)
    if sigma <= 0:
        raise ParameterError("sigma must be positive, got %r" % (sigma,))
    offsets = torch.arange(kernel, dtype=torch.float64) - (kernel - 1) / 2.0
    weights = torch.exp(-0.5 * (offsets / sigma) ** 2)
    return weights / weights.sum()


def box_kernel1d(kernel):
    """Uniform 1-D weights of odd length ``kernel``."""
    check_kernel(kernel)
    return torch.full((int(kernel),), 1.0 / kernel, dtype=torch.float64)


def sigma_for_kernel(kernel):
    """Default Gaussian sigma for a kernel size (OpenCV's rule)."""
    return 0.3 * ((kernel - 1) * 0.5 - 1) + 0.8


def separable_filter(data, weights):
    """Convolve each channel of (C, H, W) data along H then W.

    Borders are reflected. An axis of length 1 is left alone, which is what
    reflecting a single row or column would give.
    """
    kernel = weights.numel()
    if kernel == 1:
        return data.clone()
    pad = kernel // 2
    channels = data.shape[0]
    out = data.unsqueeze(0)
    weights = weights.to(data.dtype)
    for axis, size in ((2, data.shape[1]), (3, data.shape[2])):
        if size == 1:
            continue
        if size <= pad:
            raise ParameterError("image side %d too small for kernel %d"
                                 % (size, kernel))
        if axis == 2:
            padded = F.pad(out, (0, 0, pad, pad), mode='reflect')
            taps = weights.reshape(1, 1, kernel, 1)
        else:
            padded = F.pad(out, (pad, pad, 0, 0), mode='reflect')
            taps = weights.reshape(1, 1, 1, kernel)
        out = F.conv2d(padded, taps.expand(channels, 1, -1, -1).contiguous(),
                       groups=channels)
    return out.squeeze(0)


def gaussian_blur(data, kernel, sigma=None):
    """Per-channel Gaussian blur; kernel 1 is the identity."""
    if sigma is None:
        sigma = sigma_for_kernel(kernel)
    return separable_filter(data, gaussian_kernel1d(kernel, sigma))


def average_blur(data, kernel):
    """Per-channel box blur; kernel 1 is the identity."""
    return separable_filter(data, box_kernel1d(kernel))


def downscale(data, factor):
    """Bilinear resize down by factor then back to the original size."""
    height, width = data.shape[1], data.shape[2]
    small = (max(1, int(round(height * factor))),
             max(1, int(round(width * factor))))
    batch = data.unsqueeze(0)
    down = F.interpolate(batch, size=small, mode='bilinear',
                         align_corners=False)
    up = F.interpolate(down, size=(height, width), mode='bilinear',
                       align_corners=False)
    return up.squeeze(0)


def jpeg(data, quality):
    """Real JPEG encode/decode round trip at the given quality."""
    return images.jpeg_round_trip(data, int(quality))


def apply(x, spec):
    """Apply a single-parameter distortion to a LatentImage."""
    check_parameter(spec.kind, spec.parameter)
    if spec.kind == 'jpeg':
        data = jpeg(x.data, spec.parameter)
    elif spec.kind == 'gaussian_blur':
        data = gaussian_blur(x.data, int(spec.parameter))
    elif spec.kind == 'average_blur':
        data = average_blur(x.data, int(spec.parameter))
    else:
        data = downscale(x.data, float(spec.parameter))
    return LatentImage(data, x.timestep)


class RobustnessCurve(object):
    """Ordered (parameter, value) pairs of one family and metric."""

    def __init__(self, kind, metric, points):
        """Store the points in grid order."""
        self.kind = kind
        self.metric = metric
        self.points = [(p, float(v)) for p, v in points]

    def __repr__(self):
        """Return value for the repr function."""
        return "RobustnessCurve(kind=%s, metric=%s, points=%d)" % (
            self.kind, self.metric, len(self.points))

    def normalized_points(self):
        """Points on the [0, 1] axis, sorted by increasing distortion."""
        return sorted((normalize_parameter(self.kind, p), v)
                      for p, v in self.points)

    def rows(self):
        """CSV rows: kind, parameter, metric, value."""
        return [(self.kind, p, self.metric, v) for p, v in self.points]


def auc(curve):
    """Trapezoidal area under a curve on its normalized parameter axis.

    The area is divided by the covered span of the axis, so a grid that
    spans [0, 1] gives the plain area and flat curves give their value.
    """
    points = curve.normalized_points()
    if len(points) < 2:
        raise ParameterError("AUC needs at least 2 points, got %d"
                             % len(points))
    xs = np.array([p for p, _ in points], dtype=np.float64)
    ys = np.array([v for _, v in points], dtype=np.float64)
    if xs[0] < 0 or xs[-1] > 1:
        raise ParameterError("normalized parameters must lie in [0, 1]")
    span = xs[-1] - xs[0]
    if span <= 0:
        raise ParameterError("AUC needs at least 2 distinct parameters")
    area = float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))
    return area / span


def curve_score(curve):
    """AUC of a curve, or its only value when it has a single point."""
    if len(curve.points) == 1:
        return curve.points[0][1]
    return auc(curve)


def sweep(x_adv_batch, x_clean_batch, manipulator, spec_grid, metric_fn):
    """Evaluate a metric over a family's grid.

    :param x_adv_batch: LatentImages (or tensors) to distort.
    :param x_clean_batch: aligned clean images.
    :param manipulator: anything with ``forward(tensor)``.
    :param DistortionSpec spec_grid: family with ``grid`` set.
    :param metric_fn: ``metric_fn(clean_images, clean_outputs, outputs)``
        returning a float; ``metric_fn.metric_name`` labels the curve.
    """
    if len(x_adv_batch) != len(x_clean_batch):
        raise ParameterError("batches are not aligned: %d vs %d"
                             % (len(x_adv_batch), len(x_clean_batch)))
    grid = spec_grid.grid or [spec_grid.parameter]
    adv = [_as_latent(x) for x in x_adv_batch]
    clean = [_as_latent(x).data for x in x_clean_batch]
    clean_outputs = [manipulator.forward(x) for x in clean]
    metric = getattr(metric_fn, 'metric_name',
                     getattr(metric_fn, '__name__', 'metric'))
    points = []
    for parameter in grid:
        spec = spec_grid.at(parameter)
        outputs = [manipulator.forward(apply(x, spec).data) for x in adv]
        value = float(metric_fn(clean, clean_outputs, outputs))
        LOG.debug("%s %s=%r: %s=%.6g", spec.label, spec.kind, parameter,
                  metric, value)
        points.append((parameter, value))
    return RobustnessCurve(spec_grid.kind, metric, points)


def _as_latent(x):
    return x if isinstance(x, LatentImage) else LatentImage(x)


def curves_to_csv(curves):
    """Serialize curves as CSV text with columns kind, parameter, metric, value."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(CSV_COLUMNS)
    for curve in curves:
        for kind, parameter, metric, value in curve.rows():
            writer.writerow((kind, parameter, metric, repr(float(value))))
    return buf.getvalue()
