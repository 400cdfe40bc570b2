"""trajguard.

Protect images against generative manipulation by steering a DDIM
denoising trajectory with manipulator gradients or NES estimates.
"""

# pylint: disable=wildcard-import

import inspect
import logging
import os

from trajguard.__about__ import *  # noqa
from trajguard import exc  # noqa
from trajguard.handler import SidecarHandler  # noqa
from trajguard.diffusion import (  # noqa
    LatentImage, NoiseSchedule, TimestepPlan, build_linear_schedule,
    ddim_inversion, ddim_step, forward_diffuse, make_timestep_plan,
    predict_x0, reconstruct)
from trajguard.models import (  # noqa
    DifferentiableMap, IdentityEncoder, QueryOnlyModel, make_toy_denoiser,
    make_toy_identity_encoder, make_toy_manipulator, wrap_black_box)
from trajguard.whitebox import (  # noqa
    ProtectionResult, WhiteBoxConfig, gradient_projection, protect_whitebox)
from trajguard.blackbox import (  # noqa
    BlackBoxConfig, NESConfig, nes_gradient, protect_blackbox)
from trajguard.distortions import DistortionSpec, auc, sweep  # noqa
from trajguard.metrics import MetricsConfig, build_report, dsr  # noqa
from trajguard.remote import RemoteManipulator  # noqa


def getLogger(name=None, **kwargs):  # pylint: disable=invalid-name
    """Return a Logger with a SidecarHandler."""
    if not name:
        curframe = inspect.currentframe()
        callingpath = inspect.getouterframes(curframe, 2)[1][1]
        name = os.path.split(
            callingpath.rpartition('.')[0] or callingpath)[-1]
        name = "%s%s" % ('trajguard-', name)
    logger = logging.getLogger(name)

    if not has_sidecar_handler(logger):
        handler = SidecarHandler(**kwargs)
        logger.addHandler(handler)
        if logger.getEffectiveLevel() == logging.NOTSET:
            logger.setLevel(handler.level)
        elif not logger.isEnabledFor(handler.level):
            logger.setLevel(handler.level)

    return logger


def has_sidecar_handler(logger):
    """Check a logger for a SidecarHandler."""
    return any([isinstance(handler, SidecarHandler)
                for handler in logger.handlers])


def sidecar_handler(logger):
    """Return the SidecarHandler attached to logger, or None."""
    for handler in logger.handlers:
        if isinstance(handler, SidecarHandler):
            return handler
    return None
