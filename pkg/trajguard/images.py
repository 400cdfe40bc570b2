"""Image interchange.

8-bit PNG in and out, mapped linearly between [0, 255] and [-1, 1];
the JPEG codec round trip; and the seeded toy batch used by tests and
desk-scale runs.
"""

import io
import logging
import os

import numpy as np
import PIL
import torch
from PIL import Image

from trajguard import utils
from trajguard.exc import InputError, ParameterError

LOG = logging.getLogger(__name__)

IMAGE_SUFFIXES = ('.png',)


def to_uint8(data):
    """Map a (C, H, W) tensor in [-1, 1] to an (H, W, C) uint8 array."""
    if data.dim() != 3 or data.shape[0] not in (1, 3):
        raise ParameterError("expected a (1|3, H, W) image, got %s"
                             % (tuple(data.shape),))
    scaled = (data.detach().clamp(-1.0, 1.0) + 1.0) * 127.5
    array = torch.round(scaled).to(torch.uint8).permute(1, 2, 0)
    return array.cpu().numpy()


def from_uint8(array):
    """Map an (H, W) or (H, W, C) uint8 array to a (C, H, W) tensor."""
    array = np.asarray(array)
    if array.ndim == 2:
        array = array[:, :, None]
    data = torch.from_numpy(np.ascontiguousarray(array)).to(torch.float64)
    return data.permute(2, 0, 1).contiguous() / 127.5 - 1.0


def _pil_image(data):
    array = to_uint8(data)
    if array.shape[2] == 1:
        return Image.fromarray(array[:, :, 0], mode='L')
    return Image.fromarray(array, mode='RGB')


def quantize(data):
    """Round-trip through 8 bits, as writing and reading a PNG would."""
    return from_uint8(to_uint8(data))


def encode_png(data):
    """Return PNG bytes of a (C, H, W) image in [-1, 1]."""
    buf = io.BytesIO()
    _pil_image(data).save(buf, format='PNG')
    return buf.getvalue()


def save_png(data, path):
    """Atomically write a (C, H, W) image in [-1, 1] as an 8-bit PNG."""
    utils.atomic_write(path, encode_png(data))
    return path


def load_png(path):
    """Read an 8-bit PNG as a (C, H, W) float64 tensor in [-1, 1].

    Grayscale stays single-channel; everything else becomes RGB.
    """
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode not in ('L', 'RGB'):
                img = img.convert('RGB')
            array = np.array(img)
    except (IOError, OSError, ValueError) as err:
        raise InputError("cannot read image %s: %s" % (path, err))
    return from_uint8(array)


def list_images(directory):
    """Sorted PNG filenames in directory."""
    if not os.path.isdir(directory):
        raise InputError("input directory %s does not exist" % directory)
    return sorted(name for name in os.listdir(directory)
                  if name.lower().endswith(IMAGE_SUFFIXES))


def jpeg_round_trip(data, quality):
    """Encode and decode an image with the JPEG codec at a quality factor.

    Chroma subsampling is disabled so quality 100 stays close to lossless.
    """
    buf = io.BytesIO()
    _pil_image(data).save(buf, format='JPEG', quality=int(quality),
                          subsampling=0)
    buf.seek(0)
    with Image.open(buf) as img:
        array = np.array(img)
    return from_uint8(array).to(data.dtype)


def codec_versions():
    """Versions of the libraries whose output bytes reports depend on."""
    return {'pillow': PIL.__version__,
            'torch': torch.__version__,
            'numpy': np.__version__}


def make_toy_batch(count=20, seed=0, shape=(3, 16, 16)):
    """Seeded smooth images in [-0.9, 0.9] standing in for aligned faces.

    Each image is a low-resolution random field upsampled bilinearly, plus a
    centred blob, so neighbouring pixels correlate the way photos do.
    """
    channels, height, width = shape
    generator = torch.Generator().manual_seed(int(seed))
    rows = torch.linspace(-1.0, 1.0, height, dtype=torch.float64)
    cols = torch.linspace(-1.0, 1.0, width, dtype=torch.float64)
    radius = rows[:, None] ** 2 + cols[None, :] ** 2
    batch = []
    for _ in range(count):
        coarse = torch.randn(1, channels, 4, 4, generator=generator,
                             dtype=torch.float64)
        field = torch.nn.functional.interpolate(
            coarse, size=(height, width), mode='bilinear',
            align_corners=True).squeeze(0)
        tone = torch.randn(channels, 1, 1, generator=generator,
                           dtype=torch.float64) * 0.3
        blob = torch.exp(-2.0 * radius)[None] * tone
        batch.append(0.9 * torch.tanh(0.6 * field + blob))
    return batch
