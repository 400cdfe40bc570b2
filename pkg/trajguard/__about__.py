"""trajguard package attributes and metadata."""

__all__ = (
    '__title__',
    '__summary__',
    '__author__',
    '__email__',
    '__version__',
    '__keywords__',
    '__license__',
    '__url__',
    '__generator__',
)

__title__ = 'trajguard'
__summary__ = ('Training-free protection of images against generative '
               'manipulation by guiding a DDIM denoising trajectory')
__author__ = 'trajguard developers'
__email__ = 'trajguard@users.noreply.github.com'
__version__ = '0.3.0'
__keywords__ = ['adversarial', 'diffusion', 'ddim', 'deepfake', 'nes']
__license__ = 'Apache License, Version 2.0'
__url__ = 'https://github.com/trajguard/trajguard'
__generator__ = {
    'name': 'trajguard',
    'version': __version__,
    'url': __url__,
}
