"""Enrolvoc: enrolment-conditioned emotional vocalisation prediction."""
import sys

try:
  from enrolvoc._version import __version__ as __version__
except ImportError:
  import warnings
  warnings.warn('Failed to load __version__ from setuptools-scm')
  __version__ = '__unknown__'


if sys.version_info < (3, 8):
  raise ImportError('Python < 3.8 is unsupported')


# Target order is fixed; every score vector in the package follows it.
EMOTIONS = (
    'Amusement',
    'Awe',
    'Awkwardness',
    'Distress',
    'Excitement',
    'Fear',
    'Horror',
    'Sadness',
    'Surprise',
    'Triumph',
)
N_EMOTIONS = len(EMOTIONS)

TRAIN = 'train'
DEV = 'dev'
TEST = 'test'
SPLITS = (TRAIN, DEV, TEST)

MANIFEST = 'manifest.tsv'
WAV_DIR = 'wav'
