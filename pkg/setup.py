"""Distribution for enrolvoc."""
from setuptools import setup

setup()
