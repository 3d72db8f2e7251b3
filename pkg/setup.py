# for compatibility with legacy builds or versions of tools that don’t support certain packaging standards
from setuptools import setup

setup()
