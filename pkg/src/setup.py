#!/usr/bin/env python
"""Library setup script."""

import os
from setuptools import find_packages, setup

setup(
    name=os.environ.get("PKG_NAME", "udma"),
    version=os.environ.get("PKG_VERSION", "0.1.0"),
    description="Label-free LiDAR segmentation by image to range image domain adaptation",
    author="udma developers",
    packages=find_packages(exclude=["contrib", "docs", "test"]),
    # Please specify your dependencies in conda_recipe/meta.yaml instead.
    install_requires=[],
    entry_points={
        "console_scripts": ["udma=udma.cli:main"],
    },
)
