#!/usr/bin/env python3
"""
progq setup script
Backward compatibility setup.py for older pip versions
"""

import os

from setuptools import find_packages, setup


def read_readme():
    readme_path = os.path.join(os.path.dirname(__file__), "README.md")
    try:
        with open(readme_path, encoding="utf-8") as f:
            return f.read()
    except FileNotFoundError:
        return "Supervised progressive quantization for multi-length codes"


def read_requirements():
    req_path = os.path.join(os.path.dirname(__file__), "requirements.txt")
    try:
        with open(req_path, encoding="utf-8") as f:
            return [line.strip() for line in f
                    if line.strip() and not line.startswith("#")]
    except FileNotFoundError:
        return [
            "numpy>=1.22",
            "colorama>=0.4.4",
            "pyyaml>=6.0",
            "psutil>=5.8.0"
        ]


setup(
    name="progq",
    version="1.0.0",
    description="Supervised progressive quantization: training, encoding and search of multi-length codes",
    long_description=read_readme(),
    long_description_content_type="text/markdown",
    license="MIT",
    packages=find_packages(where="src"),
    package_dir={"": "src"},
    python_requires=">=3.8",
    install_requires=read_requirements(),
    extras_require={
        "dev": [
            "pytest>=7.0.0",
            "pytest-cov>=4.0.0",
            "pytest-mock>=3.8.0",
            "ruff>=0.1.0",
            "mypy>=1.0.0",
        ],
    },
    entry_points={
        "console_scripts": [
            "progq=progq.main:main",
        ],
    },
    classifiers=[
        "Development Status :: 4 - Beta",
        "Environment :: Console",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Topic :: Scientific/Engineering :: Information Analysis",
    ],
    keywords="vector-quantization residual-quantization nearest-neighbor-search retrieval",
    zip_safe=False,
)
