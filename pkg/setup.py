#!/usr/bin/env python3
"""
Setup script for trojanlab.
"""

from setuptools import setup, find_packages
import os
import re

# Read the version from __init__.py
with open(os.path.join('src', 'trojanlab', '__init__.py'), 'r', encoding='utf-8') as f:
    version_match = re.search(r"^__version__ = ['\"]([^'\"]*)['\"]", f.read(), re.M)
    if version_match:
        version = version_match.group(1)
    else:
        raise RuntimeError("Unable to find version string in __init__.py")

# Read the long description from README.md
with open('docs/README.md', 'r', encoding='utf-8') as f:
    long_description = f.read()

setup(
    name='trojanlab',
    version=version,
    description='Backdoor attacks and their evaluation on return-conditioned trajectory models',
    long_description=long_description,
    long_description_content_type='text/markdown',
    author='trojanlab developers',
    author_email='example@example.com',
    package_dir={'': 'src'},
    packages=find_packages(where='src'),
    package_data={'trojanlab': ['config_template.json']},
    python_requires='>=3.8',
    install_requires=[
        'numpy>=1.20',
        'matplotlib>=3.3',
    ],
    entry_points={
        'console_scripts': [
            'trojanlab=trojanlab.cli:main',
        ],
    },
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
    ],
    keywords='reinforcement learning, offline rl, backdoor, trojan, decision transformer',
)
