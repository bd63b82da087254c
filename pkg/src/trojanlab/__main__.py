#!/usr/bin/env python3
"""
Main entry point for trojanlab.

This module allows running the tool as a module:
    python -m trojanlab [arguments]
"""

import sys
from trojanlab.cli import main

if __name__ == '__main__':
    sys.exit(main())
