#!/usr/bin/env python3
"""
ProUD laboratory entry script
Checks the numerical stack, then hands the arguments to the CLI:

    python run_proud.py matrix --config default.cfg --out runs/a
    python run_proud.py report --in runs/a
"""

import sys


def check_requirements():
    """Check if required packages are installed"""
    try:
        import numpy
        import pandas
        import pydantic
        import pydantic_settings
        import scipy
        import dotenv
        return True
    except ImportError as e:
        print(f"❌ Missing required package: {e}")
        print("📦 Please install requirements: pip install -r requirements.txt")
        return False


def main():
    if not check_requirements():
        sys.exit(1)

    from proud.main import cli

    try:
        sys.exit(cli(sys.argv[1:]))
    except KeyboardInterrupt:
        print("\n👋 Interrupted")
        sys.exit(2)


if __name__ == "__main__":
    main()
