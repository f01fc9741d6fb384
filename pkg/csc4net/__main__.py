"""
csc4net entry point
Allows running the command line with: python -m csc4net
"""

from .cli import main

if __name__ == "__main__":
    main()
