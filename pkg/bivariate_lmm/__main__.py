"""Entry point for running bivariate_lmm as a module."""

from bivariate_lmm.cli import main

if __name__ == '__main__':
    main()
