"""Entry point for ``python -m ccmc_lab``."""

from .runner import cli_run

if __name__ == "__main__":
    cli_run()
