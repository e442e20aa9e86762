"""Allow running as ``python -m multigauss``."""

from multigauss.main import start

if __name__ == "__main__":
    start()
