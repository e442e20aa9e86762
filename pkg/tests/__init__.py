"""Top-level package for multigauss tests."""
