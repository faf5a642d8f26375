"""Reference worker for the external-detector protocol: the score is the sum of entries.

Run as ``python -m condattr.echo_worker``. Useful for exercising the subprocess
plumbing, since its scores are trivially checkable.
"""

from __future__ import annotations

import numpy as np

from .detector import serve


def main() -> None:
    serve(lambda X: np.asarray(X).sum(axis=1), name="echo-sum", version="1")


if __name__ == "__main__":
    main()
