"""Worker-count control for the few operations that may shard."""

import os


def worker_count(default: int = 1) -> int:
    """Read the SEGCVAE_THREADS cap; anything unparseable means the default."""
    raw = os.environ.get("SEGCVAE_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return max(1, default)
