"""Operation counts for neighborhood versus global self-attention."""


def complexity_estimate(kind: str, n: int, k: int, c: int) -> int:
    """Exact value of the attention cost formulas.

    ``npa``:    N C^2 + 2 N k C^2 + 8 N k C + N k
    ``global``: 3 N C^2 + 2 N^2 C + N^2  (``k`` unused)
    """
    for name, v in (("n", n), ("k", k), ("c", c)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v}")
    n, k, c = int(n), int(k), int(c)
    if kind == "npa":
        return n * c * c + 2 * n * k * c * c + 8 * n * k * c + n * k
    if kind == "global":
        return 3 * n * c * c + 2 * n * n * c + n * n
    raise ValueError(f"unknown attention kind {kind!r}")
