"""Seeded dense integer matrix multiplication, reported as a scalar checksum."""

from __future__ import annotations

import random

from taskfabric.runner import Computation


def seeded_matrices(n: int, seed: int) -> tuple[list[list[int]], list[list[int]]]:
    rng = random.Random(seed)
    a = [[rng.randint(0, 9) for _ in range(n)] for _ in range(n)]
    b = [[rng.randint(0, 9) for _ in range(n)] for _ in range(n)]
    return a, b


def matmul(a: list[list[int]], b: list[list[int]]) -> list[list[int]]:
    cols = list(zip(*b))
    return [[sum(x * y for x, y in zip(row, col)) for col in cols] for row in a]


class MatrixComputation(Computation):
    def compute(self):
        n = int(self.params.get("n", 3))
        seed = int(self.params.get("seed", 0))
        a, b = seeded_matrices(n, seed)
        self.post_status("MULTIPLYING")
        c = matmul(a, b)
        return {
            "n": n,
            "seed": seed,
            "checksum": sum(sum(row) for row in c),
            "trace": sum(c[i][i] for i in range(n)),
        }
