"""Matrix payload that raises when asked to fail; used to inject failures on any agent."""

import random

from taskfabric.runner import Computation


class FlakyMatrix(Computation):
    def compute(self):
        if self.params.get("_sim_fail"):
            raise RuntimeError("injected failure")
        n = int(self.params.get("n", 3))
        rng = random.Random(int(self.params.get("seed", 0)))
        a = [[rng.randint(0, 9) for _ in range(n)] for _ in range(n)]
        b = [[rng.randint(0, 9) for _ in range(n)] for _ in range(n)]
        return {"checksum": sum(a[i][k] * b[k][j] for i in range(n) for j in range(n) for k in range(n))}
