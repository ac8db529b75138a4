"""Build a small composite problem by hand, run RBCN on it and solve one cubic subproblem."""
import numpy as np

from blockcubic.blocks import BlockPartition, SamplingSpec
from blockcubic.cubsolve import CubicSubproblem, solve
from blockcubic.losses import cubed_abs
from blockcubic.problem import BlockLoss, CompositeProblem, QuadraticG
from blockcubic.rbcn import AdaptiveH, RbcnConfig, rbcn_run


def main():
    rng = np.random.default_rng(0)
    N = 12
    U = rng.standard_normal((N, N))
    M = U.T @ U / N + 0.1 * np.eye(N)
    problem = CompositeProblem(
        BlockPartition.uniform(N),
        g=QuadraticG(M, rng.standard_normal(N)),
        phi=[BlockLoss(cubed_abs(c=0.5)) for _ in range(N)],
    )
    cfg = RbcnConfig(sampling=SamplingSpec(tau=3, seed=1), h_strategy=AdaptiveH(), max_iterations=2000)
    trace = rbcn_run(problem, cfg)
    f = trace.objectives()
    print(f"RBCN: F went from {f[0]:.6f} to {f[-1]:.10f} in {trace.k[-1]} iterations ({trace.status})")

    sol = solve(CubicSubproblem(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([1.0, 0.2]), H=2.0))
    print(f"cubic subproblem: y = {sol.y}, model value = {sol.model_value:.6f}")


if __name__ == "__main__":
    main()
