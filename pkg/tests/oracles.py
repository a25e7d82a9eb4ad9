"""Independent reference computations used by the tests."""
import cvxpy as cp
import numpy as np


def entropic_ot_oracle(S, eta):
    """argmax_C <C, S> + eta * H(C) on the balanced transportation polytope, via a conic solver."""
    Np, Nk = S.shape
    C = cp.Variable((Np, Nk), nonneg=True)
    objective = cp.Maximize(cp.sum(cp.multiply(C, S)) + eta * cp.sum(cp.entr(C)))
    constraints = [cp.sum(C, axis=1) == 1.0 / Np, cp.sum(C, axis=0) == 1.0 / Nk]
    cp.Problem(objective, constraints).solve(solver=cp.CLARABEL)
    return np.asarray(C.value)
