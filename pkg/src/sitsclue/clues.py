"""Class-wise positive/negative prototype banks ("clues").

Reliable pixels of a class are assigned to its prototypes with balanced
entropic optimal transport (Sinkhorn-Knopp), the prototypes follow the
assigned embeddings by momentum, and a contrastive loss pulls each reliable
foreground embedding to its closest positive prototype.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericError

POLARITIES = ("positive", "negative")


@dataclass
class AssignmentMatrix:
    C: torch.Tensor  # [Np, Nk]
    u: torch.Tensor  # [Np] row marginal
    r: torch.Tensor  # [Nk] column marginal
    residual: float
    iterations: int

    def marginal_residual(self):
        return max(
            (self.C.sum(1) - self.u).abs().max().item(),
            (self.C.sum(0) - self.r).abs().max().item(),
        )


def sinkhorn_assign(prototypes, embeddings, eta=0.05, iters=50, tol=1e-4, method="newton"):
    """Entropic OT plan between prototypes [Np, d] and embeddings [Nk, d].

    Maximizes <C, P Z^T> + eta * H(C) over nonnegative C with row sums 1/Np
    and column sums 1/Nk. The plan is always the diagonal scaling
    ``exp(f_i + S_ij / eta + g_j)`` with the column scaling g exact; the row
    scaling f is updated either by the classic Sinkhorn half-step
    (``method='sinkhorn'``) or by a damped Newton step on the concave reduced
    dual (``method='newton'``, the default: Np is tiny, so this converges in a
    handful of iterations where plain scaling can need hundreds at small eta).
    Both inputs are L2-normalized first. Stops once the marginal residual is
    <= tol. Returns None when there are no embeddings (caller skips the class).
    """
    if eta <= 0:
        raise ConfigError(f"eta must be positive, got {eta}")
    if method not in ("newton", "sinkhorn"):
        raise ConfigError(f"unknown Sinkhorn method {method!r}")
    Nk = embeddings.shape[0]
    if Nk == 0:
        return None
    Np = prototypes.shape[0]
    P = F.normalize(prototypes.detach().double(), dim=-1)
    Z = F.normalize(embeddings.detach().double(), dim=-1)
    S = P @ Z.T
    if not torch.isfinite(S).all():
        raise NumericError("non-finite prototype/embedding similarities")
    logK = S / eta
    u = torch.full((Np,), 1.0 / Np, dtype=S.dtype)
    r = torch.full((Nk,), 1.0 / Nk, dtype=S.dtype)
    log_u, log_r = u.log(), r.log()

    def plan(f):
        g = log_r - torch.logsumexp(logK + f[:, None], dim=0)
        return torch.exp(logK + f[:, None] + g[None, :]), g

    def dual(f):
        return (f * u).sum() - (r * torch.logsumexp(logK + f[:, None], dim=0)).sum()

    f = torch.zeros(Np, dtype=S.dtype)
    C, g = plan(f)
    # columns are exact after every g step; rows carry the residual
    residual = (C.sum(1) - u).abs().max().item()
    it = 0
    while residual > tol and it < iters:
        it += 1
        if method == "sinkhorn" or Np == 1:
            f = log_u - torch.logsumexp(logK + g[None, :], dim=1)
        else:
            f = _newton_row_step(f, C, u, r, dual)
        C, g = plan(f)
        residual = (C.sum(1) - u).abs().max().item()
    if not torch.isfinite(C).all():
        raise NumericError("Sinkhorn plan became non-finite")
    residual = max(residual, (C.sum(0) - r).abs().max().item())
    return AssignmentMatrix(C.to(embeddings.dtype), u.to(embeddings.dtype), r.to(embeddings.dtype), residual, it)


MAX_NEWTON_STEP = 10.0


def _newton_row_step(f, C, u, r, dual):
    """One damped Newton ascent step on the reduced dual in f (gauge f_0 fixed)."""
    R = C.sum(1)
    grad = u - R
    H = torch.diag(R) - (C / r) @ C.T  # negative Hessian of the dual, PSD with null space 1
    A = H[1:, 1:]
    A = A + 1e-10 * (A.diagonal().max() + 1e-300) * torch.eye(A.shape[0], dtype=A.dtype)
    d = torch.cat([torch.zeros(1, dtype=f.dtype), torch.linalg.solve(A, grad[1:])])
    # near-empty rows make H almost singular; cap the step in log-scaling units
    m = d.abs().max().item()
    if m > MAX_NEWTON_STEP:
        d = d * (MAX_NEWTON_STEP / m)
    base, slope = dual(f), (grad * d).sum()
    t = 1.0
    while t > 1e-12:
        cand = f + t * d
        if dual(cand) >= base + 1e-4 * t * slope:
            return cand
        t *= 0.5
    return f + t * d


def momentum_step(p, weighted_mean, alpha):
    """alpha * p + (1 - alpha) * weighted_mean, before renormalization."""
    return alpha * p + (1.0 - alpha) * weighted_mean


class PrototypeBank:
    """Positive and negative prototypes per class, stored unit-norm.

    Prototypes never receive gradients; they change only through
    :meth:`update`.
    """

    def __init__(self, K, Np=2, d=128, alpha=0.999, tau=0.1, dtype=torch.float32):
        if Np < 1:
            raise ConfigError("Np must be >= 1")
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
        self.K, self.Np, self.d = K, Np, d
        self.alpha, self.tau = alpha, tau
        self.positive = torch.zeros(K, Np, d, dtype=dtype)
        self.negative = torch.zeros(K, Np, d, dtype=dtype)
        self.initialized = {pol: torch.zeros(K, Np, dtype=torch.bool) for pol in POLARITIES}

    def protos(self, polarity):
        return self.positive if polarity == "positive" else self.negative

    def is_ready(self, k):
        return bool(self.initialized["positive"][k].any())

    def update(self, k, polarity, C, Z):
        """Momentum-update class ``k`` prototypes from assignment C [Np, Nk] and embeddings Z [Nk, d].

        A prototype seen for the first time is set to its weighted mean. A
        prototype with an all-zero assignment row is left unchanged.
        """
        P = self.protos(polarity)
        flags = self.initialized[polarity]
        C = C.detach().to(P.dtype)
        Z = Z.detach().to(P.dtype)
        mass = C.sum(dim=1)
        for n in range(self.Np):
            if mass[n] <= 0:
                continue
            mean = (C[n] @ Z) / mass[n]
            alpha = self.alpha if flags[k, n] else 0.0
            p = momentum_step(P[k, n], mean, alpha)
            norm = p.norm()
            if norm <= 0 or not torch.isfinite(norm):
                continue
            P[k, n] = p / norm
            flags[k, n] = True

    def all_initialized(self):
        """[M, d] matrix of every initialized prototype plus (class, polarity, index) tags."""
        rows, tags = [], []
        for pi, pol in enumerate(POLARITIES):
            P, flags = self.protos(pol), self.initialized[pol]
            for k in range(self.K):
                for n in range(self.Np):
                    if flags[k, n]:
                        rows.append(P[k, n])
                        tags.append((k, pi, n))
        if not rows:
            return torch.zeros(0, self.d, dtype=self.positive.dtype), []
        return torch.stack(rows), tags

    def state(self):
        return {
            "positive": self.positive.clone(),
            "negative": self.negative.clone(),
            "init_positive": self.initialized["positive"].to(torch.uint8),
            "init_negative": self.initialized["negative"].to(torch.uint8),
        }

    @classmethod
    def from_state(cls, tensors, alpha, tau):
        pos = torch.as_tensor(tensors["positive"])
        K, Np, d = pos.shape
        bank = cls(K, Np, d, alpha, tau, dtype=pos.dtype)
        bank.positive = pos.clone()
        bank.negative = torch.as_tensor(tensors["negative"]).clone()
        bank.initialized["positive"] = torch.as_tensor(tensors["init_positive"]).bool()
        bank.initialized["negative"] = torch.as_tensor(tensors["init_negative"]).bool()
        return bank


def similarity(z, p, tau=0.1):
    """Cosine similarity divided by the temperature."""
    z = torch.as_tensor(z, dtype=torch.float64)
    p = torch.as_tensor(p, dtype=torch.float64)
    nz, np_ = z.norm(), p.norm()
    if nz == 0 or np_ == 0:
        raise NumericError("similarity of a zero vector is undefined")
    return float((z @ p) / (nz * np_) / tau)


def similarity_matrix(Z, P, tau):
    """Scaled cosine similarities [n, M] between rows of Z [n, d] and P [M, d]."""
    return F.normalize(Z, dim=-1) @ F.normalize(P, dim=-1).T / tau


def cluster_batch(bank, z_t_dense, filtered, image_labels, eta=0.05, iters=50, tol=1e-4):
    """Sinkhorn-assign and momentum-update every class present in the batch.

    Positive clustering uses pixels whose filtered map is 1 for class k, the
    negative set those where it is 0. Returns {(k, polarity): residual};
    classes with no such pixels are skipped.
    """
    labels = torch.as_tensor(image_labels)
    present = (labels > 0).reshape(-1, bank.K).any(dim=0)
    z = z_t_dense.detach()
    residuals = {}
    for k in range(bank.K):
        if not present[k]:
            continue
        zk = z[..., k, :].reshape(-1, z.shape[-1])
        fk = filtered[..., k].reshape(-1)
        for pol, value in (("positive", 1), ("negative", 0)):
            Zsel = F.normalize(zk[fk == value], dim=-1)
            P = bank.protos(pol)[k]
            if not bank.initialized[pol][k].all():
                # untouched prototypes: spread over distinct embeddings for the first assignment
                P = _seed_prototypes(P, bank.initialized[pol][k], Zsel)
            A = sinkhorn_assign(P, Zsel, eta, iters, tol)
            if A is None:
                continue
            bank.update(k, pol, A.C, Zsel)
            residuals[(k, pol)] = A.residual
    return residuals


def _seed_prototypes(P, flags, Z):
    """Fill uninitialized rows with evenly strided embeddings so Sinkhorn can separate them."""
    P = P.clone()
    if Z.shape[0] == 0:
        return P
    missing = (~flags).nonzero().flatten().tolist()
    idx = torch.linspace(0, Z.shape[0] - 1, steps=len(missing)).round().long()
    for n, i in zip(missing, idx.tolist()):
        P[n] = Z[i]
    return P


def cbl_loss(z_t_dense, filtered, bank, image_labels, tau=0.1, include_positive_in_denominator=False):
    """Clue-based contrastive loss; returns (loss, skipped).

    For each reliable foreground embedding of class k (filtered == 1) the
    assigned clue is its most similar class-k positive prototype. The term is
    ``log sum_{p in P-} exp S(z, p) - S(z, p+)`` where P- is every initialized
    prototype, positive or negative, of any class, except p+.
    Averaged over participating pixels; 0 and skipped=True when none.
    """
    protos, tags = bank.all_initialized()
    protos = protos.detach().to(z_t_dense.dtype)
    present = (torch.as_tensor(image_labels) > 0).unsqueeze(-2).expand(filtered.shape)
    total = z_t_dense.new_zeros(())
    count = 0
    if protos.shape[0] < 2 and not include_positive_in_denominator:
        return total, True
    tag_class = torch.tensor([t[0] for t in tags])
    tag_pos = torch.tensor([t[1] == 0 for t in tags])
    for k in range(bank.K):
        cand = (tag_class == k) & tag_pos
        if not cand.any():
            continue
        # absent classes are IGNORE in the filtered map already; the label gate is explicit anyway
        sel = (filtered[..., k] == 1) & present[..., k]
        z = z_t_dense[..., k, :][sel]
        if z.shape[0] == 0:
            continue
        S = similarity_matrix(z, protos, tau)  # [n, M]
        cand_idx = cand.nonzero().flatten()
        assigned = cand_idx[S[:, cand_idx].argmax(dim=1)]
        pos_sim = S.gather(1, assigned[:, None]).squeeze(1)
        if include_positive_in_denominator:
            denom = torch.logsumexp(S, dim=1)
        else:
            keep = torch.ones_like(S, dtype=torch.bool)
            keep[torch.arange(S.shape[0]), assigned] = False
            denom = torch.logsumexp(S.masked_fill(~keep, float("-inf")), dim=1)
        total = total + (denom - pos_sim).sum()
        count += z.shape[0]
    if count == 0:
        return total, True
    return total / count, False
