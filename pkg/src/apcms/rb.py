"""Greedy reduced-basis training for interior bubble corrections.

Each port mode (and the body-load response) of an archetype gets its own
reduced space: snapshots are full-order interior bubbles at greedily
selected training materials, the error measure is the true relative
energy-norm error, and training stops at a tolerance or a basis-size cap.
Online, a bubble costs one dense solve of basis-count size; the final
expansion back to mesh DoFs is the only operation touching full-order
data.

The coupling tables built here (Gram matrices of every stored column pair
under each operator term, plus reduced load columns) let the system
assembly evaluate condensed-block entries without ever touching the
component mesh online.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .archetype import Archetype
from .errors import TrainingError, ValidationError
from .fem import Field, MaterialParams, assemble_load, factorize_spd

__all__ = [
    "RB_DEFAULT_TOL",
    "RB_DEFAULT_NMAX",
    "RBSpace",
    "RBTrainer",
    "greedy_train",
    "rb_bubble",
    "ReducedCoupling",
    "build_reduced_coupling",
    "format_mu",
]

RB_DEFAULT_TOL = 1e-6
RB_DEFAULT_NMAX = 25

# A target whose truth bubbles carry less than this fraction of the
# driving data's energy is treated as zero (e.g. rigid translation modes,
# whose lifting residual is pure roundoff).
_ZERO_SNAPSHOT_REL = 1e-9


def format_mu(mu: MaterialParams) -> str:
    """Compact one-token material label for decay traces and CSV output."""
    s = f"E={mu.E:.6g};nu={mu.nu:.4g}"
    if any(mu.body_force):
        s += f";b=({mu.body_force[0]:.3g},{mu.body_force[1]:.3g})"
    return s


@dataclass
class RBSpace:
    """Trained reduced space for one bubble target.

    ``target`` is ``("mode", port, k)`` or ``("force",)``.  ``basis`` has
    orthonormal columns over the archetype's interior DoFs.  ``op_terms``
    holds the reduced operator per affine term; the right-hand side comes
    from ``rhs_terms`` (mode targets) or from the reduced load columns
    (force targets).  ``decay`` records ``(basis_size, worst_mu, error)``
    per greedy iteration.
    """

    target: tuple
    basis: np.ndarray
    op_terms: np.ndarray
    rhs_terms: np.ndarray | None
    body_cols: np.ndarray | None
    trac_cols: dict[str, np.ndarray] | None
    decay: tuple[tuple[int, str, float], ...]
    tol: float
    converged: bool

    @property
    def size(self) -> int:
        return self.basis.shape[1]

    def coefficients(self, mu: MaterialParams) -> np.ndarray:
        """Solve the reduced system at ``mu``; touches no full-order data."""
        thetas = mu.thetas()
        A = thetas[0] * self.op_terms[0] + thetas[1] * self.op_terms[1]
        if self.target[0] == "mode":
            rhs = thetas[0] * self.rhs_terms[0] + thetas[1] * self.rhs_terms[1]
        else:
            rhs = self.body_cols @ np.asarray(mu.body_force)
            for tag, traction in mu.tractions.items():
                if tag not in self.trac_cols:
                    raise ValidationError(f"no reduced load column for tag {tag!r}")
                rhs = rhs + self.trac_cols[tag] @ np.asarray(traction)
        return np.linalg.solve(A, rhs)


def rb_bubble(archetype: Archetype, space: RBSpace, mu: MaterialParams) -> Field:
    """Reduced bubble at ``mu``, expanded to a full mesh field."""
    u = space.coefficients(mu)
    out = np.zeros(2 * archetype.mesh.num_nodes)
    out[archetype.interior] = space.basis @ u
    return out


class RBTrainer:
    """Shares truth factorizations across every target of one archetype."""

    def __init__(self, archetype: Archetype):
        self.archetype = archetype
        I = archetype.interior
        self._terms_II = tuple(
            K[np.ix_(I, I)].tocsr() for K in archetype.operator.terms
        )
        self._factors: dict[tuple[float, float], object] = {}

    def _factor(self, mu: MaterialParams):
        key = (mu.E, mu.nu)
        if key not in self._factors:
            thetas = mu.thetas()
            A_II = thetas[0] * self._terms_II[0] + thetas[1] * self._terms_II[1]
            self._factors[key] = factorize_spd(A_II.tocsr())
        return self._factors[key]

    def _rhs(self, target: tuple, mu: MaterialParams) -> tuple[np.ndarray, float, float]:
        """Interior right-hand side at ``mu`` plus two data scales.

        The second return is the energy of the driving data (the lifted
        mode, or the load); the third is a roundoff floor for it — rigid
        modes have a data energy that is itself pure cancellation noise,
        and must be told apart from genuinely small energies.
        """
        arch = self.archetype
        I = arch.interior
        thetas = mu.thetas()
        if target[0] == "mode":
            _, port, k = target
            psi = arch.extensions[(port, k)]
            rhs = np.zeros(len(I))
            ref2 = 0.0
            diag = 0.0
            for q, K in enumerate(arch.operator.terms):
                img = K @ psi
                rhs -= thetas[q] * img[I]
                ref2 += thetas[q] * (psi @ img)
                diag += thetas[q] * K.diagonal().max()
            floor = np.sqrt(diag) * np.linalg.norm(psi)
            return rhs, np.sqrt(max(ref2, 0.0)), floor
        rhs = assemble_load(arch.mesh, mu)[I]
        norm = np.linalg.norm(rhs)
        return rhs, norm, norm

    def truth(self, target: tuple, mu: MaterialParams) -> np.ndarray:
        """Full-order interior bubble at ``mu``."""
        rhs, _, _ = self._rhs(target, mu)
        return self._factor(mu).solve(rhs)

    def train(
        self,
        target: tuple,
        train_set: list[MaterialParams],
        tol: float = RB_DEFAULT_TOL,
        n_max: int = RB_DEFAULT_NMAX,
    ) -> RBSpace:
        if not train_set:
            raise TrainingError("empty training set")
        arch = self.archetype
        n = len(arch.interior)
        M = len(train_set)
        thetas = np.array([mu.thetas() for mu in train_set])  # (M, 2)

        rhs_data = [self._rhs(target, mu) for mu in train_set]
        F = np.column_stack([r[0] for r in rhs_data])  # right-hand sides
        refs = np.array([r[1] for r in rhs_data])  # data energy scales
        floors = np.array([r[2] for r in rhs_data])  # roundoff floors
        B = np.column_stack(
            [self._factor(mu).solve(F[:, j]) for j, mu in enumerate(train_set)]
        )
        W = [K @ B for K in self._terms_II]  # operator images of truths
        bnorm2 = np.maximum(
            thetas[:, 0] * np.einsum("ij,ij->j", B, W[0])
            + thetas[:, 1] * np.einsum("ij,ij->j", B, W[1]),
            0.0,
        )
        bnorm = np.sqrt(bnorm2)
        scale = bnorm.max()

        degenerate_data = refs.max() <= 1e-7 * floors.max()  # rigid-mode lift
        if degenerate_data or scale <= _ZERO_SNAPSHOT_REL * refs.max():
            # Every truth is (numerically) zero — a rigid-mode lift, an
            # already operator-harmonic lift, or a zero load.  Keep a
            # one-column space so downstream shapes stay regular; its
            # coefficients solve to zero.
            Z = np.zeros((n, 1))
            Z[0, 0] = 1.0
            decay = ((1, format_mu(train_set[0]), 0.0),)
            return self._finalize(target, Z, decay, tol, converged=True)

        start = 0 if bnorm[0] > 1e-12 * scale else int(np.argmax(bnorm))
        z = B[:, start] / np.linalg.norm(B[:, start])
        Z = z[:, None]
        # Reduced quantities grown incrementally with the basis.
        KZ = [K @ Z for K in self._terms_II]  # (n, N) per term
        Ared = [Z.T @ KZ[q] for q in range(2)]  # (N, N) per term
        P = [KZ[q].T @ B for q in range(2)]  # rows: z_i' K_q b_j
        Pf = Z.T @ F  # reduced right-hand sides per mu

        decay: list[tuple[int, str, float]] = []
        converged = False
        while True:
            N = Z.shape[1]
            errors = np.zeros(M)
            coeffs = np.zeros((N, M))
            for j in range(M):
                t0, t1 = thetas[j]
                Aj = t0 * Ared[0] + t1 * Ared[1]
                u = np.linalg.solve(Aj, Pf[:, j])
                coeffs[:, j] = u
                if bnorm[j] <= 1e-12 * scale:
                    continue
                pj = t0 * P[0][:, j] + t1 * P[1][:, j]
                e2 = bnorm2[j] - 2.0 * (u @ pj) + u @ (Aj @ u)
                errors[j] = np.sqrt(max(e2, 0.0)) / bnorm[j]
            worst = int(np.argmax(errors))
            err = float(errors[worst])
            decay.append((N, format_mu(train_set[worst]), err))
            if err <= tol:
                converged = True
                break
            if N >= n_max:
                warnings.warn(
                    f"greedy training for {target} stopped at basis size {N} "
                    f"with error {err:.3e} above tolerance {tol:.3e}",
                    stacklevel=2,
                )
                break
            e_vec = B[:, worst] - Z @ coeffs[:, worst]
            for _ in range(2):  # re-orthogonalize for stability
                e_vec -= Z @ (Z.T @ e_vec)
            norm = np.linalg.norm(e_vec)
            if norm <= 1e-12 * np.linalg.norm(B[:, worst]):
                warnings.warn(
                    f"greedy training for {target} saturated at basis size {N} "
                    f"with error {err:.3e} above tolerance {tol:.3e}",
                    stacklevel=2,
                )
                break
            z = e_vec / norm
            Kz = [K @ z for K in self._terms_II]
            for q in range(2):
                cross = Z.T @ Kz[q]
                corner = np.array([[z @ Kz[q]]])
                Ared[q] = np.block([[Ared[q], cross[:, None]], [cross[None, :], corner]])
                P[q] = np.vstack([P[q], Kz[q] @ B])
            Pf = np.vstack([Pf, z @ F])
            Z = np.column_stack([Z, z])

        return self._finalize(target, Z, tuple(decay), tol, converged)

    def _finalize(
        self, target: tuple, Z: np.ndarray, decay, tol: float, converged: bool
    ) -> RBSpace:
        arch = self.archetype
        I = arch.interior
        op_terms = np.stack([Z.T @ (K @ Z) for K in self._terms_II])
        rhs_terms = None
        body_cols = None
        trac_cols = None
        if target[0] == "mode":
            _, port, k = target
            psi = arch.extensions[(port, k)]
            rhs_terms = np.stack(
                [-(Z.T @ (K @ psi)[I]) for K in arch.operator.terms]
            )
        else:
            mass = arch.body_mass
            mx = np.zeros(2 * arch.mesh.num_nodes)
            my = np.zeros(2 * arch.mesh.num_nodes)
            mx[0::2] = mass
            my[1::2] = mass
            body_cols = np.column_stack([Z.T @ mx[I], Z.T @ my[I]])
            trac_cols = {}
            for tag, w in arch.edge_mass.items():
                wx = np.zeros(2 * arch.mesh.num_nodes)
                wy = np.zeros(2 * arch.mesh.num_nodes)
                wx[0::2] = w
                wy[1::2] = w
                trac_cols[tag] = np.column_stack([Z.T @ wx[I], Z.T @ wy[I]])
        return RBSpace(
            target=target,
            basis=Z,
            op_terms=op_terms,
            rhs_terms=rhs_terms,
            body_cols=body_cols,
            trac_cols=trac_cols,
            decay=tuple(decay),
            tol=tol,
            converged=converged,
        )


def greedy_train(
    archetype: Archetype,
    target: tuple,
    train_set: list[MaterialParams],
    tol: float = RB_DEFAULT_TOL,
    n_max: int = RB_DEFAULT_NMAX,
) -> RBSpace:
    """Train one reduced space (convenience wrapper over :class:`RBTrainer`)."""
    return RBTrainer(archetype).train(target, train_set, tol, n_max)


@dataclass
class ReducedCoupling:
    """Offline contraction tables for condensed-system assembly.

    ``columns`` stacks, as full mesh fields, every harmonic extension,
    every reduced-basis column of every mode bubble, and the force-bubble
    basis.  ``gram`` holds their pairwise energy products per operator
    term, and the load tables hold their products with the body-mass and
    edge-mass vectors.  Any condensed entry at any material is a small
    contraction of these arrays.
    """

    columns: np.ndarray  # (2 * num_nodes, n_off), for field reconstruction
    gram: np.ndarray  # (2, n_off, n_off)
    body_loads: np.ndarray  # (n_off, 2)
    trac_loads: dict[str, np.ndarray]
    ext_col: dict[tuple[str, int], int]
    rb_cols: dict[tuple[str, int], tuple[int, int]]
    force_cols: tuple[int, int]


def build_reduced_coupling(
    archetype: Archetype,
    mode_spaces: dict[tuple[str, int], RBSpace],
    force_space: RBSpace,
) -> ReducedCoupling:
    """Contract every stored column pair against each operator term."""
    arch = archetype
    n2 = 2 * arch.mesh.num_nodes
    I = arch.interior
    cols: list[np.ndarray] = []
    ext_col: dict[tuple[str, int], int] = {}
    rb_cols: dict[tuple[str, int], tuple[int, int]] = {}

    for port in arch.port_names:
        for k in range(arch.mode_count(port)):
            ext_col[(port, k)] = len(cols)
            cols.append(arch.extensions[(port, k)])
    for port in arch.port_names:
        for k in range(arch.mode_count(port)):
            space = mode_spaces[(port, k)]
            start = len(cols)
            for j in range(space.size):
                full = np.zeros(n2)
                full[I] = space.basis[:, j]
                cols.append(full)
            rb_cols[(port, k)] = (start, len(cols))
    start = len(cols)
    for j in range(force_space.size):
        full = np.zeros(n2)
        full[I] = force_space.basis[:, j]
        cols.append(full)
    force_cols = (start, len(cols))

    W = np.column_stack(cols)
    gram = np.stack([W.T @ (K @ W) for K in arch.operator.terms])

    mass = arch.body_mass
    mx = np.zeros(n2)
    my = np.zeros(n2)
    mx[0::2] = mass
    my[1::2] = mass
    body_loads = np.column_stack([W.T @ mx, W.T @ my])
    trac_loads = {}
    for tag, w in arch.edge_mass.items():
        wx = np.zeros(n2)
        wy = np.zeros(n2)
        wx[0::2] = w
        wy[1::2] = w
        trac_loads[tag] = np.column_stack([W.T @ wx, W.T @ wy])

    return ReducedCoupling(
        columns=W,
        gram=gram,
        body_loads=body_loads,
        trac_loads=trac_loads,
        ext_col=ext_col,
        rb_cols=rb_cols,
        force_cols=force_cols,
    )
