"""P1 plane-strain elasticity: affine operators, loads, solves, stresses.

The bilinear form is assembled once per mesh as two parameter-independent
stiffness terms, one for each material coefficient of isotropic plane
strain:

    theta_lambda(E, nu) = E nu / ((1 + nu)(1 - 2 nu))      (first Lame)
    theta_shear(E, nu)  = E / (2 (1 + nu))                  (shear modulus)

so A(mu) = theta_lambda * K_lambda + theta_shear * K_shear exactly.  All
reduced-order machinery in this package leans on that two-term split.

Displacement fields are flat float64 arrays of length 2 * num_nodes with the
interleaved layout (u_x0, u_y0, u_x1, u_y1, ...).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NotSPDError, SingularMatrixError, SolverError, ValidationError
from .mesh import Mesh

# Field = displacement DoF vector, interleaved (x0, y0, x1, y1, ...).
Field = np.ndarray

# Constitutive split: D(mu) = theta_lambda * D_LAMBDA + theta_shear * D_SHEAR
# in Voigt order (eps_xx, eps_yy, gamma_xy).
D_LAMBDA = np.array([[1.0, 1.0, 0.0],
                     [1.0, 1.0, 0.0],
                     [0.0, 0.0, 0.0]])
D_SHEAR = np.array([[2.0, 0.0, 0.0],
                    [0.0, 2.0, 0.0],
                    [0.0, 0.0, 1.0]])

SOLVE_REL_RESIDUAL = 1e-10


def theta_coeffs(E: float, nu: float) -> tuple[float, float]:
    """Affine coefficients (theta_lambda, theta_shear) of plane strain."""
    return (E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)),
            E / (2.0 * (1.0 + nu)))


@dataclass(frozen=True)
class MaterialParams:
    """Isotropic material and loading for one component instance.

    ``body_force`` is the final volumetric force density (for self-weight,
    density times gravity, folded in by the scenario file).  ``tractions``
    maps boundary tag to a constant traction vector.
    """

    E: float
    nu: float
    body_force: tuple[float, float] = (0.0, 0.0)
    tractions: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not (self.E > 0.0):
            raise ValidationError(f"E must be positive, got {self.E}")
        if not (0.0 <= self.nu < 0.5):
            raise ValidationError(f"nu must lie in [0, 0.5), got {self.nu}")
        object.__setattr__(self, "body_force",
                           (float(self.body_force[0]), float(self.body_force[1])))
        object.__setattr__(self, "tractions",
                           {str(k): (float(v[0]), float(v[1]))
                            for k, v in self.tractions.items()})

    def thetas(self) -> tuple[float, float]:
        return theta_coeffs(self.E, self.nu)


def element_geometry(mesh: Mesh) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Areas, strain-displacement matrices and DoF maps for all triangles.

    Returns
    -------
    areas : (T,) float64
    B : (T, 3, 6) float64
        Voigt strain (eps_xx, eps_yy, gamma_xy) = B @ u_e with the element
        vector ordered (ux0, uy0, ux1, uy1, ux2, uy2).  Constant per element,
        so one-point quadrature integrates the stiffness exactly.
    dofs : (T, 6) int64
    """
    tri = mesh.triangles
    p = mesh.nodes[tri]                            # (T, 3, 2)
    x, y = p[..., 0], p[..., 1]
    areas = 0.5 * ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0])
                   - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
    inv2A = 1.0 / (2.0 * areas)
    T = tri.shape[0]
    B = np.zeros((T, 3, 6))
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        bi = (y[:, j] - y[:, k]) * inv2A
        ci = (x[:, k] - x[:, j]) * inv2A
        B[:, 0, 2 * i] = bi
        B[:, 1, 2 * i + 1] = ci
        B[:, 2, 2 * i] = ci
        B[:, 2, 2 * i + 1] = bi
    dofs = np.empty((T, 6), dtype=np.int64)
    dofs[:, 0::2] = 2 * tri
    dofs[:, 1::2] = 2 * tri + 1
    return areas, B, dofs


def _assemble_term(mesh: Mesh, D: np.ndarray,
                   geometry: tuple | None = None) -> sp.csr_array:
    areas, B, dofs = geometry if geometry is not None else element_geometry(mesh)
    Ke = np.einsum("tpi,pq,tqj,t->tij", B, D, B, areas, optimize=True)
    rows = np.repeat(dofs, 6, axis=1).ravel()
    cols = np.tile(dofs, (1, 6)).ravel()
    n = mesh.num_dofs
    K = sp.coo_array((Ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    # symmetrize away roundoff so downstream symmetry checks are exact enough
    return ((K + K.T) * 0.5).tocsr()


class AffineOperator:
    """Two-term affine stiffness A(mu) = sum_q theta_q(mu) K_q on one mesh."""

    def __init__(self, mesh: Mesh, k_lambda: sp.csr_array, k_shear: sp.csr_array):
        self.mesh = mesh
        self.terms: tuple[sp.csr_array, sp.csr_array] = (k_lambda, k_shear)
        self.num_dofs = mesh.num_dofs

    @staticmethod
    def thetas(mu: MaterialParams) -> tuple[float, float]:
        return mu.thetas()

    def assemble(self, mu: MaterialParams) -> sp.csr_array:
        tl, ts = mu.thetas()
        return (tl * self.terms[0] + ts * self.terms[1]).tocsr()

    def matvec(self, mu: MaterialParams, u: Field) -> Field:
        tl, ts = mu.thetas()
        return tl * (self.terms[0] @ u) + ts * (self.terms[1] @ u)


def build_affine_operator(mesh: Mesh) -> AffineOperator:
    """Assemble the two constitutive stiffness terms for a mesh."""
    geometry = element_geometry(mesh)
    return AffineOperator(mesh,
                          _assemble_term(mesh, D_LAMBDA, geometry),
                          _assemble_term(mesh, D_SHEAR, geometry))


# ---------------------------------------------------------------------------
# loads
# ---------------------------------------------------------------------------

def area_masses(mesh: Mesh) -> np.ndarray:
    """Per-node P1 mass weights: integral of each hat function (area/3 sums).

    A constant body force f gives the consistent load  l[2i:2i+2] = m_i * f,
    independent of rigid rotations of the mesh.
    """
    areas, _, _ = element_geometry(mesh)
    m = np.zeros(mesh.num_nodes)
    np.add.at(m, mesh.triangles.ravel(), np.repeat(areas / 3.0, 3))
    return m


def edge_masses(mesh: Mesh, tag: str) -> np.ndarray:
    """Per-node weights of the boundary edges carrying ``tag``.

    Two-point Gauss on each edge; for P1 hats that is L/2 per endpoint, so a
    constant traction t loads node i with w_i * t.
    """
    sel = [k for k, t in enumerate(mesh.boundary_tags) if t == tag]
    if not sel:
        raise ValidationError(f"unknown boundary tag '{tag}' "
                              f"(have {sorted(set(mesh.boundary_tags))})")
    w = np.zeros(mesh.num_nodes)
    gauss = (0.5 * (1.0 - 1.0 / np.sqrt(3.0)), 0.5 * (1.0 + 1.0 / np.sqrt(3.0)))
    for k in sel:
        a, b = mesh.boundary_edges[k]
        L = float(np.linalg.norm(mesh.nodes[b] - mesh.nodes[a]))
        # hat values at the two Gauss points, each with weight L/2
        w[a] += 0.5 * L * ((1.0 - gauss[0]) + (1.0 - gauss[1]))
        w[b] += 0.5 * L * (gauss[0] + gauss[1])
    return w


def assemble_load(mesh: Mesh, mu: MaterialParams) -> Field:
    """Consistent load vector for body force plus tagged tractions."""
    f = np.zeros(mesh.num_dofs)
    bx, by = mu.body_force
    if bx != 0.0 or by != 0.0:
        m = area_masses(mesh)
        f[0::2] += m * bx
        f[1::2] += m * by
    for tag, (tx, ty) in mu.tractions.items():
        w = edge_masses(mesh, tag)
        f[0::2] += w * tx
        f[1::2] += w * ty
    return f


# ---------------------------------------------------------------------------
# Dirichlet elimination and solves
# ---------------------------------------------------------------------------

@dataclass
class ReducedSystem:
    """Symmetric elimination of constrained DoFs with a back map."""

    matrix: sp.csr_array
    rhs: np.ndarray
    free: np.ndarray
    fixed: np.ndarray
    fixed_values: np.ndarray
    num_dofs: int

    def expand(self, u_free: np.ndarray) -> Field:
        u = np.empty(self.num_dofs)
        u[self.free] = u_free
        u[self.fixed] = self.fixed_values
        return u


def apply_dirichlet(A: sp.csr_array, f: np.ndarray, fixed_dofs,
                    values=0.0) -> ReducedSystem:
    """Eliminate constrained DoFs symmetrically.

    The reduced right-hand side is f_free - A[free, fixed] @ values; the
    solution is recovered through :meth:`ReducedSystem.expand`.
    """
    n = A.shape[0]
    fixed_raw = np.asarray(fixed_dofs, dtype=np.int64)
    vals_raw = np.broadcast_to(
        np.asarray(values, dtype=np.float64), fixed_raw.shape
    ).copy()
    fixed, first = np.unique(fixed_raw, return_index=True)
    vals = vals_raw[first]  # keep values aligned with the sorted DoFs
    if fixed.size != fixed_raw.size:
        order = np.argsort(fixed_raw, kind="stable")
        ids, vv = fixed_raw[order], vals_raw[order]
        dup = ids[1:] == ids[:-1]
        if np.any(dup & (vv[1:] != vv[:-1])):
            raise ValidationError("conflicting Dirichlet values for a repeated DoF")
    if fixed.size and (fixed.min() < 0 or fixed.max() >= n):
        raise ValidationError("constrained DoF index out of range")
    mask = np.ones(n, dtype=bool)
    mask[fixed] = False
    free = np.flatnonzero(mask)
    csr = A.tocsr()
    Aff = csr[free][:, free]
    rhs = f[free] - csr[free][:, fixed] @ vals
    return ReducedSystem(Aff.tocsr(), rhs, free, fixed, vals, n)


class SpdFactor:
    """Reusable sparse factorization with a triangular-solve counter."""

    def __init__(self, A: sp.csr_array):
        _check_spd_shape(A)
        self.shape = A.shape
        self._norm = spla.norm(A) if A.nnz else 0.0
        try:
            self._lu = spla.splu(A.tocsc())
        except RuntimeError as exc:
            if "singular" in str(exc).lower():
                raise SingularMatrixError(f"matrix is singular: {exc}") from None
            raise SolverError(str(exc)) from None
        self.solve_count = 0

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=np.float64)
        # Count triangular solves, not calls: a block right-hand side
        # with k columns costs k solves.
        self.solve_count += 1 if b.ndim == 1 else b.shape[1]
        return self._lu.solve(b)


def _check_spd_shape(A: sp.csr_array) -> None:
    if A.shape[0] != A.shape[1]:
        raise NotSPDError(f"matrix is not square: {A.shape}")
    d = A.diagonal()
    if A.shape[0] and d.min() <= 0.0:
        raise NotSPDError(f"non-positive diagonal entry {d.min():.3e}: not SPD")
    asym = abs(A - A.T)
    scale = abs(A).max() or 1.0
    if asym.nnz and asym.max() > 1e-10 * scale:
        raise NotSPDError(f"matrix asymmetric by {asym.max() / scale:.3e} relative")


def factorize_spd(A: sp.csr_array) -> SpdFactor:
    """Factor a sparse SPD matrix for repeated solves."""
    return SpdFactor(A)


def solve_spd(A: sp.csr_array, b: np.ndarray) -> np.ndarray:
    """Direct sparse solve with a relative-residual guarantee of 1e-10.

    One step of iterative refinement is applied if the first solve misses
    the contract; failure after that raises SolverError.
    """
    fac = factorize_spd(A)
    x = fac.solve(b)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(x)
    res = float(np.linalg.norm(A @ x - b)) / bnorm
    if res > SOLVE_REL_RESIDUAL:
        x = x + fac.solve(b - A @ x)
        res = float(np.linalg.norm(A @ x - b)) / bnorm
        if res > SOLVE_REL_RESIDUAL:
            raise SolverError(f"residual {res:.3e} exceeds {SOLVE_REL_RESIDUAL}")
    return x


# ---------------------------------------------------------------------------
# stress recovery
# ---------------------------------------------------------------------------

def element_stresses(mesh: Mesh, u: Field,
                     material_by_region: dict[int, MaterialParams]) -> np.ndarray:
    """Per-element (sigma_xx, sigma_yy, tau_xy, sigma_zz) under plane strain."""
    _, B, dofs = element_geometry(mesh)
    ue = u[dofs]                                   # (T, 6)
    eps = np.einsum("tij,tj->ti", B, ue)           # (T, 3)
    T = mesh.num_triangles
    out = np.empty((T, 4))
    for region in np.unique(mesh.regions):
        mu = material_by_region.get(int(region))
        if mu is None:
            raise ValidationError(f"no material for region {region}")
        tl, ts = mu.thetas()
        sel = mesh.regions == region
        sig = eps[sel] @ (tl * D_LAMBDA + ts * D_SHEAR).T
        out[sel, :3] = sig
        out[sel, 3] = mu.nu * (sig[:, 0] + sig[:, 1])
    return out


def von_mises(mesh: Mesh, u: Field,
              material_by_region: dict[int, MaterialParams]) -> np.ndarray:
    """Per-element von Mises stress with the plane-strain out-of-plane term."""
    s = element_stresses(mesh, u, material_by_region)
    sx, sy, txy, sz = s[:, 0], s[:, 1], s[:, 2], s[:, 3]
    vm2 = (sx * sx + sy * sy + sz * sz
           - sx * sy - sy * sz - sz * sx + 3.0 * txy * txy)
    return np.sqrt(np.maximum(vm2, 0.0))


def scalar_laplacian(mesh: Mesh) -> sp.csr_array:
    """P1 stiffness of the scalar Laplace operator (one DoF per node).

    Used to lift port modes into the component interior, one displacement
    component at a time.
    """
    tri = mesh.triangles
    p = mesh.nodes[tri]
    x, y = p[..., 0], p[..., 1]
    areas = 0.5 * ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0])
                   - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
    inv2A = 1.0 / (2.0 * areas)
    grads = np.empty((tri.shape[0], 3, 2))
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        grads[:, i, 0] = (y[:, j] - y[:, k]) * inv2A
        grads[:, i, 1] = (x[:, k] - x[:, j]) * inv2A
    Le = np.einsum("tid,tjd,t->tij", grads, grads, areas, optimize=True)
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    n = mesh.num_nodes
    L = sp.coo_array((Le.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    return ((L + L.T) * 0.5).tocsr()


def rigid_modes(mesh: Mesh) -> np.ndarray:
    """Discrete rigid-body basis: two translations plus linearized rotation."""
    n = mesh.num_nodes
    modes = np.zeros((3, 2 * n))
    modes[0, 0::2] = 1.0
    modes[1, 1::2] = 1.0
    modes[2, 0::2] = -mesh.nodes[:, 1]
    modes[2, 1::2] = mesh.nodes[:, 0]
    return modes
