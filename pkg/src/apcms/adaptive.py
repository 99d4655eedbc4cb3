"""Online machinery for components that rotate between solves.

The rotating body keeps its operator in the reference frame: stiffness
conjugates under rigid rotation (K(R mesh) = R K R^T), so one interior
factorization per material serves every angle.  The interior DoFs split
into an ``m`` block (body interior) and a ``b`` block (the body's nodes on
the adaptive interface circle); the thin buffer layer that ties the body
back to the stationary side is re-meshed and re-assembled per angle, but
it only ever touches the ``b`` block.  A block-inverse identity then
recomputes every bubble from the cached factorization plus one small dense
Schur solve — no online refactorization.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .archetype import Archetype
from .errors import ValidationError
from .fem import (
    AffineOperator,
    MaterialParams,
    SpdFactor,
    area_masses,
    build_affine_operator,
    factorize_spd,
)
from .mesh import Mesh

__all__ = [
    "rotation_matrix",
    "rotation_operator",
    "rotate_field",
    "conjugate_operator",
    "RotationalSplit",
    "build_rotational_split",
    "CoupledBlocks",
    "BlockInverse",
    "block_solve",
    "OnlineBubbles",
    "online_bubbles",
    "RotorTables",
    "rotor_tables",
    "RotorOnline",
    "rotor_condense",
]


def rotation_matrix(theta_deg: float) -> np.ndarray:
    t = np.deg2rad(theta_deg)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s], [s, c]])


def rotation_operator(num_nodes: int, theta_deg: float) -> sp.csr_array:
    """Block-diagonal rotation of every nodal (x, y) displacement pair."""
    t = np.deg2rad(theta_deg)
    c, s = np.cos(t), np.sin(t)
    data = np.tile([c, -s, s, c], num_nodes)
    rows = np.repeat(np.arange(2 * num_nodes), 2)
    cols = np.empty(4 * num_nodes, dtype=np.int64)
    base = 2 * np.arange(num_nodes, dtype=np.int64)
    cols[0::4] = base
    cols[1::4] = base + 1
    cols[2::4] = base
    cols[3::4] = base + 1
    n2 = 2 * num_nodes
    return sp.csr_array((data, (rows, cols)), shape=(n2, n2))


def rotate_field(u: np.ndarray, theta_deg: float) -> np.ndarray:
    """Rotate an interleaved displacement field (or a stack of columns).

    The first axis must hold full (x, y) pairs: entries ``2i`` and
    ``2i + 1`` belong to the same node.
    """
    t = np.deg2rad(theta_deg)
    c, s = np.cos(t), np.sin(t)
    x = u[0::2]
    y = u[1::2]
    out = np.empty_like(u, dtype=float)
    out[0::2] = c * x - s * y
    out[1::2] = s * x + c * y
    return out


def conjugate_operator(K: sp.sparray, theta_deg: float) -> sp.csr_array:
    """Stiffness of the rigidly rotated body: R K R^T."""
    R = rotation_operator(K.shape[0] // 2, theta_deg)
    return (R @ K @ R.T).tocsr()


def _paired(dofs: np.ndarray) -> bool:
    """True when the index list holds complete interleaved (x, y) pairs."""
    return (
        len(dofs) % 2 == 0
        and np.array_equal(dofs[1::2], dofs[0::2] + 1)
        and np.all(dofs[0::2] % 2 == 0)
    )


@dataclass
class RotationalSplit:
    """Reference-frame block data of a rotating body archetype.

    ``m_dofs`` are the body-interior DoFs, ``b_dofs`` the body's DoFs on
    the adaptive port (in port chain order).  The operator terms are
    stored restricted to these blocks; ``rhs_cores[(port, k)]`` holds the
    per-term operator images of the non-adaptive port extensions, from
    which bubble right-hand sides at any angle follow by rotation.
    """

    archetype: Archetype
    adaptive_port: str
    m_dofs: np.ndarray
    b_dofs: np.ndarray
    terms_mm: tuple[sp.csr_array, ...]
    terms_mb: tuple[sp.csr_array, ...]
    terms_bb: np.ndarray  # (2, n_b, n_b) dense
    rhs_cores: dict[tuple[str, int], np.ndarray]  # (2, 2 * num_nodes)
    center: np.ndarray
    _factors: dict = field(default_factory=dict, repr=False)
    _erefs: dict = field(default_factory=dict, repr=False)
    _schur_cores: dict = field(default_factory=dict, repr=False)
    _tables: dict = field(default_factory=dict, repr=False)

    @property
    def n_m(self) -> int:
        return len(self.m_dofs)

    @property
    def n_b(self) -> int:
        return len(self.b_dofs)

    def factor(self, mu: MaterialParams) -> SpdFactor:
        """Interior factorization at ``mu`` (built once, reused per angle)."""
        key = (mu.E, mu.nu)
        if key not in self._factors:
            t = mu.thetas()
            A = (t[0] * self.terms_mm[0] + t[1] * self.terms_mm[1]).tocsr()
            self._factors[key] = factorize_spd(A)
        return self._factors[key]

    def k_mb(self, mu: MaterialParams) -> sp.csr_array:
        t = mu.thetas()
        return (t[0] * self.terms_mb[0] + t[1] * self.terms_mb[1]).tocsr()

    def e_ref(self, mu: MaterialParams) -> np.ndarray:
        """Reference-frame interface influence E = K_mm^-1 K_mb.

        Angle-independent at fixed material: rotation conjugates both
        factors, so the online operator at any angle is R_m E R_b^T.
        """
        key = (mu.E, mu.nu)
        if key not in self._erefs:
            self._erefs[key] = self.factor(mu).solve(self.k_mb(mu).toarray())
        return self._erefs[key]

    def schur_core(self, mu: MaterialParams) -> np.ndarray:
        """Body part of the interface Schur complement, reference frame."""
        key = (mu.E, mu.nu)
        if key not in self._schur_cores:
            t = mu.thetas()
            K_bb = t[0] * self.terms_bb[0] + t[1] * self.terms_bb[1]
            core = K_bb - self.k_mb(mu).T @ self.e_ref(mu)
            self._schur_cores[key] = 0.5 * (core + core.T)
        return self._schur_cores[key]


def build_rotational_split(archetype: Archetype, adaptive_port: str) -> RotationalSplit:
    """Split the archetype's interior around its adaptive port."""
    if adaptive_port not in archetype.port_dofs:
        raise ValidationError(f"archetype has no port {adaptive_port!r}")
    port = archetype.mesh.port(adaptive_port)
    if port.kind != "arc":
        raise ValidationError(
            f"adaptive port {adaptive_port!r} must be a circular arc to rotate about"
        )
    m = archetype.interior
    b = archetype.port_dofs[adaptive_port]
    if not (_paired(m) and _paired(b)):
        raise ValidationError("rotational split needs full (x, y) DoF pairs per block")

    terms_mm = tuple(K[np.ix_(m, m)].tocsr() for K in archetype.operator.terms)
    terms_mb = tuple(K[np.ix_(m, b)].tocsr() for K in archetype.operator.terms)
    terms_bb = np.stack(
        [K[np.ix_(b, b)].toarray() for K in archetype.operator.terms]
    )
    rhs_cores = {}
    for (pname, k), psi in archetype.extensions.items():
        if pname == adaptive_port:
            continue
        rhs_cores[(pname, k)] = np.stack(
            [K @ psi for K in archetype.operator.terms]
        )
    return RotationalSplit(
        archetype=archetype,
        adaptive_port=adaptive_port,
        m_dofs=m,
        b_dofs=b,
        terms_mm=terms_mm,
        terms_mb=terms_mb,
        terms_bb=terms_bb,
        rhs_cores=rhs_cores,
        center=np.asarray(port.center, dtype=float),
    )


@dataclass
class CoupledBlocks:
    """Two-block coupled system at one angle and material.

    ``A_mb`` and ``A_bb`` are expressed in the rotated frame; the ``mm``
    block is implicit — it is reached only through a reference-frame
    factorization conjugated by the angle.  ``e_theta`` optionally carries
    the precomputed interface influence to skip the big multi-column solve.
    """

    A_mb: sp.csr_array
    A_bb: np.ndarray
    e_theta: np.ndarray | None = None

    @property
    def A_bm(self) -> sp.csr_array:
        return self.A_mb.T.tocsr()

    @property
    def n_m(self) -> int:
        return self.A_mb.shape[0]

    @property
    def n_b(self) -> int:
        return self.A_mb.shape[1]


def assemble_coupled(
    split: RotationalSplit,
    mu: MaterialParams,
    theta_deg: float,
    buffer_op: AffineOperator,
    buffer_outer_dofs: np.ndarray,
) -> CoupledBlocks:
    """Rotated-frame coupled blocks including the buffer's interface part."""
    t = mu.thetas()
    K_mb = split.k_mb(mu)
    R_m = rotation_operator(split.n_m // 2, theta_deg)
    R_b = rotation_operator(split.n_b // 2, theta_deg)
    A_mb = (R_m @ K_mb @ R_b.T).tocsr()

    K_bb = t[0] * split.terms_bb[0] + t[1] * split.terms_bb[1]
    A_bb = rotate_field(rotate_field(K_bb, theta_deg).T, theta_deg).T

    K_buf = buffer_op.assemble(mu)
    buf_bb = K_buf[np.ix_(buffer_outer_dofs, buffer_outer_dofs)].toarray()
    A_bb = A_bb + buf_bb

    e_theta = rotate_field(rotate_field(split.e_ref(mu), theta_deg).T, theta_deg).T
    return CoupledBlocks(A_mb=A_mb, A_bb=A_bb, e_theta=e_theta)


class BlockInverse:
    """Applies the inverse of the two-block coupled system.

    Built from a reference-frame factorization of the big block plus the
    small dense interface Schur complement.  ``apply`` costs one
    triangular solve per right-hand-side column of the big block and two
    small dense solves; nothing is refactorized.
    """

    def __init__(
        self,
        factor: SpdFactor,
        theta_deg: float,
        E: np.ndarray,
        S: np.ndarray,
    ):
        self.factor = factor
        self.theta = float(theta_deg)
        self.E = E
        try:
            self._schur = scipy.linalg.cho_factor(S)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - defensive
            raise ValidationError(f"interface Schur block not SPD: {exc}") from None

    @classmethod
    def from_blocks(
        cls, blocks: CoupledBlocks, factor: SpdFactor, theta_deg: float
    ) -> "BlockInverse":
        if blocks.e_theta is not None:
            E = blocks.e_theta
            S = blocks.A_bb - blocks.A_mb.T @ E
        else:
            A_mb = blocks.A_mb.toarray()
            if theta_deg != 0.0:
                A_mb = rotate_field(A_mb, -theta_deg)
            E = factor.solve(A_mb)
            if theta_deg != 0.0:
                E = rotate_field(E, theta_deg)
            S = blocks.A_bb - blocks.A_mb.T @ E
        S = 0.5 * (S + S.T)
        return cls(factor, theta_deg, E, S)

    def apply(self, rhs: np.ndarray) -> np.ndarray:
        """Solve the coupled system for one vector or a column stack."""
        n_m = self.E.shape[0]
        r_m = rhs[:n_m]
        r_b = rhs[n_m:]
        t_m = rotate_field(r_m, -self.theta) if self.theta else r_m
        y = self.factor.solve(t_m)
        inv_rm = rotate_field(y, self.theta) if self.theta else y
        z = scipy.linalg.cho_solve(self._schur, self.E.T @ r_m - r_b)
        x_m = inv_rm + self.E @ z
        return np.concatenate([x_m, -z])


def block_solve(
    blocks: CoupledBlocks, factor: SpdFactor, theta_deg: float, rhs: np.ndarray
) -> np.ndarray:
    """One-shot coupled solve (tests and small systems)."""
    return BlockInverse.from_blocks(blocks, factor, theta_deg).apply(rhs)


@dataclass
class OnlineBubbles:
    """Bubbles of the rotating component at one angle.

    ``labels`` orders the columns of ``bubbles``: adaptive-interface modes
    first (``("adaptive", j)``), then the body's own port modes, then the
    load response ``("force",)``.  Rows follow ``m_dofs`` then ``b_dofs``.
    """

    labels: tuple
    bubbles: np.ndarray
    inverse: BlockInverse
    buffer_op: AffineOperator
    buffer_inner_dofs: np.ndarray
    buffer_outer_dofs: np.ndarray
    seconds: float


def online_bubbles(
    split: RotationalSplit,
    mu: MaterialParams,
    theta_deg: float,
    buffer_mesh: Mesh,
    interface_modes: np.ndarray,
    body_force: tuple[float, float] = (0.0, 0.0),
) -> OnlineBubbles:
    """Recompute every bubble of the rotating component at one angle.

    ``interface_modes`` holds the adaptive-interface mode basis on the
    buffer's inner loop (interleaved chain order).  ``body_force`` is the
    global-frame force density applied to both body and buffer; nodal area
    weights are rotation-invariant, so no frame change is needed.
    """
    t0 = time.perf_counter()
    inner = buffer_mesh.port("inner")
    outer = buffer_mesh.port("outer")
    if 2 * len(outer.nodes) != split.n_b:
        raise ValidationError(
            f"buffer outer loop has {2 * len(outer.nodes)} DoFs, expected {split.n_b}"
        )
    if interface_modes.shape[0] != 2 * len(inner.nodes):
        raise ValidationError(
            f"interface mode rows ({interface_modes.shape[0]}) do not match the "
            f"buffer inner loop ({2 * len(inner.nodes)} DoFs)"
        )
    inner_dofs = np.empty(2 * len(inner.nodes), dtype=np.int64)
    inner_dofs[0::2] = 2 * inner.nodes
    inner_dofs[1::2] = 2 * inner.nodes + 1
    outer_dofs = np.empty(2 * len(outer.nodes), dtype=np.int64)
    outer_dofs[0::2] = 2 * outer.nodes
    outer_dofs[1::2] = 2 * outer.nodes + 1

    buffer_op = build_affine_operator(buffer_mesh)
    blocks = assemble_coupled(split, mu, theta_deg, buffer_op, outer_dofs)
    inverse = BlockInverse.from_blocks(blocks, split.factor(mu), theta_deg)

    n_m, n_b = split.n_m, split.n_b
    K_buf = buffer_op.assemble(mu)
    coupling_bi = K_buf[np.ix_(outer_dofs, inner_dofs)]

    labels: list = []
    columns: list[np.ndarray] = []
    # Adaptive-interface modes: support reaches the solved blocks only
    # through buffer elements, so the right-hand side lives on the b rows.
    for j in range(interface_modes.shape[1]):
        rhs = np.zeros(n_m + n_b)
        rhs[n_m:] = -coupling_bi @ interface_modes[:, j]
        labels.append(("adaptive", j))
        columns.append(rhs)
    # Body port modes: the extension is zero on the adaptive circle, so the
    # right-hand side is the rotated reference-frame operator image.
    t = mu.thetas()
    mb = np.concatenate([split.m_dofs, split.b_dofs])
    for (pname, k), cores in sorted(split.rhs_cores.items()):
        core = t[0] * cores[0] + t[1] * cores[1]
        rhs = -rotate_field(core, theta_deg)[mb]
        labels.append((pname, k))
        columns.append(rhs)
    # Load response: body masses are rotation-invariant; the buffer adds
    # its own area masses on the interface rows.
    fx, fy = body_force
    load = np.zeros(2 * split.archetype.mesh.num_nodes)
    load[0::2] = split.archetype.body_mass * fx
    load[1::2] = split.archetype.body_mass * fy
    rhs = load[mb]
    buf_mass = area_masses(buffer_mesh)
    buf_load = np.zeros(2 * buffer_mesh.num_nodes)
    buf_load[0::2] = buf_mass * fx
    buf_load[1::2] = buf_mass * fy
    rhs[n_m:] += buf_load[outer_dofs]
    labels.append(("force",))
    columns.append(rhs)

    bubbles = inverse.apply(np.column_stack(columns))
    return OnlineBubbles(
        labels=tuple(labels),
        bubbles=bubbles,
        inverse=inverse,
        buffer_op=buffer_op,
        buffer_inner_dofs=inner_dofs,
        buffer_outer_dofs=outer_dofs,
        seconds=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# collapsed per-material tables: zero triangular solves per angle
# ---------------------------------------------------------------------------

@dataclass
class RotorTables:
    """Angle-independent response tables of the rotating body at one material.

    Everything is expressed in the body's reference frame.  Column order
    for the body's own port modes is sorted ``(port, k)``; the two extra
    response columns are the unit x/y gravity loads.  With these tables,
    condensing the combined (body + fresh buffer) component at a new angle
    needs no interior solves at all: the energy products telescope onto
    the cached interface responses, e.g. ``chi^T K chi' = y^T r_m' +
    x^T S_core x'`` for bubbles ``chi = (y - E x, x)``.
    """

    labels_body: tuple           # sorted (port, k) of the non-adaptive ports
    C_m: np.ndarray              # (n_m, nb) operator images of the extensions
    C_b: np.ndarray              # (n_b, nb)
    L_m: np.ndarray              # (n_m, 2) unit x/y mass loads on the body
    L_b: np.ndarray              # (n_b, 2)
    Y: np.ndarray                # (n_m, nb + 2) = K_mm^-1 [-C_m | L_m]
    W: np.ndarray                # (n_b, nb + 2) = K_bm Y
    V: np.ndarray                # (n_b, nb) = C_b + W[:, :nb]
    gram_y: np.ndarray           # (nb + 2)^2 = Y^T [-C_m | L_m]
    gram_pp: np.ndarray          # (nb, nb) psi^T K psi
    gram_py: np.ndarray          # (nb, nb + 2) = C_m^T Y
    load_psi: np.ndarray         # (nb, 2) psi^T (mass x unit direction)
    ext: np.ndarray              # (2 num_nodes, nb) stacked extensions

    @property
    def n_body_modes(self) -> int:
        return len(self.labels_body)


def rotor_tables(split: RotationalSplit, mu: MaterialParams) -> RotorTables:
    """Build (or fetch) the per-material tables of a rotational split.

    Costs ``n_b + n_body_modes + 2`` interior solves once per material —
    within the per-(angle, material) solve budget — and nothing afterwards.
    """
    key = (mu.E, mu.nu)
    cached = split._tables.get(key)
    if cached is not None:
        return cached

    t = mu.thetas()
    arch = split.archetype
    m, b = split.m_dofs, split.b_dofs
    labels = tuple(sorted(split.rhs_cores))
    n2 = 2 * arch.mesh.num_nodes

    C_full = np.empty((n2, len(labels)))
    ext = np.empty((n2, len(labels)))
    for i, lab in enumerate(labels):
        cores = split.rhs_cores[lab]
        C_full[:, i] = t[0] * cores[0] + t[1] * cores[1]
        ext[:, i] = arch.extensions[lab]
    C_m, C_b = C_full[m], C_full[b]

    load = np.zeros((n2, 2))
    load[0::2, 0] = arch.body_mass
    load[1::2, 1] = arch.body_mass
    L_m, L_b = load[m], load[b]

    rm = np.hstack([-C_m, L_m])
    Y = split.factor(mu).solve(rm)
    W = split.k_mb(mu).T @ Y
    V = C_b + W[:, : len(labels)]

    gram_y = Y.T @ rm
    gram_pp = ext.T @ C_full
    tables = RotorTables(
        labels_body=labels,
        C_m=C_m,
        C_b=C_b,
        L_m=L_m,
        L_b=L_b,
        Y=Y,
        W=W,
        V=V,
        gram_y=0.5 * (gram_y + gram_y.T),
        gram_pp=0.5 * (gram_pp + gram_pp.T),
        gram_py=C_m.T @ Y,
        load_psi=ext.T @ load,
        ext=ext,
    )
    split._tables[key] = tables
    return tables


@dataclass
class RotorOnline:
    """Condensed data of the combined rotating component at one angle.

    ``labels`` orders the mode columns exactly like
    :func:`online_bubbles`: adaptive-interface modes, then the body's own
    port modes, then the load response.  ``M``/``f`` are the component's
    condensed energy matrix and load vector over those columns (the load
    column included); ``expand`` turns a full coefficient vector back into
    global-frame body and buffer fields.
    """

    labels: tuple
    M: np.ndarray
    f: np.ndarray
    split: RotationalSplit
    tables: RotorTables
    mu: MaterialParams
    theta: float
    Xb: np.ndarray               # (n_b, cols) reference-frame interface traces
    alpha: np.ndarray            # (nb + 2, cols) response-table coefficients
    basis: np.ndarray            # interface modes on the buffer inner loop
    buffer_op: AffineOperator
    buffer_inner_dofs: np.ndarray
    buffer_outer_dofs: np.ndarray
    seconds: float

    def expand(self, coeffs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Global-frame (body field, buffer field) for mode weights."""
        tab = self.tables
        n_alpha = self.basis.shape[1]
        n_beta = tab.n_body_modes
        xb = self.Xb @ coeffs
        body_ref = tab.ext @ coeffs[n_alpha : n_alpha + n_beta]
        body_ref[self.split.m_dofs] += tab.Y @ (self.alpha @ coeffs)
        body_ref[self.split.m_dofs] -= self.split.e_ref(self.mu) @ xb
        body_ref[self.split.b_dofs] += xb
        body = rotate_field(body_ref, self.theta)

        buffer = np.zeros(self.buffer_op.num_dofs)
        buffer[self.buffer_inner_dofs] = self.basis @ coeffs[:n_alpha]
        buffer[self.buffer_outer_dofs] = rotate_field(xb, self.theta)
        return body, buffer


def rotor_condense(
    split: RotationalSplit,
    mu: MaterialParams,
    theta_deg: float,
    buffer_mesh: Mesh,
    interface_modes: np.ndarray,
    body_force: tuple[float, float] = (0.0, 0.0),
) -> RotorOnline:
    """Condense the rotating body plus its fresh buffer at one angle.

    Equivalent to running :func:`online_bubbles` and projecting the
    operator onto the resulting fields, but collapsed onto the cached
    per-material tables so the per-angle work is a small dense Schur
    factorization and products of interface size — no interior solves.
    """
    t0 = time.perf_counter()
    inner = buffer_mesh.port("inner")
    outer = buffer_mesh.port("outer")
    if 2 * len(outer.nodes) != split.n_b:
        raise ValidationError(
            f"buffer outer loop has {2 * len(outer.nodes)} DoFs, expected {split.n_b}"
        )
    if interface_modes.shape[0] != 2 * len(inner.nodes):
        raise ValidationError(
            f"interface mode rows ({interface_modes.shape[0]}) do not match the "
            f"buffer inner loop ({2 * len(inner.nodes)} DoFs)"
        )
    inner_dofs = np.empty(2 * len(inner.nodes), dtype=np.int64)
    inner_dofs[0::2] = 2 * inner.nodes
    inner_dofs[1::2] = 2 * inner.nodes + 1
    outer_dofs = np.empty(2 * len(outer.nodes), dtype=np.int64)
    outer_dofs[0::2] = 2 * outer.nodes
    outer_dofs[1::2] = 2 * outer.nodes + 1

    tab = rotor_tables(split, mu)
    n_alpha = interface_modes.shape[1]
    n_beta = tab.n_body_modes
    cols = n_alpha + n_beta + 1
    labels = tuple(
        [("adaptive", j) for j in range(n_alpha)] + list(tab.labels_body) + [("force",)]
    )

    buffer_op = build_affine_operator(buffer_mesh)
    K_buf = buffer_op.assemble(mu)
    B_oo = K_buf[np.ix_(outer_dofs, outer_dofs)].toarray()
    B_oi = K_buf[np.ix_(outer_dofs, inner_dofs)]
    B_ii = K_buf[np.ix_(inner_dofs, inner_dofs)]

    # Reference-frame force direction and buffer loads (global frame).
    g = np.asarray(body_force, dtype=float)
    g_ref = rotation_matrix(-theta_deg) @ g
    buf_mass = area_masses(buffer_mesh)
    load_buf = np.zeros(2 * buffer_mesh.num_nodes)
    load_buf[0::2] = buf_mass * g[0]
    load_buf[1::2] = buf_mass * g[1]

    # Interface traces: S(theta) x = rhs, all in the reference frame.
    S = split.schur_core(mu) + rotate_field(rotate_field(B_oo, -theta_deg).T,
                                            -theta_deg).T
    S = 0.5 * (S + S.T)
    try:
        schur = scipy.linalg.cho_factor(S)
    except np.linalg.LinAlgError as exc:
        raise ValidationError(f"interface Schur block not SPD: {exc}") from None

    rhs = np.empty((split.n_b, cols))
    rhs[:, :n_alpha] = rotate_field(-(B_oi @ interface_modes), -theta_deg)
    rhs[:, n_alpha : n_alpha + n_beta] = -tab.V
    rhs[:, -1] = (tab.L_b - tab.W[:, n_beta:]) @ g_ref \
        + rotate_field(load_buf[outer_dofs], -theta_deg)
    Xb = scipy.linalg.cho_solve(schur, rhs)

    alpha = np.zeros((n_beta + 2, cols))
    alpha[:n_beta, n_alpha : n_alpha + n_beta] = np.eye(n_beta)
    alpha[n_beta:, -1] = g_ref

    # Body energy: psi^T K psi on the mode block, a cross row per body
    # mode, and the telescoped bubble products.
    M = alpha.T @ tab.gram_y @ alpha + Xb.T @ split.schur_core(mu) @ Xb
    cross = tab.gram_py @ alpha + tab.V.T @ Xb
    beta_rows = slice(n_alpha, n_alpha + n_beta)
    M[beta_rows, :] += cross
    M[:, beta_rows] += cross.T
    M[beta_rows, beta_rows] += tab.gram_pp

    f = alpha.T @ (tab.gram_y[:, n_beta:] @ g_ref)
    f += Xb.T @ ((tab.L_b - tab.W[:, n_beta:]) @ g_ref)
    f[beta_rows] += tab.load_psi @ g_ref

    # Buffer energy and load in the global frame.
    IN = np.zeros((inner_dofs.size, cols))
    IN[:, :n_alpha] = interface_modes
    OUT = rotate_field(Xb, theta_deg)
    M += IN.T @ (B_ii @ IN) + IN.T @ (B_oi.T @ OUT)
    M += OUT.T @ (B_oi @ IN) + OUT.T @ (B_oo @ OUT)
    f += IN.T @ load_buf[inner_dofs] + OUT.T @ load_buf[outer_dofs]

    return RotorOnline(
        labels=labels,
        M=0.5 * (M + M.T),
        f=f,
        split=split,
        tables=tab,
        mu=mu,
        theta=float(theta_deg),
        Xb=Xb,
        alpha=alpha,
        basis=interface_modes,
        buffer_op=buffer_op,
        buffer_inner_dofs=inner_dofs,
        buffer_outer_dofs=outer_dofs,
        seconds=time.perf_counter() - t0,
    )
