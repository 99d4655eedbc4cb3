"""Port-mode training, harmonic extensions, and full-order bubbles."""
import numpy as np
import pytest
import scipy.linalg

from apcms.archetype import (
    FEBubbleSolver,
    build_archetype,
    build_port_modes,
    clamped_node_indices,
    interior_dofs,
    port_dof_indices,
    solve_bubble_fe,
    solve_force_bubble_fe,
)
from apcms.archetype import _chain_laplacian
from apcms.errors import ValidationError
from apcms.fem import MaterialParams
from apcms.structured import annulus_mesh, rect_mesh

RNG = np.random.default_rng(20240817)


@pytest.fixture(scope="module")
def square():
    """5x5 unit square with one port on each vertical edge."""
    g = np.linspace(0.0, 1.0, 5)
    return rect_mesh(g, g, ports={"left": "west", "right": "east"})


@pytest.fixture(scope="module")
def square_arch(square):
    return build_archetype(
        "sq", square, {"west": ("full", None), "east": ("eigen", 6)}
    )


@pytest.fixture(scope="module")
def clamped_arch():
    """4x4 square, one port on the right, clamped along the left edge."""
    g = np.linspace(0.0, 1.0, 4)
    mesh = rect_mesh(g, g, ports={"right": "p"})
    return build_archetype("cl", mesh, {"p": ("eigen", 4)}, clamped_tags=("left",))


def test_port_dof_indices_interleave(square):
    port = square.port("east")
    dofs = port_dof_indices(port)
    assert dofs.shape == (2 * len(port.nodes),)
    assert np.array_equal(dofs[0::2], 2 * port.nodes)
    assert np.array_equal(dofs[1::2], 2 * port.nodes + 1)


def test_interior_dofs_excludes_single_port():
    # 3x3 unit square, one port of 3 nodes on the right edge: the interior
    # keeps every DoF except the port's six.
    g = np.linspace(0.0, 1.0, 3)
    mesh = rect_mesh(g, g, ports={"right": "p"})
    inner = interior_dofs(mesh)
    assert len(inner) == 2 * mesh.num_nodes - 6
    port_set = set(port_dof_indices(mesh.port("p")).tolist())
    assert port_set.isdisjoint(inner.tolist())
    # Full (x, y) pairs in sorted order.
    assert np.array_equal(inner[0::2] + 1, inner[1::2])


def test_interior_dofs_excludes_clamped(square):
    inner = interior_dofs(square, clamped_tags=("bottom",))
    clamped = clamped_node_indices(square, ("bottom",))
    assert len(clamped) == 5
    for n in clamped:
        assert 2 * n not in inner and 2 * n + 1 not in inner
    # 25 nodes - 5 west - 5 east - 3 clamped-only (corners shared? none: the
    # bottom row shares its end nodes with the vertical ports).
    assert len(inner) == 2 * (25 - 5 - 5 - 3)


def test_chain_laplacian_uniform_open_matches_hand_matrix():
    # Five nodes, spacing 0.25: weights 1/h = 4 on each segment.
    L = _chain_laplacian(np.full(4, 0.25), closed=False)
    expected = 4.0 * np.array(
        [
            [1, -1, 0, 0, 0],
            [-1, 2, -1, 0, 0],
            [0, -1, 2, -1, 0],
            [0, 0, -1, 2, -1],
            [0, 0, 0, -1, 1],
        ],
        dtype=float,
    )
    assert np.array_equal(L, expected)
    evals, evecs = scipy.linalg.eigh(expected)
    assert abs(evals[0]) < 1e-12
    first = evecs[:, 0]
    assert np.allclose(first, first[0], atol=1e-12)  # constant mode


def test_chain_laplacian_closed_constant_kernel():
    L = _chain_laplacian(np.array([1.0, 2.0, 1.5, 0.5]), closed=True)
    assert L.shape == (4, 4)
    assert np.allclose(L @ np.ones(4), 0.0, atol=1e-14)
    evals = scipy.linalg.eigvalsh(L)
    assert abs(evals[0]) < 1e-12 and evals[1] > 1e-8  # simple kernel


def test_eigen_modes_first_pair_is_rigid_translation(square):
    space = build_port_modes(square, "east", "eigen", 4)
    n = len(square.port("east").nodes)
    const = np.full(n, 1.0 / np.sqrt(n))
    # Columns 0 and 1 carry the constant chain mode in x and y.
    assert np.allclose(space.modes[0::2, 0], const, atol=1e-12)
    assert np.allclose(space.modes[1::2, 0], 0.0, atol=1e-12)
    assert np.allclose(space.modes[1::2, 1], const, atol=1e-12)
    assert np.allclose(space.modes[0::2, 1], 0.0, atol=1e-12)
    assert space.eigenvalues[0] == pytest.approx(0.0, abs=1e-12)
    assert space.eigenvalues[1] == pytest.approx(0.0, abs=1e-12)


def test_eigen_modes_orthonormal_and_even(square):
    space = build_port_modes(square, "east", "eigen", 6)
    gram = space.modes.T @ space.modes
    assert np.allclose(gram, np.eye(6), atol=1e-12)
    with pytest.raises(ValidationError):
        build_port_modes(square, "east", "eigen", 5)
    with pytest.raises(ValidationError):
        build_port_modes(square, "east", "eigen", 12)  # port has 10 DoFs
    with pytest.raises(ValidationError):
        build_port_modes(square, "east", "eigen", None)


def test_full_modes_identity(square):
    space = build_port_modes(square, "west", "full")
    assert np.array_equal(space.modes, np.eye(10))
    with pytest.raises(ValidationError):
        build_port_modes(square, "west", "full", 4)


def test_closed_port_eigen_modes():
    mesh = annulus_mesh((0.0, 0.0), (1.0, 2.0), 16, inner_port="bore")
    space = build_port_modes(mesh, "bore", "eigen", 8)
    assert space.modes.shape == (32, 8)
    assert np.allclose(space.modes.T @ space.modes, np.eye(8), atol=1e-12)
    n = 16
    assert np.allclose(space.modes[0::2, 0], space.modes[0, 0], atol=1e-12)
    assert abs(space.modes[0, 0]) == pytest.approx(1.0 / np.sqrt(n), abs=1e-12)


def test_sliced_prefix(square):
    space = build_port_modes(square, "east", "eigen", 8)
    sub = space.sliced(4)
    assert np.array_equal(sub.modes, space.modes[:, :4])
    with pytest.raises(ValidationError):
        space.sliced(10)
    with pytest.raises(ValidationError):
        space.sliced(3)


def test_archetype_rejects_overlapping_ports():
    g = np.linspace(0.0, 1.0, 4)
    mesh = rect_mesh(g, g, ports={"right": "a", "top": "b"})  # share a corner
    with pytest.raises(ValidationError, match="share a node"):
        build_archetype("bad", mesh, {"a": ("full", None), "b": ("full", None)})


def test_archetype_rejects_clamped_port():
    g = np.linspace(0.0, 1.0, 4)
    mesh = rect_mesh(g, g, ports={"right": "a"})
    with pytest.raises(ValidationError, match="clamped"):
        build_archetype("bad", mesh, {"a": ("full", None)}, clamped_tags=("right",))


def test_archetype_requires_all_ports_covered(square):
    with pytest.raises(ValidationError, match="does not match"):
        build_archetype("bad", square, {"west": ("full", None)})


def test_extension_trace_and_zeros(square_arch):
    arch = square_arch
    mesh = arch.mesh
    east = mesh.port("east")
    west_dofs = port_dof_indices(mesh.port("west"))
    for k in range(arch.mode_count("east")):
        ext = arch.extensions[("east", k)]
        mode = arch.port_spaces["east"].modes[:, k]
        assert np.array_equal(ext[port_dof_indices(east)], mode)  # exact trace
        assert np.array_equal(ext[west_dofs], np.zeros(10))  # exact zeros


def test_extension_zero_on_clamped_boundary(clamped_arch):
    arch = clamped_arch
    clamped = clamped_node_indices(arch.mesh, arch.clamped_tags)
    assert len(clamped) == 4
    for k in range(arch.mode_count("p")):
        ext = arch.extensions[("p", k)]
        for n in clamped:
            assert ext[2 * n] == 0.0 and ext[2 * n + 1] == 0.0


def test_extension_maximum_principle(square_arch):
    # A constant port mode lifts harmonically, so interior values stay
    # inside the range of the boundary data.
    arch = square_arch
    n = len(arch.mesh.port("east").nodes)
    coeffs = np.zeros(arch.mode_count("east"))
    coeffs[0] = np.sqrt(n)  # rescale the normalized constant mode to 1
    ext = arch.extension_for("east", coeffs)
    assert ext[0::2].min() >= -1e-12 and ext[0::2].max() <= 1.0 + 1e-12


def test_extension_linearity(square_arch):
    arch = square_arch
    coeffs = RNG.standard_normal(arch.mode_count("east"))
    combo = arch.extension_for("east", coeffs)
    manual = sum(
        coeffs[k] * arch.extensions[("east", k)]
        for k in range(arch.mode_count("east"))
    )
    assert np.allclose(combo, manual, atol=1e-14)


def test_bubble_makes_extension_operator_harmonic(square_arch):
    arch = square_arch
    mu = MaterialParams(E=70e9, nu=0.31)
    A = arch.operator.assemble(mu)
    I = arch.interior
    for port, k in [("east", 0), ("east", 3), ("west", 2)]:
        psi = arch.extensions[(port, k)]
        b = solve_bubble_fe(arch, port, k, mu)
        drive = np.linalg.norm((A @ psi)[I])
        residual = np.linalg.norm((A @ (psi + b))[I])
        assert residual <= 1e-9 * drive
        # Bubbles vanish exactly off the interior.
        mask = np.ones(2 * arch.mesh.num_nodes, dtype=bool)
        mask[I] = False
        assert np.array_equal(b[mask], np.zeros(mask.sum()))


def test_bubble_solver_reuses_factorization(square_arch):
    arch = square_arch
    solver = FEBubbleSolver(arch, MaterialParams(E=1.0, nu=0.3))
    assert solver.solve_count == 0
    b0 = solver.bubble(arch.extensions[("east", 0)])
    b1 = solver.bubble(arch.extensions[("east", 1)])
    solver.force_bubble()
    assert solver.solve_count == 3
    assert np.allclose(
        b0, solve_bubble_fe(arch, "east", 0, MaterialParams(E=1.0, nu=0.3))
    )
    assert not np.allclose(b0, b1)


def test_bubble_independent_of_youngs_modulus(square_arch):
    # With the Poisson ratio fixed, scaling E scales both the operator and
    # the lifting residual, so the mode bubble is unchanged.
    arch = square_arch
    b1 = solve_bubble_fe(arch, "east", 2, MaterialParams(E=1.0, nu=0.3))
    b2 = solve_bubble_fe(arch, "east", 2, MaterialParams(E=7.5, nu=0.3))
    b3 = solve_bubble_fe(arch, "east", 2, MaterialParams(E=1.0, nu=0.45))
    assert np.allclose(b1, b2, atol=1e-12 * np.abs(b1).max())
    assert not np.allclose(b1, b3, atol=1e-6 * np.abs(b1).max())


def test_force_bubble_solves_interior_load(square_arch):
    arch = square_arch
    mu = MaterialParams(E=3.0, nu=0.25, body_force=(0.4, -1.1))
    b = solve_force_bubble_fe(arch, mu)
    from apcms.fem import assemble_load

    A = arch.operator.assemble(mu)
    I = arch.interior
    f = assemble_load(arch.mesh, mu)
    assert np.linalg.norm(A[np.ix_(I, I)] @ b[I] - f[I]) <= 1e-9 * np.linalg.norm(f[I])
    # Load bubbles scale like 1/E at fixed geometry and load.
    b2 = solve_force_bubble_fe(arch, MaterialParams(E=6.0, nu=0.25, body_force=(0.4, -1.1)))
    assert np.allclose(2.0 * b2, b, atol=1e-12 * np.abs(b).max())
