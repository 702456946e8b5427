import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multidev import ReconstructionDiverged, UsageError, create_environment
from multidev import comm
from multidev.nlinv import (
    ArraySpace,
    CgParams,
    NlinvOperator,
    ReconGrid,
    ReconProblem,
    RegSchedule,
    Unknowns,
    UnknownsSpace,
    WeightParams,
    apply_weight,
    apply_weight_inv,
    apply_weight_inv_adjoint,
    cg_solve,
    compress_channels,
    gauss_newton_step,
    reconstruct_frame,
    reconstruct_series,
)
from multidev.numerics.fft import fft2, ifft2
from multidev.phantom import (
    CoilSpec,
    PhantomSpec,
    make_coils,
    make_mask,
    make_phantom,
    quality_reference,
    relative_error,
    simulate_acquisition,
)

from conftest import crand, inner, random_instance

PREC = {"single": np.complex64, "double": np.complex128}


def make_op(env, n, J, mask, precision="single", weights=WeightParams()):
    return NlinvOperator(env, ReconGrid(n), J, mask, weights, precision)


def unknowns(op, pair):
    return Unknowns.from_host(op.env, pair[0], pair[1], op.cdtype)


def host(v):
    return comm.to_host(v)


# -- weights


def test_weight_inverse_of_delta_is_constant():
    ng, wp = 32, WeightParams()
    chat = np.zeros((ng, ng), np.complex128)
    chat[0, 0] = 1
    c = apply_weight_inv(chat, wp)
    np.testing.assert_allclose(c, 1.0 / (ng * ng * wp.grid(ng)[0, 0]), atol=1e-15)


def test_zero_a_gives_plain_inverse_dft(rng):
    x = crand(rng, 16, 16, dtype=np.complex128)
    np.testing.assert_allclose(apply_weight_inv(x, WeightParams(a=0.0)), np.fft.ifft2(x), atol=1e-12)


def test_weight_adjoint(rng):
    wp = WeightParams()
    x, y = crand(rng, 32, 32), crand(rng, 32, 32)
    lhs = inner(apply_weight_inv(x, wp), y)
    rhs = inner(x, apply_weight_inv_adjoint(y, wp))
    assert abs(lhs - rhs) <= 1e-4 * abs(lhs)


def test_weight_round_trip(rng):
    c = crand(rng, 2, 16, 16, dtype=np.complex128)
    np.testing.assert_allclose(apply_weight_inv(apply_weight(c, WeightParams()), WeightParams()), c, atol=1e-10)


def test_weight_grid_is_symmetric_and_minimal_at_dc():
    w = WeightParams().grid(16)
    assert w[0, 0] == 1.0 and w.min() == 1.0
    np.testing.assert_array_equal(w, w.T)


# -- forward model


def test_forward_of_zero_rho(rng):
    mask, x, _, _ = random_instance(rng, n=8, J=2)
    with create_environment(2) as env:
        op = make_op(env, 8, 2, mask)
        y = host(op.forward(unknowns(op, (np.zeros_like(x[0]), x[1])), op.new_data()))
        assert np.all(y == 0)


def test_forward_single_uniform_coil_full_mask(rng):
    n, ng = 8, 16
    grid = ReconGrid(n)
    rho = crand(rng, ng, ng, dtype=np.complex128)
    chat = apply_weight(np.ones((1, ng, ng), np.complex128), WeightParams())
    with create_environment(1) as env:
        op = make_op(env, n, 1, np.ones((ng, ng)), "double")
        y = host(op.forward(unknowns(op, (rho, chat)), op.new_data())).reshape(ng, ng)
    np.testing.assert_allclose(y, np.fft.fft2(grid.fov_mask() * rho), atol=1e-9)


def test_forward_matches_simulation(rng):
    n, J = 16, 4
    grid = ReconGrid(n)
    img = make_phantom(PhantomSpec(n))
    coils = make_coils(CoilSpec(J), grid)
    mask = make_mask(grid.ng, 0.3, 4, 5)
    y = simulate_acquisition(img, coils, mask, grid)
    rho = grid.embed(img.astype(np.complex64))
    chat = apply_weight(coils.astype(np.complex128), WeightParams())
    with create_environment(2) as env:
        op = make_op(env, n, J, mask)
        f = host(op.forward(unknowns(op, (rho, chat)), op.new_data())).reshape(y.shape)
    assert np.linalg.norm(f - y) <= 1e-5 * np.linalg.norm(y)


@pytest.mark.parametrize("g", [1, 2, 4])
def test_operator_counters(g, rng):
    mask, x, dx, dy = random_instance(rng, n=8, J=4)
    with create_environment(g) as env:
        op = make_op(env, 8, 4, mask)
        op.forward(unknowns(op, x), op.new_data())
        op.derivative(unknowns(op, dx), op.new_data())
        dyv = op.scatter_data(dy)
        op.adjoint(dyv, op.new_unknowns())
        op.psf_convolve(dyv, op.new_data())
        c = op.counters
        assert (c["F"].fft_count, c["DF"].fft_count, c["DFH"].fft_count) == (2, 2, 2)
        assert c["DFH"].channel_sum_count == 1
        assert c["DFH"].allreduce_count == 1
        assert c["F"].allreduce_count == c["DF"].allreduce_count == 0
        assert c["PSF"].fft_count == 2


# -- derivative and adjoint


def test_derivative_of_zero(rng):
    mask, x, _, _ = random_instance(rng, n=8, J=2)
    with create_environment(2) as env:
        op = make_op(env, 8, 2, mask)
        op.forward(unknowns(op, x), op.new_data())
        zero = (np.zeros_like(x[0]), np.zeros_like(x[1]))
        assert np.all(host(op.derivative(unknowns(op, zero), op.new_data())) == 0)


def test_derivative_is_linear(rng):
    mask, x, dx, _ = random_instance(rng, n=8, J=3)
    a = np.complex64(0.7 - 0.2j)
    with create_environment(3) as env:
        op = make_op(env, 8, 3, mask)
        op.forward(unknowns(op, x), op.new_data())
        d1 = host(op.derivative(unknowns(op, dx), op.new_data()))
        d2 = host(op.derivative(unknowns(op, (a * dx[0], a * dx[1])), op.new_data()))
    assert np.linalg.norm(d2 - a * d1) <= 1e-5 * np.linalg.norm(d2)


@pytest.mark.parametrize("precision, tol", [("single", 1e-2), ("double", 1e-10)])
def test_bilinear_expansion(precision, tol, rng):
    """F(x + e dx) = F(x) + e DF(dx) + e^2 F(dx) holds exactly because F is bilinear."""
    dt = PREC[precision]
    mask, x, dx, _ = random_instance(rng, n=16, J=4, dtype=dt)
    eps = 1e-3
    xe = (x[0] + eps * dx[0], x[1] + eps * dx[1])
    with create_environment(2) as env:
        op = make_op(env, 16, 4, mask, precision)
        fxe = host(op.forward(unknowns(op, xe), op.new_data()))
        fdx = host(op.forward(unknowns(op, dx), op.new_data()))
        fx = host(op.forward(unknowns(op, x), op.new_data()))
        dfx = host(op.derivative(unknowns(op, dx), op.new_data()))
    lin = fx + eps * dfx
    # first-order check and the exact bilinear identity
    assert np.linalg.norm(fxe - lin) <= 1e-2 * np.linalg.norm(fxe - fx)
    exact = lin + eps**2 * fdx
    assert np.linalg.norm(fxe - exact) <= tol * np.linalg.norm(fxe - fx)


@pytest.mark.parametrize("g", [1, 2, 4])
@pytest.mark.parametrize("precision, tol", [("single", 1e-3), ("double", 1e-10)])
def test_adjoint_identity(g, precision, tol, rng):
    dt = PREC[precision]
    mask, x, dx, dy = random_instance(rng, n=16, J=4, dtype=dt)
    with create_environment(g) as env:
        op = make_op(env, 16, 4, mask, precision)
        op.linearize(unknowns(op, x))
        lhs_v = host(op.derivative(unknowns(op, dx), op.new_data()))
        rho_a, chat_a = op.adjoint(op.scatter_data(dy), op.new_unknowns()).to_host()
    lhs = inner(lhs_v, dy)
    rhs = inner(dx[0], rho_a) + inner(dx[1], chat_a)
    norm = np.sqrt(np.linalg.norm(dx[0]) ** 2 + np.linalg.norm(dx[1]) ** 2) * np.linalg.norm(dy)
    assert abs(lhs - rhs) <= tol * norm


def test_adjoint_of_zero(rng):
    mask, x, _, dy = random_instance(rng, n=8, J=2)
    with create_environment(2) as env:
        op = make_op(env, 8, 2, mask)
        op.linearize(unknowns(op, x))
        rho, chat = op.adjoint(op.scatter_data(np.zeros_like(dy)), op.new_unknowns()).to_host()
    assert np.all(rho == 0) and np.all(chat == 0)


def test_adjoint_rho_identical_on_every_device(rng):
    mask, x, _, dy = random_instance(rng, n=8, J=5)
    with create_environment(3) as env:
        op = make_op(env, 8, 5, mask)
        op.linearize(unknowns(op, x))
        out = op.adjoint(op.scatter_data(dy), op.new_unknowns())
        reps = [out.rho.local_range(r) for r in env.ranks]
        for r in reps[1:]:
            np.testing.assert_array_equal(r, reps[0])


def test_derivative_requires_linearization(rng):
    mask, _, dx, _ = random_instance(rng, n=8, J=1)
    with create_environment(1) as env:
        op = make_op(env, 8, 1, mask)
        with pytest.raises(UsageError):
            op.derivative(unknowns(op, dx), op.new_data())


# -- point spread function


def test_psf_full_mask_is_identity(rng):
    z = crand(rng, 2, 16, 16)
    with create_environment(2) as env:
        op = make_op(env, 8, 2, np.ones((16, 16)))
        out = host(op.psf_convolve(op.scatter_data(z), op.new_data())).reshape(z.shape)
    np.testing.assert_allclose(out, z, atol=1e-5)


def test_psf_of_delta_is_ifft_of_mask():
    mask = make_mask(16, 0.5, 2, 3)
    z = np.zeros((1, 16, 16), np.complex64)
    z[0, 0, 0] = 1
    with create_environment(1) as env:
        op = make_op(env, 8, 1, mask)
        out = host(op.psf_convolve(op.scatter_data(z), op.new_data())).reshape(16, 16)
    np.testing.assert_allclose(out, np.fft.ifft2(mask), atol=1e-6)


def test_psf_is_image_block_of_normal_operator(rng):
    """With c = 1 and dchat = 0, DF^H DF acts on drho as ng^2 M psf(M drho)."""
    n, ng = 8, 16
    grid = ReconGrid(n)
    mask = make_mask(ng, 0.5, 2, 4)
    M = grid.fov_mask()
    chat = apply_weight(np.ones((1, ng, ng), np.complex128), WeightParams())
    drho = grid.embed(crand(rng, n, n, dtype=np.complex128))
    with create_environment(1) as env:
        op = make_op(env, n, 1, mask, "double")
        op.linearize(unknowns(op, (np.ones((ng, ng)), chat)))
        dy = op.derivative(unknowns(op, (drho, np.zeros((1, ng, ng)))), op.new_data())
        rho_n, _ = op.adjoint(dy, op.new_unknowns()).to_host()
        psf = host(op.psf_convolve(op.scatter_data((M * drho)[None]), op.new_data())).reshape(ng, ng)
    np.testing.assert_allclose(rho_n, ng * ng * M * psf, rtol=1e-9, atol=1e-9)


# -- normal operator and CG


def _normal_pair(env, rng, alpha, precision="double"):
    dt = PREC[precision]
    mask, x, dx, _ = random_instance(rng, n=8, J=3, dtype=dt)
    dx2 = (crand(rng, *dx[0].shape, dtype=dt), crand(rng, *dx[1].shape, dtype=dt))
    op = make_op(env, 8, 3, mask, precision)
    op.linearize(unknowns(op, x))
    N = op.normal(alpha)
    a, b = unknowns(op, dx), unknowns(op, dx2)
    return op, N, a, b


def test_normal_operator_self_adjoint_and_positive(rng):
    alpha = 0.1
    with create_environment(2) as env:
        op, N, a, b = _normal_pair(env, rng, alpha)
        sp = UnknownsSpace()
        na, nb = N(a), N(b)
        lhs, rhs = sp.dot(na, b), sp.dot(a, nb)
        assert abs(lhs - rhs) <= 1e-3 * abs(lhs)
        q = sp.dot(na, a)
        assert abs(q.imag) <= 1e-6 * abs(q)
        assert q.real >= alpha * sp.dot(a, a).real * (1 - 1e-4)


def test_normal_operator_collapses_to_alpha_identity(rng):
    """At x = 0 the derivative vanishes, so N = alpha I."""
    ng, J, alpha = 16, 2, 0.37
    with create_environment(2) as env:
        op = make_op(env, 8, J, make_mask(ng, 0.5, 2, 1), "double")
        op.linearize(unknowns(op, (np.zeros((ng, ng)), np.zeros((J, ng, ng)))))
        dx = (crand(rng, ng, ng, dtype=np.complex128), crand(rng, J, ng, ng, dtype=np.complex128))
        v = op.normal(alpha)(unknowns(op, dx)).to_host()
    np.testing.assert_allclose(v[0], alpha * dx[0], rtol=1e-12)
    np.testing.assert_allclose(v[1], alpha * dx[1], rtol=1e-12)


def spd_system(rng, dim, alpha=0.5):
    A = crand(rng, dim, dim, dtype=np.complex128)
    return A.conj().T @ A + alpha * np.eye(dim)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 16), st.integers(0, 2**31))
def test_cg_vs_dense_solve(dim, seed):
    rng = np.random.default_rng(seed)
    H = spd_system(rng, dim)
    b = crand(rng, dim, dtype=np.complex128)
    res = cg_solve(lambda v: H @ v, b, CgParams(max_iters=400, tol=1e-10))
    ref = np.linalg.solve(H, b)
    assert np.linalg.norm(res.x - ref) <= 1e-4 * np.linalg.norm(ref)
    assert not res.breakdown


def test_cg_zero_rhs():
    res = cg_solve(lambda v: 2 * v, np.zeros(5, complex), CgParams())
    assert res.iterations == 0 and np.all(res.x == 0)


def test_cg_scaled_identity_in_one_iteration(rng):
    b = crand(rng, 7, dtype=np.complex128)
    res = cg_solve(lambda v: 3.0 * v, b, CgParams(tol=1e-12))
    assert res.iterations == 1
    np.testing.assert_allclose(res.x, b / 3.0, rtol=1e-12)


def test_cg_flags_breakdown():
    res = cg_solve(lambda v: -v, np.ones(3, complex), CgParams())
    assert res.breakdown and res.iterations == 0


def test_cg_on_distributed_unknowns_matches_dense(rng):
    alpha = 0.05
    with create_environment(2) as env:
        op, N, a, _ = _normal_pair(env, rng, alpha)
        res = cg_solve(N, a, CgParams(max_iters=200, tol=1e-10), UnknownsSpace())
        check = N(res.x)
        sp = UnknownsSpace()
        sp.axpy(-1.0, a, check)
        assert np.sqrt(sp.dot(check, check).real) <= 1e-8 * np.sqrt(sp.dot(a, a).real)


def test_array_space_ops():
    x = np.ones(3, complex)
    assert ArraySpace.dot(x, x) == 3
    assert np.all(ArraySpace.axpy(2, x, ArraySpace.copy(x)) == 3)


# -- Gauss-Newton


def test_newton_fixed_point(rng):
    mask, x, _, _ = random_instance(rng, n=8, J=2, dtype=np.complex128)
    with create_environment(2) as env:
        op = make_op(env, 8, 2, mask, "double")
        xv = unknowns(op, x)
        y = op.forward(xv, op.new_data())
        x_next, info = gauss_newton_step(op, y, xv, unknowns(op, x), 0.1, CgParams())
        assert info.cg_iterations == 0
        rho, chat = x_next.to_host()
    np.testing.assert_array_equal(rho, x[0])
    np.testing.assert_array_equal(chat, x[1])


def test_newton_step_counters(rng):
    mask, x, _, dy = random_instance(rng, n=8, J=3)
    with create_environment(3) as env:
        op = make_op(env, 8, 3, mask)
        y = op.scatter_data(dy)
        _, info = gauss_newton_step(op, y, unknowns(op, x), unknowns(op, x), 0.5, CgParams(max_iters=5, tol=1e-12))
    assert not info.cg_breakdown
    k = info.cg_iterations
    # F + DF^H for the right-hand side, then DF + DF^H per CG iteration
    assert info.counters.fft_count == 2 + 2 + 4 * k
    assert info.counters.allreduce_count == 1 + k
    assert info.counters.channel_sum_count == 1 + k


def _phantom_problem(n, J, density, seed=1, uniform=False, motion=()):
    grid = ReconGrid(n)
    spec = PhantomSpec(n, motion=motion)
    coils = make_coils(CoilSpec(J, uniform=uniform), grid)
    return grid, spec, coils


def test_fully_sampled_single_coil_recovers_phantom():
    n = 32
    grid, spec, coils = _phantom_problem(n, 1, 1.0, uniform=True)
    img = make_phantom(spec)
    mask = np.ones((grid.ng, grid.ng), np.float32)
    y = simulate_acquisition(img, coils, mask, grid)
    with create_environment(1) as env:
        res = reconstruct_frame(env, ReconProblem(grid, y, mask))
    assert relative_error(res.image, quality_reference(img, coils, grid)) <= 5e-2


def test_divergence_guard(monkeypatch):
    n = 16
    grid, spec, coils = _phantom_problem(n, 2, 0.5)
    mask = make_mask(grid.ng, 0.5, 2, 0)
    y = simulate_acquisition(make_phantom(spec), coils, mask, grid)
    import multidev.nlinv as nl

    real_step = nl.gauss_newton_step

    def exploding(op, y, x, x_ref, alpha, cg):
        x_next, info = real_step(op, y, x, x_ref, alpha, cg)
        UnknownsSpace().scale(1e6, x_next)
        return x_next, info

    monkeypatch.setattr(nl, "gauss_newton_step", exploding)
    with create_environment(1) as env:
        with pytest.raises(ReconstructionDiverged) as info:
            reconstruct_frame(env, ReconProblem(grid, y, mask))
    assert len(info.value.residuals) == 2


def test_problem_validation():
    grid = ReconGrid(8)
    y = np.zeros((2, 16, 16), np.complex64)
    with pytest.raises(UsageError):
        ReconProblem(grid, y[0], np.ones((16, 16)))
    with pytest.raises(UsageError):
        ReconProblem(grid, y, np.zeros((16, 16)))
    with pytest.raises(UsageError):
        ReconProblem(grid, y, np.ones((16, 16)), precision="half")
    with pytest.raises(UsageError):
        RegSchedule(q=1.5)


def test_series_initialization_changes_result():
    n, J = 16, 4
    motion = ((0.0, 0.0), (0.05, 0.0))
    grid, spec, coils = _phantom_problem(n, J, 0.4, motion=motion)
    frames = []
    for f in range(2):
        mask = make_mask(grid.ng, 0.4, 2, 10 + f)
        frames.append((simulate_acquisition(make_phantom(spec, f), coils, mask, grid), mask))
    kw = dict(reg=RegSchedule(newton_steps=3))
    with create_environment(2) as env:
        chained = reconstruct_series(env, frames, grid, **kw)
        alone = reconstruct_series(env, frames[1:], grid, **kw)
    # same data scale is needed for a fair comparison of the images
    a = chained[1].image / np.linalg.norm(chained[1].image)
    b = alone[0].image / np.linalg.norm(alone[0].image)
    assert np.linalg.norm(a - b) > 1e-3


def test_unknowns_round_trip(rng):
    rho, chat = crand(rng, 8, 8), crand(rng, 3, 8, 8)
    with create_environment(2) as env:
        x = Unknowns.from_host(env, rho, chat, np.complex64)
        r, c = x.to_host()
        np.testing.assert_array_equal(r, rho)
        np.testing.assert_array_equal(c, chat)
        y = x.like()
        y.assign(x).wait()
        np.testing.assert_array_equal(y.to_host()[1], chat)


# -- channel compression


def test_compression_full_rank_keeps_energy(rng):
    data = crand(rng, 6, 16, 16)
    cc = compress_channels(data, 6)
    assert cc.energy_fraction >= 1 - 1e-5
    assert np.linalg.norm(cc.data) == pytest.approx(np.linalg.norm(data), rel=1e-5)


def test_compression_of_duplicated_channels(rng):
    a, b = crand(rng, 16, 16), crand(rng, 16, 16)
    data = np.stack([a, b, a, b])
    cc = compress_channels(data, 2)
    assert cc.energy_fraction >= 1 - 1e-5


def test_compression_energy_monotone(rng):
    data = crand(rng, 8, 8, 8)
    fr = [compress_channels(data, k).energy_fraction for k in range(1, 9)]
    assert all(b >= a - 1e-12 for a, b in zip(fr, fr[1:]))


def test_compression_basis_is_orthonormal(rng):
    cc = compress_channels(crand(rng, 5, 8, 8), 3)
    np.testing.assert_allclose(cc.basis.conj().T @ cc.basis, np.eye(3), atol=1e-10)


def test_compression_target_range(rng):
    with pytest.raises(UsageError):
        compress_channels(crand(rng, 3, 4, 4), 4)
