import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from freebound.energy import p_energy
from freebound.field import VectorField, sample
from freebound.mesh import Box, HalfBall, HalfBox, NodeClass, build_mesh
from freebound.reflection import (
    double_mesh,
    even_reflect,
    gradient_identity_check,
    inversion,
    inversion_jacobian,
    reflect_field,
    reflected_residual_bound,
)

nonzero = arrays(np.float64, 3, elements=st.floats(-3, 3)).filter(lambda q: np.linalg.norm(q) > 1e-2)


def smooth_unit(x):
    th = 0.7 * np.sin(2 * x[:, 0]) + 0.4 * x[:, 1]
    return np.stack([np.cos(th), np.sin(th)], axis=1)


def smooth_nonunit(x):
    # admissible: |u| = 1 on the flat plane {x_2 = 0}, free to vary above it
    return smooth_unit(x) * (1.0 + 0.6 * x[:, 1:2] ** 2 + 0.4 * x[:, :1] * x[:, 1:2])


def test_inversion_examples():
    assert np.allclose(inversion([2.0, 0.0]), [0.5, 0.0])
    q = np.array([0.6, 0.8])
    assert np.allclose(inversion(q), q)
    assert np.allclose(inversion_jacobian([1.0, 0.0]), np.diag([-1.0, 1.0]))
    with pytest.raises(ValueError):
        inversion([0.0, 0.0])
    with pytest.raises(ValueError):
        inversion_jacobian([0.0, 0.0, 0.0])


@settings(max_examples=100, deadline=None)
@given(q=nonzero, w=arrays(np.float64, 3, elements=st.floats(-3, 3)))
def test_inversion_algebra(q, w):
    S = inversion_jacobian(q)
    n2 = q @ q
    assert np.allclose(inversion(inversion(q)), q, rtol=1e-12, atol=1e-12)
    assert np.allclose(S, S.T)
    assert np.linalg.norm(S @ w) == pytest.approx(np.linalg.norm(w) / n2, rel=1e-12, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(q=nonzero, w=arrays(np.float64, 3, elements=st.floats(-3, 3)))
def test_jacobian_on_sphere_is_tangent_minus_normal(q, w):
    q = q / np.linalg.norm(q)
    normal = (q @ w) * q
    tangent = w - normal
    assert np.allclose(inversion_jacobian(q) @ w, tangent - normal, atol=1e-12)


def test_jacobian_matches_finite_differences(rng):
    q = rng.normal(size=4)
    step = 1e-6
    fd = np.stack([(inversion(q + step * e) - inversion(q - step * e)) / (2 * step) for e in np.eye(4)], axis=1)
    assert np.allclose(inversion_jacobian(q), fd, atol=1e-8)


def test_double_mesh_structure(half_square):
    doubled, image = double_mesh(half_square)
    nv = half_square.num_nodes
    on_plane = np.sum(np.abs(half_square.vertices[:, 1]) < 1e-12)
    assert doubled.num_nodes == 2 * nv - on_plane
    assert doubled.num_elements == 2 * half_square.num_elements
    assert np.all(doubled.signed_volumes > 0)
    assert doubled.total_volume == pytest.approx(2 * half_square.total_volume)
    mirrored = doubled.vertices[nv:]
    assert np.allclose(mirrored[:, 0], half_square.vertices[image[nv:], 0])
    assert np.allclose(mirrored[:, 1], -half_square.vertices[image[nv:], 1])
    assert np.all(doubled.node_class[~doubled.boundary_nodes] == NodeClass.INTERIOR)


def test_double_mesh_needs_flat_free_boundary(unit_square):
    with pytest.raises(ValueError):
        double_mesh(unit_square)


def test_even_reflection(half_square):
    u = sample(half_square, smooth_nonunit)
    ut = even_reflect(u)
    # node (a, -t) carries the value of (a, t)
    x = ut.mesh.vertices
    for a in np.flatnonzero(x[:, 1] < 0)[:10]:
        b = np.flatnonzero(np.all(np.isclose(half_square.vertices, [x[a, 0], -x[a, 1]]), axis=1))[0]
        assert np.array_equal(ut.values[a], u.values[b])
    for p in (2.0, 3.0, 4.5):
        assert p_energy(ut, p).total == pytest.approx(2 * p_energy(u, p).total, rel=1e-13)
    c = sample(half_square, lambda x: np.tile([0.6, 0.8], (len(x), 1)))
    assert np.all(even_reflect(c).values == [0.6, 0.8])


def test_even_reflection_3d_half_ball():
    m = build_mesh(HalfBall(1.0, 3), 0.3)
    u = sample(m, lambda x: np.stack([x[:, 0], x[:, 2], 1 + x[:, 1]], axis=1))
    assert p_energy(even_reflect(u), 3).total == pytest.approx(2 * p_energy(u, 3).total, rel=1e-12)


def test_reflect_constant_unit_field(half_square):
    c = sample(half_square, lambda x: np.tile([0.6, 0.8], (len(x), 1)))
    refl = reflect_field(c, 3.0)
    assert np.allclose(refl.v.values, [0.6, 0.8])
    assert np.allclose(refl.m, 1.0)
    assert gradient_identity_check(refl) == 0.0
    bound = reflected_residual_bound(refl, 3.0)
    assert np.all(bound.ratios == 0)


def test_reflect_weight_and_norms(half_square):
    u = sample(half_square, lambda x: 0.8 * smooth_unit(x))
    refl = reflect_field(u, 3.0)
    low = refl.lower_nodes
    assert np.allclose(refl.m[low], 0.64)
    assert np.allclose(refl.m[~low], 1.0)
    u2 = sample(half_square, smooth_nonunit)
    r2 = reflect_field(u2, 4.0)
    low = r2.lower_nodes
    assert np.allclose(np.linalg.norm(r2.v.values[low], axis=1), 1 / np.linalg.norm(r2.u_tilde.values[low], axis=1))
    assert np.allclose(r2.inverse_weight * r2.m, 1.0)
    with pytest.raises(ValueError):
        reflect_field(sample(half_square, lambda x: 0.4 * smooth_unit(x)), 3.0)


def test_gradient_identity_on_unit_field():
    # with |ũ| = 1 everywhere Σ is an isometry, so |∇v| = |∇ũ| up to O(h)
    devs = []
    for h in (1 / 8, 1 / 16, 1 / 32):
        m = build_mesh(HalfBox((-0.5, 0), (0.5, 0.5)), h)
        devs.append(gradient_identity_check(reflect_field(sample(m, smooth_unit), 3.0)))
    assert devs[-1] < 0.05
    assert devs[2] < devs[1] < devs[0]


@pytest.mark.parametrize("fn", [smooth_unit, smooth_nonunit])
def test_gradient_identity_refinement(fn):
    # deviation is the max over lower elements of | |∇v| - |∇ũ|/|ũ|² | / (|∇ũ|/|ũ|²)
    devs = []
    for h in (1 / 16, 1 / 32):
        m = build_mesh(HalfBox((-0.5, 0), (0.5, 0.5)), h)
        devs.append(gradient_identity_check(reflect_field(sample(m, fn), 3.0)))
    assert devs[0] / devs[1] >= 1.5


def test_non_admissible_trace_breaks_identity():
    # |u| != 1 on the plane: σ(ũ) jumps across it and the deviation grows under refinement
    bad = lambda x: smooth_unit(x) * (1.0 + 0.1 * (x[:, :1] + 0.5))
    devs = []
    for h in (1 / 16, 1 / 32):
        m = build_mesh(HalfBox((-0.5, 0), (0.5, 0.5)), h)
        devs.append(gradient_identity_check(reflect_field(sample(m, bad), 3.0)))
    assert devs[1] > devs[0] > 0.5
