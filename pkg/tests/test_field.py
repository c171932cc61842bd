import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from freebound.field import (
    VectorField,
    boundary_mean,
    gradient,
    mean_oscillation,
    mean_value,
    sample,
    scalar_gradient,
)
from freebound.mesh import Box, HalfBox, NodeClass, ball_elements, build_mesh

matrices = arrays(np.float64, (3, 2), elements=st.floats(-5, 5))


def test_constant_field_has_zero_gradient(unit_square):
    u = sample(unit_square, lambda x: np.tile([0.6, 0.8], (len(x), 1)))
    assert np.all(gradient(u) == 0)
    assert np.allclose(mean_value(u, np.arange(unit_square.num_elements)), [0.6, 0.8])


@settings(max_examples=30, deadline=None)
@given(A=matrices, b=arrays(np.float64, 3, elements=st.floats(-5, 5)))
def test_affine_reproduction(unit_square, A, b):
    u = sample(unit_square, lambda x: x @ A.T + b)
    assert np.allclose(gradient(u), A, atol=1e-12 * (1 + np.abs(A).max()))


def test_affine_reproduction_3d():
    m = build_mesh(Box((0, 0, 0), (1, 1, 1)), 0.25)
    A = np.arange(6.0).reshape(2, 3)
    assert np.allclose(gradient(sample(m, lambda x: x @ A.T)), A, atol=1e-12)


def test_smooth_gradient_converges():
    errs = []
    for h in (1 / 8, 1 / 16, 1 / 32):
        m = build_mesh(Box((0, 0), (1, 1)), h)
        u = sample(m, lambda x: np.stack([np.sin(x[:, 0]), np.cos(x[:, 1])], axis=1))
        b = m.barycenters
        exact = np.zeros((m.num_elements, 2, 2))
        exact[:, 0, 0] = np.cos(b[:, 0])
        exact[:, 1, 1] = -np.sin(b[:, 1])
        errs.append(np.abs(gradient(u) - exact).max())
    assert errs[1] < 0.6 * errs[0] and errs[2] < 0.6 * errs[1]
    assert errs[0] < 1 / 8


def test_mean_value_of_linear_field_on_symmetric_ball():
    m = build_mesh(Box((0, 0), (1, 1)), 1 / 32)
    u = sample(m, lambda x: np.stack([x[:, 0], 2 * x[:, 1] - x[:, 0]], axis=1))
    x0 = np.array([0.5, 0.5])
    mv = mean_value(u, ball_elements(m, x0, 0.25))
    assert np.allclose(mv, [0.5, 0.5], atol=m.h)


def test_mean_value_matches_direct_sum(rng):
    m = build_mesh(Box((0, 0), (1, 1)), 0.5)
    u = VectorField(m, rng.normal(size=(m.num_nodes, 3)))
    el = np.arange(m.num_elements)
    num, den = np.zeros(3), 0.0
    for e, simp in enumerate(m.simplices):
        x = m.vertices[simp]
        vol = 0.5 * abs((x[1, 0] - x[0, 0]) * (x[2, 1] - x[0, 1]) - (x[2, 0] - x[0, 0]) * (x[1, 1] - x[0, 1]))
        num += vol * u.values[simp].mean(axis=0)
        den += vol
    assert np.allclose(mean_value(u, el), num / den, rtol=1e-14, atol=1e-15)
    with pytest.raises(ValueError):
        mean_value(u, np.array([], dtype=int))


def test_boundary_mean_examples(rng):
    m = build_mesh(HalfBox((0, 0), (1, 1)), 1 / 16)
    bottom = np.flatnonzero(m.face_labels == "x2-")
    c = sample(m, lambda x: np.tile([0.0, 1.0], (len(x), 1)))
    assert np.allclose(boundary_mean(c, bottom), [0.0, 1.0])
    lin = sample(m, lambda x: np.stack([x[:, 0], 0 * x[:, 0]], axis=1))
    assert boundary_mean(lin, bottom)[0] == pytest.approx(0.5, abs=m.h)
    # random field against a per-face midpoint rule written out longhand
    r = VectorField(m, rng.normal(size=(m.num_nodes, 2)))
    acc, length = np.zeros(2), 0.0
    for f in bottom:
        a, b = m.boundary_faces[f]
        ell = np.linalg.norm(m.vertices[a] - m.vertices[b])
        acc += ell * 0.5 * (r.values[a] + r.values[b])
        length += ell
    assert np.allclose(boundary_mean(r, bottom), acc / length, rtol=1e-13)


def test_mean_oscillation_translation_invariant(unit_square, rng):
    u = VectorField(unit_square, rng.normal(size=(unit_square.num_nodes, 2)))
    el = np.arange(unit_square.num_elements)
    a = mean_oscillation(u, el)
    b = mean_oscillation(u.with_values(u.values + [3.0, -7.0]), el)
    assert a == pytest.approx(b, rel=1e-12)


def test_vector_field_validation(unit_square):
    with pytest.raises(ValueError):
        VectorField(unit_square, np.zeros((unit_square.num_nodes + 1, 2)))
    with pytest.raises(ValueError):
        VectorField(unit_square, np.full((unit_square.num_nodes, 2), np.nan))
    u = VectorField(unit_square, np.zeros(unit_square.num_nodes))
    assert u.N == 1
    with pytest.raises(ValueError):
        u.values[0] = 1.0


def test_scalar_gradient_matches_component(unit_square, rng):
    vals = rng.normal(size=(unit_square.num_nodes, 2))
    u = VectorField(unit_square, vals)
    assert np.allclose(scalar_gradient(unit_square, vals[:, 1]), gradient(u)[:, 1, :])
