import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dcdc.chains import (DomainBox, DomainError, LogisticDataset, SampledMap, Uniform, UFunction, build_chain,
                         constant_u, identity_chain, quad_sgd_1d, regulated_walk, sample_transition_pair,
                         tandem_fluid)
from dcdc.rng import Streams


def fixed_map(chain, **draws) -> SampledMap:
    return SampledMap(chain, {k: np.atleast_1d(np.asarray(v, dtype=float)) for k, v in draws.items()})


class TestDomainBox:
    def test_rejects_inverted_bounds(self):
        with pytest.raises(ValueError):
            DomainBox((0.0, 1.0), (1.0, 1.0))
        with pytest.raises(ValueError):
            DomainBox((0.0,), (1.0, 2.0))

    def test_dim_and_grid(self):
        box = DomainBox((0.0, -1.0), (1.0, 1.0))
        assert box.dim == 2
        g = box.grid(5)
        assert g.shape == (25, 2)
        assert np.allclose(g.min(axis=0), box.lo) and np.allclose(g.max(axis=0), box.hi)

    def test_check_reports_outside_point(self):
        box = DomainBox((0.0,), (1.0,))
        with pytest.raises(DomainError, match="outside"):
            box.check(np.array([[0.5], [1.5]]))

    @given(st.integers(0, 2**31))
    def test_uniform_inside(self, seed):
        box = DomainBox((-3.0, 0.0), (3.0, 0.5))
        pts = box.uniform(np.random.default_rng(seed), 200)
        assert box.contains(pts).all()


class TestUniformParse:
    def test_forms(self):
        assert Uniform.parse({"uniform": [0, 1]}) == Uniform(0.0, 1.0)
        assert Uniform.parse([0, 2]) == Uniform(0.0, 2.0)
        assert Uniform.parse(0.3) == Uniform(0.3, 0.3)
        with pytest.raises(ValueError):
            Uniform.parse("normal")


class TestApply:
    def test_quad_linear_map(self):
        ch = quad_sgd_1d(0.1)
        out = fixed_map(ch, z=0.0).apply(np.array([0.5]))
        assert out[0, 0] == pytest.approx(0.45)

    def test_tandem_hand_trace_from_empty(self):
        ch = tandem_fluid()
        m = fixed_map(ch, t=0.1, z=0.05)
        y, d = m.apply_with_lipschitz(np.array([0.0, 0.0]))
        assert y[0] == pytest.approx([0.05, 0.0])
        assert d[0] == 0.0

    def test_walk_clip(self):
        ch = regulated_walk()
        assert fixed_map(ch, z=0.3).apply(np.array([0.45]))[0, 0] == pytest.approx(0.5)
        assert fixed_map(ch, z=-0.3).apply(np.array([-0.45]))[0, 0] == pytest.approx(-0.5)

    def test_rejects_outside_point(self):
        ch = quad_sgd_1d()
        m = ch.sample_maps(np.random.default_rng(0), 3)
        with pytest.raises(DomainError):
            m.apply(np.array([0.7]))
        with pytest.raises(DomainError):
            m.lipschitz(np.array([[0.1], [0.2]]))  # wrong number of paired points

    def test_paired_and_broadcast_agree(self, rng):
        ch = tandem_fluid()
        m = ch.sample_maps(rng, 50)
        x = np.array([0.3, 0.6])
        assert np.array_equal(m.apply(x), m.apply(np.tile(x, (50, 1))))


class TestLipschitzValues:
    def test_quad_constant(self, rng):
        ch = quad_sgd_1d(0.1)
        m = ch.sample_maps(rng, 100)
        assert np.all(m.lipschitz(ch.domain.uniform(rng, 100)) == pytest.approx(0.9))

    def test_logistic_at_origin(self, logistic_chain, rng):
        d = logistic_chain.sample_maps(rng, 5000).lipschitz(np.zeros(2))
        assert np.all(d > 0) and np.all(d <= 0.999 + 1e-12)
        assert logistic_chain.df_bound() == pytest.approx(0.999)

    def test_logistic_matches_jacobian_norm(self, logistic_chain, rng):
        m = logistic_chain.sample_maps(rng, 200)
        b = logistic_chain.domain.uniform(rng, 200)
        J = logistic_chain.jacobian(m.draws, b)
        assert np.allclose(m.lipschitz(b), np.linalg.norm(J, ord=2, axis=(1, 2)), rtol=1e-12)

    def test_tandem_is_indicator(self, rng):
        ch = tandem_fluid()
        x = ch.domain.uniform(rng, 10_000)
        d = ch.sample_maps(rng, 10_000).lipschitz(x)
        assert set(np.unique(d)) <= {0.0, 1.0}


@pytest.mark.parametrize("name", ["quad1d", "logistic", "tandem", "walk"])
def test_absorbing(all_chains, name, rng):
    ch = all_chains[name]
    n = 100_000
    x = ch.domain.uniform(rng, n)
    # stress the faces: half the points are pushed onto the boundary
    face = rng.integers(0, ch.domain.dim, n // 2)
    side = rng.integers(0, 2, n // 2)
    x[np.arange(n // 2), face] = np.where(side, ch.domain.hi[face], ch.domain.lo[face])
    y, d = ch.sample_maps(rng, n).apply_with_lipschitz(x)
    assert ch.domain.contains(y, tol=0.0).all()
    assert np.all(d >= 0)


def test_logistic_box_absorbs_without_clipping(logistic_chain, rng):
    """The box is absorbing by the contraction argument, not because of the final clip."""
    ch = logistic_chain
    n = 50_000
    b = ch.domain.uniform(rng, n)
    b[: n // 2] = np.sign(b[: n // 2]) * ch.radius
    m = ch.sample_maps(rng, n)
    xb, s = ch._batch_terms(m.draws, b)
    yb = ch.data.y[m.draws["batch"]]
    raw = b * ch.shrink + (ch.alpha / ch.beta) * np.einsum("nb,nbk->nk", yb - s, xb)
    assert np.abs(raw).max() <= ch.radius


def _excluded(name, ch, draws, x):
    if name == "tandem":
        return np.abs(draws["t"] - (x[:, 0] + x[:, 1]) / ch.r2) < 1e-3
    if name == "walk":
        return np.abs(np.abs(x[:, 0] + draws["z"]) - 0.5) < 1e-3
    return np.zeros(len(x), dtype=bool)


@pytest.mark.parametrize("name", ["quad1d", "logistic", "tandem", "walk"])
def test_lipschitz_consistency(all_chains, name, rng):
    ch = all_chains[name]
    n, r, tol = 1000, 1e-4, 1e-3
    x = ch.domain.uniform(rng, n)
    m = ch.sample_maps(rng, n)
    keep = ~_excluded(name, ch, m.draws, x)
    assert keep.mean() > 0.9

    def near(x):
        v = rng.normal(size=x.shape)
        v *= r * rng.random((len(x), 1)) / np.linalg.norm(v, axis=1, keepdims=True)
        return np.clip(x + v, ch.domain.lo, ch.domain.hi)

    x1, x2 = near(x), near(x)
    lhs = ch.distance(m.apply(x1), m.apply(x2))
    rhs = (m.lipschitz(x) + tol) * ch.distance(x1, x2)
    assert np.all(lhs[keep] <= rhs[keep] + 1e-15)


def test_tandem_df_not_euclidean_lipschitz():
    """The indicator is the l1 Lipschitz constant; in l2 the map stretches by up to sqrt 2."""
    ch = tandem_fluid()
    m = fixed_map(ch, t=0.15, z=0.05)
    x = np.array([[0.1, 0.5]])
    h = 1e-6
    pts = np.array([[0.1, 0.5], [0.1 + h, 0.5 + h]])
    y = np.concatenate([m.apply(p) for p in pts])
    assert m.lipschitz(x[0])[0] == 1.0
    assert np.linalg.norm(y[1] - y[0]) / np.linalg.norm(pts[1] - pts[0]) == pytest.approx(np.sqrt(2), rel=1e-6)
    assert ch.distance(y[1], y[0])[0] <= ch.distance(pts[1], pts[0])[0] * (1 + 1e-9)


class TestSampleTransitionPair:
    def test_reference_mode_uniform(self):
        ch = regulated_walk()
        x0, f1, fm = sample_transition_pair(ch, np.random.default_rng(1), 100_000)
        assert abs(x0.mean()) < 0.01
        assert ch.domain.contains(x0).all()
        assert len(f1) == len(fm) == 100_000

    def test_fixed_mode(self, logistic_chain):
        x0, _, _ = sample_transition_pair(logistic_chain, np.random.default_rng(2), 50, x0=np.zeros(2))
        assert np.all(x0 == 0.0)

    def test_fixed_point_outside_rejected(self):
        with pytest.raises(DomainError):
            sample_transition_pair(regulated_walk(), np.random.default_rng(0), 3, x0=np.array([0.9]))

    def test_maps_independent(self):
        ch = tandem_fluid()
        x = np.array([0.05, 0.05])
        _, f1, fm = sample_transition_pair(ch, np.random.default_rng(3), 10_000, x0=x)
        c = np.corrcoef(f1.lipschitz(x), fm.lipschitz(x))[0, 1]
        assert abs(c) < 0.03


class TestUFunction:
    def test_positive_inf_required(self):
        with pytest.raises(ValueError):
            constant_u(0.0)
        with pytest.raises(ValueError):
            UFunction(lambda x: np.ones(len(x)), -1.0)

    def test_constant(self):
        u = constant_u(0.1)
        assert u.is_constant
        assert np.all(u(np.zeros((4, 2))) == 0.1)


class TestLogisticDataset:
    def test_generator_shape_and_labels(self):
        data = LogisticDataset.generate(np.random.default_rng(0), 2000)
        assert data.x.shape == (2000, 2) and np.all(np.abs(data.x) <= 0.5)
        hi = data.x[:, 0] > data.x[:, 1]
        assert data.y[hi].mean() == pytest.approx(0.9, abs=0.03)
        assert data.y[~hi].mean() == pytest.approx(0.1, abs=0.03)

    def test_csv_round_trip(self, tmp_path):
        data = LogisticDataset.generate(np.random.default_rng(5), 100)
        data.to_csv(tmp_path / "d.csv")
        back = LogisticDataset.from_csv(tmp_path / "d.csv")
        assert np.array_equal(back.x, data.x) and np.array_equal(back.y, data.y)

    def test_build_from_csv_matches_seeded(self, tmp_path):
        seeded = build_chain("logistic", {"dataset_seed": 4})
        seeded.data.to_csv(tmp_path / "d.csv")
        loaded = build_chain("logistic", {"dataset_csv": "d.csv"}, base_dir=tmp_path)
        assert loaded.fingerprint() == seeded.fingerprint()

    def test_default_radius(self, logistic_chain):
        assert logistic_chain.radius == pytest.approx(np.abs(logistic_chain.data.x).max() * 100)


def test_build_chain_unknown():
    with pytest.raises(ValueError, match="unknown chain"):
        build_chain("nope")


def test_fingerprint_depends_on_params():
    assert quad_sgd_1d(0.1).fingerprint() != quad_sgd_1d(0.2).fingerprint()
    assert quad_sgd_1d(0.1).fingerprint() == build_chain("quad1d", {"alpha": 0.1}).fingerprint()


def test_identity_chain():
    ch = identity_chain()
    m = ch.sample_maps(np.random.default_rng(0), 4)
    x = np.array([0.2])
    assert np.all(m.apply(x) == 0.2) and np.all(m.lipschitz(x) == 1.0)


def test_streams_reproducible_and_distinct():
    a = Streams(7).generator("train", 3).random(5)
    b = Streams(7).generator("train", 3).random(5)
    c = Streams(7).generator("train", 4).random(5)
    d = Streams(7).generator("probe", 3).random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c) and not np.array_equal(a, d)
    with pytest.raises(ValueError):
        Streams(-1)
