import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from conceptsurv.autodiff import ParameterSet, forward_backward
from conceptsurv.datagen import (
    CIFAR10_CLASSES,
    CIFAR10_TAGS,
    ConceptSurvivalDataset,
    GenerationConfig,
    IDXFormatError,
    SourcePool,
    apply_censoring,
    block_coefficients,
    build_dataset,
    compose_cifar_style,
    compose_mnist_style,
    generate_event_times,
    load_idx_pool,
    synth_glyph_pool,
    synth_tagged_pool,
    write_idx,
)
from conceptsurv.encoders import ConceptSchema, EncoderConfig, cnn_forward, init_cnn
from conceptsurv.losses import concept_cross_entropy
from conceptsurv.models import TrainConfig, _Optimizer


@pytest.fixture(scope="module")
def pool():
    return synth_glyph_pool(10, 20, seed=0)


class TestIDX:
    def write_pair(self, tmp_path, n=3, labels=None):
        imgs = (np.arange(n * 28 * 28) % 256).reshape(n, 28, 28)
        write_idx(tmp_path / "img", imgs)
        write_idx(tmp_path / "lab", np.arange(n) % 10 if labels is None else labels)
        return tmp_path / "img", tmp_path / "lab", imgs

    def test_round_trip(self, tmp_path):
        ip, lp, imgs = self.write_pair(tmp_path)
        pool = load_idx_pool(ip, lp)
        assert pool.images.shape == (3, 28, 28, 1)
        assert_allclose(pool.images[..., 0], imgs / 255.0)
        assert pool.images.max() <= 1.0

    def test_header_bytes(self, tmp_path):
        ip, lp, _ = self.write_pair(tmp_path)
        assert ip.read_bytes()[:16] == struct.pack(">IIII", 2051, 3, 28, 28)
        assert lp.read_bytes()[:8] == struct.pack(">II", 2049, 3)

    def test_single_image(self, tmp_path):
        ip, lp, _ = self.write_pair(tmp_path, n=1)
        assert load_idx_pool(ip, lp).images.shape == (1, 28, 28, 1)

    def test_swapped_magic(self, tmp_path):
        ip, lp, _ = self.write_pair(tmp_path)
        with pytest.raises(IDXFormatError, match="expected 2051, found 2049"):
            load_idx_pool(lp, ip)

    def test_count_mismatch(self, tmp_path):
        ip, lp, _ = self.write_pair(tmp_path, labels=np.arange(2))
        with pytest.raises(IDXFormatError, match="count mismatch"):
            load_idx_pool(ip, lp)

    def test_truncated(self, tmp_path):
        ip, lp, _ = self.write_pair(tmp_path)
        raw = ip.read_bytes()
        ip.write_bytes(raw[:-100])
        with pytest.raises(IDXFormatError, match=f"byte offset {len(raw) - 100}"):
            load_idx_pool(ip, lp)
        ip.write_bytes(raw[:2])
        with pytest.raises(IDXFormatError, match="byte offset 2"):
            load_idx_pool(ip, lp)


class TestGlyphPool:
    def test_size(self):
        p = synth_glyph_pool(10, 100, seed=1)
        assert len(p) == 1000
        assert p.image_shape == (28, 28, 1)
        assert p.images.min() >= 0 and p.images.max() <= 1

    def test_deterministic(self):
        a, b = synth_glyph_pool(4, 5, seed=7), synth_glyph_pool(4, 5, seed=7)
        assert a.images.tobytes() == b.images.tobytes()

    def test_extra_categories_distinct(self):
        p = synth_glyph_pool(14, 1, seed=0, noise=0.0)
        means = p.images.reshape(14, -1)
        assert len({m.tobytes() for m in means}) == 14

    def test_too_few_categories(self):
        with pytest.raises(ValueError):
            synth_glyph_pool(1, 5)

    def test_separable_by_small_cnn(self):
        pool = synth_glyph_pool(10, 100, seed=3)
        rng = np.random.default_rng(0)
        perm = rng.permutation(1000)
        tr, te = perm[:800], perm[800:]
        cfg = EncoderConfig((28, 28, 1), output_dim=10)
        schema = ConceptSchema(("digit",), (10,))
        params = ParameterSet()
        init_cnn(params, "c.", cfg, rng)
        opt = _Optimizer(TrainConfig(optimizer="adam", lr=3e-3))
        for _ in range(10):
            order = rng.permutation(tr)
            for s in range(0, 800, 50):
                idx = order[s : s + 50]
                x, y = pool.images[idx], pool.labels[idx, None]
                _, g = forward_backward(lambda P: concept_cross_entropy(cnn_forward(P, "c.", cfg, x), y, schema), params)
                opt.step(params, g)
        pred = cnn_forward(params.tensors(False), "c.", cfg, pool.images[te]).data.argmax(1)
        assert np.mean(pred == pool.labels[te]) >= 0.9


class TestComposeMnist:
    def test_distinct_tiles(self, pool):
        _, c, _ = compose_mnist_style(pool, 300, seed=0)
        assert all(len(set(row)) == 4 for row in c.tolist())

    def test_shape(self, pool):
        imgs, c, schema = compose_mnist_style(pool, 5, seed=0)
        assert imgs.shape == (5, 56, 56, 1)
        assert schema.cardinalities == (10, 10, 10, 10)

    def test_tiles_placed(self, pool):
        imgs, c, _ = compose_mnist_style(pool, 3, seed=0)
        tl = imgs[:, :28, :28]
        for k in range(3):
            matches = [i for i in np.flatnonzero(pool.labels == c[k, 0]) if np.array_equal(pool.images[i], tl[k])]
            assert matches

    def test_reproducible(self, pool):
        a = compose_mnist_style(pool, 10, seed=4)
        b = compose_mnist_style(pool, 10, seed=4)
        assert a[0].tobytes() == b[0].tobytes()

    @pytest.mark.parametrize("n", [0, -3])
    def test_bad_n(self, pool, n):
        with pytest.raises(ValueError):
            compose_mnist_style(pool, n)


class TestComposeCifar:
    def labelled_pool(self, names):
        labels = [CIFAR10_CLASSES.index(n) for n in names]
        imgs = np.stack([np.full((2, 2, 3), i / 10) for i in range(len(names))])
        return SourcePool(imgs, labels, 10, dict(CIFAR10_TAGS))

    def test_walkthrough_counts(self):
        names = ["cat", "deer", "frog", "truck"]
        pool = self.labelled_pool(names)
        imgs, c, schema = compose_cifar_style(pool, 400, seed=0)
        assert schema.cardinalities == (5, 5, 5, 2)
        found = False
        for k in range(400):
            tiles = [imgs[k, :2, :2, 0][0, 0], imgs[k, :2, 2:, 0][0, 0], imgs[k, 2:, :2, 0][0, 0], imgs[k, 2:, 2:, 0][0, 0]]
            ids = sorted(int(round(t * 10)) for t in tiles)
            if ids == [0, 1, 2, 3]:
                assert_array_equal(c[k], [3, 1, 0, 1])
                found = True
        assert found

    def test_all_vehicles(self):
        pool = self.labelled_pool(["truck", "ship"])
        _, c, _ = compose_cifar_style(pool, 20, seed=1)
        assert_array_equal(c[:, 0], 0)
        assert_array_equal(c[:, 1], 4)
        assert_array_equal(c[:, 3], 0)

    def test_bounds(self):
        _, c, _ = compose_cifar_style(synth_tagged_pool(5, seed=0), 200, seed=2)
        assert c[:, :3].min() >= 0 and c[:, :3].max() <= 4
        assert set(np.unique(c[:, 3])) <= {0, 1}

    def test_missing_tags(self):
        pool = self.labelled_pool(["cat", "dog"])
        pool.tags = {i: {"animal": True} for i in range(10)}
        with pytest.raises(ValueError, match="missing"):
            compose_cifar_style(pool, 3)
        pool.tags = None
        with pytest.raises(ValueError):
            compose_cifar_style(pool, 3)


class TestEventTimes:
    def test_unit_case(self):
        cfg = GenerationConfig(b=(0.0,), nu=2.0, lam=1.0)
        t = generate_event_times([[0]], cfg, u=[math.exp(-1)])
        assert_allclose(t, [1.0])

    def test_monotone_in_linear_predictor(self):
        cfg = GenerationConfig(b=(1.0,), nu=2.0, lam=0.1)
        t = generate_event_times([[0], [1], [2], [3]], cfg, u=np.full(4, 0.3))
        assert np.all(np.diff(t) < 0)

    def test_mnist_preset_parameters(self, pool):
        cfg = GenerationConfig.mnist(seed=0)
        assert cfg.b == (0.5, 1.5, -1.0, 0.001) and cfg.nu == 2.0 and cfg.lam == 1e-4
        _, c, _ = compose_mnist_style(pool, 200, seed=0)
        t = generate_event_times(c, cfg)
        assert np.all(np.isfinite(t)) and np.all(t > 0)

    def test_presets(self):
        s = GenerationConfig.mnist_sin()
        assert (s.b, s.nu, s.lam, s.law) == ((0.5, 1.5, -1.0, 0.001), 4.0, 0.01, "weibull-sin")
        c = GenerationConfig.cifar()
        assert (c.b, c.nu, c.lam) == ((-0.7, 1.5, -2.0, 5.0), 2.0, 0.01)

    def test_sin_law(self):
        cfg = GenerationConfig(b=(1.0,), nu=4.0, lam=0.01, law="weibull-sin")
        t = generate_event_times([[2]], cfg, u=[0.5])
        assert_allclose(t, (math.log(2) / (0.01 * (math.sin(2) + 1.001))) ** 0.25)

    def test_zero_u_redrawn(self):
        class ZeroFirst:
            def __init__(self):
                self.calls = 0

            def random(self, n):
                self.calls += 1
                return np.zeros(n) if self.calls == 1 else np.full(n, 0.5)

        from conceptsurv.datagen import _uniform_open

        assert_array_equal(_uniform_open(ZeroFirst(), 3), 0.5)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            generate_event_times([[1, 2]], GenerationConfig(b=(1.0,)))

    def test_one_hot_monte_carlo_mean(self):
        schema = ConceptSchema(("a", "b"), (3, 2))
        b = (0.0, 0.4, 1.2, 0.0, 0.3)
        cfg = GenerationConfig(b=b, nu=2.0, lam=0.05, encoding="one-hot")
        means = []
        for c in ([1, 0], [2, 0]):
            t = generate_event_times(np.tile(c, (20000, 1)), cfg, schema, seed=5)
            lam_eff = cfg.lam * math.exp(np.dot(schema.one_hot([c])[0], b))
            analytic = lam_eff ** (-1 / cfg.nu) * math.gamma(1 + 1 / cfg.nu)
            assert abs(t.mean() / analytic - 1) < 0.05
            means.append(t.mean())
        assert means[1] < means[0]

    def test_validation(self):
        with pytest.raises(ValueError):
            GenerationConfig(nu=0.0)
        with pytest.raises(ValueError):
            GenerationConfig(rho=0.0)
        with pytest.raises(ValueError):
            GenerationConfig(law="gamma")


class TestBlocks:
    schema = ConceptSchema(("t1", "t2", "t3", "t4"), (10,) * 4)

    def test_constant_shape(self):
        b = block_coefficients(self.schema, (0.5, 1.5, 1e-4, 1e-3), "constant")
        assert len(b) == 40 and b[:10] == (0.5,) * 10

    def test_constant_blocks_give_constant_predictor(self):
        # one active entry per block: every instance gets the same b.c
        b = np.array(block_coefficients(self.schema, (0.5, 1.5, 1e-4, 1e-3), "constant"))
        c = np.random.default_rng(0).integers(0, 10, (50, 4))
        eta = self.schema.one_hot(c) @ b
        assert_allclose(eta, 0.5 + 1.5 + 1e-4 + 1e-3)

    def test_ramp_matches_integer_encoding(self):
        v = (0.5, 1.5, 1e-4, 1e-3)
        b = np.array(block_coefficients(self.schema, v, "ramp"))
        c = np.random.default_rng(1).integers(0, 10, (50, 4))
        assert_allclose(self.schema.one_hot(c) @ b, c @ np.array(v))

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            block_coefficients(self.schema, (1, 1, 1, 1), "wave")


class TestCensoring:
    def test_rho_one(self):
        assert apply_censoring(np.ones(100), 1.0, seed=0).all()

    def test_fraction(self):
        ev = apply_censoring(np.ones(10000), 0.33, seed=1)
        assert abs(ev.mean() - 0.33) < 0.02

    def test_reproducible(self):
        assert_array_equal(apply_censoring(np.ones(50), 0.5, 3), apply_censoring(np.ones(50), 0.5, 3))

    def test_times_unchanged(self, pool):
        a = build_dataset("mnist", pool, 50, GenerationConfig.mnist(seed=2, rho=0.3))
        b = build_dataset("mnist", pool, 50, GenerationConfig.mnist(seed=2, rho=1.0))
        assert_array_equal(a.times, b.times)


class TestDataset:
    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 60), st.sampled_from(["mnist", "mnist-sin", "mnist-blocks"]), st.integers(0, 1000))
    def test_aligned(self, n, kind, seed):
        pool = synth_glyph_pool(10, 3, seed=0)
        ds = build_dataset(kind, pool, n, None if kind == "mnist-blocks" else GenerationConfig.mnist(seed=seed))
        assert len(ds.images) == len(ds.concepts) == len(ds.times) == len(ds.events) == n
        assert ds.concepts.max() < 10 and ds.times.min() >= 0

    def test_cifar_style(self):
        ds = build_dataset("cifar-style", synth_tagged_pool(4, seed=0), 30)
        assert ds.image_shape == (64, 64, 3)
        assert ds.schema.cardinalities == (5, 5, 5, 2)

    def test_bitwise_reproducible(self, pool):
        a = build_dataset("mnist", pool, 40, GenerationConfig.mnist(seed=9))
        b = build_dataset("mnist", pool, 40, GenerationConfig.mnist(seed=9))
        for f in ("images", "concepts", "times", "events"):
            assert getattr(a, f).tobytes() == getattr(b, f).tobytes()

    def test_unknown_kind(self, pool):
        with pytest.raises(ValueError):
            build_dataset("svhn", pool, 5)

    def test_split(self, pool):
        ds = build_dataset("mnist", pool, 100)
        tr, te = ds.train_test_split(0.4, seed=0)
        assert (len(tr), len(te)) == (60, 40)
        assert np.intersect1d(tr.times, te.times).size == 0

    def test_save_load(self, pool, tmp_path):
        ds = build_dataset("mnist", pool, 10)
        ds.save(tmp_path / "d.npz")
        back = ConceptSurvivalDataset.load(tmp_path / "d.npz")
        assert back.schema == ds.schema
        assert_array_equal(back.images, ds.images)
        assert_array_equal(back.events, ds.events)

    def test_invalid(self):
        s = ConceptSchema(("a",), (2,))
        with pytest.raises(ValueError):
            ConceptSurvivalDataset(np.zeros((2, 4, 4, 1)), [[0], [2]], [1, 2], [1, 1], s)
        with pytest.raises(ValueError):
            ConceptSurvivalDataset(np.zeros((2, 4, 4, 1)), [[0], [1]], [1, -2], [1, 1], s)
        with pytest.raises(ValueError):
            ConceptSurvivalDataset(np.zeros((2, 4, 4, 1)), [[0]], [1, 2], [1, 1], s)
