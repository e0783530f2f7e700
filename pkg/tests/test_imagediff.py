import math

import numpy as np
import pytest
from scipy import integrate

from scdm.errors import ContractError, MapFormatError, TrainingError, TruncatedFileError
from scdm.imagediff import (
    MLPDenoiser,
    OracleDenoiser,
    SamplerConfig,
    ToyDataSpec,
    decode_image,
    dynamic_threshold,
    encode_image,
    forward_noise,
    hybrid_terms,
    load_denoiser,
    load_image,
    model_loss,
    prepare_batch,
    random_block_map,
    respace,
    reverse_step,
    sample,
    sample_batch,
    sample_fixed_label,
    save_image,
    train_step,
)
from scdm import rng as rngmod
from scdm.labeldiff import mask_times_from_uniforms, reconstruct
from scdm.labelmap import SemanticMap
from scdm.schedule import build_image_schedule, build_label_schedule
from scdm.verify import check_gradcheck, check_oracle


def sim_bytes(x):
    h, w, ch = x.shape
    return f"SIM1\n{h} {w} {ch}\n".encode() + np.asarray(x, dtype="<f4").tobytes()


@pytest.fixture
def spec2():
    return ToyDataSpec(np.array([[-0.6], [0.7]]), 0.1, np.array([0.5, 0.5]))


class TestSimFormat:
    def test_roundtrip_100(self, tmp_path, rng):
        for i in range(100):
            h, w, ch = rng.integers(1, 12, size=3)
            raw = sim_bytes(rng.standard_normal((h, w, ch)).astype(np.float32))
            p = tmp_path / f"x{i}.sim"
            p.write_bytes(raw)
            save_image(load_image(p), tmp_path / "again.sim")
            assert (tmp_path / "again.sim").read_bytes() == raw

    @pytest.mark.parametrize(
        "data, err",
        [
            (b"SIM0\n1 1 1\n\x00\x00\x00\x00", MapFormatError),
            (b"SIM1\n1 1 1\n\x00\x00", TruncatedFileError),
            (b"SIM1\n1 1 1\n" + b"\x00" * 5, MapFormatError),
        ],
    )
    def test_malformed(self, data, err):
        with pytest.raises(err):
            decode_image(data)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            encode_image(np.full((1, 1, 1), np.nan))


class TestForwardNoise:
    def test_no_noise_at_ab_one(self, rng):
        s = build_image_schedule(4)
        x0 = rng.standard_normal((3, 3, 2))
        x, _ = forward_noise(x0, s, 0, rng)
        assert np.array_equal(x, x0)

    def test_pure_noise_limit(self, rng):
        s = build_image_schedule(1000)
        x0 = rng.standard_normal((3, 3, 2))
        x, eps = forward_noise(x0, s, 1000, rng)
        assert np.abs(x - eps).max() < 0.05

    def test_variance(self, rng):
        s = build_image_schedule(50)
        n = 100_000
        x, _ = forward_noise(np.zeros(n), s, 20, rng)
        v = 1 - s.ab(20)
        # sample variance of n normals has sd sqrt(2/n) * v
        assert abs(x.var() - v) <= 4 * math.sqrt(2 / n) * v

    def test_inversion(self, rng):
        s = build_image_schedule(50)
        x0 = rng.standard_normal((4, 4, 3))
        for t in (1, 25, 50):
            x, eps = forward_noise(x0, s, t, rng)
            back = (x - math.sqrt(1 - s.ab(t)) * eps) / math.sqrt(s.ab(t))
            assert np.abs(back - x0).max() < 1e-10


class TestOracle:
    def test_sigma0_zero_unmasked(self, rng):
        spec = ToyDataSpec(np.array([[0.3, -0.2], [0.8, 0.1]]), 0.0, np.array([0.4, 0.6]))
        o = OracleDenoiser(spec, build_image_schedule(20))
        y = rng.integers(0, 2, (4, 4))
        for t in (1, 10, 20):
            got = o.posterior_mean_x0(rng.standard_normal((4, 4, 2)), y, t)
            assert np.array_equal(got, spec.class_means[y])

    def test_single_class_branches_agree(self, rng):
        spec = ToyDataSpec(np.array([[0.4]]), 0.3, np.array([1.0]))
        o = OracleDenoiser(spec, build_image_schedule(20))
        x = rng.standard_normal((3, 3, 1))
        a = o.posterior_mean_x0(x, np.zeros((3, 3), dtype=int), 7)
        b = o.posterior_mean_x0(x, np.ones((3, 3), dtype=int), 7)
        assert np.allclose(a, b, atol=1e-15)

    def test_mixture_by_quadrature(self):
        spec = ToyDataSpec(np.array([[-0.5], [0.9]]), 0.4, np.array([0.5, 0.5]))
        s = build_image_schedule(1, beta=0.5)
        o = OracleDenoiser(spec, s)
        for x_t in (-1.3, 0.0, 0.45, 2.0):
            got = o.posterior_mean_x0(np.array([[[x_t]]]), np.array([[2]]), 1)[0, 0, 0]

            def dens(v):
                prior = sum(0.5 * math.exp(-((v - m) ** 2) / (2 * 0.16)) for m in (-0.5, 0.9))
                return prior * math.exp(-((x_t - math.sqrt(0.5) * v) ** 2) / (2 * 0.5))

            num = integrate.quad(lambda v: v * dens(v), -np.inf, np.inf, epsabs=1e-14, epsrel=1e-13)[0]
            den = integrate.quad(dens, -np.inf, np.inf, epsabs=1e-14, epsrel=1e-13)[0]
            assert got == pytest.approx(num / den, abs=1e-8)

    def test_randomized_probes(self):
        rep = check_oracle(n_probes=40)
        assert rep["max_eps_error"] < 1e-6 and rep["max_mean_error"] < 1e-8


class TestLoss:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.spec = ToyDataSpec(np.array([[-0.5, 0.1], [0.6, -0.2], [0.1, 0.7]]), 0.2, np.ones(3) / 3)
        self.img = build_image_schedule(20)
        self.lab = build_label_schedule(np.array([3.0, 17.3, 651.3]), 20, 1.0)
        maps = [random_block_map((4, 4), 3, rng) for _ in range(6)]
        self.y0 = np.stack([m.cells.astype(np.int64) for m in maps])
        self.x0 = np.stack([self.spec.sample_x0(m, rng) for m in maps])
        self.rng = rng

    def test_perfect_predictor(self):
        b = prepare_batch(self.x0, self.y0, self.lab, self.img, 0.2, self.rng)
        l_simple, _, _, _ = hybrid_terms(self.x0, b["x_t"], b["eps"], b["eps"], None, b["t"], self.img)
        assert l_simple == 0.0

    def test_true_posterior_has_zero_vlb(self):
        b = prepare_batch(self.x0, self.y0, self.lab, self.img, 0.0, self.rng)
        # var_logit = -1 selects the posterior variance; true eps gives the true mean
        _, l_vlb, _, _ = hybrid_terms(
            self.x0, b["x_t"], b["eps"], b["eps"], -np.ones_like(b["eps"]), np.maximum(b["t"], 2), self.img
        )
        assert l_vlb == pytest.approx(0.0, abs=1e-12)

    def test_vlb_nonnegative(self):
        for _ in range(1000):
            b = prepare_batch(self.x0[:1], self.y0[:1], self.lab, self.img, 0.2, self.rng)
            pred = b["eps"] + self.rng.normal(0, 0.5, b["eps"].shape)
            v = self.rng.uniform(-1.5, 1.5, b["eps"].shape)
            _, l_vlb, _, _ = hybrid_terms(self.x0[:1], b["x_t"], b["eps"], pred, v, b["t"], self.img)
            assert l_vlb >= 0.0

    def test_lambda_zero_is_simple(self):
        net = MLPDenoiser.init(3, 2, 20, np.random.default_rng(1))
        rep = train_step(net, self.x0, self.y0, self.lab, self.img, np.random.default_rng(2), lambda_vlb=0.0, lr=0.0)
        assert rep.hybrid == rep.l_simple

    def test_gradcheck(self):
        rep = check_gradcheck()
        assert max(rep["probe_rel_errors"]) < 1e-3

    def test_variance_head_gradient(self):
        net = MLPDenoiser.init(3, 2, 20, np.random.default_rng(3), hidden=8)
        b = prepare_batch(self.x0, self.y0, self.lab, self.img, 0.2, self.rng)
        lam = 0.5
        _, _, g = model_loss(net, self.x0, b, self.img, lam)

        def total():
            s, v, _ = model_loss(net, self.x0, b, self.img, lam)
            return s + lam * v

        h = 1e-5
        ix = (2, 3)  # feeds the variance output for channel 1
        old = net.params["w2"][ix]
        net.params["w2"][ix] = old + h
        up = total()
        net.params["w2"][ix] = old - h
        down = total()
        net.params["w2"][ix] = old
        fd = (up - down) / (2 * h)
        assert g["w2"][ix] == pytest.approx(fd, rel=1e-3)

    def test_training_reduces_loss(self):
        net = MLPDenoiser.init(3, 2, 20, np.random.default_rng(4))
        rng = np.random.default_rng(5)
        losses = [
            train_step(net, self.x0, self.y0, self.lab, self.img, rng, lr=0.05).l_simple for _ in range(400)
        ]
        assert np.mean(losses[-50:]) < np.mean(losses[:50])

    def test_non_finite_raises(self):
        net = MLPDenoiser.init(3, 2, 20, np.random.default_rng(4))
        net.params["b2"][:] = np.inf
        with np.errstate(invalid="ignore"), pytest.raises(TrainingError):
            train_step(net, self.x0, self.y0, self.lab, self.img, np.random.default_rng(0))

    def test_mask_embedding_pinned(self):
        net = MLPDenoiser.init(3, 2, 20, np.random.default_rng(4))
        for _ in range(20):
            train_step(net, self.x0, self.y0, self.lab, self.img, self.rng, drop_rate=0.5)
        assert not net.params["embed"][3].any()


def test_checkpoint_roundtrip(tmp_path):
    net = MLPDenoiser.init(4, 3, 10, np.random.default_rng(0), hidden=6)
    net.save(tmp_path / "ck.bin", {"seed": 0})
    back = load_denoiser(tmp_path / "ck.bin", build_image_schedule(10))
    for k, v in net.params.items():
        assert np.array_equal(back.params[k], v.astype(np.float32))
    data = (tmp_path / "ck.bin").read_bytes()
    with pytest.raises(MapFormatError):
        MLPDenoiser.from_bytes(data[:-4])


class ConstDenoiser:
    """Returns fixed eps for conditional (any non-null) and null inputs."""

    def __init__(self, num_classes, eps_c, eps_u):
        self.num_classes = num_classes
        self.eps_c, self.eps_u = eps_c, eps_u

    def __call__(self, x, y, t):
        null = (np.asarray(y) == self.num_classes).all()
        return np.broadcast_to(self.eps_u if null else self.eps_c, x.shape).copy(), None


class TestReverseStep:
    def setup_method(self):
        self.img = build_image_schedule(20)
        self.y = np.zeros((1, 3, 3), dtype=int)
        self.x = np.full((1, 3, 3, 1), 0.05)

    def _x0(self, s, eps_c=0.02, eps_u=-0.01, t=5):
        den = ConstDenoiser(2, eps_c, eps_u)
        cfg = SamplerConfig(cfg_scale=s, extrapolation=0.0)
        return reverse_step(den, self.x, self.y, t, t - 1, cfg, self.img, noise=np.zeros_like(self.x))[1]

    def test_cfg_zero_is_conditional(self):
        a = self._x0(0.0)
        a_t = self.img.ab(5)
        assert np.allclose(a, (0.05 - math.sqrt(1 - a_t) * 0.02) / math.sqrt(a_t), atol=1e-15)

    def test_cfg_affine(self):
        x0, x1, x2 = self._x0(0.0), self._x0(1.0), self._x0(2.0)
        assert np.allclose(x2 - x0, 2 * (x1 - x0), atol=1e-14)

    def test_threshold_identity_in_range(self, rng):
        x = rng.uniform(-1, 1, (3, 4, 4, 2))
        assert np.array_equal(dynamic_threshold(x, 0.95), x)

    def test_threshold_clips(self):
        x = np.linspace(-3, 3, 101).reshape(1, -1)
        out = dynamic_threshold(x, 0.95)
        q = np.quantile(np.abs(x), 0.95)
        assert np.allclose(out, np.clip(x, -q, q) / q)
        assert np.abs(out).max() <= 1.0

    def test_extrapolation(self):
        den = ConstDenoiser(2, 0.02, 0.0)
        prev = np.full_like(self.x, 0.3)
        base = SamplerConfig(cfg_scale=0.0, extrapolation=0.0)
        _, x0 = reverse_step(den, self.x, self.y, 5, 4, base, self.img, prev, np.zeros_like(self.x), first=False)
        cfg = SamplerConfig(cfg_scale=0.0, extrapolation=0.8)
        _, x0w = reverse_step(den, self.x, self.y, 5, 4, cfg, self.img, prev, np.zeros_like(self.x), first=False)
        assert np.allclose(x0w, x0 + 0.8 * (x0 - prev), atol=1e-15)

    def test_missing_prev_is_contract_error(self):
        den = ConstDenoiser(2, 0.0, 0.0)
        with pytest.raises(ContractError):
            reverse_step(den, self.x, self.y, 5, 4, SamplerConfig(), self.img, None, np.zeros_like(self.x), first=False)

    def test_posterior_mean_matches_ddpm(self):
        # one full step t -> t-1 equals the textbook posterior mean for given x0
        den = ConstDenoiser(2, 0.1, 0.1)
        cfg = SamplerConfig(cfg_scale=0.0, extrapolation=0.0)
        t = 7
        out, x0 = reverse_step(den, self.x, self.y, t, t - 1, cfg, self.img, noise=np.zeros_like(self.x))
        beta = self.img.betas()[t - 1]
        a_t, a_p = self.img.ab(t), self.img.ab(t - 1)
        mu = math.sqrt(a_p) * beta / (1 - a_t) * x0 + math.sqrt(1 - beta) * (1 - a_p) / (1 - a_t) * self.x
        assert np.allclose(out, mu, atol=1e-15)


class TestSampler:
    def test_respace(self):
        assert respace(10, 4) == [1, 4, 7, 10]
        assert respace(10, 1) == [10]
        assert respace(10, None) == list(range(1, 11))
        r = respace(1000, 25)
        assert r[0] == 1 and r[-1] == 1000 and len(r) == 25

    def test_one_step_exact(self, rng):
        spec = ToyDataSpec(np.array([[0.3, -0.4], [0.9, 0.2], [-0.5, 0.5]]), 0.0, np.ones(3) / 3)
        img = build_image_schedule(1, beta=0.5)
        lab = build_label_schedule(np.array([3.0, 17.3, 651.3]), 1, 1.0)
        y0 = SemanticMap(rng.integers(0, 3, (5, 5)), 3)
        cfg = SamplerConfig(steps=1, cfg_scale=0.0, extrapolation=0.0, force_full_mask_at_T=False)
        x = sample(OracleDenoiser(spec, img), y0, lab, img, cfg, 2)
        assert np.abs(x - spec.mean_image(y0)).max() < 1e-10

    def test_conditional_means(self):
        spec = ToyDataSpec(np.array([[-0.6], [0.7]]), 0.1, np.array([0.5, 0.5]))
        img = build_image_schedule(50)
        lab = build_label_schedule(np.array([2.0, 8.0]), 50, 1.0)
        rng = np.random.default_rng(0)
        y0 = SemanticMap(rng.integers(0, 2, (8, 8)), 2)
        n = 500
        cfg = SamplerConfig(steps=50, cfg_scale=0.0, extrapolation=0.0, seed=3)
        xs = sample_batch(OracleDenoiser(spec, img), [y0] * n, lab, img, cfg, 1, range(n))
        mean = xs.mean(0)[..., 0]
        assert np.abs(mean - spec.mean_image(y0)[..., 0]).max() < 0.05

    def test_deterministic(self, spec2):
        img = build_image_schedule(10)
        lab = build_label_schedule(np.array([2.0, 9.0]), 10, 1.0)
        y0 = SemanticMap(np.array([[0, 1], [1, 1]]), 2)
        cfg = SamplerConfig(seed=4)
        a = sample(OracleDenoiser(spec2, img), y0, lab, img, cfg, 1)
        b = sample(OracleDenoiser(spec2, img), y0, lab, img, cfg, 1)
        assert np.array_equal(a, b)

    def test_batch_independent_of_company(self, spec2):
        img = build_image_schedule(10)
        lab = build_label_schedule(np.array([2.0, 9.0]), 10, 1.0)
        maps = [SemanticMap(np.random.default_rng(i).integers(0, 2, (3, 3)), 2) for i in range(4)]
        cfg = SamplerConfig(seed=1)
        full = sample_batch(OracleDenoiser(spec2, img), maps, lab, img, cfg, 1)
        alone = sample(OracleDenoiser(spec2, img), maps[2], lab, img, cfg, 1, sample_index=2)
        assert np.array_equal(full[2], alone)

    @pytest.mark.parametrize("coupling", ["coupled", "fresh"])
    def test_eta_inf_equals_fixed_label(self, spec2, coupling):
        img = build_image_schedule(30)
        lab = build_label_schedule(np.array([2.0, 9.0]), 30, "inf")
        maps = [SemanticMap(np.random.default_rng(i).integers(0, 2, (4, 4)), 2) for i in range(3)]
        cfg = SamplerConfig(steps=10, seed=5, coupling=coupling)
        a = sample_batch(OracleDenoiser(spec2, img), maps, lab, img, cfg, 1)
        b = sample_fixed_label(OracleDenoiser(spec2, img), maps, img, cfg, 1)
        assert np.array_equal(a, b)

    def test_force_full_mask(self, spec2):
        img = build_image_schedule(6)
        lab = build_label_schedule(np.array([2.0, 9.0]), 6, 1.0)
        y0 = SemanticMap(np.array([[0, 1]]), 2)
        seen = []

        class Spy(OracleDenoiser):
            def __call__(self, x, y, t):
                seen.append((int(t), np.array(y)))
                return super().__call__(x, y, t)

        expected = {
            True: np.full((1, 1, 2), 2),
            False: reconstruct(
                mask_times_from_uniforms(y0, lab, rngmod.pixel_uniforms(0, "label_u", y0.shape, 0)), y0, 6
            ).cells[None],
        }
        for force in (True, False):
            seen.clear()
            sample(Spy(spec2, img), y0, lab, img, SamplerConfig(cfg_scale=0.0, force_full_mask_at_T=force), 1)
            first_t, first_y = seen[0]
            assert first_t == 6
            assert np.array_equal(first_y, expected[force])

    def test_learned_variance_requires_head(self, spec2):
        img = build_image_schedule(5)
        lab = build_label_schedule(np.array([2.0, 9.0]), 5, 1.0)
        with pytest.raises(ContractError):
            sample(OracleDenoiser(spec2, img), SemanticMap(np.array([[0]]), 2), lab, img,
                   SamplerConfig(variance_mode="learned"), 1)

    def test_mlp_learned_variance(self):
        img = build_image_schedule(5)
        lab = build_label_schedule(np.array([2.0, 9.0]), 5, 1.0)
        net = MLPDenoiser.init(2, 1, 5, np.random.default_rng(0))
        x = sample(net, SemanticMap(np.array([[0, 1]]), 2), lab, img, SamplerConfig(variance_mode="learned"), 1)
        assert np.isfinite(x).all()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SamplerConfig(steps=0)
        with pytest.raises(ValueError):
            SamplerConfig(threshold_percentile=0.0)
        with pytest.raises(ValueError):
            SamplerConfig(coupling="loose")
