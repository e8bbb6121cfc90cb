import copy

import numpy as np
import pytest
import torch
from scipy.stats import chisquare
from torch import nn

from aada.data import AugmentConfig, DataError, DomainDataset, RasterSample
from aada.losses import ClassWeights, DivergenceError, LossWeights, ace_weights, weighted_ce
from aada.networks import AdapterSpec, ClassifierSpec, DiscriminatorSpec, ModelBundle, build_adapter, build_classifier, build_discriminator
from aada.training import (
    DAConfig,
    SourceTrainConfig,
    TrainLog,
    bn_update_policy,
    da_step,
    da_train,
    discriminator_input_jitter,
    make_da_optimizers,
    source_train,
)
import aada.training as training

N, L, P = 4, 3, 96
AUG = AugmentConfig(sigma=0.1, patch_size=P)


def blob_dataset(seed=0, tiles=2, size=128, classes=L, shift=0.0, eval_only=False):
    """Piecewise-constant classes with class-dependent colour plus noise."""
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(tiles):
        labels = (rng.random((size // 16, size // 16)) * classes).astype(np.uint8)
        labels = np.kron(labels, np.ones((16, 16), np.uint8))
        means = np.linspace(-1.5, 1.5, classes)[labels]
        channels = means[..., None] + 0.3 * rng.normal(size=(size, size, N)) + shift
        samples.append(RasterSample(channels.astype(np.float32), labels, 0.2))
    return DomainDataset(samples, classes, labels_for_evaluation_only=eval_only)


def tiny_bundle(seed=0):
    return ModelBundle(
        build_classifier(ClassifierSpec(N, L, 0.125, 1), seed),
        build_adapter(AdapterSpec(N, 2, 16, 8), seed + 1),
        build_discriminator(DiscriminatorSpec(N, 8), seed + 2),
    )


def batch(seed=0, b=2):
    g = torch.Generator().manual_seed(seed)
    x_s = torch.randn(b, N, P, P, generator=g)
    y_s = torch.randint(0, L, (b, P, P), generator=g)
    x_t = 0.5 * torch.randn(b, N, P, P, generator=g) + 0.3
    return x_s, y_s, x_t


def params(model: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.named_parameters()}


def changed(before, after):
    return {k for k in before if not torch.equal(before[k], after[k])}


SMALL_SOURCE = SourceTrainConfig(epochs=2, iterations_per_epoch=3, batch=2)
SMALL_DA = DAConfig(epochs=3, iterations_per_epoch=2, batch=2, selection_start_epoch=2)


class TestJitter:
    def test_identity(self, rng):
        x = torch.randn(2, N, 16, 16)
        assert torch.equal(discriminator_input_jitter(x, rng, 0, 0.0), x)

    def test_pure_translation(self, rng):
        x = torch.randn(1, N, 16, 20)
        out = discriminator_input_jitter(x, rng, 4, 0.0, shifts=np.array([[4, 0]]))
        assert out.shape == x.shape
        assert torch.equal(out[..., 4:], x[..., :-4])
        out = discriminator_input_jitter(x, rng, 4, 0.0, shifts=np.array([[0, 3]]))
        assert torch.equal(out[..., 3:, :], x[..., :-3, :])

    def test_single_image(self, rng):
        assert discriminator_input_jitter(torch.randn(N, 16, 16), rng).shape == (N, 16, 16)

    def test_too_small(self, rng):
        with pytest.raises(ValueError):
            discriminator_input_jitter(torch.randn(1, N, 4, 4), rng, 4)

    def test_shift_histogram_uniform(self):
        draws, m, size = 10_000, 4, 9
        # unique values per position reveal the applied shift
        grid = torch.arange(size * size, dtype=torch.float64).view(1, 1, size, size)
        x = grid.expand(draws, 1, size, size).contiguous()
        out = discriminator_input_jitter(x, np.random.default_rng(0), m, 0.0)
        centre = out[:, 0, m, m].long()
        dy, dx = m - centre // size, m - centre % size
        counts = np.bincount((dy * (m + 1) + dx).numpy(), minlength=(m + 1) ** 2)
        assert counts.sum() == draws and len(counts) == (m + 1) ** 2
        assert chisquare(counts).pvalue > 0.01

    def test_radiometric_moments(self):
        x = torch.ones(20_000, 1, 8, 8)
        out = discriminator_input_jitter(x, np.random.default_rng(1), 0, 0.1)
        per_image = out[:, 0, 0, 0]
        # scale ~ N(1, 0.1) plus offset ~ N(0, 0.1) applied to ones
        assert per_image.mean().item() == pytest.approx(1.0, abs=0.005)
        assert per_image.std().item() == pytest.approx(np.sqrt(0.02), rel=0.03)
        assert torch.all(out == out[:, :, :1, :1])


class TestBatchNormPolicy:
    def model(self):
        return nn.Sequential(nn.Conv2d(2, 3, 1), nn.BatchNorm2d(3))

    def test_source_pass_keeps_running_stats(self):
        m = self.model().train()
        x = torch.randn(4, 2, 8, 8)
        before = m[1].running_mean.clone()
        with bn_update_policy(m, source_pass=True):
            m(x)
        assert torch.equal(m[1].running_mean, before)
        assert m[1].momentum == 0.1
        m(x)
        assert not torch.equal(m[1].running_mean, before)

    def test_disabled_policy_updates_both(self):
        m = self.model().train()
        x = torch.randn(4, 2, 8, 8)
        before = m[1].running_mean.clone()
        with bn_update_policy(m, source_pass=False):
            m(x)
        after_first = m[1].running_mean.clone()
        assert not torch.equal(after_first, before)
        m(x)
        assert not torch.equal(m[1].running_mean, after_first)

    def test_source_pass_still_uses_batch_stats(self):
        m = self.model().train()
        x = torch.randn(4, 2, 8, 8) * 5 + 3
        with bn_update_policy(m, source_pass=True):
            out = m(x)
        torch.testing.assert_close(out.mean((0, 2, 3)), m[1].bias.detach(), atol=1e-5, rtol=0)

    def test_ema_by_hand(self):
        m = self.model().train()
        g = torch.Generator().manual_seed(0)
        expected = m[1].running_mean.clone().double()
        for k in range(6):
            xs = torch.randn(4, 2, 8, 8, generator=g)
            xt = torch.randn(4, 2, 8, 8, generator=g) + k
            with bn_update_policy(m, source_pass=True):
                m(xs)
            with torch.no_grad():
                batch_mean = m[0](xt).mean((0, 2, 3)).double()
            m(xt)
            expected = 0.9 * expected + 0.1 * batch_mean
        torch.testing.assert_close(m[1].running_mean.double(), expected, atol=1e-5, rtol=0)


class TestDAStep:
    def run(self, bundle, cfg=DAConfig(), seed=0, snapshot=False):
        opts = make_da_optimizers(bundle, cfg, SourceTrainConfig())
        mid = {}
        if snapshot:
            step = opts["discriminator"].step

            def spy(*a, **k):
                mid.update({n: params(getattr(bundle, n)) for n in ("classifier", "adapter", "discriminator")})
                return step(*a, **k)

            opts["discriminator"].step = spy
        x_s, y_s, x_t = batch(seed)
        out = da_step(bundle, opts, x_s, y_s, x_t, ClassWeights.uniform(L), cfg, np.random.default_rng(seed))
        return out, mid

    def test_alternation_exclusivity(self):
        bundle = tiny_bundle()
        names = ("classifier", "adapter", "discriminator")
        before = {n: params(getattr(bundle, n)) for n in names}
        _, mid = self.run(bundle, snapshot=True)
        after = {n: params(getattr(bundle, n)) for n in names}
        step1 = {(n, k) for n in names for k in changed(before[n], mid[n])}
        step2 = {(n, k) for n in names for k in changed(mid[n], after[n])}
        everything = {(n, k) for n in names for k in before[n]}
        assert not step1 & step2
        assert step1 | step2 == everything
        assert {n for n, _ in step1} == {"classifier", "adapter"}
        assert {n for n, _ in step2} == {"discriminator"}

    def test_discriminator_trainable_after_step(self):
        bundle = tiny_bundle()
        self.run(bundle)
        assert all(p.requires_grad for p in bundle.discriminator.parameters())

    def test_outputs(self):
        out, _ = self.run(tiny_bundle())
        for key in ("L_sup", "L_sup_ST", "L_advA", "L_advD", "L_reg"):
            assert np.isfinite(out[key])
        assert 0 < out["p_target"] < 1 and 0 < out["p_transformed"] < 1
        assert out["_r_st"].shape == (2, L, P, P)

    def test_zero_weights_decouple_adapter(self):
        cfg = DAConfig(lw=LossWeights(omega_T=0.0, omega_G=0.0, rho=3.0))
        bundle = tiny_bundle()
        reference = copy.deepcopy(bundle.classifier)
        before = params(bundle.adapter)
        self.run(bundle, cfg)
        assert not changed(before, params(bundle.adapter))
        # the classifier update is plain source training on the source batch
        x_s, y_s, _ = batch(0)
        sgd_cfg = SourceTrainConfig()
        opt = torch.optim.SGD(reference.parameters(), lr=sgd_cfg.lr, momentum=sgd_cfg.momentum, weight_decay=sgd_cfg.weight_decay)
        opt.zero_grad()
        weighted_ce(reference(x_s), y_s, ClassWeights.uniform(L)).backward()
        opt.step()
        ours, theirs = params(bundle.classifier), params(reference)
        for k in ours:
            torch.testing.assert_close(ours[k], theirs[k], atol=1e-6, rtol=1e-5)

    def test_rho_only_affects_discriminator(self):
        base = tiny_bundle()
        a, b = copy.deepcopy(base), copy.deepcopy(base)
        self.run(a, DAConfig(lw=LossWeights(rho=0.0)))
        self.run(b, DAConfig(lw=LossWeights(rho=4.0)))
        for name in ("classifier", "adapter"):
            pa, pb = params(getattr(a, name)), params(getattr(b, name))
            assert not changed(pa, pb), name
        assert changed(params(a.discriminator), params(b.discriminator))


class TestSourceTrain:
    def test_first_epoch_unit_weights(self, rng):
        model = build_classifier(ClassifierSpec(N, L, 0.125, 1), 0)
        history = source_train(model, blob_dataset(), SMALL_SOURCE, rng, AUG)
        np.testing.assert_array_equal(history[0].weights.w, np.ones(L))
        # later epochs use the weights derived from the previous epoch
        np.testing.assert_allclose(history[1].weights.w, ace_weights(history[0].confusion, 4.0).w)

    def test_kappa_zero_is_cross_entropy(self):
        runs = []
        for cfg in (SourceTrainConfig(epochs=2, iterations_per_epoch=3, batch=2, kappa=0.0), SourceTrainConfig(epochs=2, iterations_per_epoch=3, batch=2, loss="ce")):
            torch.manual_seed(0)
            model = build_classifier(ClassifierSpec(N, L, 0.125, 1), 0)
            log = TrainLog()
            source_train(model, blob_dataset(), cfg, np.random.default_rng(5), AUG, log)
            runs.append([r["L_sup"] for r in log.rows])
        assert runs[0] == runs[1]

    def test_learns_balanced_two_class_problem(self):
        data = blob_dataset(classes=2, tiles=3)
        model = build_classifier(ClassifierSpec(N, 2, 0.125, 1), 0)
        cfg = SourceTrainConfig(epochs=5, iterations_per_epoch=15, batch=2)
        history = source_train(model, data, cfg, np.random.default_rng(0), AUG)
        assert history[-1].accuracy > 0.9

    def test_refuses_evaluation_only_labels(self, rng):
        model = build_classifier(ClassifierSpec(N, L, 0.125, 1), 0)
        with pytest.raises(DataError):
            source_train(model, blob_dataset(eval_only=True), SMALL_SOURCE, rng, AUG)

    def test_refuses_unlabelled(self, rng):
        model = build_classifier(ClassifierSpec(N, L, 0.125, 1), 0)
        with pytest.raises(DataError):
            source_train(model, blob_dataset().unlabelled(), SMALL_SOURCE, rng, AUG)

    def test_divergence(self, rng):
        data = blob_dataset()
        data.samples[0].channels[:] = np.nan
        data.samples[1].channels[:] = np.nan
        model = build_classifier(ClassifierSpec(N, L, 0.125, 1), 0)
        with pytest.raises(DivergenceError):
            source_train(model, data, SMALL_SOURCE, rng, AUG)


class TestDATrain:
    def train(self, seed=0, cfg=SMALL_DA, **kwargs):
        torch.manual_seed(seed)
        bundle = tiny_bundle(seed)
        log = TrainLog()
        records = da_train(
            bundle,
            blob_dataset(0),
            blob_dataset(1, shift=0.5).unlabelled(),
            cfg,
            np.random.default_rng(seed),
            SMALL_SOURCE,
            AUG,
            log=log,
            **kwargs,
        )
        return records, log

    def test_records_and_checkpoints(self, tmp_path):
        records, _ = self.train(checkpoint_dir=tmp_path)
        assert [r.epoch for r in records if r.mean_entropy is not None] == [2, 3]
        # before selection starts only the latest epoch is retained
        assert [r.epoch for r in records] == [1, 2, 3]
        assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch001.pt", "epoch002.pt", "epoch003.pt"]
        cfg = DAConfig(epochs=4, iterations_per_epoch=1, batch=2, selection_start_epoch=3)
        records, _ = self.train(cfg=cfg, checkpoint_dir=tmp_path / "b")
        assert [r.epoch for r in records] == [2, 3, 4]
        assert sorted(p.name for p in (tmp_path / "b").iterdir()) == ["epoch002.pt", "epoch003.pt", "epoch004.pt"]
        assert all(0.0 <= r.mean_entropy <= 1.0 for r in records if r.mean_entropy is not None)

    def test_deterministic_loss_trace(self):
        (ra, la), (rb, lb) = self.train(3), self.train(3)
        assert la.rows == lb.rows
        assert [r.mean_entropy for r in ra] == [r.mean_entropy for r in rb]

    def test_weights_constant_within_epoch(self, monkeypatch):
        seen = []
        real = training.da_step

        def spy(bundle, opts, x_s, y_s, x_t, weights, *a, **k):
            seen.append(weights.w.copy())
            return real(bundle, opts, x_s, y_s, x_t, weights, *a, **k)

        monkeypatch.setattr(training, "da_step", spy)
        cfg = DAConfig(epochs=3, iterations_per_epoch=3, batch=2, selection_start_epoch=2)
        self.train(cfg=cfg)
        per_epoch = [seen[i : i + 3] for i in range(0, 9, 3)]
        for group in per_epoch:
            assert all(np.array_equal(group[0], w) for w in group)
        assert not np.array_equal(per_epoch[0][0], per_epoch[1][0])

    def test_on_epoch_end_and_training_mode(self):
        calls = []
        self.train(on_epoch_end=lambda epoch, b: calls.append((epoch, b.epoch)))
        assert calls == [(1, 1), (2, 2), (3, 3)]

    def test_refuses_evaluation_only_source(self, rng):
        with pytest.raises(DataError):
            da_train(tiny_bundle(), blob_dataset(eval_only=True), blob_dataset(1).unlabelled(), SMALL_DA, rng, aug=AUG)

    def test_target_labels_never_read(self, rng):
        # flagged target labels are stripped before any batch is drawn
        records = da_train(tiny_bundle(), blob_dataset(), blob_dataset(1, eval_only=True), SMALL_DA, rng, SMALL_SOURCE, AUG)
        assert records

    def test_needs_adapter_and_discriminator(self, rng):
        with pytest.raises(ValueError):
            da_train(ModelBundle(tiny_bundle().classifier), blob_dataset(), blob_dataset(1), SMALL_DA, rng, aug=AUG)

    def test_divergence(self, rng):
        target = blob_dataset(1)
        for s in target.samples:
            s.channels[:] = np.inf
        with pytest.raises(DivergenceError):
            da_train(tiny_bundle(), blob_dataset(), target.unlabelled(), SMALL_DA, rng, SMALL_SOURCE, AUG)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DAConfig(epochs=5, selection_start_epoch=5)
        with pytest.raises(ValueError):
            SourceTrainConfig(loss="dice")
