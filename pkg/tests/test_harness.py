import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from xbmeta.checkpoint import load_checkpoint, save_checkpoint
from xbmeta.core import Batch, SimilarityClassifier, init_params
from xbmeta.data import DatasetSpec, generate_dataset
from xbmeta.ensemble import gwa_direct
from xbmeta.errors import ConfigError, FormatError, LayoutError, NumericError
from xbmeta.metrics import evaluate, harmonic_mean, prediction_ensemble
from xbmeta.params import ParamVector
from xbmeta.train import TrainConfig, cosine_lr, metrics_csv, train

TINY = dict(k_base=4, k_novel=3, d_embed=4, d_motion=4, d_static=3, n_contexts=4,
            samples_per_class_train=24, samples_per_class_test=10, seed=0)


def tiny_cfg(**kw):
    base = dict(dataset_spec=TINY, epochs=3, batch_size=4, tasks_per_step=2, hidden_width=6,
                eval_splits=["test_base_ic", "test_novel_ooc"])
    base.update(kw)
    return TrainConfig(**base)


class TestHarmonicMean:
    def test_reference_rows(self):
        assert abs(harmonic_mean([83.9, 33.5, 64.5]) - 52.4) <= 0.05
        assert abs(harmonic_mean([81.5, 46.6]) - 59.3) <= 0.05

    @given(st.floats(1e-3, 1e3))
    def test_equal_values(self, a):
        assert harmonic_mean([a, a]) == pytest.approx(a, rel=1e-15)

    @pytest.mark.parametrize("bad", [[1.0, 0.0], [-1.0], []])
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            harmonic_mean(bad)


class TestPredictionEnsemble:
    def test_examples(self):
        a, b = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
        np.testing.assert_array_equal(prediction_ensemble(a, b, 1.0), a)
        np.testing.assert_array_equal(prediction_ensemble(a, b, 0.5), [[0.5, 0.5]])
        np.testing.assert_array_equal(prediction_ensemble(a, b), [[0.5, 0.5]])

    def test_errors(self):
        with pytest.raises(LayoutError):
            prediction_ensemble(np.zeros((1, 2)), np.zeros((2, 1)))
        with pytest.raises(ConfigError):
            prediction_ensemble(np.zeros((1, 2)), np.zeros((1, 2)), 1.5)


class TestEvaluate:
    def test_true_map_is_perfect_on_noiseless_data(self):
        spec = DatasetSpec(k_base=5, k_novel=5, d_embed=6, d_motion=6, d_static=4, noise_sigma=1e-9,
                           samples_per_class_train=10, samples_per_class_test=20, seed=4)
        ds = generate_dataset(spec)
        clf = SimilarityClassifier(ds.class_embeddings, [spec.d_x, spec.d_embed])
        W = np.concatenate([ds.motion_map.T, np.zeros((spec.d_embed, spec.d_static))], axis=1)
        theta = ParamVector.from_arrays({"W1": W, "b1": np.zeros(spec.d_embed)})
        for name, split in ds.splits.items():
            classes = ds.novel_classes if "novel" in name else ds.base_classes
            r = evaluate(theta, clf, split, classes, name)
            assert r.top1 == 1.0 and r.top5 == 1.0

    def test_single_candidate(self):
        clf = SimilarityClassifier(np.eye(3), [2, 3])
        theta = init_params(clf, 0)
        batch = Batch(np.ones((4, 2)), [2, 2, 2, 2], range(4))
        r = evaluate(theta, clf, batch, [2])
        assert r.top1 == r.top5 == 1.0

    def test_chance_level(self):
        rng = np.random.default_rng(0)
        k, n, seeds = 8, 400, 25
        hits = []
        for s in range(seeds):
            emb = rng.normal(size=(k, 5))
            clf = SimilarityClassifier(emb / np.linalg.norm(emb, axis=1, keepdims=True), [6, 5])
            batch = Batch(rng.normal(size=(n, 6)), rng.integers(0, k, n), range(n))
            hits.append(evaluate(init_params(clf, s), clf, batch, range(k)).top1)
        assert abs(np.mean(hits) - 1 / k) <= 3 / math.sqrt(n * seeds)

    def test_top5_ge_top1_and_shards(self):
        rng = np.random.default_rng(1)
        emb = rng.normal(size=(7, 3))
        clf = SimilarityClassifier(emb / np.linalg.norm(emb, axis=1, keepdims=True), [4, 3])
        theta = init_params(clf, 2)
        x, y = rng.normal(size=(60, 4)), rng.integers(0, 7, 60)
        whole = evaluate(theta, clf, Batch(x, y, range(60)), range(7))
        shards = [Batch(x[i:i + 20], y[i:i + 20], range(i, i + 20)) for i in (0, 20, 40)]
        parts = evaluate(theta, clf, shards, range(7))
        assert whole.top5 >= whole.top1
        assert (whole.top1, whole.top5, whole.n) == (parts.top1, parts.top5, parts.n)
        assert abs(whole.loss - parts.loss) < 1e-12

    def test_ties_go_to_lowest_index(self):
        clf = SimilarityClassifier(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), [2, 2])
        theta = ParamVector.from_arrays({"W1": np.eye(2), "b1": np.zeros(2)})
        r0 = evaluate(theta, clf, Batch([[1.0, 0.0]], [0], [0]), [0, 1, 2])
        r1 = evaluate(theta, clf, Batch([[1.0, 0.0]], [1], [0]), [0, 1, 2])
        assert r0.top1 == 1.0 and r1.top1 == 0.0

    def test_empty_subset(self):
        clf = SimilarityClassifier(np.eye(2), [2, 2])
        with pytest.raises(ConfigError):
            evaluate(init_params(clf, 0), clf, Batch([[1.0, 0.0]], [0], [0]), [])


class TestCheckpoint:
    def theta(self):
        return ParamVector(np.random.default_rng(0).normal(size=10), [("W1", [2, 4]), ("b1", [2])])

    def test_round_trip(self, tmp_path):
        th = self.theta()
        save_checkpoint(tmp_path / "a.omd1", th, 3, "abc", {"k": 1})
        back, info = load_checkpoint(tmp_path / "a.omd1", th.layout, "abc")
        assert back.bitwise_equal(th)
        assert info == {"epoch": 3, "config_digest": "abc", "meta": {"k": 1}}

    def test_corruptions(self, tmp_path):
        path = save_checkpoint(tmp_path / "a.omd1", self.theta(), 1, "abc")
        raw = path.read_bytes()
        (tmp_path / "magic").write_bytes(b"NOPE" + raw[4:])
        (tmp_path / "trunc").write_bytes(raw[:-1])
        (tmp_path / "ver").write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
        for name in ("magic", "trunc", "ver"):
            with pytest.raises(FormatError):
                load_checkpoint(tmp_path / name)
        with pytest.raises(FormatError):
            load_checkpoint(path, expected_digest="other")

    def test_layout_mismatch(self, tmp_path):
        path = save_checkpoint(tmp_path / "a.omd1", self.theta())
        with pytest.raises(LayoutError):
            load_checkpoint(path, expected_layout=[("W1", [4, 2]), ("b1", [2])])


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            TrainConfig.from_dict({"dataset_spec": TINY, "learning_rate": 0.1})

    def test_invariants(self):
        with pytest.raises(ConfigError):
            tiny_cfg(warmup_epochs=3)
        with pytest.raises(ConfigError):
            TrainConfig()
        with pytest.raises(ConfigError):
            tiny_cfg(sampler_mode="random")

    def test_json_round_trip(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"dataset_spec": TINY, "epochs": 2}))
        assert TrainConfig.from_json(p).epochs == 2

    def test_digest_ignores_output_dir(self):
        assert tiny_cfg(output_dir="a").digest() == tiny_cfg(output_dir="b").digest()
        assert tiny_cfg().digest() != tiny_cfg(delta=0.9).digest()


class TestSchedule:
    @given(st.integers(0, 500), st.integers(1, 500), st.floats(1e-8, 1.0), st.floats(0, 1e-8))
    def test_formula(self, s, total, init, final):
        s = min(s, total)
        expected = final + 0.5 * (init - final) * (1 + math.cos(math.pi * s / total))
        assert abs(cosine_lr(s, total, init, final) - expected) <= 1e-12

    def test_endpoints(self):
        assert cosine_lr(0, 100, 1e-2, 1e-4) == 1e-2
        assert abs(cosine_lr(100, 100, 1e-2, 1e-4) - 1e-4) < 1e-18


class TestTrain:
    def test_outputs(self, tmp_path):
        res = train(tiny_cfg(), out_dir=tmp_path)
        assert len(res.checkpoints) == 3 and len(res.trajectory) == 3
        rows = list(csv.reader((tmp_path / "metrics.csv").open(newline="")))
        assert rows[0] == ["epoch", "step", "split", "metric", "value"]
        assert {r[3] for r in rows[1:]} >= {"loss", "top1", "top5", "gwa_top1"}
        assert b"\r\n" not in (tmp_path / "metrics.csv").read_bytes()
        for name in ("final.omd1", "gwa.omd1", "config.json"):
            assert (tmp_path / name).exists()
        theta, info = load_checkpoint(tmp_path / "final.omd1", expected_digest=tiny_cfg().digest())
        assert theta.bitwise_equal(res.theta)

    def test_gwa_matches_direct_average_of_snapshots(self):
        res = train(tiny_cfg(epochs=4, gwa_mu=2.0, gwa_sigma2=3.0))
        direct = gwa_direct(res.trajectory, 2.0, 3.0)
        np.testing.assert_allclose(res.gwa_theta.values, direct.values, rtol=1e-10, atol=1e-14)

    def test_single_warmup_epoch(self):
        res = train(tiny_cfg(epochs=2, warmup_epochs=1, gwa_mu=1.0))
        assert len(res.trajectory) == 2
        res1 = train(tiny_cfg(epochs=1, warmup_epochs=0, method="plain"))
        assert res1.gwa_theta.bitwise_equal(res1.trajectory[0])

    def test_gwa_disabled(self):
        res = train(tiny_cfg(gwa_enabled=False))
        assert res.gwa_theta.bitwise_equal(res.theta)

    def test_skip_warmup_snapshots(self):
        res = train(tiny_cfg(epochs=3, warmup_epochs=2, gwa_skip_warmup=True))
        assert res.gwa_theta.bitwise_equal(res.trajectory[-1])

    def test_deterministic(self):
        a, b = train(tiny_cfg()), train(tiny_cfg())
        assert metrics_csv(a.metrics) == metrics_csv(b.metrics)
        assert a.theta.bitwise_equal(b.theta)

    @pytest.mark.parametrize("kw", [dict(optimizer="adam"), dict(sampler_mode="similar"), dict(pairing="sliding"),
                                    dict(sampler_mode="initial"), dict(method="plain")])
    def test_variants_run(self, kw):
        res = train(tiny_cfg(**kw))
        assert np.all(np.isfinite(res.theta.values))

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_divergence_reports_step(self, monkeypatch):
        import xbmeta.train as tr

        def exploding(theta, batch, clf):
            return loss_real(theta, batch, clf)[0], theta.with_values(theta.values * 0 + 1e308)

        loss_real = tr.loss_and_grad
        monkeypatch.setattr(tr, "loss_and_grad", exploding)
        with pytest.raises(NumericError, match="step 0"):
            train(tiny_cfg(method="plain", beta_init=10.0, beta_final=10.0))

    def test_learning_improves_base_accuracy(self):
        res = train(tiny_cfg(epochs=6, beta_init=0.1, alpha_init=0.1))
        top1 = [v for (e, s, split, m, v) in res.metrics if split == "test_base_ic" and m == "top1"]
        assert top1[-1] > 0.5
