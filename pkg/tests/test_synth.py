"""Benchmark generator checks: determinism, label structure, Bayes
ceilings, metric oracles, and the dataset file round-trip."""

import hashlib

import numpy as np
import pytest

from uvmtl.encoders import IMAGE_MODALITIES, JOINT_MODALITIES, MODALITY_NAMES
from uvmtl.errors import ConfigMismatch, EmptyList, InvalidConfig, LengthMismatch
from uvmtl.synth import (
    GenConfig,
    Sample,
    accuracy,
    bayes_accuracy,
    clean_labels,
    generate,
    load_dataset,
    mean_accuracy,
    mixing_matrix,
    readout_matrices,
    save_dataset,
)


def _tiny(**kw):
    base = dict(num_samples=6, height=4, width=4, image_channels=1,
                frames=2, joints=2)
    base.update(kw)
    return GenConfig(**base)


def _digest(samples):
    h = hashlib.sha256()
    for s in samples:
        h.update(np.ascontiguousarray(s.labels).tobytes())
        for name in MODALITY_NAMES:
            h.update(np.ascontiguousarray(s.modalities[name]).tobytes())
    return h.hexdigest()


# ------------------------------------------------------------ config guards


def test_config_guards():
    with pytest.raises(LengthMismatch):
        GenConfig(num_classes=(4, 4), label_noise=(0.1,))
    with pytest.raises(InvalidConfig):
        GenConfig(num_classes=(), label_noise=())
    with pytest.raises(InvalidConfig):
        GenConfig(num_classes=(1, 4), label_noise=(0.1, 0.1))
    with pytest.raises(InvalidConfig):
        GenConfig(num_classes=(4,), label_noise=(0.5,))
    with pytest.raises(InvalidConfig):
        GenConfig(num_classes=(4,), label_noise=(-0.1,))
    with pytest.raises(InvalidConfig):
        _tiny(height=0)
    with pytest.raises(InvalidConfig):
        _tiny(shared_dim=0)
    with pytest.raises(InvalidConfig):
        # orthonormal readout rows cannot exceed the latent dim
        _tiny(num_classes=(9, 4, 4, 4), shared_dim=4, task_dim=3)


def test_latent_dim_property():
    cfg = _tiny(shared_dim=4, task_dim=3)
    assert cfg.num_tasks == 4
    assert cfg.latent_dim == 4 + 4 * 3


# ------------------------------------------------------------ generation


def test_shapes_and_label_ranges():
    cfg = _tiny()
    samples = generate(cfg)
    assert len(samples) == cfg.num_samples
    for s in samples:
        assert set(s.modalities) == set(MODALITY_NAMES)
        for name in IMAGE_MODALITIES:
            assert s.modalities[name].shape == (4, 4, 1)
        for name in JOINT_MODALITIES:
            assert s.modalities[name].shape == (2, 2, 3)
        assert s.labels.shape == (cfg.num_tasks,)
        for j, k in enumerate(cfg.num_classes):
            assert 0 <= s.labels[j] < k
        assert s.latents["shared"].shape == (cfg.shared_dim,)


def test_same_seed_identical_dataset():
    cfg = _tiny(num_samples=12)
    assert _digest(generate(cfg)) == _digest(generate(cfg))


def test_different_seed_differs():
    assert _digest(generate(_tiny())) != _digest(generate(_tiny(seed=1)))


def test_sample_stream_is_counter_based():
    # sample i depends only on (seed, i): a longer run extends, not reshuffles
    short = generate(_tiny(num_samples=5))
    long = generate(_tiny(num_samples=9))
    assert _digest(short) == _digest(long[:5])


def test_zero_render_noise_is_exact_linear_mix():
    cfg = _tiny(noise_scale=0.0)
    samples = generate(cfg)
    m = mixing_matrix(cfg, "driver0")
    for s in samples:
        u = np.concatenate([s.latents["shared"]]
                           + [s.latents[f"task{j}"] for j in range(cfg.num_tasks)])
        np.testing.assert_allclose(
            s.modalities["driver0"].ravel(), m @ u, atol=1e-12
        )


def test_scene_streams_attenuate_driver_latents():
    cfg = _tiny()
    drv = mixing_matrix(cfg, "driver0")
    scn = mixing_matrix(cfg, "scene0")
    t0 = slice(cfg.shared_dim, cfg.shared_dim + cfg.task_dim)

    def block_norm(m, sl):
        return float(np.linalg.norm(m[:, sl]))

    # same raw matrix before scaling, so the scaled block must be smaller
    assert block_norm(scn, t0) < block_norm(drv, t0)
    t_last = slice(cfg.latent_dim - cfg.task_dim, cfg.latent_dim)
    assert block_norm(drv, t_last) < block_norm(scn, t_last)


# ------------------------------------------------------------ labels


def test_noiseless_labels_equal_clean_readout():
    cfg = _tiny(label_noise=(0.0, 0.0, 0.0, 0.0), num_samples=40)
    readouts = readout_matrices(cfg)
    for s in generate(cfg):
        np.testing.assert_array_equal(s.labels, clean_labels(cfg, s.latents, readouts))


def test_indicator_readout_reads_argmax_coordinate():
    cfg = _tiny(num_classes=(4,), label_noise=(0.0,), shared_dim=2, task_dim=2)
    rng = np.random.default_rng(0)
    eye = [np.eye(4)]  # row c fires on coordinate c of (shared, task0)
    for _ in range(25):
        latents = {"shared": rng.standard_normal(2), "task0": rng.standard_normal(2)}
        u = np.concatenate([latents["shared"], latents["task0"]])
        assert clean_labels(cfg, latents, eye)[0] == int(np.argmax(u))


def test_readout_rows_orthonormal():
    cfg = _tiny()
    for r in readout_matrices(cfg):
        np.testing.assert_allclose(r @ r.T, np.eye(r.shape[0]), atol=1e-10)


def test_bayes_accuracy_formula():
    cfg = _tiny(num_classes=(4, 2), label_noise=(0.2, 0.4))
    assert bayes_accuracy(cfg, 0) == pytest.approx(0.8 + 0.2 / 4)
    assert bayes_accuracy(cfg, 1) == pytest.approx(0.6 + 0.4 / 2)


def test_bayes_ceiling_matches_monte_carlo():
    # the latent-readout oracle hits exactly the label-noise ceiling
    cfg = GenConfig(num_samples=10_000, height=2, width=2, image_channels=1,
                    frames=1, joints=1)
    samples = generate(cfg)
    readouts = readout_matrices(cfg)
    hits = np.zeros(cfg.num_tasks)
    for s in samples:
        clean = clean_labels(cfg, s.latents, readouts)
        hits += clean == s.labels
    for j in range(cfg.num_tasks):
        assert abs(hits[j] / len(samples) - bayes_accuracy(cfg, j)) < 0.01


def test_task_difficulty_monotone_in_noise():
    cfg = GenConfig(num_samples=5_000, height=2, width=2, image_channels=1,
                    frames=1, joints=1)
    samples = generate(cfg)
    readouts = readout_matrices(cfg)
    hits = np.zeros(cfg.num_tasks)
    for s in samples:
        hits += clean_labels(cfg, s.latents, readouts) == s.labels
    order_by_acc = np.argsort(hits)
    order_by_noise = np.argsort(-np.asarray(cfg.label_noise))
    np.testing.assert_array_equal(order_by_acc, order_by_noise)


def test_random_predictor_sits_at_chance():
    cfg = GenConfig(num_samples=5_000, height=2, width=2, image_channels=1,
                    frames=1, joints=1)
    samples = generate(cfg)
    labels = np.stack([s.labels for s in samples])
    rng = np.random.default_rng(123)
    accs = []
    for j, k in enumerate(cfg.num_classes):
        preds = rng.integers(0, k, size=len(samples))
        accs.append(accuracy(preds, labels[:, j]))
    chance = float(np.mean([1.0 / k for k in cfg.num_classes]))
    sigma = np.sqrt(sum((1 / k) * (1 - 1 / k) / len(samples)
                        for k in cfg.num_classes)) / cfg.num_tasks
    assert abs(mean_accuracy(accs) - chance) <= 3 * sigma


# ------------------------------------------------------------ metrics


def test_accuracy_direct_counts():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert accuracy([0, 0, 0], [1, 2, 3]) == 0.0
    assert accuracy([1, 2, 3, 4], [1, 2, 3, 0]) == 0.75


def test_accuracy_guards():
    with pytest.raises(LengthMismatch):
        accuracy([1, 2], [1, 2, 3])
    with pytest.raises(LengthMismatch):
        accuracy(np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(EmptyList):
        accuracy([], [])


def test_mean_accuracy_values():
    assert abs(mean_accuracy((77.39, 73.82, 96.57, 87.07)) - 83.71) < 0.005
    assert mean_accuracy((5.0, 5.0, 5.0)) == 5.0
    assert mean_accuracy((0.0, 100.0)) == 50.0
    with pytest.raises(EmptyList):
        mean_accuracy(())


def test_accuracy_matches_count_oracle_on_random_sets():
    rng = np.random.default_rng(7)
    for _ in range(20):
        n = int(rng.integers(1, 50))
        preds = rng.integers(0, 4, size=n)
        labels = rng.integers(0, 4, size=n)
        want = sum(int(p == l) for p, l in zip(preds, labels)) / n
        assert accuracy(preds, labels) == want


# ------------------------------------------------------------ file format


def test_dataset_round_trip(tmp_path):
    cfg = _tiny(num_samples=7)
    samples = generate(cfg)
    path = tmp_path / "bench.uvds"
    save_dataset(cfg, samples, path)
    cfg2, loaded = load_dataset(path)
    assert cfg2 == cfg
    assert len(loaded) == len(samples)
    for a, b in zip(samples, loaded):
        np.testing.assert_array_equal(a.labels, b.labels)
        for name in MODALITY_NAMES:
            np.testing.assert_array_equal(a.modalities[name], b.modalities[name])
        np.testing.assert_array_equal(a.latents["shared"], b.latents["shared"])


def test_dataset_file_bytes_reproducible(tmp_path):
    cfg = _tiny(num_samples=5)
    p1, p2 = tmp_path / "a.uvds", tmp_path / "b.uvds"
    save_dataset(cfg, generate(cfg), p1)
    save_dataset(cfg, generate(cfg), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_dataset_rejects_foreign_files(tmp_path):
    bad = tmp_path / "bad.uvds"
    bad.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ConfigMismatch):
        load_dataset(bad)

    cfg = _tiny(num_samples=2)
    good = tmp_path / "good.uvds"
    save_dataset(cfg, generate(cfg), good)
    raw = bytearray(good.read_bytes())
    raw[4] = 99  # bump the version field
    bad2 = tmp_path / "bad2.uvds"
    bad2.write_bytes(bytes(raw))
    with pytest.raises(ConfigMismatch):
        load_dataset(bad2)
