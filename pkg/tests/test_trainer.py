import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from surgseg.data import TaskSpec, split_train_test
from surgseg.errors import ConfigError, DataError, NumericalError
from surgseg.train import (
    TrainConfig,
    Trainer,
    batch_indices,
    evaluate_model,
    fit,
    format_log_line,
    load_train_config,
    poly_lr,
    segmentor_from_checkpoint,
)

# ---------------------------------------------------------------------------
# learning rate schedule
# ---------------------------------------------------------------------------


def test_poly_lr_frozen_values():
    assert poly_lr(1e-3, 0, 1000) == 1e-3
    assert poly_lr(1e-3, 1000, 1000) == 0.0
    # halfway point: 1e-3 * 0.5 ** 0.9
    assert poly_lr(1e-3, 500, 1000) == pytest.approx(5.358867312681466e-04, rel=1e-12)
    assert poly_lr(1e-3, 500, 1000, power=0.9) == pytest.approx(
        1e-3 * math.exp(0.9 * math.log(0.5)), rel=1e-12
    )


@settings(max_examples=80, deadline=None)
@given(
    base=st.floats(1e-6, 1.0),
    t=st.integers(0, 999),
    power=st.floats(0.1, 2.0),
)
def test_poly_lr_monotonically_decreasing(base, t, power):
    a = poly_lr(base, t, 1000, power)
    b = poly_lr(base, t + 1, 1000, power)
    assert 0.0 <= b <= a <= base


def test_poly_lr_rejects_out_of_range():
    with pytest.raises(ConfigError):
        poly_lr(1e-3, -1, 100)
    with pytest.raises(ConfigError):
        poly_lr(1e-3, 101, 100)
    with pytest.raises(ConfigError):
        poly_lr(1e-3, 0, 0)


# ---------------------------------------------------------------------------
# deterministic data order
# ---------------------------------------------------------------------------


def test_batch_indices_cover_each_epoch_exactly():
    n, batch = 10, 4
    per_epoch = math.ceil(n / batch)
    for epoch in range(3):
        seen = []
        for slot in range(per_epoch):
            e, idx = batch_indices(7, epoch * per_epoch + slot, n, batch)
            assert e == epoch
            seen.extend(idx.tolist())
        assert sorted(seen) == list(range(n))


def test_batch_indices_pure_function():
    a = batch_indices(3, 17, 9, 2)
    b = batch_indices(3, 17, 9, 2)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])
    c = batch_indices(4, 17, 9, 2)
    assert not np.array_equal(a[1], c[1]) or a[0] != c[0]


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def test_load_train_config_file_and_overrides(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text(
        "# comment\nmax_iter = 20\nbatch_size = 3\nadversarial_enabled = false\ndisc_seed = none\n"
    )
    cfg = load_train_config(cfg_file, overrides=["batch_size=5", "aux_weight=0.3"])
    assert cfg.max_iter == 20
    assert cfg.batch_size == 5  # override wins
    assert cfg.adversarial_enabled is False
    assert cfg.disc_seed is None
    assert cfg.aux_weight == 0.3


def test_load_train_config_rejects_unknown_key(tmp_path):
    with pytest.raises(ConfigError, match="unknown config key"):
        load_train_config(None, overrides=["max_iter=5", "bogus=1"])


def test_load_train_config_rejects_bad_values(tmp_path):
    with pytest.raises(ConfigError, match="boolean"):
        load_train_config(None, overrides=["max_iter=5", "adversarial_enabled=maybe"])
    with pytest.raises(ConfigError, match="max_iter"):
        load_train_config(None, overrides=["batch_size=2"])
    p = tmp_path / "broken.cfg"
    p.write_text("max_iter\n")
    with pytest.raises(ConfigError, match="key = value"):
        load_train_config(p)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(max_iter=0)
    with pytest.raises(ConfigError):
        TrainConfig(max_iter=10, base_lr_seg=-1)
    with pytest.raises(ConfigError):
        TrainConfig(max_iter=10, beta1=1.0)
    cfg = TrainConfig(max_iter=10)
    assert cfg.weights.aux_weight == 0.4
    assert cfg.weights.adv_weight == 0.01


# ---------------------------------------------------------------------------
# trainer mechanics (miniature network, in-memory batches)
# ---------------------------------------------------------------------------


def _toy_batch(seed=0, k=2, hw=(64, 64)):
    r = np.random.default_rng(seed)
    x = torch.from_numpy(r.standard_normal((2, 3, *hw)).astype(np.float32))
    y = torch.from_numpy(r.integers(0, k, size=(2, *hw)))
    return x, y


def _mini_trainer(mini_config, **kw):
    defaults = dict(max_iter=50, batch_size=2, disc_base_channels=8)
    defaults.update(kw)
    cfg = TrainConfig(**defaults)
    return Trainer(cfg, "binary", mini_config(num_classes=2, grids=(1, 2)))


def test_step_records_losses_and_advances(mini_config):
    tr = _mini_trainer(mini_config)
    x, y = _toy_batch()
    rec = tr.step(x, y)
    assert tr.iteration == 1
    assert rec["iteration"] == 0
    assert rec["lr_seg"] == pytest.approx(1e-3)
    assert rec["total"] > 0 and np.isfinite(rec["total"])
    assert len(tr.loss_history) == 1


def test_identical_seeds_give_identical_trajectories(mini_config):
    runs = []
    for _ in range(2):
        tr = _mini_trainer(mini_config, seed=5)
        x, y = _toy_batch(3)
        runs.append([tr.step(x, y) for _ in range(3)])
    assert runs[0] == runs[1]  # exact float equality, not approx


def _flat_params(module):
    return torch.cat([p.detach().flatten().clone() for p in module.parameters()])


def test_discriminator_phase_leaves_segmentor_untouched(mini_config):
    tr = _mini_trainer(mini_config)
    x, y = _toy_batch()
    main_logits, _ = tr.segmentor(x)
    seg_before = _flat_params(tr.segmentor)
    disc_before = _flat_params(tr.discriminator)
    real, fake = tr._discriminator_inputs(main_logits.detach(), y)
    tr._update_discriminator(real, fake, lr=1e-4)
    assert torch.equal(_flat_params(tr.segmentor), seg_before)
    assert not torch.equal(_flat_params(tr.discriminator), disc_before)


def test_segmentor_phase_leaves_discriminator_untouched(mini_config):
    tr = _mini_trainer(mini_config)
    x, y = _toy_batch()
    main_logits, aux_logits = tr.segmentor(x)
    disc_before = _flat_params(tr.discriminator)
    seg_before = _flat_params(tr.segmentor)
    tr._update_segmentor(main_logits, aux_logits, y, lr=1e-3)
    assert torch.equal(_flat_params(tr.discriminator), disc_before)
    assert not torch.equal(_flat_params(tr.segmentor), seg_before)
    # the freeze must be lifted again for phase (a) of the next iteration
    assert all(p.requires_grad for p in tr.discriminator.parameters())


def test_disabled_adversarial_ignores_discriminator(mini_config):
    recs = []
    for disc_seed in (100, 200):
        tr = _mini_trainer(mini_config, adversarial_enabled=False, disc_seed=disc_seed, seed=1)
        x, y = _toy_batch(7)
        disc_before = _flat_params(tr.discriminator)
        recs.append([tr.step(x, y) for _ in range(2)])
        assert torch.equal(_flat_params(tr.discriminator), disc_before)
        assert all(r["adv"] == 0.0 and r["disc"] == 0.0 for r in recs[-1])
    assert recs[0] == recs[1]


def test_step_rejects_non_finite_loss(mini_config):
    tr = _mini_trainer(mini_config, adversarial_enabled=False)
    x, y = _toy_batch()
    x[0, 0, 0, 0] = float("inf")
    with pytest.raises(NumericalError, match="non-finite"):
        tr.step(x, y)


def test_step_refuses_past_max_iter(mini_config):
    tr = _mini_trainer(mini_config, max_iter=1)
    x, y = _toy_batch()
    tr.step(x, y)
    with pytest.raises(ConfigError, match="already ran"):
        tr.step(x, y)


def test_task_network_mismatch_rejected(mini_config):
    with pytest.raises(ConfigError, match="classes"):
        Trainer(TrainConfig(max_iter=1), "parts", mini_config(num_classes=2))


def test_save_restore_resumes_exact_trajectory(tmp_path, mini_config):
    straight = _mini_trainer(mini_config, seed=9)
    interrupted = _mini_trainer(mini_config, seed=9)
    batches = [_toy_batch(i) for i in range(8)]

    straight_recs = [straight.step(x, y) for x, y in batches]

    for x, y in batches[:4]:
        interrupted.step(x, y)
    ckpt = tmp_path / "mid.bin"
    interrupted.save(ckpt)
    resumed = Trainer.restore(ckpt)
    assert resumed.iteration == 4
    resumed_recs = [resumed.step(x, y) for x, y in batches[4:]]

    assert straight_recs[4:] == resumed_recs  # bitwise-equal float trajectories


def test_checkpoint_round_trip_is_bit_exact(tmp_path, mini_config):
    tr = _mini_trainer(mini_config)
    x, y = _toy_batch()
    tr.step(x, y)
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    tr.save(p1)
    Trainer.restore(p1).save(p2)
    from surgseg.checkpoint import load_checkpoint

    a, b = load_checkpoint(p1), load_checkpoint(p2)
    assert set(a.arrays) == set(b.arrays)
    for name in a.arrays:
        assert a.arrays[name].tobytes() == b.arrays[name].tobytes(), name
    assert a.config == b.config


def test_format_log_line_is_stable():
    rec = {
        "iteration": 7,
        "lr_seg": 1e-3,
        "lr_disc": 1.5e-4,
        "main": 0.5,
        "aux": 0.25,
        "adv": 0.125,
        "disc": 1.0,
        "total": 0.60125,
    }
    line = format_log_line(rec)
    assert line == format_log_line(dict(rec))
    assert "iter=000007" in line and "total=6.012500000e-01" in line


# ---------------------------------------------------------------------------
# fit / evaluate integration on a tiny dataset
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory, small_dataset, mini_config):
    out = tmp_path_factory.mktemp("tinyrun")
    train, test = split_train_test(small_dataset)
    cfg = TrainConfig(
        max_iter=4, batch_size=2, seed=0, disc_base_channels=8, checkpoint_every=2, eval_every=2
    )
    final = fit(
        cfg,
        train,
        out,
        eval_manifest=test,
        net_config=mini_config(num_classes=4, grids=(1, 2)),
    )
    return {"out": out, "final": final, "train": train, "test": test, "config": cfg}


def test_fit_writes_expected_artifacts(tiny_run):
    out = tiny_run["out"]
    assert tiny_run["final"] == out / "ckpt_final.bin"
    assert tiny_run["final"].is_file()
    assert (out / "means.txt").is_file()
    assert (out / "ckpt_iter000002.bin").is_file()
    assert (out / "metrics_iter000002.txt").is_file()
    log_lines = (out / "train.log").read_text().splitlines()
    assert sum(1 for l in log_lines if l.startswith("iter=")) == 4
    assert sum(1 for l in log_lines if l.startswith("eval ")) == 2


def test_fit_resume_matches_straight_run(tmp_path, tiny_run, mini_config):
    cfg = tiny_run["config"]
    resumed_dir = tmp_path / "resumed"
    final = fit(
        cfg,
        tiny_run["train"],
        resumed_dir,
        net_config=mini_config(num_classes=4, grids=(1, 2)),
        resume=tiny_run["out"] / "ckpt_iter000002.bin",
    )
    straight = [
        l for l in (tiny_run["out"] / "train.log").read_text().splitlines() if l.startswith("iter=")
    ]
    resumed = [
        l for l in (resumed_dir / "train.log").read_text().splitlines() if l.startswith("iter=")
    ]
    assert resumed == straight[2:]
    assert final.is_file()


def test_evaluate_model_reports_over_split(tiny_run):
    seg, task, means = segmentor_from_checkpoint(tiny_run["final"])
    assert task.kind == "parts"
    report = evaluate_model(seg, tiny_run["test"], task, means)
    assert report.num_samples == len(tiny_run["test"])
    assert 0.0 <= report.mean_foreground_dice <= 1.0
    aux_report = evaluate_model(seg, tiny_run["test"], task, means, branch="auxiliary")
    assert aux_report.num_samples == len(tiny_run["test"])


def test_evaluate_model_rejects_bad_branch(tiny_run):
    seg, task, means = segmentor_from_checkpoint(tiny_run["final"])
    with pytest.raises(ConfigError, match="branch"):
        evaluate_model(seg, tiny_run["test"], task, means, branch="turbo")


def test_fit_rejects_empty_manifest(tmp_path, small_dataset):
    from surgseg.data import DatasetManifest

    empty = DatasetManifest(samples=[], task=TaskSpec.from_kind("binary"))
    with pytest.raises(DataError, match="empty"):
        fit(TrainConfig(max_iter=1), empty, tmp_path / "x")


def test_resume_task_mismatch_rejected(tmp_path, tiny_run):
    from surgseg.data import DatasetManifest

    wrong = DatasetManifest(
        samples=tiny_run["train"].samples, task=TaskSpec.from_kind("binary"), split="train"
    )
    with pytest.raises(DataError, match="task"):
        fit(tiny_run["config"], wrong, tmp_path / "y", resume=tiny_run["final"])
