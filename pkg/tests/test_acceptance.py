"""Acceptance suite: one test per criterion, each printing a PASS line
(run with ``pytest tests/test_acceptance.py -v -s``).

The desk-scale learning criterion trains the full default-architecture
model on the bundled synthetic texture dataset; expect a few minutes of
wall time on one CPU core.
"""

import math
import os
import time

import numpy as np
import numpy.testing as npt
import pytest

from gradcheck import check_gradients
from vitforge import checkpoint as CK
from vitforge import cli
from vitforge import data as D
from vitforge import metrics as MT
from vitforge import model as M
from vitforge import train as TR
from vitforge.model import ViTConfig
from vitforge.tensor import Tensor
from vitforge import tensor as T

rng = np.random.default_rng(2024)


def _pass(label, detail=""):
    print(f"\nPASS {label}" + (f" ({detail})" if detail else ""), flush=True)


# ---------------------------------------------------------------------------
# criterion 1: patch arithmetic


def test_criterion_1_patch_arithmetic():
    start = time.monotonic()
    cfg = ViTConfig()
    images = Tensor(rng.random((1, 72, 72, 3)).astype(np.float32))
    patches = M.patchify(images, cfg.patch_size)
    assert patches.shape == (1, 144, 108)

    for p in range(1, 65):
        for h in range(p, 65, p):
            for w in range(p, 65, p):
                img = Tensor(np.zeros((1, h, w, 1), dtype=np.float32))
                n = M.patchify(img, p).shape[1]
                assert n == (h * w) // (p * p), (h, w, p)
    elapsed = time.monotonic() - start
    assert elapsed < 1.0, f"took {elapsed:.2f}s"
    _pass("criterion 1: patch arithmetic",
          f"144 patches x 108 elements; divisor grid checked in {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# criterion 2: gradient correctness


def _op_cases():
    a34, b34 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    w45, bias5 = rng.normal(size=(4, 5)), rng.normal(size=(5,))
    m75, m53 = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
    gain, bias4 = rng.normal(size=(4,)), rng.normal(size=(4,))
    q, k = rng.normal(size=(1, 2, 4, 3)), rng.normal(size=(1, 2, 4, 3))
    wts = Tensor(rng.normal(size=(1, 2, 4, 4)))
    ln_w = Tensor(rng.normal(size=(3, 4)))
    sm_w = Tensor(rng.normal(size=(3, 4)))
    labels = np.array([0, 2, 1])
    return [
        ("matmul", lambda ts: T.mean(T.matmul(ts[0], ts[1])), [m75, m53]),
        ("linear", lambda ts: T.mean(T.mul(T.linear(ts[0], ts[1], ts[2]), Tensor(fixed_35))),
         [a34, w45, bias5]),
        ("add", lambda ts: T.mean(T.mul(T.add(ts[0], ts[1]), Tensor(fixed_34))), [a34, b34]),
        ("mul", lambda ts: T.mean(T.mul(ts[0], ts[1])), [a34, b34]),
        ("scale", lambda ts: T.mean(T.scale(ts[0], -1.7)), [a34]),
        ("reshape", lambda ts: T.mean(T.mul(T.reshape(ts[0], (4, 3)), Tensor(fixed_43))), [a34]),
        ("transpose", lambda ts: T.mean(T.mul(T.transpose(ts[0], (1, 0)), Tensor(fixed_43))), [a34]),
        ("concat", lambda ts: T.mean(T.mul(T.concat([ts[0], ts[1]], axis=0), Tensor(fixed_64))),
         [a34, b34]),
        ("slice", lambda ts: T.mean(T.slice_axis(ts[0], 1, 1, 3)), [a34]),
        ("mean", lambda ts: T.mean(T.mul(T.mean(ts[0], axis=0), Tensor(fixed_4))), [a34]),
        ("softmax", lambda ts: T.mean(T.mul(T.softmax(ts[0], axis=-1), sm_w)), [a34]),
        ("attention_probs",
         lambda ts: T.mean(T.mul(T.attention_probs(ts[0], ts[1], 0.57), wts)), [q, k]),
        ("layernorm",
         lambda ts: T.mean(T.mul(T.layernorm(ts[0], ts[1], ts[2]), ln_w)),
         [a34, gain, bias4]),
        ("relu", lambda ts: T.mean(T.relu(ts[0])), [a34 + np.sign(a34) * 0.05]),
        ("gelu", lambda ts: T.mean(T.gelu(ts[0])), [a34]),
        ("dropout",
         lambda ts: T.mean(T.dropout(ts[0], 0.4, rng=np.random.default_rng(5), training=True)),
         [a34]),
        ("cross_entropy", lambda ts: T.softmax_cross_entropy(ts[0], labels), [a34]),
    ]


fixed_34 = rng.normal(size=(3, 4))
fixed_43 = rng.normal(size=(4, 3))
fixed_35 = rng.normal(size=(3, 5))
fixed_64 = rng.normal(size=(6, 4))
fixed_4 = rng.normal(size=(4,))


def test_criterion_2_gradient_correctness():
    start = time.monotonic()
    worst = 0.0
    for name, build, arrays in _op_cases():
        err = check_gradients(build, [np.array(a, dtype=np.float64) for a in arrays])
        worst = max(worst, err)

    # miniature full model: 12x12x1 images, patch 6, width 8, 2 layers,
    # 2 heads, head (16, 8), checked in 64-bit
    cfg = ViTConfig(
        image_size=(12, 12, 1), patch_size=6, projection_dim=8, num_layers=2,
        num_heads=2, encoder_mlp_dims=(16, 8), head_dims=(16, 8),
        num_classes=4, dropout_rate=0.0, head_dropout_rate=0.0,
    )
    params = M.init_params(cfg, np.random.default_rng(3), dtype=np.float64)
    images = rng.random((2, 12, 12, 1))
    labels = np.array([1, 3])
    names = list(params)

    def build(ts):
        local = dict(zip(names, ts))
        return T.softmax_cross_entropy(M.forward(Tensor(images), local, cfg), labels)

    err = check_gradients(build, [params[n].data.copy() for n in names])
    worst = max(worst, err)
    elapsed = time.monotonic() - start
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    _pass("criterion 2: gradient correctness",
          f"max relative error {worst:.2e} < 1e-4 across all ops and the "
          f"miniature model in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 3: metric oracles


def test_criterion_3_metric_oracles():
    start = time.monotonic()
    assert abs(MT.f1_score(0.71, 0.97) - 0.82) <= 0.005
    assert abs(MT.f1_score(1.00, 0.32) - 0.48) <= 0.005

    def recall_from_counts(correct, total):
        true = np.zeros(total, dtype=np.int64)
        pred = np.where(np.arange(total) < correct, 0, 1).astype(np.int64)
        cm = MT.confusion(true, pred, 2)
        return MT.precision_recall_f1(cm, 0).recall

    assert abs(recall_from_counts(143, 155) - 0.9226) <= 1e-4
    assert abs(recall_from_counts(187, 188) - 0.9947) <= 1e-4
    assert abs(recall_from_counts(163, 164) - 0.9939) <= 1e-4
    elapsed = time.monotonic() - start
    assert elapsed < 1.0
    _pass("criterion 3: metric oracles",
          "published F1 pairs and narrated recall counts reproduced")


# ---------------------------------------------------------------------------
# criterion 4: confusion-matrix consistency


def test_criterion_4_confusion_consistency():
    k = 4
    true = rng.integers(0, k, size=1000)
    pred = rng.integers(0, k, size=1000)
    cm = MT.confusion(true, pred, k)

    recount = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(true, pred):
        recount[t, p] += 1
    npt.assert_array_equal(cm.counts, recount)

    assert MT.accuracy(cm) == np.trace(cm.counts) / cm.counts.sum()
    for cls in range(k):
        m = MT.precision_recall_f1(cm, cls)
        assert m.tp + m.fn == int(cm.counts[cls].sum())
        assert m.tp + m.fp == int(cm.counts[:, cls].sum())
        assert m.tp + m.fp + m.fn + m.tn == 1000
    _pass("criterion 4: confusion-matrix consistency",
          "1000 random pairs match the brute-force recount exactly")


# ---------------------------------------------------------------------------
# criterion 5: desk-scale learning


def _desk_dataset():
    full = D.gen_synthetic(200, k=4, size=(72, 72, 3), seed=7)
    return full


def test_criterion_5_desk_scale_learning():
    start = time.monotonic()
    full = _desk_dataset()
    train_ds, val_ds, _ = D.split(full, D.SplitSpec(seed=7))
    cfg = ViTConfig()
    tc = TR.TrainConfig(max_epochs=50, early_stop_patience=50, seed=7)
    params = M.init_params(cfg, np.random.default_rng(7))

    reached = []

    def stop_when_learned(record):
        if record.val_acc >= 0.90:
            reached.append(record.epoch)
            return False

    _, records, _ = TR.train(params, cfg, tc, train_ds, val_ds,
                             callback=stop_when_learned)
    train_elapsed = time.monotonic() - start
    assert reached, (
        f"validation accuracy stayed below 90% for {len(records)} epochs: "
        f"{[round(r.val_acc, 3) for r in records]}"
    )
    assert reached[0] <= 50
    assert train_elapsed <= 900.0, f"training took {train_elapsed:.0f}s > 15 min"

    # label-shuffled control: permuting every label before the split leaves
    # nothing learnable, so validation accuracy must stay near chance
    shuffled = full.labels()
    np.random.default_rng(7001).shuffle(shuffled)
    control = D.Dataset(
        [D.LabeledImage(img.pixels, int(lab), img.source_path)
         for img, lab in zip(full, shuffled)],
        full.class_map,
    )
    c_train, c_val, _ = D.split(control, D.SplitSpec(seed=7))
    c_params = M.init_params(cfg, np.random.default_rng(7))
    c_tc = TR.TrainConfig(max_epochs=5, early_stop_patience=50, seed=7)
    _, c_records, _ = TR.train(c_params, cfg, c_tc, c_train, c_val)
    worst_control = max(r.val_acc for r in c_records)
    assert worst_control <= 0.35, (
        f"label-shuffled control reached {worst_control:.3f} validation "
        f"accuracy; possible leakage"
    )
    _pass("criterion 5: desk-scale learning",
          f"val_acc >= 0.90 at epoch {reached[0]} in {train_elapsed:.0f}s; "
          f"shuffled control max val_acc {worst_control:.3f} <= 0.35")


# ---------------------------------------------------------------------------
# criterion 6: determinism and persistence


SMALL_RUN_CFG = """
seed = 11
data.synthetic_per_class = 15
vit.image_size = 24,24,3
vit.patch_size = 6
vit.projection_dim = 16
vit.num_layers = 2
vit.num_heads = 2
vit.encoder_mlp_dims = 32,16
vit.head_dims = 32,16
train.learning_rate = 0.001
train.batch_size = 16
train.max_epochs = 4
augment.enabled = false
"""


def test_criterion_6_determinism_and_persistence(tmp_path):
    cfg_path = str(tmp_path / "run.cfg")
    with open(cfg_path, "w") as fh:
        fh.write(SMALL_RUN_CFG)

    out1, out2 = str(tmp_path / "r1"), str(tmp_path / "r2")
    assert cli.main(["train", "--config", cfg_path, "--out", out1]) == 0
    assert cli.main(["train", "--config", cfg_path, "--out", out2]) == 0
    curves1 = open(os.path.join(out1, "curves.csv"), "rb").read()
    curves2 = open(os.path.join(out2, "curves.csv"), "rb").read()
    assert curves1 == curves2, "identical config+seed must give identical curves.csv"

    # save -> load -> evaluate reproduces the pre-save confusion matrix
    ckpt = os.path.join(out1, "checkpoint.vitf")
    state = CK.load_state(ckpt)
    run_cfg = state.run_config
    full = D.gen_synthetic(run_cfg.synthetic_per_class, k=4,
                           size=run_cfg.vit.image_size, seed=run_cfg.seed)
    _, _, test_ds = D.split(full, run_cfg.split)
    params = state.best_params or state.params
    _, cm_before = TR.evaluate(params, test_ds, run_cfg.vit, 64)
    resaved = str(tmp_path / "resaved.vitf")
    CK.save_state(resaved, state)
    reloaded = CK.load_state(resaved)
    _, cm_after = TR.evaluate(reloaded.best_params or reloaded.params,
                              test_ds, run_cfg.vit, 64)
    assert cm_before == cm_after

    # truncation must be rejected wholesale
    blob = open(ckpt, "rb").read()
    for cut in (len(blob) - 1, len(blob) // 2, 3):
        broken = str(tmp_path / "broken.vitf")
        with open(broken, "wb") as fh:
            fh.write(blob[:cut])
        with pytest.raises(CK.TruncatedError):
            CK.load_state(broken)
    _pass("criterion 6: determinism and persistence",
          "byte-identical curves; checkpoint round-trip preserves the "
          "confusion matrix; truncations rejected")


# ---------------------------------------------------------------------------
# criterion 7: pipeline contracts


def test_criterion_7_pipeline_contracts(tmp_path):
    full = D.gen_synthetic(250, k=4, size=(12, 12, 3), seed=3)
    train_ds, val_ds, test_ds = D.split(full, D.SplitSpec(seed=3))

    ids = [id(img) for s in (train_ds, val_ds, test_ds) for img in s.images]
    assert len(ids) == len(full) and set(ids) == {id(img) for img in full.images}

    for label in range(4):
        n_c = 250
        test_c = int((test_ds.class_counts())[label])
        val_c = int((val_ds.class_counts())[label])
        train_c = int((train_ds.class_counts())[label])
        assert abs(test_c - 0.2 * n_c) <= 1
        assert abs(val_c - 0.1 * (n_c - test_c)) <= 1
        assert train_c == n_c - test_c - val_c

    # loaded pixels stay in [0, 1] through a disk round-trip
    tree = str(tmp_path / "tree")
    D.write_dataset(D.gen_synthetic(3, k=2, size=(18, 18, 3), seed=4), tree)
    loaded = D.load_dataset(tree, target_size=(12, 12))
    for img in loaded:
        assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0

    img = full[17]
    out = D.augment(img, D.AugmentSpec.none(), np.random.default_rng(0))
    npt.assert_array_equal(out.pixels, img.pixels)
    assert out.label == img.label
    _pass("criterion 7: pipeline contracts",
          "splits disjoint/exhaustive at 8:2 then 9:1 (+/-1 per class); "
          "pixels bounded; zero-magnitude augmentation is the identity")


# ---------------------------------------------------------------------------
# criterion 8: early stopping


def test_criterion_8_early_stopping():
    cfg = ViTConfig(
        image_size=(12, 12, 1), patch_size=6, projection_dim=8, num_layers=1,
        num_heads=2, encoder_mlp_dims=(16, 8), head_dims=(16, 8),
        num_classes=4, dropout_rate=0.0, head_dropout_rate=0.0,
    )
    ds = D.gen_synthetic(3, k=4, size=(12, 12, 1), seed=5)
    patience = 3
    tc = TR.TrainConfig(batch_size=6, max_epochs=100,
                        early_stop_patience=patience, seed=6)
    params = M.init_params(cfg, np.random.default_rng(2))

    scripted = [1.0, 0.7, 0.85, 0.9, 0.95, 1.0, 1.1, 1.2, 1.3]
    snapshots = []

    def eval_stub(p, dataset, vit_cfg, batch_size):
        value = scripted[len(snapshots)]
        snapshots.append(p["patch_embed.w"].data.copy())
        k = len(dataset.class_map)
        cm = MT.ConfusionMatrix(np.eye(k, dtype=np.int64), dataset.class_map.names)
        return value, cm

    best, records, reason = TR.train(params, cfg, tc, ds, ds, eval_fn=eval_stub)
    assert reason == "early_stopping"
    best_epoch = 2  # scripted minimum
    # exactly `patience` non-improving epochs are tolerated; the next one stops
    assert len(records) == best_epoch + patience + 1
    npt.assert_array_equal(best["patch_embed.w"].data, snapshots[best_epoch - 1])
    _pass("criterion 8: early stopping",
          f"stopped after exactly {patience} tolerated epochs past the best; "
          f"best-epoch weights restored")
