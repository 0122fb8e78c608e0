"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest
from scipy.ndimage import label

from mimlab.archive import decode_archive, encode_archive
from mimlab.data import SyntheticDataset
from mimlab.gradcheck import FLAG_SETTINGS, check_pipeline, check_primitives, micro_fixture
from mimlab.harness import SWEEP_FIELDS, SweepPlan, mean_probe_by_flags, read_rows, run_sweep
from mimlab.loss import BOTH, MASKED_ONLY, VISIBLE_ONLY, LossKind, SupervisionFlags, total_loss
from mimlab.masking import blockwise_mask, default_ratio, random_mask, target_mask_count
from mimlab.model import ENCODER_PRESETS, ModelConfig, bundle_shapes, forward_pipeline, init_bundle
from mimlab.numerics import Tensor
from mimlab.patching import PatchGrid
from mimlab.rng import stream
from mimlab.teacher import pseudo_vit
from mimlab.train import TrainConfig, model_config_for, pretrain

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def teacher():
    return pseudo_vit("micro", patch_size=4, seed=1234)


def test_gradient_suite(criterion):
    with criterion(1, "gradient suite, max relative error < 1e-3 in < 2 min") as c:
        t0 = time.perf_counter()
        prim = check_primitives()
        pipe = {(k.value, f.delta_v, f.delta_m): check_pipeline(k, f, probes=20) for k in LossKind for f in FLAG_SETTINGS}
        elapsed = time.perf_counter() - t0
        bundle, images, masks, _ = micro_fixture(0)
        worst = max(max(prim.values()), max(pipe.values()))
        c.note(f"{len(prim)} primitives, {len(pipe)} pipeline cases, max err {worst:.2e}, {elapsed:.1f}s")
        assert images.shape == (2, 3, 8, 8) and bundle.config.grid.n == 4 and all(m.masked.size == 2 for m in masks)
        assert worst < 1e-3
        assert elapsed < 120


def _scalar_loss(y, t, kind):
    d = len(y)
    if kind is LossKind.COSINE:
        dot = sum(y[i] * t[i] for i in range(d))
        ny = math.sqrt(sum(v * v for v in y))
        nt = math.sqrt(sum(v * v for v in t))
        return 1.0 - dot / (ny * nt + 1e-8)
    acc = 0.0
    for i in range(d):
        e = y[i] - t[i]
        if kind is LossKind.MSE:
            acc += e * e
        else:
            acc += 0.5 * e * e if abs(e) < 1.0 else abs(e) - 0.5
    return acc / d


def _brute(y_v, t_v, y_m, t_m, flags, kind):
    total = 0.0
    for b in range(y_v.shape[0]):
        sv = sum(_scalar_loss(y_v[b, i], t_v[b, i], kind) for i in range(y_v.shape[1]))
        sm = sum(_scalar_loss(y_m[b, i], t_m[b, i], kind) for i in range(y_m.shape[1]))
        total += (flags.delta_v * sv + flags.delta_m * sm) / (flags.delta_v * y_v.shape[1] + flags.delta_m * y_m.shape[1])
    return total / y_v.shape[0]


def test_loss_oracle(criterion):
    with criterion(2, "weighted loss matches scalar-loop oracle (1e-6) and flag decomposition (1e-5)") as c:
        rng = np.random.default_rng(2024)
        worst_oracle = worst_split = 0.0
        for _ in range(100):
            b = int(rng.integers(1, 4))
            n = int(rng.integers(2, 17))
            nm = int(rng.integers(1, n))
            nv = n - nm
            d = int(rng.integers(1, 9))
            kind = list(LossKind)[int(rng.integers(3))]
            flags = [BOTH, VISIBLE_ONLY, MASKED_ONLY][int(rng.integers(3))]
            y_v, t_v = rng.standard_normal((2, b, nv, d))
            y_m, t_m = rng.standard_normal((2, b, nm, d))
            got = float(total_loss(Tensor(y_v), t_v, Tensor(y_m), t_m, flags, kind).data)
            worst_oracle = max(worst_oracle, abs(got - _brute(y_v, t_v, y_m, t_m, flags, kind)))
            # per-sample decomposition: both * (|v| + |m|) == visible * |v| + masked * |m|
            y_v1, t_v1, y_m1, t_m1 = (a[:1] for a in (y_v, t_v, y_m, t_m))
            args = (Tensor(y_v1), t_v1, Tensor(y_m1), t_m1)
            both = float(total_loss(*args, BOTH, kind).data)
            vis = float(total_loss(*args, VISIBLE_ONLY, kind).data)
            msk = float(total_loss(*args, MASKED_ONLY, kind).data)
            worst_split = max(worst_split, abs(both * n - (vis * nv + msk * nm)))
        c.note(f"oracle err {worst_oracle:.1e}, decomposition err {worst_split:.1e}")
        assert worst_oracle < 1e-6
        assert worst_split < 1e-5


def test_masking_suite(criterion):
    with criterion(3, "masking invariants (10k/sampler), blockwise contiguity (10k seeds), default ratios") as c:
        grid = PatchGrid(14, 14, 16)
        gammas = np.random.default_rng(0).uniform(0, 1, 10_000)
        for name, sampler in (("random", random_mask), ("blockwise", blockwise_mask)):
            for s, gamma in enumerate(gammas):
                count = target_mask_count(grid.n, float(gamma))
                m = sampler(grid, count, stream(s, "acceptance/invariants"))
                assert m.masked.size == count, name
                assert not np.intersect1d(m.visible, m.masked).size, name
                union = np.union1d(m.visible, m.masked)
                assert union.size == grid.n and union[0] == 0 and union[-1] == grid.n - 1, name
        comps = {}
        for name, sampler in (("random", random_mask), ("blockwise", blockwise_mask)):
            counts = [label(sampler(grid, 98, stream(s, "acceptance/cc")).as_bool().reshape(14, 14))[1] for s in range(10_000)]
            comps[name] = float(np.mean(counts))
        c.note(f"mean components blockwise {comps['blockwise']:.2f} vs random {comps['random']:.2f}")
        assert comps["blockwise"] < comps["random"]
        table = [default_ratio(s) for s in ("tiny", "small", "base", "large")]
        c.note(f"ratios {table}")
        assert table == [0.15, 0.25, 0.50, 0.50]


def test_construction_guarantees(criterion, teacher):
    with criterion(4, "visible predictions ignore masked pixels; decoder frozen when masked supervision is off") as c:
        for seed in range(5):
            bundle, images, masks, _ = micro_fixture(seed)
            ref, _ = forward_pipeline(bundle, images, masks)
            noisy = images.copy()
            rng = np.random.default_rng(seed)
            for b, m in enumerate(masks):
                for idx in m.masked:
                    r, col = m.grid.coords(int(idx))
                    noisy[b, :, r * 4 : r * 4 + 4, col * 4 : col * 4 + 4] = rng.uniform(-5, 5, (3, 4, 4))
            out, _ = forward_pipeline(bundle, noisy, masks)
            assert out.data.tobytes() == ref.data.tobytes()
        cfg = TrainConfig(epochs=3, batch_size=16, lr_peak=1e-3, gamma=0.5, flags=SupervisionFlags(1, 0))
        ds = SyntheticDataset(64)
        init = init_bundle(model_config_for(cfg, teacher), cfg.seed)
        res = pretrain(cfg, ds, teacher)
        names = [k for k in init.params if k.startswith("decoder.")]
        unchanged = sum(res.bundle.params[k].data.tobytes() == init.params[k].data.tobytes() for k in names)
        c.note(f"{unchanged}/{len(names)} decoder tensors bit-identical after {cfg.epochs} epochs")
        assert unchanged == len(names) and "decoder.mask_token" in names


def test_determinism_and_persistence(criterion, teacher, tmp_path):
    with criterion(5, "bit-identical metrics, bit-exact resume, bit-exact archive round trips") as c:
        ds = SyntheticDataset(64)
        cfg = TrainConfig(epochs=3, batch_size=16, lr_peak=1e-3, gamma=0.5, checkpoint_every=1)
        pretrain(cfg, ds, teacher, out_dir=tmp_path / "a")
        pretrain(cfg, ds, teacher, out_dir=tmp_path / "b")
        same_csv = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
        pretrain(cfg, ds, teacher, out_dir=tmp_path / "c", stop_after_epoch=2)
        resumed = pretrain(cfg, ds, teacher, out_dir=tmp_path / "c", resume=tmp_path / "c" / "checkpoint-epoch002.caet")
        same_resume = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "c" / "metrics.csv").read_bytes()
        c.note(f"epoch-3 loss {resumed.metrics[-1]['loss']}")
        rng = np.random.default_rng(0)
        shapes = 0
        for preset in ENCODER_PRESETS:
            seen = set()
            for shape in bundle_shapes(ModelConfig.from_preset(preset, patch_size=16, image_size=(224, 224), target_dim=512)).values():
                if tuple(shape) in seen:
                    continue
                seen.add(tuple(shape))
                arr = rng.standard_normal(shape).astype(np.float32)
                assert decode_archive(encode_archive({"x": arr})).tensors["x"].tobytes() == arr.tobytes()
                shapes += 1
        c.note(f"{shapes} distinct preset shapes round-tripped")
        assert same_csv and same_resume


def test_learnability(criterion, teacher):
    with criterion(6, "visible-only distillation: final epoch loss < 50% of first, < 5 min") as c:
        t0 = time.perf_counter()
        cfg = TrainConfig(epochs=3, batch_size=32, lr_peak=1e-3, gamma=0.5, flags=SupervisionFlags(1, 0))
        res = pretrain(cfg, SyntheticDataset(256), teacher)
        elapsed = time.perf_counter() - t0
        losses = [float(r["loss"]) for r in res.metrics]
        c.note(f"epoch losses {', '.join(f'{v:.4f}' for v in losses)}, ratio {losses[-1] / losses[0]:.2f}, {elapsed:.1f}s")
        assert losses[-1] < 0.5 * losses[0]
        assert elapsed < 300


def test_supervision_position_ordering(criterion, tmp_path):
    with criterion(7, "probe accuracy: visible-supervised settings >= masked-only (mean of 3 seeds)") as c:
        plan = SweepPlan(
            models=["micro"],
            gammas=[0.5],
            flags=[SupervisionFlags(1, 0), SupervisionFlags(0, 1), SupervisionFlags(1, 1)],
            seeds=[0, 1, 2],
            epochs=10,
            train={"lr_peak": 1e-3},
            dataset={"n": 512},
        )
        rows = run_sweep(plan, tmp_path / "table.csv")
        means = mean_probe_by_flags(rows)
        c.note(", ".join(f"dv={k[0]},dm={k[1]}: {v:.3f}" for k, v in sorted(means.items())))
        assert len(means) == 3
        assert means[(1, 0)] >= means[(0, 1)]
        assert means[(1, 1)] >= means[(0, 1)]


def test_sweep_harness(criterion, tmp_path):
    with criterion(8, "3 ratios x 2 seeds sweep: 6 well-formed rows, idempotent, < 30 min") as c:
        t0 = time.perf_counter()
        plan = SweepPlan(models=["micro"], gammas=[0.25, 0.5, 0.75], seeds=[0, 1], epochs=5, train={"lr_peak": 1e-3}, dataset={"n": 256})
        out = tmp_path / "sweep.csv"
        first = run_sweep(plan, out)
        snapshot = out.read_bytes()
        second = run_sweep(plan, out)
        elapsed = time.perf_counter() - t0
        rows = read_rows(out)
        c.note(f"{len(rows)} rows, rerun added {len(second)}, {elapsed:.1f}s")
        assert len(first) == 6 and len(rows) == 6 and second == [] and out.read_bytes() == snapshot
        assert snapshot.decode().splitlines()[0] == ",".join(SWEEP_FIELDS)
        for r in rows:
            assert 0.0 <= float(r["probe_acc"]) <= 1.0 and math.isfinite(float(r["final_pretrain_loss"]))
        assert elapsed < 1800
