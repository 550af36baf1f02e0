"""Acceptance criteria AC-1 .. AC-10. Each test records one PASS/FAIL line.

AC-3 and AC-4 train real models and take most of the suite's runtime.
"""

import gzip
import struct
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from lobeseg import gradcheck as gc
from lobeseg.ablation import AblationConfig, format_ablation, run_ablation
from lobeseg.cli import main as cli_main
from lobeseg.io_formats import load_checkpoint, parse_nifti1, read_volume, write_volume
from lobeseg.kernels import conv3d_fast
from lobeseg.losses import EmphysemaStats, dice_loss, emphysema_stats, hard_dice
from lobeseg.phantom import PhantomSpec, generate_phantom, make_dataset
from lobeseg.preprocess import LabelMap, PreprocessConfig, Volume, clip_hu, preprocess_case, resample, zscore
from lobeseg.tensor import Tensor, no_grad
from lobeseg.trainer import LRScheduleState, TrainConfig, foreground_dice, lr_on_plateau, train
from lobeseg.vnet import ModelConfig, VNet

from test_losses_metrics import brute_force_dice
from test_preprocess import trilinear_oracle
from test_tensor_engine import direct_conv

pytestmark = pytest.mark.slow

# voxel percentages of the normal-lung reference column
REFERENCE_NORMAL = {"background": 88.3, "LR": 2.69, "MR": 1.07, "UR": 2.43, "LL": 2.48, "UL": 2.86,
                    "trachea": 0.14, "bronchi": 0.03}
VOCAB = ("background", "LR", "MR", "UR", "LL", "UL", "trachea", "bronchi")


def test_ac1_gradient_suite(acceptance):
    t0 = time.perf_counter()
    results = gc.run_suite(None, seeds=5)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = all(r.passed and r.seeds >= 5 for r in results) and elapsed < 120
    ok &= "conv_prelu_softmax_dice" in {r.op for r in results}
    acceptance("AC-1", ok, f"{len(results)} ops x 5 seeds, worst {worst.op} rel err {worst.max_rel_error:.2e} "
                           f"(< 1e-4), {elapsed:.1f}s (< 120s)")
    assert ok, gc.format_results(results)


def test_ac2_oracle_equivalence(acceptance):
    rng = np.random.default_rng(2024)
    err64 = err32 = 0.0
    for _ in range(50):
        k = int(rng.integers(1, 4))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        spatial = [int(rng.integers(max(k - 2 * pad, 1), 7)) for _ in range(3)]
        shape_x = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), *spatial)
        shape_w = (int(rng.integers(1, 4)), shape_x[1], k, k, k)
        x, w = rng.normal(size=shape_x), rng.normal(size=shape_w)
        ref = direct_conv(x, w, None, stride, pad)
        err64 = max(err64, float(np.max(np.abs(conv3d_fast(x, w, stride, pad) - ref))))
        x32, w32 = x.astype(np.float32), w.astype(np.float32)
        ref32 = direct_conv(x32.astype(np.float64), w32.astype(np.float64), None, stride, pad)
        y32 = conv3d_fast(x32, w32, stride, pad)
        assert y32.dtype == np.float32
        err32 = max(err32, float(np.max(np.abs(y32 - ref32) / np.maximum(1.0, np.abs(ref32)))))
    dice_exact = 0
    for _ in range(100):
        a, b = rng.integers(0, 4, (8, 8, 8)), rng.integers(0, 4, (8, 8, 8))
        c = int(rng.integers(0, 4))
        dice_exact += hard_dice(a, b, c) == brute_force_dice(a, b, c)
    ok = err64 < 1e-10 and err32 < 1e-5 and dice_exact == 100
    acceptance("AC-2", ok, f"conv3d 50 shapes: f64 max err {err64:.1e} (< 1e-10), f32 {err32:.1e} (< 1e-5); "
                           f"hard_dice exact on {dice_exact}/100 pairs")
    assert ok


def test_ac3_overfit(acceptance):
    t0 = time.perf_counter()
    pc = PreprocessConfig(target_size=32)
    cases = [preprocess_case(c.volume, c.labels, pc, case_id=c.case_id) for c in make_dataset(4, seed=11)]
    model = VNet(ModelConfig(input_size=32, depth=3, base_channels=8))
    cfg = TrainConfig(epochs=300, augment={"enabled": False})
    with threadpool_limits(1):
        model, history = train(model, cases, None, cfg)
    elapsed = time.perf_counter() - t0
    dice = foreground_dice(model, cases)
    with no_grad():
        eval_loss = float(np.mean([
            dice_loss(model.forward(c.image, "eval")[0], c.main_onehot).item() for c in cases]))
    train_loss = history[-1]["loss_total"]
    ok = dice >= 0.90 and train_loss < 0.1
    acceptance("AC-3", ok, f"train hard Dice {dice:.4f} (>= 0.90), final train loss {train_loss:.4f} (< 0.1), "
                           f"eval main dice_loss {eval_loss:.4f}, {elapsed / 60:.1f} min on 1 core")
    assert ok


def test_ac4_mtl_ablation(acceptance):
    cfg = AblationConfig()
    t0 = time.perf_counter()
    with threadpool_limits(1):
        results = run_ablation(cfg)
    elapsed = time.perf_counter() - t0
    wins = sum(r.mtl_mean >= r.single_mean - 0.01 for r in results)
    gaps = ", ".join(f"{r.gap:+.3f}" for r in results)
    ps = [row.p_value for r in results for row in r.report.rows]
    ok = wins >= 4 and len(results) == 5 and all(p is not None for p in ps)
    acceptance("AC-4", ok, f"MTL >= single-task - 0.01 in {wins}/5 seeds (>= 4); gaps {gaps}; "
                           f"S={cfg.size} depth {cfg.depth} base {cfg.base_channels}, {cfg.epochs} epochs, "
                           f"{elapsed / 60:.1f} min")
    print(format_ablation(results))
    assert ok


def test_ac5_schedule(acceptance):
    s = LRScheduleState(0.01)
    s = lr_on_plateau(s, 0.5)
    lrs = []
    for _ in range(50):
        s = lr_on_plateau(s, 0.5)
        lrs.append(s.lr)
    first = lrs[48] == 0.01 and lrs[49] == pytest.approx(0.001)
    r = lr_on_plateau(LRScheduleState(0.001, 0.5, 30), 0.6)
    reset = r.epochs_since_improvement == 0 and r.lr == 0.001
    for _ in range(50):
        s = lr_on_plateau(s, 0.5)
    second = s.lr == pytest.approx(1e-4)
    ok = first and reset and second
    acceptance("AC-5", ok, f"0.01 -> {lrs[49]:.4g} after 50 stagnant epochs, reset on improvement {reset}, "
                           f"two plateaus -> {s.lr:.4g}")
    assert ok


def test_ac6_preprocessing(acceptance):
    rng = np.random.default_rng(6)
    v = Volume(rng.uniform(-3000, 3000, (10, 10, 10)))
    c = clip_hu(v)
    clip_ok = c.voxels.min() >= -1000 and c.voxels.max() <= 400 and np.array_equal(clip_hu(c).voxels, c.voxels)
    z = zscore(Volume(rng.normal(-500, 300, (16, 16, 16)))).voxels.astype(np.float64)
    z_mean, z_std = abs(z.mean()), abs(z.std() - 1)
    vocab_ok = 0
    for _ in range(100):
        present = rng.choice(8, size=int(rng.integers(1, 6)), replace=False)
        lab = LabelMap(rng.choice(present, size=tuple(rng.integers(2, 10, 3))).astype(np.uint8))
        out = resample(lab, tuple(int(t) for t in rng.integers(2, 12, 3)), "nearest")
        vocab_ok += set(np.unique(out.voxels)) <= set(present.tolist())
    a = rng.normal(size=(5, 4, 6))
    tri_err = float(np.max(np.abs(resample(Volume(a), (7, 3, 9)).voxels - trilinear_oracle(a, (7, 3, 9)))))
    ok = clip_ok and z_mean <= 1e-6 and z_std <= 1e-4 and vocab_ok == 100 and tri_err <= 1e-6
    acceptance("AC-6", ok, f"clip ok {clip_ok}; zscore |mean| {z_mean:.1e}, |std-1| {z_std:.1e}; "
                           f"vocabulary kept {vocab_ok}/100; trilinear err {tri_err:.1e}")
    assert ok


def test_ac7_emphysema(acceptance):
    hu = np.full(100, -800.0)
    hu[:25] = -960.0
    laa = emphysema_stats(hu, np.ones(100, bool)).percent_laa
    ramp = np.random.default_rng(7).permutation(np.arange(-1000, -900).astype(float))
    p15 = emphysema_stats(ramp, np.ones(100, bool), percentile=15).percentile_density
    row = EmphysemaStats("Both lungs", 11.304, -936.0).row()
    ok = laa == 25.0 and p15 == -986.0 and row == "Both lungs, 11.304, -936"
    acceptance("AC-7", ok, f"%LAA-950 {laa} (25.0), 15th percentile {p15} (-986), row '{row}'")
    assert ok


def test_ac8_phantom_calibration(acceptance):
    _, lab = generate_phantom(PhantomSpec(size=64))
    counts = np.bincount(lab.voxels.ravel(), minlength=8)
    frac = {name: 100 * counts[i] / 64**3 for i, name in enumerate(VOCAB)}
    rel = {k: abs(frac[k] - ref) / ref for k, ref in REFERENCE_NORMAL.items()}
    worst = max(rel, key=rel.get)
    ok = counts.sum() == 64**3 and all(r <= 0.5 for r in rel.values())
    acceptance("AC-8", ok, f"partition {counts.sum()} == 64^3; worst class {worst} "
                           f"{frac[worst]:.3f}% vs {REFERENCE_NORMAL[worst]}% ({100 * rel[worst]:.0f}% off, <= 50%)")
    assert ok


def _nifti(dim, datatype, payload, pixdim, slope, inter):
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<2h", hdr, 70, datatype, 16 if datatype == 4 else 32)
    struct.pack_into("<8f", hdr, 76, 1.0, *pixdim, 0, 0, 0, 0)
    struct.pack_into("<3f", hdr, 108, 352.0, slope, inter)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr) + b"\x00" * 4 + payload


def test_ac9_persistence(acceptance, tmp_path):
    rng = np.random.default_rng(9)
    v = Volume(rng.normal(size=(5, 6, 7)).astype(np.float32), (0.6, 0.7, 1.5))
    write_volume(tmp_path / "v.vol", v)
    back = read_volume(tmp_path / "v.vol")
    native_ok = back.voxels.tobytes() == v.voxels.tobytes() and back.spacing == pytest.approx(v.spacing)

    raw = np.arange(64, dtype="<i2") + 24
    nii = parse_nifti1(gzip.decompress(gzip.compress(_nifti((3, 4, 4, 4, 1, 1, 1, 1), 4, raw.tobytes(),
                                                            (0.7, 0.7, 2.0), 1.0, -1024.0))))
    nifti_ok = (nii.dims == (4, 4, 4) and nii.spacing == pytest.approx((0.7, 0.7, 2.0))
                and nii.voxels[0, 0, 0] == -1000.0 and nii.voxels[1, 0, 0] == -999.0)

    pc = PreprocessConfig(target_size=8)
    cases = [preprocess_case(c.volume, c.labels, pc) for c in make_dataset(3, PhantomSpec(size=16), seed=9)]
    cfg = TrainConfig(epochs=4, seed=9, checkpoint_dir=str(tmp_path / "ck"))
    mk = lambda: VNet(ModelConfig(input_size=8, depth=2, base_channels=2, seed=9))  # noqa: E731
    _, full = train(mk(), cases, None, TrainConfig(epochs=4, seed=9))
    train(mk(), cases, None, cfg, stop_after=2)
    _, resumed = train(mk(), cases, None, cfg, resume=load_checkpoint(tmp_path / "ck" / "last.ckpt"))
    worst = max(abs(a[k] - b[k]) for a, b in zip(full, resumed) for k in a)
    resume_ok = len(full) == len(resumed) == 4 and worst <= 1e-6
    ok = native_ok and nifti_ok and resume_ok
    acceptance("AC-9", ok, f"native bitwise {native_ok}; NIfTI dims/spacing/scaling {nifti_ok}; "
                           f"resumed history max diff {worst:.1e} (<= 1e-6)")
    assert ok


def test_ac10_cli_determinism(acceptance, tmp_path, capsys):
    import json

    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"model": {"input_size": 8, "depth": 2, "base_channels": 2},
                               "preprocess": {"target_size": 8}, "train": {"epochs": 2, "seed": 1}}))
    work = tmp_path / "w"

    def run_once():
        import shutil

        if work.exists():
            shutil.rmtree(work)
        t = ["--threads", "1"]
        assert cli_main(["gen-phantoms", "--out", str(work / "raw"), "--n", "3", "--size", "16", "--seed", "4"] + t) == 0
        assert cli_main(["preprocess", "--in", str(work / "raw"), "--out", str(work / "prep"), "--size", "8"] + t) == 0
        assert cli_main(["train", "--config", str(cfg), "--data", str(work / "prep"), "--out", str(work / "run")] + t) == 0
        capsys.readouterr()
        assert cli_main(["eval", "--model", str(work / "run" / "checkpoints" / "last.ckpt"),
                         "--data", str(work / "prep")] + t) == 0
        files = {str(p.relative_to(work)): p.read_bytes() for p in sorted(work.rglob("*")) if p.is_file()}
        return files, capsys.readouterr().out

    files_a, eval_a = run_once()
    files_b, eval_b = run_once()
    differing = sorted(k for k in files_a if files_a[k] != files_b.get(k))
    ok = files_a.keys() == files_b.keys() and not differing and eval_a == eval_b
    acceptance("AC-10", ok, f"{len(files_a)} output files and eval report byte-identical across two "
                            f"--threads 1 runs" + (f"; differing: {differing}" if differing else ""))
    assert ok
