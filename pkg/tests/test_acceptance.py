"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line (also repeated in the
terminal summary) and then asserts the verdict, so a failing criterion is
reported rather than hidden.
"""
import hashlib
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from msnet import checks
from msnet import cli
from msnet import data as D
from msnet import metrics as mt
from msnet import model as M
from msnet.autodiff import Tensor
from msnet.config import RunConfig
from msnet.losses import (LossConfig, LossNetParams, feature_loss, pixel_weight_map, total_loss,
                          weighted_bce, weighted_iou)
from msnet.train import train

import oracles

# Regression floor for validation mDice of the default toy run. Verified runs
# of the default configuration reached 0.929 (seed 0) and 0.927 (seed 1); the
# floor keeps the stated 0.85 target.
VAL_MDICE_FLOOR = 0.85
LOSS_RATIO_MAX = 0.25
TRAIN_SECONDS_MAX = 15 * 60
GRADCHECK_SECONDS_MAX = 120


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def sha(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    results = checks.run("ops", 100) + checks.run("loss") + checks.run("model")
    elapsed = time.perf_counter() - t0
    for r in results:
        print(r.line())
    op_results = [r for r in results if r.name in checks.OP_NAMES]
    e2e = [r for r in results if r.name not in checks.OP_NAMES]
    op_err = max(r.max_rel_error for r in op_results)
    e2e_err = max(r.max_rel_error for r in e2e)
    e2e_trials = sum(r.trials for r in e2e)
    ok = (op_err < checks.OP_TOL and e2e_err < checks.END_TO_END_TOL
          and min(r.trials for r in op_results) >= 100 and e2e_trials >= 100
          and elapsed < GRADCHECK_SECONDS_MAX)
    verdict(1, "gradients match central differences", ok,
            f"{len(op_results)} ops x 100 trials max {op_err:.2e} < 1e-5; end-to-end {e2e_trials} trials "
            f"max {e2e_err:.2e} < 1e-4; {elapsed:.0f}s")


def test_criterion_2_zero_property():
    rng = np.random.default_rng(2)
    c = 8
    w = Tensor(rng.standard_normal((c, c, 3, 3)))
    b = Tensor(np.zeros(c))
    sub_zero = add_nonzero = 0
    for _ in range(50):
        f = Tensor(rng.standard_normal((1, c, 8, 8)) * rng.uniform(0.1, 10))
        sub_zero += not M.subtraction_unit(f, f, w, b, "subtract").data.any()
        add_nonzero += bool(M.subtraction_unit(f, f, w, b, "add").data.any())
    zero = Tensor(np.zeros((1, c, 8, 8)))
    add_at_zero = M.subtraction_unit(zero, zero, w, b, "add").data.any()
    ok = sub_zero == 50 and add_nonzero == 50 and not add_at_zero
    verdict(2, "SU(F, F) vanishes, add mode does not", ok,
            f"subtract zero {sub_zero}/50, add nonzero {add_nonzero}/50, add(0, 0) zero {not add_at_zero}")


def test_criterion_3_grid_structure():
    cfg = M.ModelConfig(input_size=64, channels=4, pyramid_depth=5, seed=3)
    params = M.init_params(cfg)
    rng = np.random.default_rng(3)
    for name, t in params.items():
        if name.endswith(".bias"):
            t.data[:] = rng.normal(0, 0.1, t.shape)
    image = Tensor(rng.uniform(0, 1, (1, 3, 64, 64)))
    red = M.reduce_channels(M.encode(image, params, cfg), params)
    grid = M.build_ms_grid(red, 5, "subtract", params)
    rows = [len(r) for r in grid]
    first_col = all(grid[i][0] is red[i] for i in range(5))

    base = [c.data for c in M.complementarity_enhance(grid, params)]
    summands, isolated = [], True
    for i in range(5):
        consumed = 0
        for n in range(len(grid[i])):
            probe = [list(r) for r in grid]
            probe[i][n] = Tensor(grid[i][n].data + 1.0)
            out = M.complementarity_enhance(probe, params)
            consumed += not np.array_equal(out[i].data, base[i])
            # a probe of row i leaves every other aggregate untouched
            isolated &= all(np.array_equal(out[k].data, base[k]) for k in range(5) if k != i)
        summands.append(consumed)

    deps_ok = True
    for j in range(5):
        probe_red = list(red)
        probe_red[j] = Tensor(red[j].data + 0.3)
        probe = M.build_ms_grid(probe_red, 5, "subtract", params)
        for i in range(5):
            for n in range(len(grid[i])):
                changed = not np.array_equal(grid[i][n].data, probe[i][n].data)
                deps_ok &= changed == (i <= j <= i + n)
    ok = rows == [5, 4, 3, 2, 1] and first_col and summands == [5, 4, 3, 2, 1] and isolated and deps_ok
    verdict(3, "grid rows and aggregate summands", ok,
            f"rows {tuple(rows)}, summands per level {tuple(summands)}, rows isolated {isolated}, "
            f"dependency pattern {deps_ok}")


def test_criterion_4_loss_identities():
    cfg = LossConfig.for_input_size(64)
    lossnet = LossNetParams.create(0)
    rng = np.random.default_rng(4)
    yy, xx = np.mgrid[0:64, 0:64]
    gts = [(np.hypot(yy - cy, xx - cx) < r).astype(float)[None, None]
           for cy, cx, r in rng.uniform([16, 16, 6], [48, 48, 18], (5, 3))]
    gt = np.concatenate(gts)

    self_loss = total_loss(Tensor(gt), gt, lossnet, cfg).total.item()

    ones = np.ones(gt.shape)
    pred = rng.uniform(0.02, 0.98, gt.shape)
    bce = weighted_bce(Tensor(pred), gt, cfg, ones).item()
    plain_bce = np.mean([-np.mean(g * np.log(p) + (1 - g) * np.log(1 - p)) for p, g in zip(pred, gt)])
    iou = weighted_iou(Tensor(pred), gt, cfg, ones).item()
    plain_iou = np.mean([1 - ((p * g).sum() + 1) / ((p + g - p * g).sum() + 1) for p, g in zip(pred, gt)])
    unit_map = np.all(pixel_weight_map(gt, LossConfig(weight_gain=0.0, pool_k=5)) == 1.0)
    reduce_err = max(abs(bce - plain_bce), abs(iou - plain_iou))

    at_equality = feature_loss(gt, gt, lossnet).item()
    nonneg = symmetric = True
    for _ in range(30):
        p = np.clip(gt + rng.normal(0, 0.2, gt.shape), 0, 1)
        a = feature_loss(p, gt, lossnet).item()
        b = feature_loss(gt, p, lossnet).item()
        nonneg &= a >= 0.0
        symmetric &= a == b
    ok = self_loss <= 1e-6 and reduce_err < 1e-12 and unit_map and at_equality == 0.0 and nonneg and symmetric
    verdict(4, "loss identities", ok,
            f"total(G,G) {self_loss:.2e}; unit-weight gap {reduce_err:.1e}; Lf(G,G) {at_equality}; "
            f"nonneg {nonneg}; symmetric {symmetric}")


def test_criterion_5_metric_oracles():
    rng = np.random.default_rng(5)
    counting_ok = 0
    for _ in range(500):
        p = rng.integers(0, 2, (4, 4))
        g = rng.integers(0, 2, (4, 4))
        d, j = oracles.count_dice_iou(p.tolist(), g.tolist())
        counting_ok += mt.dice(p, g) == d and mt.iou(p, g) == j

    worst = 0.0
    for pred, gt in oracles.fixtures_8x8():
        p, g = np.array(pred), np.array(gt, dtype=float)
        worst = max(worst,
                    abs(mt.weighted_fmeasure(p, g) - oracles.wfm(pred, gt)),
                    abs(mt.s_measure(p, g) - oracles.s_measure(pred, gt)),
                    abs(mt.e_measure(p, g) - oracles.e_measure(pred, gt)))

    ident = 0.0
    for k in range(20):
        g = (rng.uniform(size=(16, 16)) < rng.uniform(0.1, 0.6)).astype(float)
        m = mt.image_metrics(g, g)
        ident = max(ident, *(abs(m[n] - 1.0) for n in ("mdice", "miou", "wfm", "s_measure", "e_measure")),
                    abs(m["mae"]))
    ok = counting_ok == 500 and worst <= 1e-6 and ident <= 1e-9
    verdict(5, "metrics match oracles", ok,
            f"dice/iou exact {counting_ok}/500; Fwb/S/E max gap {worst:.1e} on 20 fixtures; "
            f"identical masks off by {ident:.1e}")


def test_criterion_6_parameter_parity():
    pairs = []
    for depth in range(1, 6):
        sub = M.count_params(M.init_params(M.ModelConfig(pyramid_depth=depth, fusion_mode="subtract")))
        add = M.count_params(M.init_params(M.ModelConfig(pyramid_depth=depth, fusion_mode="add")))
        pairs.append((sub, add))
    ok = all(a == b for a, b in pairs)
    verdict(6, "subtract and add modes have equal parameter counts", ok,
            ", ".join(f"d{d} {a}/{b}" for d, (a, b) in enumerate(pairs, start=1)))


@pytest.fixture(scope="module")
def toy_dataset(tmp_path_factory):
    cfg = RunConfig()
    root = tmp_path_factory.mktemp("toy") / "data"
    D.generate_dataset(root, cfg.seed, cfg.n, cfg.ratios(), cfg.input_size, cfg.difficulty)
    return root


def test_criterion_7_training_converges(toy_dataset, tmp_path):
    cfg = RunConfig(data_dir=str(toy_dataset))
    t0 = time.perf_counter()
    result = train(cfg, tmp_path, echo=print)
    elapsed = time.perf_counter() - t0
    ratio = result.history[-1].loss / result.history[0].loss
    final_val = result.history[-1].val_mdice
    ok = ratio < LOSS_RATIO_MAX and result.best_val_mdice >= VAL_MDICE_FLOOR and elapsed < TRAIN_SECONDS_MAX
    verdict(7, "default toy configuration converges", ok,
            f"loss ratio {ratio:.3f} < {LOSS_RATIO_MAX}; best val mDice {result.best_val_mdice:.4f} "
            f"(final {final_val:.4f}) >= {VAL_MDICE_FLOOR}; {elapsed:.0f}s")


def test_criterion_8_determinism(tmp_path):
    roots = []
    for name in ("a", "b"):
        root = tmp_path / name / "data"
        D.generate_dataset(root, seed=8, n=20, size=32)
        roots.append(root)
    files = sorted(p.relative_to(roots[0]) for p in roots[0].rglob("*") if p.is_file())
    data_same = files == sorted(p.relative_to(roots[1]) for p in roots[1].rglob("*") if p.is_file()) \
        and all(sha(roots[0] / f) == sha(roots[1] / f) for f in files)

    cfg = RunConfig(input_size=32, channels=4, epochs=2, batch_size=4, data_dir=str(roots[0]))
    runs = [train(cfg, tmp_path / name / "run", echo=lambda s: None) for name in ("a", "b")]
    ckpt_same = sha(runs[0].best_path) == sha(runs[1].best_path) and \
        sha(runs[0].last_path) == sha(runs[1].last_path)

    reports = []
    for name, run in zip(("a", "b"), runs):
        out = tmp_path / name / "eval"
        rc = cli.main(["eval", "--data-dir", str(roots[0]), "--checkpoint", str(run.best_path),
                       "--split", "train", "--out", str(out)])
        reports.append((rc, sha(out / "metrics_train.csv"), sha(out / "metrics_train.txt")))
    report_same = reports[0] == reports[1] and reports[0][0] == 0
    ok = data_same and ckpt_same and report_same
    verdict(8, "identical seeds give identical bytes", ok,
            f"dataset {data_same} ({len(files)} files), checkpoints {ckpt_same}, metric reports {report_same}")


def test_criterion_9_harness_structure(toy_dataset, tmp_path, capsys):
    small = ["--input-size", "32", "--channels", "4", "--epochs", "1", "--batch-size", "8", "--scales", "1.0"]
    rc_ablate = cli.main(["ablate", "--data-dir", str(toy_dataset), "--out", str(tmp_path / "ablate"), *small])
    rows = (tmp_path / "ablate" / "ablation.csv").read_text().strip().splitlines() if rc_ablate == 0 else []
    header = rows[0].split(",") if rows else []
    rc_bench = cli.main(["bench", "--iters", "30", "--warmup", "10"])
    out = capsys.readouterr().out
    ok = (rc_ablate == 0 and len(rows) == 8 and header[3:] == list(mt.TABLE_HEADERS)
          and rc_bench == 0 and "fps" in out)
    verdict(9, "ablation table structure and benchmark report (published absolute numbers not reproduced)", ok,
            f"ablate {len(rows) - 1 if rows else 0} rows with columns {','.join(header[3:])}; "
            f"bench reported throughput without a threshold")
