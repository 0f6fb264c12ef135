"""Acceptance suite: one PASS/FAIL line per criterion.

Run alone with ``python3 tests/test_acceptance.py`` or ``pytest tests/test_acceptance.py``;
the lines are repeated in the terminal summary under "acceptance criteria".
"""
import contextlib
import json
import math
import time

import numpy as np
import pytest
import torch
from sklearn import metrics as skm

from helpers import grad_rel_error, random_rotation
from test_losses import LOSS_CASES, _composite_case, drkd_brute
from test_relations import gram_loop
from test_training import reference_schedule, run_schedule
from kdistill.checkpoint import load_checkpoint
from kdistill.data import SplitSpec, load_dataset, make_fixture, split_dataset
from kdistill.explain import grad_cam
from kdistill.losses import (
    LossWeights,
    Taps,
    blkd_loss,
    crkd_loss,
    dkd_loss,
    drkd_loss,
    kd_loss,
    sskd_loss,
    ssdkd_loss,
    weighted_cross_entropy,
)
from kdistill.metrics import (
    balanced_accuracy,
    confusion_matrix,
    evaluate,
    mean_average_precision,
    predict,
    roc_auc_macro,
)
from kdistill.models import BackboneSpec, TapNet, backbone_spec, build_backbone
from kdistill.relations import channel_relation_matrix, softened_probabilities
from kdistill.training import (
    SSL_METHODS,
    SWEEP_METHODS,
    DistillConfig,
    distill_student,
    model_from_checkpoint,
    pretrain_teacher,
)

SEEDS = (0, 1, 2, 3, 4)
LW = LossWeights()


class Outcome:
    detail = ""


@contextlib.contextmanager
def criterion(log, label):
    out = Outcome()
    try:
        yield out
    except BaseException as exc:
        line = f"FAIL  criterion {label}: {out.detail or ''} [{type(exc).__name__}: {exc}]".replace("\n", " ")
        log.append(line[:400])
        print(line)
        raise
    line = f"PASS  criterion {label}: {out.detail}"
    log.append(line)
    print(line)


# -- 1. gradient correctness ---------------------------------------------------------

def test_criterion_1_gradients(acceptance_log):
    with criterion(acceptance_log, "1 gradient correctness") as out:
        start = time.perf_counter()
        worst = {}
        for name in ("kd", "wce", "blkd", "drkd", "crkd", "sskd"):
            errs = []
            for i in range(20):
                x, fn, t = LOSS_CASES[name](torch.Generator().manual_seed(5000 + i))
                errs.append(grad_rel_error(lambda v: fn(v, t), x))
                if t is not None:
                    tt, xx = t.clone().requires_grad_(True), x.clone().requires_grad_(True)
                    fn(xx, tt).backward()
                    assert tt.grad is None or torch.count_nonzero(tt.grad) == 0, f"{name} teacher grad"
            worst[name] = max(errs)
        for label, ssl in (("dkd", False), ("ssdkd", True)):
            worst[label] = max(
                grad_rel_error(*reversed(_composite_case(torch.Generator().manual_seed(6000 + i), ssl)))
                for i in range(20)
            )
        elapsed = time.perf_counter() - start
        out.detail = f"max rel err {max(worst.values()):.1e} over 8 losses x 20 instances, {elapsed:.0f}s"
        assert max(worst.values()) <= 1e-4, worst
        assert elapsed < 120


# -- 2. zero sets ------------------------------------------------------------------------

def test_criterion_2_zero_sets(acceptance_log):
    with criterion(acceptance_log, "2 zero-set identities") as out:
        g = torch.Generator().manual_seed(11)
        y = torch.tensor([0, 1, 2, 3, 4, 5, 6, 7])
        w = torch.rand(8, generator=g, dtype=torch.float64) + 0.5
        logits = torch.zeros(8, 8, dtype=torch.float64)
        logits[torch.arange(8), y] = 20.0
        taps = Taps(torch.randn(8, 4, 3, 3, generator=g, dtype=torch.float64),
                    torch.randn(8, 6, generator=g, dtype=torch.float64), logits)
        proj = torch.randn(32, 5, generator=g, dtype=torch.float64)
        same = Taps(*[t.clone() for t in taps])
        values = {
            "kd": kd_loss(logits, logits.clone()),
            "wce@20": weighted_cross_entropy(logits, y, w),
            "blkd": blkd_loss(logits, logits.clone(), y, w, LW),
            "drkd": drkd_loss(taps.embedding, same.embedding, LW),
            "crkd": crkd_loss(taps.features, same.features),
            "sskd": sskd_loss(proj, proj.clone()),
            "dkd": dkd_loss(taps, same, y, w, LW),
            "ssdkd": ssdkd_loss(taps, same, y, w, LW, proj, proj.clone()),
        }
        worst = max(float(v) for v in values.values())
        out.detail = f"max loss at identity {worst:.1e} (tol 1e-6)"
        assert worst < 1e-6, values


# -- 3. oracle equivalence --------------------------------------------------------------

def test_criterion_3_oracles(acceptance_log):
    with criterion(acceptance_log, "3 oracle equivalence") as out:
        rng = np.random.default_rng(33)
        gram_trials = 0
        for k in range(1, 9):
            for hw in range(1, 6):
                for _ in range(3):
                    f = torch.tensor(rng.normal(size=(2, k, hw, hw)), dtype=torch.float32)
                    got = channel_relation_matrix(f).double().numpy()
                    ref = gram_loop(f.double())
                    assert np.abs(got - ref).max() <= 1e-5 * np.abs(ref).max()
                    gram_trials += 1
        drkd_trials = 0
        for _ in range(60):
            b, d = int(rng.integers(3, 6)), int(rng.integers(1, 5))
            t, s = torch.tensor(rng.normal(size=(b, d))), torch.tensor(rng.normal(size=(b, d)))
            assert math.isclose(drkd_loss(t, s, LW).item(), drkd_brute(t, s), rel_tol=1e-9, abs_tol=1e-12)
            drkd_trials += 1
        metric_trials = 0
        for _ in range(25):
            n, c = 80, int(rng.integers(2, 8))
            labels = np.r_[np.arange(c), rng.integers(0, c, n - c)]
            scores = rng.dirichlet(np.ones(c), n) + 0.6 * np.eye(c)[labels]
            pred = predict(scores)
            cm = confusion_matrix(labels, pred, c)
            assert math.isclose(balanced_accuracy(cm), skm.balanced_accuracy_score(labels, pred), abs_tol=1e-12)
            assert math.isclose(np.trace(cm) / n, skm.accuracy_score(labels, pred), abs_tol=1e-12)
            auc = roc_auc_macro(scores, labels)[0]
            ref_auc = np.mean([skm.roc_auc_score(labels == k, scores[:, k]) for k in range(c)])
            assert math.isclose(auc, ref_auc, abs_tol=1e-12)
            ref_map = np.mean([skm.average_precision_score(labels == k, scores[:, k]) for k in range(c)])
            assert math.isclose(mean_average_precision(scores, labels), ref_map, abs_tol=1e-12)
            metric_trials += 1
        out.detail = f"gram {gram_trials} trials, drkd {drkd_trials} trials, metrics {metric_trials} matrices"


# -- 4. invariances ------------------------------------------------------------------------

def test_criterion_4_invariances(acceptance_log):
    with criterion(acceptance_log, "4 invariance suite") as out:
        rng = np.random.default_rng(44)
        draws = 60
        drift = 0.0
        for _ in range(draws):
            b, d = int(rng.integers(3, 9)), int(rng.integers(2, 7))
            t, s = torch.tensor(rng.normal(size=(b, d))), torch.tensor(rng.normal(size=(b, d)))
            moved = rng.uniform(0.05, 20) * s @ random_rotation(d, rng) + torch.tensor(rng.normal(size=d) * 5)
            drift = max(drift, abs(drkd_loss(t, moved, LW).item() - drkd_loss(t, s, LW).item()))
        assert drift <= 1e-5

        for _ in range(draws):
            z = torch.tensor(rng.normal(size=(4, 6)) * 3)
            temp = rng.uniform(0.1, 10)
            p = softened_probabilities(z, temp)
            assert torch.allclose(p, softened_probabilities(z + rng.uniform(-50, 50), temp), atol=1e-12)
            hi = softened_probabilities(z, temp * rng.uniform(1.01, 5))
            ent = lambda q: -(q * q.log()).sum(1)
            assert (ent(hi) >= ent(p) - 1e-12).all()

        for _ in range(draws):
            labels = np.r_[np.arange(3), rng.integers(0, 3, 37)]
            scores = rng.dirichlet(np.ones(3), 40)
            a = roc_auc_macro(scores, labels)[0]
            assert math.isclose(a, roc_auc_macro(np.log(scores) * 2.5 + 1.0, labels)[0], abs_tol=1e-12)

        for _ in range(draws):
            c = int(rng.integers(2, 7))
            support = int(rng.integers(1, 30))
            cm = np.stack([rng.multinomial(support, rng.dirichlet(np.ones(c))) for _ in range(c)])
            assert math.isclose(balanced_accuracy(cm), np.trace(cm) / cm.sum(), abs_tol=1e-12)
        out.detail = f"{draws} draws per property; DRKD similarity drift {drift:.1e} (tol 1e-5)"


# -- 5. schedule ---------------------------------------------------------------------------

def test_criterion_5_schedule(acceptance_log):
    with criterion(acceptance_log, "5 schedule conformance") as out:
        config = DistillConfig()
        actions = run_schedule(1.0, [1.0] * 40, config)
        reduce_at = [i + 1 for i, (a, _) in enumerate(actions) if a == "reduce_lr"]
        assert reduce_at == [10] and len(actions) == 15 and actions[-1][0] == "stop"
        assert math.isclose(actions[9][1], 0.1)
        rng = np.random.default_rng(55)
        for _ in range(1000):
            n = int(rng.integers(1, 60))
            losses = np.round(rng.normal(1.0, 0.3, n) - rng.uniform(0, 0.02) * np.arange(n), 1).tolist()
            initial = float(np.round(rng.normal(1.2, 0.3), 1))
            assert run_schedule(initial, losses, config) == pytest.approx(reference_schedule(initial, losses))
        out.detail = "constant losses: LR x0.1 at epoch 10, stop at 15; 1000 random sequences match reference"


# -- 6. end-to-end smoke distillation --------------------------------------------------------

@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    """Every run the criterion needs, shared by its three checks."""
    root = tmp_path_factory.mktemp("acceptance")
    make_fixture(root / "fixture", [30] * 8, seed=0)
    ds = load_dataset(root / "fixture")
    train, val, test = split_dataset(ds, SplitSpec(test_fraction=1 / 6, seed=0))
    teacher_spec = backbone_spec("tiny-teacher", 8, projection_dim=32)
    student_spec = backbone_spec("tiny-student", 8, projection_dim=32)
    start = time.perf_counter()

    def student(method, teacher, seed, name):
        cfg = DistillConfig.toy(method=method, seed=seed)
        run = root / name
        ckpt = distill_student(cfg, teacher, student_spec, train, val, run_dir=run)
        return ckpt, run

    runs, bacc = {}, {"WCE-only": [], "SSD-KD": []}
    ssl_teachers = {}
    for seed in SEEDS:
        ssl_teachers[seed] = pretrain_teacher(DistillConfig.toy(method="SSD-KD", seed=seed),
                                              teacher_spec, train, val)
        for method in bacc:
            ckpt, run = student(method, ssl_teachers[seed], seed, f"{method}-{seed}")
            bacc[method].append(evaluate(model_from_checkpoint(ckpt), test).bacc)
            runs[method, seed] = run
    plain = pretrain_teacher(DistillConfig.toy(method="WCE-only", seed=0), teacher_spec, train, val)
    for method in SWEEP_METHODS:
        if (method, 0) not in runs:
            teacher = ssl_teachers[0] if method in SSL_METHODS else plain
            runs[method, 0] = student(method, teacher, 0, f"{method}-0")[1]
    repeat = student("SSD-KD", ssl_teachers[0], 0, "SSD-KD-0-repeat")[1]
    elapsed = time.perf_counter() - start
    return {"sizes": (len(train), len(val), len(test)), "bacc": bacc, "runs": runs,
            "repeat": repeat, "elapsed": elapsed}


def _history(run):
    return [json.loads(line) for line in (run / "history.jsonl").read_text().splitlines()]


def test_criterion_6a_all_methods_finite(smoke, acceptance_log):
    with criterion(acceptance_log, "6a every grid method completes with finite losses") as out:
        assert smoke["sizes"] == (160, 40, 40)
        for method in SWEEP_METHODS:
            hist = _history(smoke["runs"][method, 0])
            assert hist and len(hist) <= 30, method
            values = [v for r in hist for v in [r["val_loss"], *r["train"].values()]]
            assert all(math.isfinite(v) for v in values), method
        out.detail = f"{len(SWEEP_METHODS)} methods, <=30 epochs, all setup runs in {smoke['elapsed']:.0f}s"
        assert smoke["elapsed"] < 600


def test_criterion_6b_ssdkd_vs_wce(smoke, acceptance_log):
    with criterion(acceptance_log, "6b SSD-KD student vs WCE-only student over seeds 0-4") as out:
        wce, ssd = np.array(smoke["bacc"]["WCE-only"]), np.array(smoke["bacc"]["SSD-KD"])
        wins = int((ssd > wce).sum())
        out.detail = (f"mean test BACC SSD-KD {ssd.mean():.3f} vs WCE-only {wce.mean():.3f}; "
                      f"wins {wins}/5 (per seed {np.round(ssd, 3).tolist()} vs {np.round(wce, 3).tolist()})")
        assert ssd.mean() >= wce.mean() - 0.02
        assert wins >= 3


def test_criterion_6c_reproducible_history(smoke, acceptance_log):
    with criterion(acceptance_log, "6c fixed seed reproduces history.jsonl") as out:
        a = (smoke["runs"]["SSD-KD", 0] / "history.jsonl").read_bytes()
        b = (smoke["repeat"] / "history.jsonl").read_bytes()
        epochs = len(a.splitlines())
        out.detail = f"two SSD-KD seed-0 runs, {epochs} epochs, byte-identical={a == b}"
        assert a == b


# -- 7. checkpoint / resume ------------------------------------------------------------------

def test_criterion_7_resume(acceptance_log, tmp_path):
    with criterion(acceptance_log, "7 checkpoint/resume equivalence") as out:
        make_fixture(tmp_path / "fixture", [30] * 8, seed=0)
        ds = load_dataset(tmp_path / "fixture")
        train, val, _ = split_dataset(ds, SplitSpec(test_fraction=1 / 6, seed=0))
        teacher = pretrain_teacher(DistillConfig.toy(method="WCE-only", max_epochs=3),
                                   backbone_spec("tiny-teacher", 8, projection_dim=32), train, val)
        spec = backbone_spec("tiny-student", 8, projection_dim=32)
        full = DistillConfig.toy(method="D-KD", max_epochs=4)
        distill_student(full, teacher, spec, train, val, run_dir=tmp_path / "full")
        distill_student(DistillConfig.toy(method="D-KD", max_epochs=3), teacher, spec, train, val,
                        run_dir=tmp_path / "part")
        distill_student(full, teacher, spec, train, val, run_dir=tmp_path / "part", resume=True)
        a, b = _history(tmp_path / "full"), _history(tmp_path / "part")
        out.detail = f"epoch-4 val loss uninterrupted {a[3]['val_loss']:.6f} vs resumed {b[3]['val_loss']:.6f}"
        assert a[3]["val_loss"] == b[3]["val_loss"] and a == b
        la, lb = load_checkpoint(tmp_path / "full/last.ckpt"), load_checkpoint(tmp_path / "part/last.ckpt")
        assert all(torch.equal(la.state[k], lb.state[k]) for k in la.state)


# -- 8. Grad-CAM -------------------------------------------------------------------------------

def test_criterion_8_grad_cam(acceptance_log):
    with criterion(acceptance_log, "8 Grad-CAM") as out:
        spec = BackboneSpec("probe", (8, 8, 1), 2, 1, 1, projection_dim=2)
        body = torch.nn.Conv2d(1, 1, kernel_size=1, bias=False)
        probe = TapNet(spec, body)
        with torch.no_grad():
            body.weight.fill_(1.0)
            probe.fc.weight.copy_(torch.tensor([[0.8], [-0.4]]))
            probe.fc.bias.zero_()
        rng = np.random.default_rng(88)
        err = 0.0
        for _ in range(10):
            f = rng.normal(size=(8, 8))
            cam = grad_cam(probe, torch.tensor(f, dtype=torch.float32).view(1, 8, 8), 0)
            expected = np.maximum(f, 0) / np.maximum(f, 0).max()
            err = max(err, np.abs(cam.heat - expected).max())
        assert err <= 1e-6

        model = build_backbone(backbone_spec("tiny-teacher", 8), seed=0)
        g = torch.Generator().manual_seed(8)
        for i in range(10):
            cam = grad_cam(model, torch.rand(3, 32, 32, generator=g), i % 8)
            assert cam.heat.shape == (32, 32)
            assert cam.heat.min() >= 0 and cam.heat.max() <= 1
        out.detail = f"single-channel oracle max error {err:.1e}; 10 maps in [0,1] at 32x32"


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v"]))
