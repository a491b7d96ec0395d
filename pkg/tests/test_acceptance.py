"""Acceptance criteria 1-8, each reported as one PASS/FAIL line.

Criteria 6 and 7 train the reference CNN on the full MNIST training set,
so they need the IDX files under $FISHERDET_DATA_DIR (default ~/data/mnist)
and take a few CPU-minutes.
"""

import time

import numpy as np
import pytest

from fisherdet import attack, data, evaluation, fisher, nn, selfcheck, train

from .conftest import ACCEPTANCE_LINES


def report(number, title, passed, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] C{number} {title}: {detail}")
    print(ACCEPTANCE_LINES[-1])
    return passed


@pytest.fixture(scope="module")
def nets():
    return selfcheck.fixtures(10, seed=0)


def test_c1_gradient_correctness(nets):
    started = time.perf_counter()
    res = selfcheck.check_gradients(nets, tol=1e-6, step=1e-6, floor=1e-8)
    elapsed = time.perf_counter() - started
    ok = res.passed and elapsed < 10
    assert report(1, "gradients vs central differences", ok,
                  f"worst rel err {res.worst:.2e} (tol 1e-6), {elapsed:.2f}s (limit 10s)")


def test_c2_oracle_equivalence(nets):
    started = time.perf_counter()
    tr = selfcheck.check_trace(nets, tol=1e-10)
    fm = selfcheck.check_form(nets, tol=1e-10, n_dirs=20)
    fs = selfcheck.check_fis(nets, tol=1e-3)
    elapsed = time.perf_counter() - started
    ok = tr.passed and fm.passed and fs.passed and elapsed < 30
    assert report(2, "oracle equivalence", ok,
                  f"trace {tr.worst:.1e} / form {fm.worst:.1e} (tol 1e-10), "
                  f"fis rel {fs.worst:.1e} (tol 1e-3), {elapsed:.2f}s (limit 30s)")


def test_c3_kl_taylor(nets):
    res = selfcheck.check_kl_taylor(nets, band=(6.0, 10.0))
    assert report(3, "KL residual cubic order", res.passed, res.detail)


def test_c4_finite_difference(nets):
    res = selfcheck.check_finite_difference(nets, tol=1e-3, fd_step=1e-4)
    assert report(4, "finite-difference form at eps'=1e-4", res.passed,
                  f"worst rel err {res.worst:.2e} (tol 1e-3)")


def test_c5_roc_auc_oracle():
    res = selfcheck.check_auc(n_sets=50, size=50)
    assert report(5, "trapezoid AUC == pair count", res.passed,
                  f"{int(res.worst)} mismatches over 50 sets, {res.detail}")


@pytest.fixture(scope="module")
def mnist_pipeline():
    """Train, attack and score at desk scale; returns every measured number."""
    try:
        train_ds = data.load_mnist("train").reshaped((1, 28, 28))
        test_ds = data.load_mnist("test").reshaped((1, 28, 28))
    except (OSError, data.FormatError) as exc:
        pytest.skip(f"MNIST not available: {exc}")
    started = time.perf_counter()
    net, _ = train.sgd_train(nn.mnist_cnn(seed=0), train_ds,
                             train.TrainConfig(learning_rate=0.01, momentum=0.9, batch_size=64,
                                               epochs=4, seed=0))
    out = {"test_acc": train.accuracy(net, test_ds)}
    res = attack.attack_batch(net, test_ds, attack.AttackConfig(epsilon=0.1, steps=10, momentum=1.0))
    out["adv_acc"] = float(np.mean(res.adv_pred == test_ds.labels))

    idx = np.sort(np.random.default_rng(0).choice(len(test_ds), 400, replace=False))
    cfg = fisher.ScoreConfig()
    clean = fisher.score_dataset(net, test_ds.inputs[idx], test_ds.labels[idx], cfg, False, idx)
    adv = fisher.score_dataset(net, res.adversarial.inputs[idx], test_ds.labels[idx], cfg, True, idx)
    out["auc"] = {q: evaluation.roc([r[q] for r in clean], [r[q] for r in adv]).auc
                  for q in ("trace", "form", "normalized_form")}
    out["median_nform"] = (np.median([r["normalized_form"] for r in clean]),
                           np.median([r["normalized_form"] for r in adv]))
    out["runtime"] = time.perf_counter() - started

    # FIS magnitude on the first 50 successful attacks among the scored images
    succ = [i for i in idx if res.success[i]][:50]
    wins = 0
    for i in succ:
        mags = []
        for x in (test_ds.inputs[i], res.adversarial.inputs[i]):
            v = fisher.direction_v(net, x, cfg, normalized=True)
            mags.append(np.mean(np.abs(fisher.fis(net, x, v, cfg).values)))
        wins += mags[1] > mags[0]
    out["fis"] = (wins, len(succ))

    # attack_batch example: success rate among originally-correct images of a 1000-image batch
    sub = np.sort(np.random.default_rng(1).choice(len(test_ds), 1000, replace=False))
    correct = res.clean_pred[sub] == test_ds.labels[sub]
    out["success_correct"] = float(np.mean(res.success[sub][correct]))
    return out


@pytest.mark.slow
def test_c6_mnist_reproduction(mnist_pipeline):
    m = mnist_pipeline
    auc = m["auc"]
    ok = (m["test_acc"] >= 0.97 and m["adv_acc"] <= 0.70
          and all(a >= 0.85 for a in auc.values()) and m["runtime"] <= 30 * 60)
    assert report(6, "MNIST desk-scale reproduction", ok,
                  f"test acc {m['test_acc']:.4f} (>=0.97), MI-FGSM acc {m['adv_acc']:.4f} (<=0.70), "
                  f"AUC trace {auc['trace']:.3f} / form {auc['form']:.3f} / "
                  f"nform {auc['normalized_form']:.3f} (>=0.85), {m['runtime'] / 60:.1f} min (<=30)")


@pytest.mark.slow
def test_c6_supporting_shape_checks(mnist_pipeline):
    m = mnist_pipeline
    clean_med, adv_med = m["median_nform"]
    assert adv_med > clean_med
    # 1 - 0.525 / 0.985 from the reported accuracies, loose band of 0.15
    assert abs(m["success_correct"] - (1 - 0.525 / 0.985)) <= 0.15


@pytest.mark.slow
def test_c7_fis_magnitude(mnist_pipeline):
    wins, n = mnist_pipeline["fis"]
    ok = n == 50 and wins / n >= 0.70
    assert report(7, "FIS magnitude higher on adversarial", ok,
                  f"{wins}/{n} = {wins / max(n, 1):.2f} (>=0.70)")


def test_c8_architecture_independence():
    # CIFAR10 / Fruits-360 are out of reach; the scoring math is instead
    # re-verified on a convolutional fixture to show it does not depend on
    # the layer types
    cnn = [selfcheck.tiny_cnn(s) for s in range(3)]
    checks = [selfcheck.check_trace(cnn), selfcheck.check_form(cnn),
              selfcheck.check_fis(cnn), selfcheck.check_finite_difference(cnn)]
    ok = all(c.passed for c in checks)
    assert report(8, "CIFAR10/Fruits-360 not reproduced; math re-checked on CNN fixtures", ok,
                  ", ".join(f"{c.name.split()[0]} {c.worst:.1e}" for c in checks))
