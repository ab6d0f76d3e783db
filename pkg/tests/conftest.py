"""Shared fixtures for the acceptance suite.

The contrastive training runs are by far the most expensive artifacts, so a
session-scoped bank trains each (flavour, seed) pair once and the criteria
that need backbones, self-labels, or localisers all draw from it.
"""

import sys
import time

import numpy as np
import pytest

from rvl import dataset, localiser, radio, scene, selflabel, ssl

# acceptance run geometry: 512 training pairs (toy-run criterion), held-out
# validation pairs for localiser and ordering checks
N_TRAIN = 512
N_VAL = 128
TRAIN_SEED = 1000
VAL_SEED = 777000
N_CALIBRATION = 64
SSL_SEEDS = (0, 1, 2)

SSL_SETTINGS = {
    # lr found by seeded probes: SCL diverges at 2e-3 and undertrains at
    # 1e-5 within the 500-step budget; MCL tolerates the same point
    "SCL": dict(lr=1e-3, steps=500),
    "MCL": dict(lr=1e-3, steps=500),
    "CL": dict(lr=1e-3, steps=500),
}
SSL_POOLS = ((2, 2), (2, 1))


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


@pytest.fixture(scope="session")
def desk():
    return {"rcfg": radio.RadioConfig(), "scfg": scene.SceneConfig(),
            "cam": scene.CameraModel()}


@pytest.fixture(scope="session")
def toy_pairs(desk):
    """(train, val) datasets shared by every learning criterion."""
    t0 = time.time()
    train = dataset.synthesize_pairs(N_TRAIN, TRAIN_SEED, desk["scfg"],
                                     desk["cam"], desk["rcfg"])
    val = dataset.synthesize_pairs(N_VAL, VAL_SEED, desk["scfg"],
                                   desk["cam"], desk["rcfg"])
    _log(f"[fixtures] synthesized {N_TRAIN}+{N_VAL} pairs "
         f"({time.time() - t0:.1f} s)")
    return train, val


@pytest.fixture(scope="session")
def ssl_bank(toy_pairs, desk):
    """Lazy cache of trained contrastive runs keyed (flavour, seed).

    Returns a getter producing dicts with the model, loss curve, and
    calibrated self-labels for the train and validation sets.
    """
    train_pairs, val_pairs = toy_pairs
    rcfg = desk["rcfg"]
    cache = {}

    def get(flavour: str, seed: int) -> dict:
        key = (flavour, seed)
        if key in cache:
            return cache[key]
        setting = SSL_SETTINGS[flavour]
        cfg = ssl.SslConfig(flavour=flavour, lr=setting["lr"],
                            steps=setting["steps"], batch=8, seed=seed,
                            lr_schedule="cosine", warmup_steps=10,
                            pools=SSL_POOLS)
        t0 = time.time()
        model, curve = ssl.train_backbone(cfg, train_pairs)
        t_train = time.time() - t0
        train_raw = [selflabel.self_coordinates(model, p, rcfg)
                     for p in train_pairs]
        val_raw = [selflabel.self_coordinates(model, p, rcfg)
                   for p in val_pairs]
        cal = selflabel.calibrate(
            [(train_raw[i], train_pairs[i].gt) for i in range(N_CALIBRATION)])
        run = {
            "model": model,
            "curve": curve,
            "seconds": t_train,
            "calibration": cal,
            "train_labels": [selflabel.apply_calibration(lab, cal, rcfg)
                             for lab in train_raw],
            "val_labels": [selflabel.apply_calibration(lab, cal, rcfg)
                           for lab in val_raw],
        }
        cache[key] = run
        _log(f"[fixtures] {flavour} seed {seed}: "
             f"loss {curve[:5].mean():.3f} -> {curve[-5:].mean():.3f} "
             f"({t_train:.0f} s train)")
        return run

    return get


def bin_errors(labels, pairs) -> np.ndarray:
    """Euclidean self-label error in heatmap-bin units, one entry per pair."""
    return np.array([
        float(np.hypot(lab.heatmap_bin_est[0] - p.gt.heatmap_bin[0],
                       lab.heatmap_bin_est[1] - p.gt.heatmap_bin[1]))
        for lab, p in zip(labels, pairs)])


@pytest.fixture(scope="session")
def localiser_bank(toy_pairs, desk, ssl_bank):
    """Lazy cache of localisers keyed by label source: ("groundtruth", seed)
    or (flavour, seed) for self-labelled training."""
    train_pairs, val_pairs = toy_pairs
    rcfg = desk["rcfg"]
    cache = {}

    def get(source: str, seed: int) -> dict:
        key = (source, seed)
        if key in cache:
            return cache[key]
        if source == "groundtruth":
            records = [(p.heatmap, (p.gt.range_m, p.gt.azimuth_deg))
                       for p in train_pairs]
        else:
            labels = ssl_bank(source, seed)["train_labels"]
            records = selflabel.build_loc_dataset(train_pairs, labels)
        cfg = localiser.LocaliserConfig(steps=500, batch=8, lr=1e-3, seed=seed)
        model, curve = localiser.train_localiser(records, rcfg, cfg)
        from rvl import metrics
        errors = []
        for p in val_pairs:
            rng, az = localiser.predict(model, rcfg, p.heatmap)
            errors.append(metrics.planar_error(p.gt.range_m, p.gt.azimuth_deg,
                                               rng, az))
        run = {"model": model, "curve": curve,
               "val_median_m": float(np.median(errors))}
        cache[key] = run
        _log(f"[fixtures] localiser[{source}, seed {seed}]: "
             f"val median {run['val_median_m']:.3f} m")
        return run

    return get


# ---------------------------------------------------------------------------
# acceptance verdicts: collect one line per numbered criterion and print the
# block after the run, where per-test capture cannot swallow it

_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if not item.name.startswith("test_criterion_"):
        return
    num = int(item.name.split("_")[2])
    doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
    if rep.when == "call":
        verdict = {"passed": "PASS", "failed": "FAIL"}.get(
            rep.outcome, rep.outcome.upper())
        _CRITERIA[num] = (verdict, doc)
    elif rep.when == "setup" and rep.outcome != "passed":
        _CRITERIA[num] = ("FAIL" if rep.failed else "SKIP", doc)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for num in sorted(_CRITERIA):
        verdict, doc = _CRITERIA[num]
        terminalreporter.write_line(f"[{verdict}] criterion {num:2d}: {doc}")
