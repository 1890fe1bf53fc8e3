"""Session fixtures for the acceptance suite and the PASS/FAIL summary.

Trained networks are expensive, so they are built once per session. Setting
``GRADLIME_NET_CACHE`` to a directory reuses checkpoints (and their recorded
training history) from an earlier run; without it both networks are trained
from scratch, which is what the training gate is meant to measure.
"""
import json
import os
import time
from pathlib import Path

import pytest

from gradlime import datagen
from gradlime import micronet as mn

_LINES = []

RECIPES = {
    # kind: (generator, train n, val n, epoch budget, accuracy gate)
    "net2d": (datagen.gen_shapes_2d, 2000, 400, 15, 0.95),
    "net3d": (datagen.gen_moving_shapes_3d, 2000, 400, 25, 0.90),
}
TRAIN_SEED, VAL_SEED, INIT_SEED = 0, 1, 0


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def report():
    """Record one summary line; ``ok`` decides the PASS/FAIL tag."""

    def add(name, ok, detail):
        _LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        return ok

    return add


@pytest.fixture(scope="session")
def splits():
    out = {}
    for kind, (gen, n_train, n_val, _, _) in RECIPES.items():
        out[kind] = {"train": gen(n_train, TRAIN_SEED), "val": gen(n_val, VAL_SEED)}
    return out


def _train(kind, splits):
    _, _, _, epochs, gate = RECIPES[kind]
    xt, yt = datagen.stack(splits[kind]["train"])
    xv, yv = datagen.stack(splits[kind]["val"])
    net = mn.init_weights(mn.NetworkSpec(kind, 4), INIT_SEED)
    t0 = time.perf_counter()
    net, history = mn.train_sgd(net, xt, yt, mn.TrainConfig(epochs=epochs, seed=TRAIN_SEED, stop_at=gate),
                                val=(xv, yv))
    return net, {"seconds": time.perf_counter() - t0, "val_accuracy": [m.val_accuracy for m in history],
                 "cached": False}


@pytest.fixture(scope="session")
def trained(splits):
    """{kind: (network, training record)} for both networks."""
    cache = os.environ.get("GRADLIME_NET_CACHE")
    out = {}
    for kind in RECIPES:
        if cache and (Path(cache) / kind / "record.json").exists():
            net = mn.load_network(Path(cache) / kind)
            record = json.loads((Path(cache) / kind / "record.json").read_text())
            record["cached"] = True
        else:
            net, record = _train(kind, splits)
            if cache:
                mn.save_network(net, Path(cache) / kind)
                (Path(cache) / kind / "record.json").write_text(json.dumps(record))
        out[kind] = (net, record)
    return out
