"""Smoke test for the `crda` extension module.

Build and install first, e.g. `maturin develop -m crates/python/Cargo.toml`
or `pip install` of a wheel from `maturin build`.
"""

import json
import math
import sys
import tempfile
from pathlib import Path

import crda

TINY = [
    "engine.epochs=3",
    "engine.batches_per_epoch=4",
    "engine.batch_size=8",
    "engine.validation_size=70",
    "engine.shift_size=70",
    "engine.probe_size=4",
]


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    assert close(crda.roc_auc([0.9, 0.3, 0.5, 0.1], [1, 1, 0, 0]), 0.75)

    p = crda.partition_batch([0.1, 1.9, 1.0, 0.6])
    assert (p["dominant"], p["adv1"], p["adv2"], p["adv3"]) == ([0], [1], [2], [3]), p

    raw, norm, ret = crda.compute_gae([1.0, 0.0], [0.5, 0.2, 0.0], 0.95, 0.8)
    assert close(raw[0], 0.538) and close(raw[1], -0.2)
    assert all(close(r, a + v) for r, a, v in zip(ret, raw, [0.5, 0.2]))

    rows = crda.schedule_csv().strip().splitlines()
    assert rows[0] == "t,q,beta,area_raw,area_clamped" and len(rows) == 32
    q, beta, _, area = crda.schedule_row(15.0)
    assert close(q, 1.0) and close(area, math.exp(-1) + 0.3)

    eff = crda.effective_config("", ["ppo.clip=0.1"])
    assert "clip = 0.1" in eff
    try:
        crda.effective_config("", ["curriculum.peak_phase=1.5"])
    except ValueError as e:
        assert "curriculum.peak_phase" in str(e)
    else:
        raise AssertionError("range error not raised")
    assert "no_rl = true" in crda.ablation_config(1)

    t = crda.Trainer("", TINY)
    first = t.run_epoch()
    assert first["epoch"] == 0 and 0.0 <= first["val_auc"] <= 1.0
    with tempfile.TemporaryDirectory() as d:
        ckpt = Path(d) / "mid.crda"
        t.save(str(ckpt))
        resumed = crda.Trainer.load(str(ckpt))
        assert resumed.epoch == 1
        a = t.run(str(Path(d) / "a"))
        b = resumed.run(str(Path(d) / "b"))
        assert a == b, (a, b)
        summary = json.loads((Path(d) / "a" / "summary.json").read_text())
        assert summary["epochs"] == 2
    assert t.finished and t.evaluate()[0] == a["final_val_auc"]
    print("smoke test ok")


if __name__ == "__main__":
    sys.exit(main())
