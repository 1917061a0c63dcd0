"""Smoke test for the partfit Python module.

Build and install the extension first:

    maturin build --release -m crates/py/Cargo.toml -o target/wheels
    pip install --force-reinstall target/wheels/partfit-*.whl

then run `python python/smoke_test.py`. Uses a tiny config so it finishes
in a few seconds.
"""

import json
import sys
import tempfile
from pathlib import Path

import partfit

TINY = {
    "seed": 3,
    "count": 6,
    "sessions": 3,
    "encoder": {"point_widths": [16, 32], "head_widths": [32], "d": 16},
    "relnet": {"model_width": 16, "ff_width": 32, "head_hidden": 16},
    "train": {"stage1_epochs": 2, "stage2_epochs": 2, "stats_subset": 50},
    "eval": {"queries": 4},
}


def check(cond, what):
    if not cond:
        raise AssertionError(what)
    print(f"ok  {what}")


def box(center, size=(1.0, 0.2, 1.0), n=300):
    pts = []
    for i in range(n):
        u, v, w = (i * 0.618) % 1.0, (i * 0.414) % 1.0, (i * 0.732) % 1.0
        pts.append([center[k] + size[k] * (t - 0.5) for k, t in enumerate((u, v, w))])
    return pts


def main():
    cfg = partfit.Config(json.dumps(TINY))
    check(cfg.seed == 3, "config parses")
    try:
        partfit.Config('{"cuont": 1}')
        check(False, "unknown config keys are rejected")
    except ValueError:
        check(True, "unknown config keys are rejected")

    data = partfit.Dataset.generate(cfg)
    check(len(data) > 0 and data.warehouse_size > 0, f"dataset generated: {data!r}")
    model = partfit.Model.train(data, cfg)
    check(model.has_relnet, "model trained")
    index = partfit.Index.build(data, model)
    check(len(index) == data.warehouse_size, "index covers the warehouse")
    check(index.encoder_hash == model.encoder_hash, "index records the encoder")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        data.save(tmp / "dataset")
        model.save(tmp / "model.ckpt")
        index.save(tmp / "index.bin")
        again = partfit.Index.load(tmp / "index.bin")
        check(again.checksum() == index.checksum(), "index round-trips")
        check(partfit.Model.load(tmp / "model.ckpt").encoder_hash == model.encoder_hash, "model round-trips")
        check(len(partfit.Dataset.load(tmp / "dataset")) == len(data), "dataset round-trips")

    part_id = data.object_parts(data.holdout[0])[0]
    part = data.part(part_id)
    check(part["label"] in data.part_labels and len(part["points"]) > 0, "warehouse part readable")
    feat = model.encode(part["points"])
    check(len(feat) == 16, "encoder gives a 16-d feature")
    shifted = [[x * 3 + 5, y * 3 - 1, z * 3] for x, y, z in part["points"]]
    drift = max(abs(a - b) for a, b in zip(feat, model.encode(shifted)))
    check(drift < 1e-4, f"encoding ignores translation and scale (drift {drift:.1e})")

    session = partfit.Session(
        model, index, data, "table",
        parts=[box((0, 0.5, 0)), box((0.4, 0, 0.4), (0.1, 1.0, 0.1))],
        slots=[[-0.4, 0.0, -0.4], [0.4, 0.0, -0.4]],
    )
    for slot in range(2):
        check(session.active_slot == slot, f"slot {slot} active")
        shown = session.candidates(5)
        check([c["rank"] for c in shown] == list(range(5)), "ranking is ordered")
        lp = [c["log_prob"] for c in shown]
        check(all(a >= b for a, b in zip(lp, lp[1:])), "log-probabilities descend")
        session.choose(shown[0]["part_id"])
    check(session.complete and len(session.placed) == 2, "session completes")
    try:
        session.choose(part_id)
        check(False, "completed session refuses choices")
    except (ValueError, partfit.PartfitError):
        check(True, "completed session refuses choices")

    try:
        model.encode([[0.0, 0.0, 0.0]] * 4)
        check(False, "degenerate part rejected")
    except ValueError as e:
        check("invalid-input" in str(e), "degenerate part rejected")

    result = partfit.evaluate(data, model, index, cfg)
    check(result["metrics"]["label_hit_rate"]["trials"] == 4, "evaluation runs")
    print(result["table"])

    suites = partfit.selftest(gradient_trials=3, invariance_cases=2, dbscan_instances=5)
    check(all(s["passed"] for s in suites), f"{len(suites)} self-test suites pass")
    return 0


if __name__ == "__main__":
    sys.exit(main())
