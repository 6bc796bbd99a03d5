"""Smoke test for the Python bindings.

Build first:
    cargo build -p skateformer-py --release --features extension-module
then run:
    python3 python/smoke_test.py
"""

import importlib.util
import math
import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    lib = Path(os.environ.get("SKATEFORMER_PY_LIB", ROOT / "target/release/libskateformer_py.so"))
    if not lib.exists():
        sys.exit(f"extension not found at {lib}; build it first")
    tmp = Path(tempfile.mkdtemp())
    target = tmp / "skateformer_py.so"
    shutil.copy(lib, target)
    spec = importlib.util.spec_from_file_location("skateformer_py", target)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    sk = load_module()

    rep = sk.flops(48, 64, 96, 12, 4, 8, 8)
    assert rep["ratio_exact"] == (48, 1), rep
    try:
        sk.flops(21, 64, 96, 5, 4, 8, 8)
        raise AssertionError("V != K*L accepted")
    except ValueError:
        pass

    te = sk.temporal_embedding([0.0, 0.5], 4)
    assert te[:4] == [0.0, 1.0, 0.0, 1.0], te
    assert abs(te[4] - math.sin(0.5)) < 1e-15

    assert sk.partition_dims("ntu", 64, 8, 1) == (96, 8, 4)
    assert sk.token_block("nwucla", 16, 8, 1, 0, 0)[1:] == (0, 0)

    with tempfile.TemporaryDirectory() as d:
        d = Path(d)
        assert sk.gen_data(str(d / "train"), classes=3, per_class=4, seed=1) == 12
        sk.gen_data(str(d / "eval"), classes=3, per_class=2, seed=2)
        (d / "run.txt").write_text(
            "preset = desk\ndata.train = train\ndata.eval = eval\noptim.epochs = 2\noptim.batch_size = 4\n"
        )
        summary = sk.train(str(d / "run.txt"), modality="joint_motion", out=str(d / "out"))
        ck = sk.Checkpoint.load(summary["checkpoint_path"])
        assert ck.modality == "joint_motion" and ck.num_classes == 3
        loss, acc = ck.evaluate(str(d / "eval"))
        assert abs(acc - summary["best_acc"]) < 1e-12, (acc, summary)
        probs = ck.predict(str(d / "eval"))
        assert len(probs) == 6 and all(abs(sum(p) - 1) < 1e-9 for p in probs)
        rows = ck.inspect(str(d / "eval"))
        assert [r[0] for r in rows] == [0, 1, 2]

    print("python smoke test ok")


if __name__ == "__main__":
    main()
