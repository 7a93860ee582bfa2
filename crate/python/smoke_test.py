#!/usr/bin/env python3
"""End-to-end smoke test for the resprune_py extension module.

Builds the module if needed, then walks the whole pipeline at desk scale:
synthesize data, train a small teacher, plan and apply a prune, recover with
two-step distillation, and check the structural invariants along the way.

Run from anywhere:  python3 python/smoke_test.py
"""

import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_module():
    """Imports resprune_py, building the cdylib first if it is missing."""
    lib = REPO / "target" / "debug" / "libresprune_py.so"
    if not lib.exists():
        subprocess.run(
            ["cargo", "build", "-p", "resprune-py", "--features", "extension-module"],
            cwd=REPO,
            check=True,
        )
    stage = Path(tempfile.mkdtemp(prefix="resprune_py_"))
    shutil.copy2(lib, stage / "resprune_py.so")
    sys.path.insert(0, str(stage))
    import resprune_py

    return resprune_py


def main():
    rp = import_module()
    print(f"resprune_py {rp.__version__}")

    # Data: a tiny synthetic set with held-out eval records.
    full = rp.Dataset.synthetic(class_count=3, per_class=8, side=16, seed=5)
    assert len(full) == 24 and full.class_count == 3
    train, eval_ = full.split(6, seed=5)
    train.compute_stats()
    mean, std = train.stats()
    eval_.set_stats(mean, std)
    assert len(train) == 18 and len(eval_) == 6

    # Teacher: train briefly, expect it to at least run and evaluate.
    teacher = rp.Net(
        input_side=16, in_channels=1, class_count=3,
        widths=[8, 16], blocks=[1, 1], seed=1,
    )
    assert teacher.widths == [8, 16]
    teacher.train(train, epochs=4, batch_size=8, warmup_epochs=1, seed=3)
    acc = teacher.evaluate(eval_)
    assert 0.0 <= acc <= 1.0

    # Forward: one batch of logits with the right shape.
    probe, _ = train.split(16, seed=1)
    logits = teacher.forward([0.5] * (2 * 16 * 16), n=2)
    assert len(logits) == 2 * teacher.class_count

    # Prune: KL plan, canonical text round-trip, then surgery.
    macs0, params0 = teacher.macs_params()
    plan = rp.make_plan(teacher, train, criterion="kl", target="groups 3",
                        proxy_size=8, seed=2)
    assert plan.shortfall is None and plan.criterion == "kl"
    assert len(plan.removed()) == 3
    assert rp.Plan.parse(plan.text()).text() == plan.text()

    student = rp.apply_plan(teacher, plan)
    macs1, params1 = student.macs_params()
    assert macs1 < macs0 and params1 < params0

    # Expansion: exactly six-fold, labels preserved, deterministic.
    expanded, provenance = train.expand(seed=9)
    assert len(expanded) == 6 * len(train)
    assert all(expanded.labels()[i] == train.labels()[src]
               for i, (_, src) in enumerate(provenance))
    again, _ = train.expand(seed=9)
    assert expanded.images_sha256() == again.images_sha256()

    # Recovery: two-step distillation must run and leave a usable student.
    rp.finetune(student, teacher, train, eval=eval_,
                step1_epochs=2, step2_epochs=1, step2_lr=0.01,
                warmup_epochs=1, batch_size=8, seed=4)
    recovered = student.evaluate(eval_)
    assert 0.0 <= recovered <= 1.0

    # Checkpoints survive a round trip.
    with tempfile.TemporaryDirectory() as td:
        ckpt = str(Path(td) / "student.ckpt")
        student.save(ckpt)
        reloaded = rp.Net.load(ckpt)
        assert reloaded.widths == student.widths
        assert abs(reloaded.evaluate(eval_) - recovered) < 1e-12

    print(f"teacher eval {acc:.4f}; pruned macs {macs0} -> {macs1}; "
          f"recovered eval {recovered:.4f}")
    print("smoke test passed")


if __name__ == "__main__":
    main()
