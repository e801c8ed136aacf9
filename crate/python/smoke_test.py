"""Smoke test for the `biam` extension module.

Build and run:

    cargo build -p biam-python --release --features extension-module
    mkdir -p /tmp/biam-py && cp target/release/libbiam.so /tmp/biam-py/biam.so
    PYTHONPATH=/tmp/biam-py python3 python/smoke_test.py
"""

import json
import math
import os
import tempfile

import biam


def close(a, b, tol):
    return abs(a - b) <= tol


def main():
    # Attention rows are distributions; shapes follow the sequences.
    x = [[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]]
    y = [[1.0, 0.0], [0.0, 1.0]]
    out = biam.biam(x, y)
    assert len(out.w12) == 3 and len(out.w12[0]) == 2
    assert len(out.x_aligned) == 2 and len(out.y_aligned) == 3
    for row in out.w12 + out.w21:
        assert close(sum(row), 1.0, 1e-12)

    # CTC: dynamic program against path enumeration and a closed form.
    loss, grad = biam.ctc([[0.0, 0.0]], [1])
    assert close(loss, math.log(2.0), 1e-12)
    assert len(grad) == 1 and len(grad[0]) == 2
    logits = [[0.3, -0.2, 0.1], [0.0, 0.5, -0.4], [0.2, 0.1, 0.0]]
    assert close(biam.ctc(logits, [1, 1])[0], biam.ctc_enumerate(logits, [1, 1]), 1e-9)
    try:
        biam.ctc([[0.0, 0.0]], [1, 1])
        raise AssertionError("unreachable target accepted")
    except ValueError:
        pass
    assert biam.greedy_decode([[0, 5, 0], [0, 5, 0], [5, 0, 0], [0, 5, 0]]) == [1, 1]

    assert close(biam.character_error_rate([([1, 2], [1, 3])]), 0.5, 1e-12)
    assert close(biam.cosine_distance([[1.0, 0.0]], [[2.0, 0.0]]), 0.0, 1e-12)
    assert close(biam.monotonicity([[1.0, 0.0], [0.0, 1.0]]), 1.0, 1e-12)

    report = biam.run_gradcheck()
    assert report and all(r["passed"] for r in report), report

    # A short training run, the text-only stage and fine-tuning.
    corpus = biam.synth_corpus(json.dumps({"size": 30, "seed": 3}))
    assert len(corpus) == 30 and corpus[0].id == "utt-00000"
    config = biam.TrainConfig(
        json.dumps({"epochs": 3, "pretrain_epochs": 1, "finetune_epochs": 1, "model": {"dim": 8}})
    )
    ckpt, metrics = biam.train(corpus, config)
    assert metrics.startswith("epoch,") and len(metrics.strip().splitlines()) == 4
    assert ckpt.stage == "paired" and ckpt.epoch == 3
    ckpt, losses = biam.pretrain_text([u.graphemes for u in corpus], ckpt)
    assert len(losses) == 1 and math.isfinite(losses[0])
    ckpt, _ = biam.finetune(corpus, ckpt)
    result = ckpt.evaluate(corpus)
    assert result["utterances"] == 3 and 0.0 <= result["monotonicity"] <= 1.0

    u = corpus[-1]
    w12 = ckpt.alignment(u.speech, u.graphemes)
    assert len(w12) == len(u.speech) and len(w12[0]) == len(u.graphemes)
    with tempfile.TemporaryDirectory() as tmp:
        csv_path, pgm_path = ckpt.export_alignment(u, os.path.join(tmp, "utt"))
        with open(pgm_path, "rb") as f:
            assert f.read().startswith(f"P5 {len(w12)} {len(w12[0])} 255\n".encode())
        ckpt.save(os.path.join(tmp, "ckpt.json"))
        again = biam.Checkpoint.load(os.path.join(tmp, "ckpt.json"))
        assert again.transcribe(u.speech) == ckpt.transcribe(u.speech)
        assert again.config.hash == ckpt.config.hash

    print("python smoke test passed")


if __name__ == "__main__":
    main()
