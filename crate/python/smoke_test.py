"""End-to-end check of the `capc` extension module.

Build and install first:

    pip install --no-build-isolation -e crates/python
    python python/smoke_test.py
"""

import math
import os
import tempfile

import capc


def check_losses():
    eye = [[1.0 if i == j else 0.0 for j in range(4)] for i in range(4)]
    assert abs(capc.bt_loss(eye)) < 1e-12
    zeros = [[0.0] * 4 for _ in range(4)]
    assert capc.bt_loss(zeros) == 4.0
    for b in (2, 8):
        uniform = [[0.0] * b for _ in range(b)]
        assert abs(capc.info_nce(uniform) - math.log(b)) < 1e-9
    a = [[1.0, 2.0], [2.0, 0.5], [3.0, -1.0]]
    c = capc.bt_cross_correlation(a, a)
    assert all(abs(c[i][i] - 1.0) < 1e-6 for i in range(2))
    assert capc.lr_at(0.2, 10, 100, 0) == 0.0
    assert abs(capc.lr_at(0.2, 10, 100, 1) - 0.02) < 1e-12
    assert abs(capc.lr_at(0.2, 10, 100, 10) - 0.2) < 1e-12


def check_pipeline(root):
    data = os.path.join(root, "data")
    n = capc.generate_dataset(data, seed=3, links=2, subcarriers=8, frames=40,
                              classes=2, samples_per_class=8)
    assert n == 16

    config = os.path.join(root, "run.ini")
    with open(config, "w") as f:
        f.write(
            "[pretrain]\n"
            f"data = {data}\n"
            "epochs = 2\nbatch_size = 4\nlr_weights = 1.0\nwarmup_epochs = 1\n"
            "horizon = 1\nembed_dim = 6\nhidden_dim = 6\nproj_dim = 6\n"
            "channels = 2, 3\n"
        )
    run = os.path.join(root, "run")
    means = capc.pretrain(config, run, seed=1)
    assert len(means) == 2 and all(math.isfinite(m) for m in means)

    ck = os.path.join(run, "checkpoint")
    acc = capc.linear_probe(ck, data, shots=2, epochs=5)
    assert 0.0 <= acc <= 1.0
    assert 0.0 <= capc.semi_supervised(ck, data, shots=2, epochs=2) <= 1.0

    sv = capc.diagnose_collapse(ck, data, batch=8)
    assert len(sv) == 6 and all(x >= y for x, y in zip(sv, sv[1:]))
    rows, width = capc.export_embeddings(ck, data, os.path.join(root, "emb"))
    assert (rows, width) == (16, 24)

    try:
        capc.pretrain(os.path.join(root, "missing.ini"), run)
    except OSError:
        pass
    else:
        raise AssertionError("missing config should raise")


if __name__ == "__main__":
    check_losses()
    with tempfile.TemporaryDirectory() as tmp:
        check_pipeline(tmp)
    print("smoke test passed")
