"""Smoke test for the pyvfda extension.

Build and stage the module first:

    cargo build -p vfda-python --release
    cp target/release/libpyvfda.so python/pyvfda.so
    python3 python/smoke_test.py
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import numpy as np  # noqa: E402
import pyvfda  # noqa: E402

TINY = """
seed = 3
[data]
volume_size = 8
samples_per_client = 2
heldout_samples = 2
[network]
encoder_channels = [4, 8]
[federation]
num_clients = 2
rounds = 2
lr0 = 0.1
"""


def check_stats():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(2, 3, 4, 4, 4))
    t = pyvfda.Tensor(list(z.shape), z.ravel().tolist())
    mu, sigma = pyvfda.channel_stats(t)
    flat = z.reshape(2, 3, -1)
    assert np.allclose(mu, flat.mean(axis=2).ravel(), atol=1e-12)
    assert np.allclose(sigma, np.sqrt(flat.var(axis=2) + 1e-5).ravel(), atol=1e-12)

    var_mu, var_sigma = pyvfda.local_stat_variance(mu, sigma, 2, 3)
    assert np.allclose(var_mu, np.var(np.reshape(mu, (2, 3)), axis=0), atol=1e-12)
    assert np.allclose(var_sigma, np.var(np.reshape(sigma, (2, 3)), axis=0), atol=1e-12)

    g_mu, _ = pyvfda.global_stat_variance([[1.0, 2.0], [3.0, 2.0]], [[1.0, 1.0], [1.0, 1.0]])
    assert g_mu == [1.0, 0.0]

    assert abs(pyvfda.emd_factor(3) - 10 * math.exp(-3)) < 1e-15
    assert pyvfda.emd_factor(0) == 0.99

    same = pyvfda.vfda_augment(t, [0.0] * 3, [0.0] * 3, seed=1)
    assert same.data == t.data
    a = pyvfda.vfda_augment(t, [0.5] * 3, [0.1] * 3, seed=1)
    b = pyvfda.vfda_augment(t, [0.5] * 3, [0.1] * 3, seed=1)
    assert a.data == b.data and a.data != t.data
    assert a.shape == [2, 3, 4, 4, 4]


def check_metrics_and_wire():
    assert pyvfda.dice_score([1, 1, 0, 0], [1, 0, 0, 0], 1) == 2 / 3
    assert pyvfda.dice_score([0, 0], [0, 0], 1) == 1.0
    avg = pyvfda.aggregate([(1, 1, [0.0, 4.0]), (0, 3, [4.0, 0.0])])
    assert avg == [3.0, 1.0]

    wire = pyvfda.encode_update(7, 5, [0.1, -2.5], [([1.0, 2.0], [0.5, 0.25])])
    assert wire[:4] == b"FVM1"
    assert pyvfda.decode_update(wire) == (7, 5, [0.1, -2.5], [([1.0, 2.0], [0.5, 0.25])])
    try:
        pyvfda.decode_update(wire[:-1])
    except ValueError:
        pass
    else:
        raise AssertionError("truncated message accepted")


def check_pipeline():
    canonical = pyvfda.parse_config(TINY)
    assert "num_clients = 2" in canonical
    try:
        pyvfda.parse_config("[federation]\neta0 = -1.0\n")
    except ValueError as e:
        assert "eta0" in str(e)
    else:
        raise AssertionError("negative eta0 accepted")

    with tempfile.TemporaryDirectory() as tmp:
        data_dir = os.path.join(tmp, "data")
        h1 = pyvfda.gen_data(TINY, data_dir)
        assert len(h1) == 64 and h1 == pyvfda.gen_data(TINY, os.path.join(tmp, "again"))
        run = os.path.join(tmp, "run")
        rounds = pyvfda.train(TINY, run)
        assert [r for r, _ in rounds] == [1, 2]
        assert all(0.0 <= d <= 1.0 for _, d in rounds)
        report = json.loads(pyvfda.evaluate(os.path.join(run, "model.json"), os.path.join(data_dir, "heldout")))
        assert 0.0 <= report["dice_mean"] <= 1.0

    fed = pyvfda.Federation(TINY)
    assert fed.next_round == 1 and not fed.finished
    log = fed.step()
    assert log["round"] == 1 and len(log["client_losses"]) == 2
    fed.step()
    assert fed.finished
    assert len(fed.global_variances()) == 2
    assert len(fed.params()) > 0


if __name__ == "__main__":
    check_stats()
    check_metrics_and_wire()
    check_pipeline()
    print("pyvfda smoke test passed")
