"""Smoke test for the pointcaps_rs extension.

Build and install first, e.g. `maturin develop --release -m crates/python/Cargo.toml`
or `pip install --no-build-isolation ./crates/python`, then run
`python python/smoke_test.py`.
"""

import math
import os
import tempfile

import pointcaps_rs as pc


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def check_primitives():
    assert pc.squash([0.0, 0.0]) == [0.0, 0.0]
    assert pc.squash([0.0, 1.0]) == [0.0, 0.5]
    assert close(math.hypot(*pc.squash([3.0, 0.0])), 0.9)
    assert close(pc.chamfer([[0.0, 0.0, 0.0]], [[1.0, 2.0, 2.0]]), 18.0)
    assert close(pc.margin_loss([0.0, 0.0], 0), 0.81)

    votes = [[[1.0, 0.0], [0.0, 1.0]], [[0.5, 0.5], [0.2, -0.1]]]
    parents, logits, couplings = pc.route(votes, iterations=3, kind="er")
    assert len(parents) == 2 and len(parents[0]) == 2
    assert all(v <= 0.0 for row in logits for v in row)
    assert all(close(sum(row), 1.0) for row in couplings)
    _, _, first = pc.route(votes, iterations=1, kind="dr")
    assert all(k == 0.5 for row in first for k in row)


def check_data():
    cloud = pc.generate_shape("torus", 64, seed=3)
    assert len(cloud) == 64
    noisy = pc.perturb_gaussian(cloud, 0.05, seed=1)
    assert len(noisy) == 64 and noisy.points != cloud.points
    assert len(pc.add_outliers(cloud, 10, seed=1)) == 64

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "c.xyz")
        cloud.save(path)
        back = pc.PointCloud.load(path)
        assert back.points == cloud.points and back.label == cloud.label


def check_model():
    cfg = pc.ModelConfig.micro(32, 5)
    params, flops = cfg.complexity()
    assert params > 0 and flops > 0
    assert pc.ModelConfig.from_text(cfg.to_text()).to_text() == cfg.to_text()

    model = pc.Model(cfg, seed=0)
    assert model.num_params() == params

    train, test = pc.synthesize(32, 4, 2, seed=0)
    assert len(train) == 20 and len(test) == 10
    out = model.forward(test[0])
    assert len(out["class_lengths"]) == 5
    assert len(out["reconstruction"]) == 32
    assert all(0.0 <= l < 1.0 for l in out["class_lengths"])
    assert len(model.part_assign(test[0])) == 32
    assert len(model.perturb_latent(test[0], 0, [-1.0, 0.0, 1.0])) == 3

    log = model.fit(train, test, epochs=2, batch_size=8)
    assert [row["epoch"] for row in log] == [1, 2]
    assert all(math.isfinite(row["loss"]) for row in log)
    acc, cd = model.evaluate(test)
    assert 0.0 <= acc <= 1.0 and cd > 0.0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ckpt")
        model.save(path)
        again = pc.Model.load(cfg, path)
        assert again.evaluate(test) == (acc, cd)
        other = pc.ModelConfig.micro(32, 5)
        other.set("digit", "6,dr,3")
        try:
            pc.Model.load(other, path)
        except ValueError as e:
            assert "version" in str(e)
        else:
            raise AssertionError("mismatched checkpoint loaded")


if __name__ == "__main__":
    check_primitives()
    check_data()
    check_model()
    print("smoke test passed")
