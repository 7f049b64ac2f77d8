"""Exercises the bindings end to end. Run after `maturin develop` or installing the wheel."""

import math
import os
import tempfile

import fedsim


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def check_numerics():
    p = fedsim.softmax([1.0, 2.0, 3.0])
    z = sum(math.exp(v) for v in (1.0, 2.0, 3.0))
    assert all(close(a, math.exp(v) / z) for a, v in zip(p, (1.0, 2.0, 3.0)))
    hard = fedsim.softmax([1.0, 2.0, 3.0], rho=0.1)
    assert hard[2] > p[2]
    assert close(fedsim.entropy([0.25] * 4), math.log(4))
    assert fedsim.entropy([1.0, 0.0]) == 0.0

    x = [[float(i), float(i * i % 7), 1.0 - i] for i in range(12)]
    assert close(fedsim.linear_cka(x, x), 1.0)
    scaled = [[3.0 * v + 5.0 for v in row] for row in x]
    assert close(fedsim.linear_cka(x, scaled), 1.0)
    assert fedsim.linear_cka([[1.0]] * 5, x[:5]) is None

    avg = fedsim.aggregate([(0, [0.0, 2.0], 1), (1, [4.0, 2.0], 3)])
    assert close(avg[0], 3.0) and close(avg[1], 2.0)
    assert fedsim.learning_efficiency(0.5, 0.0) is None


def check_model_and_data():
    data = fedsim.Dataset.synthetic(3, 40, 5, 4.0, seed=7)
    assert len(data) == 120 and data.num_classes == 3 and data.feature_dim == 5
    assert data.class_counts() == [40, 40, 40]

    parts = data.partition(4, 0.5, seed=1)
    flat = sorted(i for p in parts for i in p)
    assert flat == list(range(len(data)))

    train, test = data.split(0.25, seed=2)
    assert len(train) + len(test) == len(data)

    model = fedsim.Model([5, 16, 3], seed=3)
    assert model.split_index == 2 and model.num_classes == 3
    probs = model.predict_proba(data.features()[:4])
    assert all(close(sum(row), 1.0) for row in probs)

    theta = model.theta()
    model.set_theta([v + 1.0 for v in theta])
    assert close(model.theta()[0], theta[0] + 1.0)
    restored = fedsim.Model.from_bytes(model.to_bytes())
    assert restored.theta() == model.theta() and restored.phi() == model.phi()

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.fedft")
        model.save(path)
        assert fedsim.Model.load(path).theta() == model.theta()
        dpath = os.path.join(tmp, "d.fedds")
        data.save(dpath)
        assert fedsim.Dataset.load(dpath).labels() == data.labels()

    acc, loss = model.evaluate(test)
    assert 0.0 <= acc <= 1.0 and loss > 0.0

    indices = parts[0]
    picked = fedsim.select_by_entropy(model, data, indices, 0.5, rho=0.1)
    assert len(picked) == max(1, len(indices) // 2)
    assert set(picked) <= set(indices) and picked == sorted(picked)
    rand = fedsim.select_random(indices, 0.5, seed=9)
    assert len(rand) == len(picked)
    assert rand == fedsim.select_random(indices, 0.5, seed=9)

    try:
        fedsim.select_random(indices, 1.5, seed=9)
    except ValueError:
        pass
    else:
        raise AssertionError("p_ds above 1 accepted")


def check_experiment():
    config = fedsim.preset_config("smoke")
    assert 'strategy = "fedft_eds"' in config
    first = fedsim.run_experiment(config)
    second = fedsim.run_experiment(config)
    reports = first["reports"]
    assert len(reports) == 2 and [r["round"] for r in reports] == [1, 2]
    assert [r["test_acc"] for r in reports] == [r["test_acc"] for r in second["reports"]]
    assert first["final"].phi() == first["pretrained"].phi()
    assert first["efficiency"] is None or first["efficiency"] > 0.0


if __name__ == "__main__":
    check_numerics()
    check_model_and_data()
    check_experiment()
    print("fedsim", fedsim.__version__, "python smoke test passed")
