"""Exercises the Python bindings end to end on a small synthetic graph."""

import math
import tempfile
from pathlib import Path

import lwgcn


def main():
    data = lwgcn.Dataset.synthetic("small", seed=3)
    data.validate()
    assert data.num_nodes == 300 and data.num_classes == 3
    print(data)

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp) / "toy"
        data.save(root)
        again = lwgcn.Dataset.load(root)
        assert again.edges == data.edges
        assert len(lwgcn.dataset_hash(root)) == 64

        config = lwgcn.TrainConfig(sampler="adaptive", layer_size=32, batch_size=64,
                                   max_epochs=5, learning_rate=0.01, seed=1, deterministic=True)
        assert config.resolved_lambda == 0.5
        model, history = lwgcn.train(config, data)
        assert len(history) == 5
        assert all(r["seconds"] == 0 for r in history)
        acc = model.evaluate(data, "test")
        assert 0.0 <= acc <= 1.0
        logits = model.predict(data)
        assert len(logits) == data.num_nodes and len(logits[0]) == data.num_classes

        path = Path(tmp) / "model.snapshot"
        model.save(path)
        assert lwgcn.Model.load(path).evaluate(data, "test") == acc
        print(f"trained {len(history)} epochs, test accuracy {acc:.3f}")

    try:
        lwgcn.TrainConfig(sampler="bogus")
    except ValueError as e:
        assert "adaptive" in str(e)
    else:
        raise AssertionError("bad sampler accepted")

    graph = lwgcn.Graph(4, [(0, 1), (1, 2), (2, 3)])
    assert math.isclose(sum(p for _, p in graph.conditional(1)), 1.0)
    layer = graph.sample_layer([0, 1], 8, strategy="iid", seed=2)
    assert len(layer["sampled"]) == 8 and all(q > 0 for q in layer["q"])

    p, a = [0.2, 0.3, 0.5], [1.0, 2.0, 0.5]
    q_star = lwgcn.optimal_sampler(p, a)
    assert lwgcn.variance_exact(p, a, q_star, 4) < 1e-12
    assert lwgcn.variance_exact(p, a, [1 / 3] * 3, 4) > 0

    results = lwgcn.selftest("estimators")
    assert results and all(r["passed"] for r in results), results
    print(f"{len(results)} estimator checks passed; samplers: {', '.join(lwgcn.SAMPLERS)}")
    print("smoke test ok")


if __name__ == "__main__":
    main()
