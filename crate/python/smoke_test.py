"""Smoke test for the pytabii extension.

Build and install first:
    pip install maturin
    maturin build --release -m crates/py/Cargo.toml
    pip install target/wheels/pytabii-*.whl
"""

import json
import math
import random
import sys
import tempfile
from pathlib import Path

import pytabii


def check_cache():
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "cache.jsonl"
        prompt = pytabii.render_prompt("outcome", ["age", "glucose"], ["bmi"])
        vec = [0.25, -1.5, 1.0 / 3.0]
        pytabii.write_embedding_cache(str(path), [(prompt, vec), (prompt, [0.0, 0.0, 0.0])])
        lines = path.read_text().splitlines()
        assert len(lines) == 1, lines
        record = json.loads(lines[0])
        assert record["key"] == pytabii.cache_key(prompt)
        cache = pytabii.EmbeddingCache(str(path))
        assert len(cache) == 1 and cache.dim == 3
        assert cache.embed(prompt) == vec
        try:
            cache.embed("unknown prompt")
        except KeyError:
            pass
        else:
            raise AssertionError("cache miss must raise KeyError")


def check_mine():
    rng = random.Random(0)
    a, b = [], []
    for _ in range(2000):
        x = rng.gauss(0.0, 1.0)
        a.append([x])
        b.append([0.9 * x + math.sqrt(1 - 0.81) * rng.gauss(0.0, 1.0)])
    est = pytabii.mine_estimate(a, b, seed=1, config=json.dumps({"steps": 600}))
    truth = -0.5 * math.log(1 - 0.81)
    print(f"mine estimate {est:.3f} nats (true {truth:.3f})")
    assert 0.4 * truth < est < 1.2 * truth


def check_rank():
    rows = pytabii.rank([("a", "x", 0.9), ("b", "x", 0.8), ("a", "y", 0.7), ("b", "y", 0.7)])
    assert rows[0][0] == "a" and abs(rows[0][1] - 1.25) < 1e-12


def check_run():
    cfg = json.loads(pytabii.default_config())
    cfg.update({"data": {"kind": "synthetic", "name": "informative:400"}, "seeds": 1, "with_optimal": False})
    cfg["train"]["max_epochs"] = 5
    results = json.loads(pytabii.run(["discard"], json.dumps(cfg)))
    assert results[0]["method"] == "discard"
    print(f"discard accuracy {results[0]['mean']:.3f}")


def main():
    print(f"pytabii {pytabii.__version__}")
    check_cache()
    check_rank()
    check_mine()
    check_run()
    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
