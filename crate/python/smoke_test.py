"""Smoke test for the visaware extension module.

Build and run from the repository root:

    cargo build --release -p visaware-python --features extension-module
    cp target/release/libvisaware.so python/visaware.so
    python3 python/smoke_test.py
"""

import json
import math
import os
import random
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import visaware


def unit(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def main():
    x = [1.0, 0.0, 0.0]
    y = [0.5, math.sqrt(0.75), 0.0]
    z = [0.9, 0.0, math.sqrt(0.19)]
    assert abs(visaware.triplet_loss(x, y, z, 0.2) - 0.6) < 1e-12
    assert visaware.triplet_loss(x, z, y, 0.2) == 0.0

    pooled = visaware.weldon_pool([[3.0], [1.0], [2.0]], k_plus=1, k_minus=1, beta=1.0)
    assert pooled == [4.0], pooled

    rng = random.Random(0)
    vectors = [[rng.gauss(0, 1) for _ in range(16)] for _ in range(200)]
    index = visaware.ImageIndex([f"img{i}" for i in range(200)], vectors)
    assert len(index) == 200 and index.dim == 16
    top = index.retrieve(vectors[42], 5)
    assert len(top) == 5 and top[0][0] == "img42", top[:2]
    assert abs(top[0][1] - 1.0) < 1e-9
    assert all(a[1] >= b[1] for a, b in zip(top, top[1:]))

    try:
        visaware.ImageIndex(["a"], [[0.0, 0.0]])
    except visaware.VisawareError:
        pass
    else:
        raise AssertionError("zero vector accepted")

    config = json.loads(visaware.default_config())
    assert config["retrieval"]["m"] == 8

    reports = visaware.gradcheck(points=1)
    assert reports and all(passed for _, _, passed in reports), reports

    tiny = {
        "seed": 3,
        "data": {
            "topics": 4, "topic_words": 10, "seen_topic_words": 5, "ambiguous_words": 3,
            "attributes": 4, "attributes_per_image": 2, "regions": 6, "image_dim": 12,
            "train_pairs": 60, "heldout_pairs": 20, "tag_train": 30, "tag_test": 12,
            "nli_train": 20, "nli_test": 8, "translation_train": 20, "translation_test": 8,
        },
        "embedding": {"text_dim": 8, "shared_dim": 8, "batch_size": 8, "epochs": 2},
        "encoder": {"dim": 8, "heads": 2, "fusion_heads": 2, "layers": 1, "ff_dim": 16, "max_len": 16},
        "task": {"epochs": 2, "batch_size": 8},
    }
    with tempfile.TemporaryDirectory() as tmp:
        cfg = os.path.join(tmp, "config.json")
        with open(cfg, "w") as f:
            json.dump(tiny, f)
        common = ["--config", cfg, "--out", tmp]
        for stage in ["gen-data", "train-embed", "build-index", "retrieve", "train-task", "evaluate"]:
            code = visaware.run([stage] + common)
            assert code == 0, (stage, code)
        assert visaware.run(["no-such-stage"]) == 2

        model = visaware.EmbeddingModel.load(os.path.join(tmp, "embedding.ckpt"))
        e = model.encode_text(["t0w1", "amb0", "attr2"])
        assert len(e) == model.dim and abs(sum(v * v for v in e) - 1.0) < 1e-9
        img = model.encode_image([[rng.gauss(0, 1) for _ in range(12)] for _ in range(6)])
        assert abs(sum(v * v for v in img) - 1.0) < 1e-9

        counts = visaware.generate_corpus(os.path.join(tmp, "corpus2"), seed=1, config=json.dumps(tiny))
        assert counts == (80, 80), counts

    print("smoke test passed")


if __name__ == "__main__":
    main()
