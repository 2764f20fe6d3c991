"""Smoke test for the tslm_py extension module.

Build and install the wheel first (see the README),
then run `python python/smoke_test.py`.
"""

import math
import os
import tempfile

import tslm_py

TINY = {
    "backbone": {"d_model": 16, "depth": 2, "heads": 2, "max_context": 1024, "lora_rank": 2, "lora_alpha": 4.0},
    "precision": "f32",
}


def main():
    corpus = tslm_py.generate_corpus("trend", 12, seed=3)
    assert len(corpus) == 12
    assert corpus == tslm_py.generate_corpus("trend", 12, seed=3)
    classes = tslm_py.family_classes("trend")
    assert classes, "trend has labels"

    for variant in ("softprompt", "flamingo"):
        model = tslm_py.Model(variant, TINY, seed=1)
        assert model.variant == variant
        census = model.census()
        assert census["entries"], census

        sample = corpus[0]
        assert model.prompt_token_count(sample) > 0
        loss = model.loss(corpus[:4])
        assert math.isfinite(loss) and loss > 0

        text = model.generate(sample, max_new_tokens=8)
        assert isinstance(text, str)

        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "m.ckpt")
            model.save(path, step=5)
            again = tslm_py.Model.load(path)
            assert again.loss(corpus[:4]) == loss

        report = model.train(corpus[:8], corpus[8:], {"epochs": 1, "batch_size": 4})
        assert len(report["epochs"]) == 1

    label = corpus[0]["label"]
    assert tslm_py.extract_answer(f"Answer: {label}", classes) == label
    result = tslm_py.score([f"Answer: {label}"], [label], classes)
    assert result["accuracy"] == 100.0

    record = tslm_py.profile_memory("softprompt", n=1, l=10)
    assert record["peak_mem_bytes"] > 0, record
    assert tslm_py.lr_factor(0, 10, 0) == 1.0

    print("smoke test ok")


if __name__ == "__main__":
    main()
