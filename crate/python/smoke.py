"""Quick end-to-end check of the gu_lab extension on a tiny config."""

import json
import math
import sys
import tempfile

import gu_lab

TINY = {
    "n_profiles": 10,
    "qa_per_profile": 5,
    "n_abstain": 4,
    "n_layers": 2,
    "d_model": 16,
    "n_heads": 2,
    "d_ff": 32,
    "base_epochs": 3,
    "n_virtual": 8,
    "n_retain": 4,
    "n_safe_refs": 2,
    "n_confusable": 2,
    "n_unrelated": 2,
    "max_epochs": 2,
    "probe_retain": 4,
}


def check_metrics():
    assert abs(gu_lab.rouge_l("a b c", "a c") - 0.8) < 1e-12
    assert gu_lab.privleak(0.3, 0.5) == -40.0
    assert gu_lab.roc_auc([2.0, 3.0], [1.0, 2.0]) == 0.875
    assert abs(gu_lab.kl_div([1.0, 0.0], [0.5, 0.5]) - math.log(2)) < 1e-9
    assert gu_lab.model_utility([0.5, 0.0, 1.0]) == 0.0
    nll = [0.5, 1.0, 3.0, 2.0]
    assert abs(gu_lab.mia_min_k(nll, 100.0) - sum(nll) / len(nll)) < 1e-12


def check_geometry():
    cols = [[1.0, 0.0, 0.0]]
    v = [1.0, 2.0, 3.0]
    assert gu_lab.reflect(v, cols) == [1.0, -2.0, -3.0]
    inside, outside = gu_lab.decompose(v, cols)
    assert inside == [1.0, 0.0, 0.0] and outside == [0.0, 2.0, 3.0]
    mean, basis, explained = gu_lab.pca([[1.0, 1.0], [-1.0, -1.0], [2.0, 2.0]], 1)
    assert abs(basis[0][0] - basis[0][1]) < 1e-12 and abs(explained[0] - 1.0) < 1e-12


def check_synthesis():
    prompts = gu_lab.virtual_prompts("Nikolai Abilov", 10, 1)
    assert len(prompts) == 10
    assert sum(p["anchor_count"] == 2 for p in prompts) == 2
    pool = gu_lab.retain_pool("Nikolai Abilov", 7)
    assert sum(p["name_group"] == "unrelated" for p in pool) == 4


def check_pipeline():
    try:
        gu_lab.Config(json.dumps({"forget_fraction": 0.03}))
    except ValueError:
        pass
    else:
        raise AssertionError("fraction 0.03 should be rejected")

    cfg = gu_lab.Config(json.dumps(TINY))
    lab = gu_lab.Lab(cfg)
    anchor = lab.anchors()[0]
    base = lab.train_base()
    retrain = lab.train_retrain()
    unlearned, history = lab.unlearn(base, method="gu")
    assert history["method"] == "gu" and len(history["epochs"]) >= 1
    report = lab.evaluate(unlearned, retrain)
    assert report["meta"]["seed"] == cfg.seed
    assert "privleak" in report and 0.0 <= report["mu"] <= 1.0
    assert "privleak" not in lab.evaluate(base)

    with tempfile.TemporaryDirectory() as d:
        path = f"{d}/model.ckpt"
        unlearned.save(path)
        assert gu_lab.Model.load(path).digest() == unlearned.digest()
    print(f"anchor {anchor!r}: {lab.answer(unlearned, f'Where was {anchor} born?')!r}")

    try:
        lab.unlearn(base, method="gu", data="original")
    except ValueError:
        pass
    else:
        raise AssertionError("GU on original data should be rejected")


def main():
    check_metrics()
    check_geometry()
    check_synthesis()
    check_pipeline()
    print(f"gu_lab {gu_lab.__version__}: smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
