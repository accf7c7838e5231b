import json
from dataclasses import replace

import numpy as np
import pytest
from cli_pipeline import write_inputs

from twincsi.harness.experiments import (
    RECIPES,
    RUNNERS,
    ExperimentError,
    ExperimentSpec,
    Lab,
    Table,
    load_spec,
    medians,
    spec_from_dict,
    stage,
    table_bytes,
    user_groups,
    write_result,
)


def test_spec_defaults_and_nesting():
    spec = spec_from_dict({"recipe": "compression", "train": {"learning_rate": 0.002, "epochs": 3}, "seeds": [4]})
    assert spec.seeds == (4,)
    assert spec.train.learning_rate == 0.002 and spec.train.epochs == 3
    assert spec.refine.train.learning_rate == pytest.approx(0.0002)
    assert spec.latent == 32
    assert spec_from_dict(spec.to_dict()) == spec
    assert spec_from_dict(spec.to_dict()).hash == spec.hash
    assert spec_from_dict({"recipe": "compression"}).hash != spec.hash


def test_spec_validation():
    with pytest.raises(ValueError, match="unknown recipe"):
        ExperimentSpec("nope")
    with pytest.raises(ValueError, match="split_ratio"):
        ExperimentSpec("compression", split_ratio=1.0)
    with pytest.raises(ValueError, match="seed"):
        ExperimentSpec("compression", seeds=())
    with pytest.raises(ValueError, match="unknown TrainConfig field"):
        spec_from_dict({"recipe": "compression", "train": {"lr": 1}})
    with pytest.raises(ValueError, match="unknown ExperimentSpec field"):
        spec_from_dict({"recipe": "compression", "colour": 1})


def test_load_spec_resolves_scene_paths(tmp_path):
    write_inputs(tmp_path)
    spec = load_spec(tmp_path / "spec.json")
    assert spec.target_scene == str(tmp_path / "target.json")
    (tmp_path / "bad.json").write_text(json.dumps({"recipe": "compression", "twin_scene": "gone.json"}))
    with pytest.raises(ExperimentError, match="stage 'spec'"):
        load_spec(tmp_path / "bad.json")


def test_stage_labels_errors():
    with pytest.raises(ExperimentError, match="stage 'train' failed: ValueError: boom"):
        with stage("train"):
            raise ValueError("boom")


def test_tables_and_medians():
    t = Table("t", ["k", "seed", "v"], [["a", 0, 1.0], ["a", 1, 3.0], ["a", 2, 2.0], ["b", 0, 0.1]])
    assert medians(t, ["k"], "v") == {("a",): 2.0, ("b",): 0.1}
    assert t.where(k="a", seed=1) == [["a", 1, 3.0]]
    assert table_bytes(t).decode().splitlines() == ["k,seed,v", "a,0,1.0", "a,1,3.0", "a,2,2.0", "b,0,0.1"]


def test_user_groups_are_seeded_and_distinct():
    g = user_groups(10, 4, 5, 3)
    assert all(np.array_equal(a, b) for a, b in zip(g, user_groups(10, 4, 5, 3)))
    assert all(len(set(x.tolist())) == 4 and x.max() < 10 for x in g)


@pytest.fixture(scope="module")
def small_lab(tmp_path_factory):
    root = tmp_path_factory.mktemp("exp")
    write_inputs(root)
    spec = spec_from_dict(
        {
            "recipe": "direct-generalization",
            "seeds": [0],
            "train_size": 24,
            "test_size": 6,
            "target_scene": str(root / "target.json"),
            "trace": {"max_reflections": 2},
            "train": {"learning_rate": 0.003, "epochs": 1},
            "train_sizes": [12, 24],
            "ratios": [0.015625, 0.03125],
            "densities": [0.5],
            "reflections": [1, 2],
            "fovs": [160.0, 180.0],
            "refine_samples": 8,
            "refine_iterations": 6,
            "eval_every": 3,
            "top_k": 8,
            "impairments": [["reflections", 1], ["material", "drywall"]],
            "user_groups": 3,
        }
    )
    return Lab(spec), root


EXPECTED_TABLES = {
    "direct-generalization": ["direct_generalization"],
    "compression": ["compression"],
    "fidelity-sweep": ["fidelity_sweep", "fidelity_report"],
    "refinement": ["refinement", "selection_correlation"],
    "refinement-after-impairment": ["refinement_after_impairment"],
    "sum-rate": ["sum_rate"],
}


@pytest.mark.parametrize("recipe", RECIPES)
def test_every_recipe_runs_on_a_small_scene(small_lab, recipe):
    lab, root = small_lab
    spec = replace(lab.spec, recipe=recipe)
    result = RUNNERS[recipe](lab.with_spec(spec))
    assert [t.name for t in result.tables] == EXPECTED_TABLES[recipe]
    for t in result.tables:
        assert t.rows and all(len(r) == len(t.header) for r in t.rows)
        assert t.header[-1] == "config_hash" and all(r[-1] == spec.hash for r in t.rows)
    assert all(np.isfinite(v) for _, _, v, _ in result.summary)
    written = write_result(spec, result, root / recipe)
    names = sorted(p.name for p in written)
    assert "summary.csv" in names and "spec.resolved.json" in names and any(n.endswith(".png") for n in names)
    assert not list((root / recipe).glob("*.tmp"))


def test_recipe_outputs_do_not_depend_on_memo_order(small_lab, tmp_path):
    lab, _ = small_lab
    spec = replace(lab.spec, recipe="compression")
    fresh = Lab(spec, lab.corpus)
    a = write_result(spec, RUNNERS["compression"](fresh), tmp_path / "a")
    b = write_result(spec, RUNNERS["compression"](lab.with_spec(spec)), tmp_path / "b")
    for p, q in zip(a, b):
        assert p.read_bytes() == q.read_bytes()
