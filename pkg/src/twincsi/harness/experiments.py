"""Experiment recipes: the result families as reproducible runs emitting CSV tables and PNG charts.

A run builds one :class:`Lab` (scenes, traced corpus, UE split and a memo of
trained models) and hands it to a recipe. Every CSV row carries the seed and
the hash of the fully resolved :class:`ExperimentSpec`.
"""

from __future__ import annotations

import contextlib
import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path as FsPath
from typing import Callable, Sequence

import numpy as np

from ..autoencoder import AutoencoderModel, TrainConfig, evaluate_nmse, init_model, latent_from_ratio, train
from ..channel import StatGenConfig
from ..csiproc import batch_from_delay_angular, batch_to_delay_angular, from_real, to_real
from ..evaluation import RESULTS_HEADER, EvalConfig, RankDeficient, noisy_channel_estimate, sum_rate, zf_precoders
from ..fidelity.geometry import FidelityReport, mesh_f1, threshold_select
from ..fidelity.materials import material_delta
from ..raytracer import Path, TraceConfig, fov_filter, regain, trace
from ..refinement import RefineConfig, max_correlations, refine_naive, refine_rehearsal, select_top_k
from ..scene import Scene, load_scene
from .dataset import Dataset, channels_from_paths, config_hash, dataset_from_paths, gen_statistical, trace_sampled
from .demo import BUILDING_MATERIAL, CityConfig, building_groups, degrade_geometry, demo_city, twin_of, with_fov, with_material

log = logging.getLogger(__name__)

RECIPES = ("direct-generalization", "compression", "refinement", "fidelity-sweep", "refinement-after-impairment", "sum-rate")

# Experiment training defaults: a higher step size than the library default so
# that a 30-epoch budget gets close to convergence on 5120 samples.
EXPERIMENT_TRAIN = TrainConfig(learning_rate=3e-3, epochs=30)


class ExperimentError(RuntimeError):
    pass


@contextlib.contextmanager
def stage(name: str):
    """Re-raise any failure inside the block with the stage name attached."""
    try:
        yield
    except ExperimentError:
        raise
    except Exception as exc:  # noqa: BLE001 - every failure is reported with its stage
        raise ExperimentError(f"stage {name!r} failed: {type(exc).__name__}: {exc}") from exc


# -- specification -------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    recipe: str
    seeds: tuple[int, ...] = (0, 1, 2)
    split_ratio: float = 0.8
    train_size: int = 5120
    test_size: int = 1280
    corpus_seed: int = 0
    target_scene: str | None = None  # scene JSON; the demo city when omitted
    twin_scene: str | None = None  # defaults to the target without foliage
    city: CityConfig = CityConfig()
    trace: TraceConfig = TraceConfig()
    train: TrainConfig = EXPERIMENT_TRAIN
    refine: RefineConfig = RefineConfig.from_pretrain(EXPERIMENT_TRAIN)
    eval: EvalConfig = EvalConfig()
    statgen: StatGenConfig = StatGenConfig(seed=1)
    compression_ratio: float = 1 / 64
    sources: tuple[str, ...] = ("twin", "statistical", "target")
    train_sizes: tuple[int, ...] = (640, 1280, 2560, 5120)
    ratios: tuple[float, ...] = (1 / 64, 1 / 32, 1 / 16, 1 / 8)
    densities: tuple[float, ...] = (0.05, 0.5, 2.0)
    materials: tuple[str, ...] = ("concrete", "drywall")
    reflections: tuple[int, ...] = (1, 2, 3, 4)
    fovs: tuple[float, ...] = (140.0, 150.0, 160.0, 170.0, 180.0)
    refine_samples: int = 80
    refine_iterations: int = 500
    eval_every: int = 50
    top_k: int = 100
    impairments: tuple[tuple[str, float | str], ...] = (("density", 0.05), ("reflections", 1), ("fov", 140.0))
    users: tuple[int, ...] = (2, 4)
    user_groups: int = 20

    def __post_init__(self):
        if self.recipe not in RECIPES:
            raise ValueError(f"unknown recipe {self.recipe!r}; known: {', '.join(RECIPES)}")
        if not 0 < self.split_ratio < 1:
            raise ValueError("split_ratio must lie in (0, 1)")
        if len(self.seeds) < 1:
            raise ValueError("at least one seed is required")
        if self.train_size < 1 or self.test_size < 1:
            raise ValueError("train_size and test_size must be positive")

    @property
    def latent(self) -> int:
        return latent_from_ratio(self.compression_ratio)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _tuples(obj):
    return tuple(_tuples(v) for v in obj) if isinstance(obj, list) else obj


_NESTED = {"city": CityConfig, "trace": TraceConfig, "train": TrainConfig, "eval": EvalConfig, "statgen": StatGenConfig}


def _build(cls, doc: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} field(s): {', '.join(sorted(unknown))}")
    return cls(**{k: _tuples(v) for k, v in doc.items()})


def spec_from_dict(doc: dict) -> ExperimentSpec:
    """Spec from a JSON-style mapping; omitted fields take their defaults."""
    doc = dict(doc)
    kw = {}
    for key, cls in _NESTED.items():
        if key in doc:
            kw[key] = _build(cls, doc.pop(key))
    if "refine" in doc:
        r = dict(doc.pop("refine"))
        if "train" in r:
            r["train"] = _build(TrainConfig, r["train"])
        elif "train" in kw:
            r["train"] = RefineConfig.from_pretrain(kw["train"]).train
        kw["refine"] = _build(RefineConfig, r)
    elif "train" in kw:
        kw["refine"] = RefineConfig.from_pretrain(kw["train"])
    spec = _build(ExperimentSpec, {**doc, **kw})
    return spec


def load_spec(path) -> ExperimentSpec:
    try:
        doc = json.loads(FsPath(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ExperimentError(f"stage 'spec' failed: cannot read {path}: {exc}") from exc
    with stage("spec"):
        spec = spec_from_dict(doc)
        base = FsPath(path).parent
        for name in ("target_scene", "twin_scene"):
            ref = getattr(spec, name)
            if ref is not None and not (base / ref).exists():
                raise FileNotFoundError(f"{name} {ref} not found")
            if ref is not None:
                spec = replace(spec, **{name: str(base / ref)})
    return spec


# -- corpus ------------------------------------------------------------------------------


@dataclass
class Corpus:
    target: Scene
    twin: Scene
    twin_paths: dict[int, list[Path]]  # keyed by grid UE index
    target_paths: dict[int, list[Path]]
    train_ues: np.ndarray  # ascending grid indices
    test_ues: np.ndarray
    traced: int  # grid UEs traced to find the covered ones


def build_corpus(spec: ExperimentSpec) -> Corpus:
    """Trace a seeded UE subset of the twin and split the covered UEs into train and test."""
    with stage("scene"):
        target = load_scene(spec.target_scene) if spec.target_scene else demo_city(spec.city)
        twin = load_scene(spec.twin_scene) if spec.twin_scene else twin_of(target)
        if len(twin.ue_grid) != len(target.ue_grid):
            raise ValueError("twin and target must share the UE grid")
    needed = math.ceil(max(spec.train_size / spec.split_ratio, spec.test_size / (1 - spec.split_ratio)))
    with stage("trace"):
        visited, twin_traced = trace_sampled(twin, spec.trace, needed, spec.corpus_seed)
        if twin.facets == target.facets:
            # same geometry: foliage and materials only change gains
            target_traced = [regain(target, p, spec.trace) if p else [] for p in twin_traced]
        else:
            target_traced = trace(target, target.ue_array[visited], spec.trace)
    keep = [i for i in range(len(visited)) if twin_traced[i] and target_traced[i]]
    if not keep:
        raise ExperimentError("stage 'trace' failed: no UE is covered in both scenes")
    ues = visited[keep]
    n_train = int(round(spec.split_ratio * len(ues)))
    perm = np.random.default_rng(spec.corpus_seed).permutation(len(ues))
    train_ues = np.sort(ues[perm[:n_train]][: spec.train_size])
    test_ues = np.sort(ues[perm[n_train:]][: spec.test_size])
    log.info("corpus: %d traced, %d covered, %d train, %d test", len(visited), len(ues), len(train_ues), len(test_ues))
    return Corpus(
        target,
        twin,
        {int(visited[i]): twin_traced[i] for i in keep},
        {int(visited[i]): target_traced[i] for i in keep},
        train_ues,
        test_ues,
        len(visited),
    )


# -- lab: memoised datasets and models -------------------------------------------------------------


Variant = tuple  # ("twin",), ("statistical",), ("target",), ("reflections", r), ("fov", deg), ("material", name), ("density", rho)


class Lab:
    def __init__(self, spec: ExperimentSpec, corpus: Corpus | None = None):
        self.spec = spec
        self._corpus = corpus
        self._data: dict = {}
        self._models: dict = {}
        self._scenes: dict = {}

    @property
    def corpus(self) -> Corpus:
        if self._corpus is None:
            self._corpus = build_corpus(self.spec)
        return self._corpus

    def with_spec(self, spec: ExperimentSpec) -> "Lab":
        """A lab for another recipe sharing this corpus and memo (the corpus fields must agree)."""
        other = Lab(spec, self._corpus)
        other._data, other._models, other._scenes = self._data, self._models, self._scenes
        return other

    # datasets
    def test_set(self) -> Dataset:
        key = ("test",)
        if key not in self._data:
            c = self.corpus
            self._data[key] = dataset_from_paths(c.target_paths, c.target, c.test_ues, "target", self.spec.corpus_seed, self.spec.hash, keep_raw=True)
        return self._data[key]

    def target_train(self) -> Dataset:
        return self.train_set(("target",))

    def variant_scene(self, variant: Variant) -> Scene:
        c = self.corpus
        kind = variant[0]
        if kind == "material":
            return with_material(c.twin, BUILDING_MATERIAL, variant[1])
        if kind == "fov":
            return with_fov(c.twin, float(variant[1]))
        if kind == "density":
            if variant not in self._scenes:
                with stage(f"degrade density={variant[1]}"):
                    self._scenes[variant] = degrade_geometry(c.twin, float(variant[1]), self.spec.corpus_seed)[0]
            return self._scenes[variant]
        return c.target if kind == "target" else c.twin

    def variant_paths(self, variant: Variant) -> dict[int, list[Path]]:
        c = self.corpus
        kind = variant[0]
        ues = c.train_ues
        if kind == "twin":
            return {u: c.twin_paths[u] for u in ues}
        if kind == "target":
            return {u: c.target_paths[u] for u in ues}
        if kind == "reflections":
            r = int(variant[1])
            return {u: [p for p in c.twin_paths[u] if p.order <= r] for u in ues}
        if kind == "fov":
            array = self.variant_scene(variant).bs
            return {u: fov_filter(c.twin_paths[u], array) for u in ues}
        if kind == "material":
            scene = self.variant_scene(variant)
            return {u: regain(scene, c.twin_paths[u], self.spec.trace) for u in ues}
        if kind == "density":
            scene = self.variant_scene(variant)
            with stage(f"trace density={variant[1]}"):
                traced = trace(scene, scene.ue_array[ues], self.spec.trace)
            return dict(zip(ues.tolist(), traced))
        raise ValueError(f"unknown twin variant {variant!r}")

    def train_set(self, variant: Variant) -> Dataset:
        if variant not in self._data:
            with stage(f"dataset {variant}"):
                if variant[0] == "statistical":
                    ds = gen_statistical(self.spec.statgen, self.corpus.twin, self.spec.train_size)
                else:
                    paths = self.variant_paths(variant)
                    ues = np.array([u for u in self.corpus.train_ues if paths[u]], dtype=np.int64)
                    origin = "target" if variant[0] == "target" else "twin"
                    ds = dataset_from_paths(paths, self.variant_scene(variant), ues, origin, self.spec.corpus_seed, self.spec.hash)
            self._data[variant] = ds
        return self._data[variant]

    def coverage(self, variant: Variant) -> float:
        """Share of the training UEs that keep at least one path in the variant."""
        if variant[0] == "statistical":
            return 1.0
        return len(self.train_set(variant)) / len(self.corpus.train_ues)

    # models
    def model(self, variant: Variant, seed: int, latent: int | None = None, size: int | None = None) -> AutoencoderModel:
        latent = latent or self.spec.latent
        key = (variant, seed, latent, size, self.spec.train)
        if key not in self._models:
            data = self.train_set(variant)
            if size is not None:
                order = np.random.default_rng(self.spec.corpus_seed).permutation(len(data))
                data = data.subset(np.sort(order[:size]))
            with stage(f"train {variant} seed={seed} M={latent} n={len(data)}"):
                res = train(init_model(latent, seed), data.real(), replace(self.spec.train, seed=seed))
            self._models[key] = res.model
        return self._models[key]

    def test_nmse(self, model: AutoencoderModel) -> float:
        return float(np.mean(evaluate_nmse(model, self.test_set().real())))


def db(x: float) -> float:
    return 10.0 * math.log10(x)


# -- recipes --------------------------------------------------------------------------------------


@dataclass
class Table:
    name: str
    header: list[str]
    rows: list[list] = field(default_factory=list)

    def column(self, name: str) -> list:
        i = self.header.index(name)
        return [r[i] for r in self.rows]

    def where(self, **cond) -> list[list]:
        idx = {self.header.index(k): v for k, v in cond.items()}
        return [r for r in self.rows if all(r[i] == v for i, v in idx.items())]


@dataclass
class RecipeResult:
    tables: list[Table]
    summary: list[tuple]  # (experiment_id, metric, value, seed)
    figure: Callable | None = None  # draws onto a matplotlib Figure


def run_direct_generalization(lab: Lab) -> RecipeResult:
    spec, h = lab.spec, lab.spec.hash
    t = Table("direct_generalization", ["source", "train_size", "seed", "nmse", "nmse_db", "config_hash"])
    for source in spec.sources:
        for size in spec.train_sizes:
            for seed in spec.seeds:
                avail = len(lab.train_set((source,)))
                n = min(size, avail)
                m = lab.model((source,), seed, size=None if n == avail else n)
                e = lab.test_nmse(m)
                t.rows.append([source, n, seed, e, db(e), h])
    summary = [(f"direct-generalization/{r[0]}/{r[1]}", "nmse_db", r[4], r[2]) for r in t.rows]

    def draw(fig):
        ax = fig.add_subplot(111)
        for source in spec.sources:
            sizes = sorted({r[1] for r in t.where(source=source)})
            med = [np.median([r[4] for r in t.where(source=source, train_size=n)]) for n in sizes]
            ax.plot(sizes, med, marker="o", label=source)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("training samples")
        ax.set_ylabel("target test NMSE (dB)")
        ax.legend()

    return RecipeResult([t], summary, draw)


def run_compression(lab: Lab) -> RecipeResult:
    spec, h = lab.spec, lab.spec.hash
    t = Table("compression", ["ratio", "latent", "seed", "nmse", "nmse_db", "config_hash"])
    for ratio in spec.ratios:
        m_size = latent_from_ratio(ratio)
        for seed in spec.seeds:
            e = lab.test_nmse(lab.model(("twin",), seed, latent=m_size))
            t.rows.append([ratio, m_size, seed, e, db(e), h])
    summary = [(f"compression/{r[1]}", "nmse_db", r[4], r[2]) for r in t.rows]

    def draw(fig):
        ax = fig.add_subplot(111)
        lat = sorted({r[1] for r in t.rows})
        ax.plot(lat, [np.median([r[4] for r in t.where(latent=m)]) for m in lat], marker="o")
        ax.set_xscale("log", base=2)
        ax.set_xlabel("latent size M")
        ax.set_ylabel("target test NMSE (dB)")

    return RecipeResult([t], summary, draw)


def fidelity_variants(spec: ExperimentSpec) -> list[tuple[str, Variant]]:
    out = [("density", ("density", float(d))) for d in spec.densities]
    out += [("material", ("twin",) if m == spec.city.building_material else ("material", m)) for m in spec.materials]
    out += [("reflections", ("twin",) if r >= spec.trace.max_reflections else ("reflections", int(r))) for r in spec.reflections]
    out += [("fov", ("twin",) if f >= 180.0 else ("fov", float(f))) for f in spec.fovs]
    return out


def variant_value(axis: str, variant: Variant, spec: ExperimentSpec):
    if len(variant) > 1:
        return variant[1]
    return {"material": spec.city.building_material, "reflections": spec.trace.max_reflections, "fov": 180.0}[axis]


def fidelity_report(lab: Lab, axis: str, variant: Variant) -> FidelityReport:
    """F1 of the twin buildings against the real ones plus the material and RT settings of a variant."""
    spec = lab.spec
    c = lab.corpus
    real = [c.target.facets[i] for g in building_groups(c.target) for i in g]
    scene = lab.variant_scene(variant)
    twin = [scene.facets[i] for g in building_groups(scene) for i in g] if variant[0] == "density" else real
    tau = threshold_select(real, 2.0, spec.corpus_seed + 11, spec.corpus_seed + 12)
    pr = mesh_f1(real, twin, 2.0, tau, spec.corpus_seed + 21)
    d = material_delta(c.target.materials[BUILDING_MATERIAL], scene.materials[BUILDING_MATERIAL])
    refl = int(variant[1]) if variant[0] == "reflections" else spec.trace.max_reflections
    fov = float(variant[1]) if variant[0] == "fov" else c.twin.bs.fov_deg
    return FidelityReport(pr.f1, pr.precision, pr.recall, tau, d.delta_eps_r, d.delta_sigma, refl, fov)


def run_fidelity_sweep(lab: Lab) -> RecipeResult:
    spec, h = lab.spec, lab.spec.hash
    t = Table("fidelity_sweep", ["axis", "value", "seed", "coverage", "train_samples", "nmse", "nmse_db", "config_hash"])
    f = Table("fidelity_report", ["axis", "value", "f1", "precision", "recall", "tau_m", "delta_eps_r", "delta_sigma", "max_reflections", "fov_deg", "config_hash"])
    for axis, variant in fidelity_variants(spec):
        value = variant_value(axis, variant, spec)
        with stage(f"fidelity report {axis}={value}"):
            rep = fidelity_report(lab, axis, variant)
        f.rows.append([axis, value, rep.f1, rep.precision, rep.recall, rep.tau, rep.delta_eps_r, rep.delta_sigma, rep.max_reflections, rep.fov_deg, h])
        cov = lab.coverage(variant)
        n = len(lab.train_set(variant))
        for seed in spec.seeds:
            e = lab.test_nmse(lab.model(variant, seed))
            t.rows.append([axis, value, seed, cov, n, e, db(e), h])
    summary = [(f"fidelity-sweep/{r[0]}/{r[1]}", "nmse_db", r[6], r[2]) for r in t.rows]

    def draw(fig):
        axes = fig.subplots(1, 4, sharey=True)
        for ax, axis in zip(axes, ("density", "material", "reflections", "fov")):
            vals = list(dict.fromkeys(r[1] for r in t.where(axis=axis)))
            med = [np.median([r[6] for r in t.where(axis=axis, value=v)]) for v in vals]
            ax.plot(range(len(vals)), med, marker="o")
            ax.set_xticks(range(len(vals)), [str(v) for v in vals])
            ax.set_xlabel(axis)
        axes[0].set_ylabel("target test NMSE (dB)")

    return RecipeResult([t, f], summary, draw)


def refinement_pool(lab: Lab) -> Dataset:
    """Target CSI reported by training-area UEs; the BS selects refinement samples from it."""
    return lab.target_train()


def _refine_curves(lab: Lab, pre: AutoencoderModel, twin_set: Dataset, selected: np.ndarray, seed: int):
    """Test NMSE along naive and rehearsal refinement; returns (curves, final models)."""
    spec = lab.spec
    cfg = replace(spec.refine, max_iterations=spec.refine_iterations, train=replace(spec.refine.train, seed=seed))
    test = lab.test_set().real()
    curves, finals = {}, {}
    for method in ("naive", "rehearsal"):
        points = []

        def record(it, model, points=points):
            points.append((it, float(np.mean(evaluate_nmse(model, test)))))

        with stage(f"refine {method} seed={seed}"):
            if method == "naive":
                res = refine_naive(pre, selected, cfg, callback=record, callback_every=spec.eval_every)
            else:
                res = refine_rehearsal(pre, twin_set.real(), selected, cfg, callback=record, callback_every=spec.eval_every)
        if points[-1][0] != res.iterations:
            record(res.iterations, res.model)
        curves[method], finals[method] = points, res.model
    return curves, finals


def refined_models(lab: Lab, variant: Variant, seed: int):
    """(pre-trained, curves, refined models, selection) for one twin variant and seed, memoised."""
    key = ("refined", variant, seed, lab.spec.refine, lab.spec.refine_samples, lab.spec.refine_iterations, lab.spec.train)
    if key not in lab._models:
        pre = lab.model(variant, seed)
        pool = refinement_pool(lab)
        sel = select_top_k(pre, pool.real(), lab.spec.refine_samples)
        curves, finals = _refine_curves(lab, pre, lab.train_set(variant), sel.samples, seed)
        lab._models[key] = (pre, curves, finals, sel)
    return lab._models[key]


def correlation_diagnostic(lab: Lab, seed: int) -> tuple[float, float]:
    """Mean max-correlation to the twin set of the top-k NMSE pool samples and of k random pool samples."""
    spec = lab.spec
    pre = lab.model(("twin",), seed)
    pool = refinement_pool(lab)
    k = min(spec.top_k, len(pool))
    top = select_top_k(pre, pool.real(), k).indices
    rand = np.random.default_rng(seed).choice(len(pool), size=k, replace=False)
    twin = lab.train_set(("twin",)).g
    return float(np.mean(max_correlations(pool.g[top], twin))), float(np.mean(max_correlations(pool.g[rand], twin)))


def run_refinement(lab: Lab) -> RecipeResult:
    spec, h = lab.spec, lab.spec.hash
    t = Table("refinement", ["method", "iteration", "seed", "nmse", "nmse_db", "config_hash"])
    c = Table("selection_correlation", ["selection", "seed", "mean_max_correlation", "config_hash"])
    for seed in spec.seeds:
        pre, curves, _, _ = refined_models(lab, ("twin",), seed)
        e_pre = lab.test_nmse(pre)
        e_scratch = lab.test_nmse(lab.model(("target",), seed))
        t.rows.append(["unrefined", 0, seed, e_pre, db(e_pre), h])
        t.rows.append(["target-scratch", 0, seed, e_scratch, db(e_scratch), h])
        for method, pts in curves.items():
            t.rows += [[method, it, seed, e, db(e), h] for it, e in pts]
        top, rnd = correlation_diagnostic(lab, seed)
        c.rows += [[f"top-{spec.top_k}-nmse", seed, top, h], ["random", seed, rnd, h]]
    summary = [(f"refinement/{r[0]}/{r[1]}", "nmse_db", r[4], r[2]) for r in t.rows]
    summary += [(f"refinement/correlation/{r[0]}", "mean_max_correlation", r[2], r[1]) for r in c.rows]

    def draw(fig):
        ax = fig.add_subplot(111)
        for method in ("naive", "rehearsal"):
            its = sorted({r[1] for r in t.where(method=method)})
            ax.plot(its, [np.median([r[4] for r in t.where(method=method, iteration=i)]) for i in its], label=method)
        for method, style in (("unrefined", ":"), ("target-scratch", "--")):
            ax.axhline(np.median([r[4] for r in t.where(method=method)]), linestyle=style, color="k", label=method)
        ax.set_xlabel("refinement iterations")
        ax.set_ylabel("target test NMSE (dB)")
        ax.legend()

    return RecipeResult([t, c], summary, draw)


def _impairment_variant(axis: str, value) -> Variant:
    if axis not in ("density", "reflections", "fov", "material"):
        raise ValueError(f"unknown impairment axis {axis!r}")
    return (axis, value if axis == "material" else (int(value) if axis == "reflections" else float(value)))


def run_refinement_after_impairment(lab: Lab) -> RecipeResult:
    spec, h = lab.spec, lab.spec.hash
    t = Table("refinement_after_impairment", ["axis", "value", "seed", "stage", "nmse", "nmse_db", "config_hash"])
    for axis, value in spec.impairments:
        variant = _impairment_variant(axis, value)
        for seed in spec.seeds:
            pre, _, finals, _ = refined_models(lab, variant, seed)
            for name, model in (("before", pre), ("after-rehearsal", finals["rehearsal"])):
                e = lab.test_nmse(model)
                t.rows.append([axis, variant[1], seed, name, e, db(e), h])
    summary = [(f"refinement-after-impairment/{r[0]}={r[1]}/{r[3]}", "nmse_db", r[5], r[2]) for r in t.rows]

    def draw(fig):
        ax = fig.add_subplot(111)
        cells = list(dict.fromkeys((r[0], r[1]) for r in t.rows))
        x = np.arange(len(cells))
        for off, name in ((-0.2, "before"), (0.2, "after-rehearsal")):
            ax.bar(x + off, [np.median([r[5] for r in t.where(axis=a, value=v, stage=name)]) for a, v in cells], 0.4, label=name)
        ax.set_xticks(x, [f"{a}={v}" for a, v in cells])
        ax.set_ylabel("target test NMSE (dB)")
        ax.legend()

    return RecipeResult([t], summary, draw)


def reconstruct_channels(model: AutoencoderModel | None, h: np.ndarray) -> np.ndarray:
    """Feedback path for (N, N_t, K) channels: truncate and normalise, compress and recover, rescale."""
    g, scales = batch_to_delay_angular(h)
    if model is not None:
        g = from_real(model.reconstruct(to_real(g).astype(model.dtype)).astype(np.float64))
    return batch_from_delay_angular(g, scales, h.shape[2])


def user_groups(n_ues: int, users: int, count: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [np.sort(rng.choice(n_ues, size=users, replace=False)) for _ in range(count)]


def group_rate(h_true: np.ndarray, h_fb: np.ndarray, cfg: EvalConfig) -> float:
    """Sum rate of one user group: ZF designed on the fed-back channels, evaluated on the true ones."""
    ht = np.transpose(h_true, (2, 1, 0))  # (K, N_t, U)
    hf = np.transpose(h_fb, (2, 1, 0))
    f = zf_precoders(hf, cfg.power_per_subcarrier)
    return sum_rate(ht, f, cfg.noise_w)


def run_sum_rate(lab: Lab) -> RecipeResult:
    spec, h = lab.spec, lab.spec.hash
    t = Table("sum_rate", ["users", "csi", "seed", "sum_rate_bps_hz", "groups", "config_hash"])
    test = lab.test_set()
    h_true = test.raw.astype(complex)
    for seed in spec.seeds:
        pre, _, finals, _ = refined_models(lab, ("twin",), seed)
        models = {"perfect": None, "estimated": None, "twin": pre, "twin+rehearsal": finals["rehearsal"], "target-scratch": lab.model(("target",), seed)}
        rng = np.random.default_rng(seed)
        h_est = noisy_channel_estimate(h_true, replace(spec.eval, seed=seed), rng)
        fed = {name: (h_true if name == "perfect" else reconstruct_channels(m, h_est)) for name, m in models.items()}
        for u in spec.users:
            rates = {name: [] for name in models}
            for grp in user_groups(len(test), u, spec.user_groups, seed * 1000 + u):
                try:
                    got = {name: group_rate(h_true[grp], fed[name][grp], spec.eval) for name in models}
                except RankDeficient as exc:
                    log.info("skipping user group %s: %s", grp.tolist(), exc)
                    continue
                for name, r in got.items():
                    rates[name].append(r)
            for name in models:
                t.rows.append([u, name, seed, float(np.mean(rates[name])), len(rates[name]), h])
    summary = [(f"sum-rate/U={r[0]}/{r[1]}", "sum_rate_bps_hz", r[3], r[2]) for r in t.rows]

    def draw(fig):
        ax = fig.add_subplot(111)
        names = list(dict.fromkeys(r[1] for r in t.rows))
        x = np.arange(len(spec.users))
        w = 0.8 / len(names)
        for i, name in enumerate(names):
            ax.bar(x + i * w, [np.median([r[3] for r in t.where(users=u, csi=name)]) for u in spec.users], w, label=name)
        ax.set_xticks(x + 0.4 - w / 2, [f"U={u}" for u in spec.users])
        ax.set_ylabel("sum spectral efficiency (bit/s/Hz)")
        ax.legend(fontsize="small")

    return RecipeResult([t], summary, draw)


RUNNERS: dict[str, Callable[[Lab], RecipeResult]] = {
    "direct-generalization": run_direct_generalization,
    "compression": run_compression,
    "refinement": run_refinement,
    "fidelity-sweep": run_fidelity_sweep,
    "refinement-after-impairment": run_refinement_after_impairment,
    "sum-rate": run_sum_rate,
}


# -- output ----------------------------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def _write_atomic(path: FsPath, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def table_bytes(table: Table) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.header)
    for r in table.rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue().encode()


def figure_bytes(draw: Callable, title: str) -> bytes:
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib.figure import Figure

    fig = Figure(figsize=(8, 4.5), dpi=100)
    draw(fig)
    fig.suptitle(title)
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata={"Software": None})
    return buf.getvalue()


def write_result(spec: ExperimentSpec, result: RecipeResult, out_dir) -> list[FsPath]:
    out = FsPath(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for table in result.tables:
        p = out / f"{table.name}.csv"
        _write_atomic(p, table_bytes(table))
        written.append(p)
    summary = Table("summary", list(RESULTS_HEADER), [[eid, metric, float(v), seed, spec.hash] for eid, metric, v, seed in result.summary])
    p = out / "summary.csv"
    _write_atomic(p, table_bytes(summary))
    written.append(p)
    p = out / "spec.resolved.json"
    _write_atomic(p, (json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n").encode())
    written.append(p)
    if result.figure is not None:
        p = out / f"{spec.recipe.replace('-', '_')}.png"
        _write_atomic(p, figure_bytes(result.figure, spec.recipe))
        written.append(p)
    return written


def run_experiment(spec: ExperimentSpec, out_dir, lab: Lab | None = None) -> list[FsPath]:
    """Run one recipe end to end and write its tables, summary and chart into ``out_dir``."""
    lab = Lab(spec) if lab is None else lab.with_spec(spec)
    result = RUNNERS[spec.recipe](lab)
    with stage("report"):
        return write_result(spec, result, out_dir)


def medians(table: Table, key_cols: Sequence[str], value_col: str) -> dict:
    """Median of ``value_col`` over seeds for every combination of ``key_cols``."""
    out: dict = {}
    ki = [table.header.index(k) for k in key_cols]
    vi = table.header.index(value_col)
    for r in table.rows:
        out.setdefault(tuple(r[i] for i in ki), []).append(r[vi])
    return {k: float(np.median(v)) for k, v in out.items()}
