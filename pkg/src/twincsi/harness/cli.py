"""Command line entry point: ``twincsi <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path as FsPath

import numpy as np
from threadpoolctl import threadpool_limits

from ..autoencoder import TrainConfig, init_model, latent_from_ratio, load_model, save_model, train, write_history_csv, evaluate_nmse
from ..channel import StatGenConfig
from ..evaluation import EvalConfig, RankDeficient, coverage, noisy_channel_estimate, write_results_csv
from ..fidelity.geometry import FidelityReport, mesh_f1, threshold_select, write_fidelity_csv
from ..fidelity.materials import material_delta
from ..raytracer import TraceConfig, trace, write_paths_csv
from ..refinement import RefineConfig, default_threshold, refine_naive, refine_rehearsal, select_candidates, select_top_k
from ..scene import SceneError, load_scene, scene_to_dict, validate_scene
from .dataset import config_hash, gen_dataset, gen_statistical, load_dataset, save_dataset, scene_digest, split_dataset
from .demo import BUILDING_MATERIAL, building_groups, degrade_geometry, demo_city, twin_of, with_fov, with_material
from .experiments import ExperimentError, group_rate, load_spec, reconstruct_channels, run_experiment, user_groups

log = logging.getLogger("twincsi")


class CliError(Exception):
    pass


def _need_out(args) -> FsPath:
    if args.out is None:
        raise CliError(f"{args.command}: --out is required")
    out = FsPath(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _args_hash(args, *skip) -> str:
    """Hash of the resolved arguments (output location and thread count excluded)."""
    keep = {k: v for k, v in vars(args).items() if k not in {"out", "threads", "func", "verbose", *skip}}
    return config_hash(keep)


def _dump_json(doc, path=None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        FsPath(path).write_text(text)


def _write_scene(scene, path) -> None:
    FsPath(path).write_text(json.dumps(scene_to_dict(scene), indent=1, sort_keys=True) + "\n")


def _trace_cfg(args) -> TraceConfig:
    return TraceConfig(max_reflections=args.max_reflections)


def _ue_subset(scene, limit, seed) -> np.ndarray:
    """All grid UEs, or ``limit`` of them drawn with ``seed`` (sorted)."""
    n = len(scene.ue_grid)
    if limit is None or limit >= n:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).permutation(n)[:limit])


# -- scene / twin / trace ----------------------------------------------------------------------------


def cmd_scene_validate(args):
    scene = load_scene(args.scene)
    validate_scene(scene)
    info = {
        "facets": len(scene.facets),
        "materials": [m.name for m in scene.materials],
        "foliage_volumes": len(scene.foliage),
        "ues": len(scene.ue_grid),
        "antennas": scene.bs.num_antennas,
        "fov_deg": scene.bs.fov_deg,
        "digest": scene_digest(scene),
    }
    _dump_json(info, args.out)


def cmd_scene_demo(args):
    scene = demo_city()
    _write_scene(twin_of(scene) if args.twin else scene, _need_out(args))


def cmd_twin_degrade(args):
    scene = load_scene(args.scene)
    if args.no_foliage:
        scene = twin_of(scene)
    reached = []
    if args.density is not None:
        scene, reached = degrade_geometry(scene, args.density, args.seed)
        for b, ok in enumerate(reached):
            if not ok:
                log.warning("building %d: decimation stopped above its face budget", b)
    if args.material is not None:
        scene = with_material(scene, BUILDING_MATERIAL, args.material)
    if args.fov is not None:
        scene = with_fov(scene, args.fov)
    _write_scene(scene, _need_out(args))


def cmd_trace(args):
    scene = load_scene(args.scene)
    out = _need_out(args)
    idx = _ue_subset(scene, args.limit, args.seed)
    write_paths_csv(out, trace(scene, scene.ue_array[idx], _trace_cfg(args)), idx.tolist())


# -- datasets ----------------------------------------------------------------------------------------


def cmd_dataset_gen(args):
    out = _need_out(args)
    if args.statistical:
        scene = demo_city() if args.scene is None else load_scene(args.scene)
        if args.limit is None:
            raise CliError("dataset gen --statistical needs --limit")
        ds = gen_statistical(StatGenConfig(seed=args.seed), scene, args.limit, keep_raw=args.raw)
    else:
        if args.scene is None:
            raise CliError("dataset gen needs a scene file")
        scene = load_scene(args.scene)
        ds = gen_dataset(scene, _trace_cfg(args), args.limit, args.seed, args.origin, keep_raw=args.raw)
    save_dataset(ds, out)


def cmd_dataset_split(args):
    ds = load_dataset(args.dataset)
    train_part, test_part = split_dataset(ds, args.ratio, args.seed)
    out = FsPath(_need_out(args))
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(train_part, out / "train.csid")
    save_dataset(test_part, out / "test.csid")


def cmd_dataset_info(args):
    ds = load_dataset(args.dataset)
    norms = np.linalg.norm(ds.g.reshape(len(ds), -1), axis=1)
    info = {
        "origin": ds.origin,
        "samples": len(ds),
        "rows": ds.shape[0],
        "antennas": ds.shape[1],
        "subcarriers": ds.num_subcarriers,
        "raw": ds.raw is not None,
        "seed": ds.seed,
        "config_hash": ds.config_hash,
        "max_norm_error": float(np.max(np.abs(norms - 1.0))) if len(ds) else 0.0,
    }
    _dump_json(info, args.out)


# -- fidelity ----------------------------------------------------------------------------------------


def _building_facets(scene):
    return [scene.facets[i] for g in building_groups(scene) for i in g]


def _fidelity(args) -> FidelityReport:
    real, twin = load_scene(args.real), load_scene(args.twin)
    real_f, twin_f = _building_facets(real), _building_facets(twin)
    tau = args.tau if args.tau is not None else threshold_select(real_f, args.density, args.seed + 11, args.seed + 12)
    pr = mesh_f1(real_f, twin_f, args.density, tau, args.seed)
    d = material_delta(real.materials[BUILDING_MATERIAL], twin.materials[BUILDING_MATERIAL])
    return FidelityReport(pr.f1, pr.precision, pr.recall, tau, d.delta_eps_r, d.delta_sigma, args.max_reflections, twin.bs.fov_deg)


def cmd_fidelity_f1(args):
    rep = _fidelity(args)
    write_fidelity_csv(_need_out(args), [("geometry", "density", args.density, rep)])


def cmd_fidelity_report(args):
    rep = _fidelity(args)
    rows = [
        ("geometry", "density", args.density, rep),
        ("material", "building", 0.0, rep),
        ("ray_tracing", "max_reflections", float(rep.max_reflections), rep),
        ("hardware", "fov_deg", rep.fov_deg, rep),
    ]
    write_fidelity_csv(_need_out(args), rows)


# -- model commands ----------------------------------------------------------------------------------


def _train_cfg(args) -> TrainConfig:
    return TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed, max_iterations=args.max_iterations)


def cmd_train(args):
    out = _need_out(args)
    ds = load_dataset(args.dataset)
    latent = args.latent if args.latent is not None else latent_from_ratio(args.ratio)
    res = train(init_model(latent, args.seed), ds.real(), _train_cfg(args))
    save_model(res.model, out)
    write_history_csv(out.with_name(out.name + ".history.csv"), res.history)


def cmd_select(args):
    out = _need_out(args)
    model = load_model(args.model)
    ds = load_dataset(args.dataset)
    x = ds.real()
    if args.top_k is not None:
        sel = select_top_k(model, x, args.top_k)
    else:
        eta = args.eta
        if eta is None:
            if args.validation is None:
                raise CliError("select needs --top-k, --eta or --validation")
            eta = default_threshold(model, load_dataset(args.validation).real())
        sel = select_candidates(model, x, eta)
    if len(sel.indices) == 0:
        raise CliError("no sample exceeds the selection threshold")
    save_dataset(ds.subset(np.sort(sel.indices), origin="selected"), out)


def cmd_refine(args):
    out = _need_out(args)
    model = load_model(args.model)
    selected = load_dataset(args.selected).real()
    cfg = RefineConfig(train=_train_cfg(args), refine_fraction=args.refine_fraction, max_iterations=args.max_iterations)
    if args.method == "naive":
        res = refine_naive(model, selected, cfg)
    else:
        if args.twin is None:
            raise CliError("rehearsal refinement needs --twin")
        res = refine_rehearsal(model, load_dataset(args.twin).real(), selected, cfg)
    save_model(res.model, out)
    write_history_csv(out.with_name(out.name + ".history.csv"), res.history)


# -- evaluation --------------------------------------------------------------------------------------


def cmd_eval_nmse(args):
    model = load_model(args.model)
    ds = load_dataset(args.dataset)
    e = evaluate_nmse(model, ds.real())
    h = _args_hash(args)
    rows = [
        ("nmse", "nmse", float(np.mean(e)), args.seed, h),
        ("nmse", "nmse_db", float(10 * np.log10(np.mean(e))), args.seed, h),
        ("nmse", "samples", float(len(e)), args.seed, h),
    ]
    write_results_csv(_need_out(args), rows)


def cmd_eval_sumrate(args):
    ds = load_dataset(args.dataset)
    if ds.raw is None:
        raise CliError("sum-rate evaluation needs a dataset generated with --raw")
    model = load_model(args.model) if args.model is not None else None
    cfg = EvalConfig(num_users=args.users, seed=args.seed)
    h_true = ds.raw.astype(complex)
    if args.perfect:
        h_fb = h_true
    else:
        h_fb = reconstruct_channels(model, noisy_channel_estimate(h_true, cfg, np.random.default_rng(args.seed)))
    rates = []
    for grp in user_groups(len(ds), args.users, args.groups, args.seed):
        try:
            rates.append(group_rate(h_true[grp], h_fb[grp], cfg))
        except RankDeficient as exc:
            log.info("skipping user group %s: %s", grp.tolist(), exc)
    if not rates:
        raise CliError("every user group was rank deficient")
    h = _args_hash(args)
    rows = [
        (f"sum-rate/U={args.users}", "sum_rate_bps_hz", float(np.mean(rates)), args.seed, h),
        (f"sum-rate/U={args.users}", "groups", float(len(rates)), args.seed, h),
    ]
    write_results_csv(_need_out(args), rows)


def cmd_eval_coverage(args):
    scene = load_scene(args.scene)
    idx = _ue_subset(scene, args.limit, args.seed)
    cov = coverage(scene, per_ue=trace(scene, scene.ue_array[idx], _trace_cfg(args)))
    write_results_csv(_need_out(args), [("coverage", "coverage", cov, args.seed, _args_hash(args))])


def cmd_experiment_run(args):
    spec = load_spec(args.spec)
    written = run_experiment(spec, _need_dir(args))
    for p in written:
        print(p)


def _need_dir(args) -> FsPath:
    if args.out is None:
        raise CliError(f"{args.command}: --out is required")
    return FsPath(args.out)


# -- parser ------------------------------------------------------------------------------------------


def _globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0), help="random seed (default 0)")
    p.add_argument("--out", default=d(None), help="output file or directory")
    p.add_argument("--threads", type=int, default=d(1), help="BLAS threads (default 1)")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def _train_args(p, lr: float, epochs: int) -> None:
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--max-iterations", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twincsi", description="Digital-twin CSI synthesis, compression and refinement.")
    _globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="group", required=True)

    def leaf(parent, name, func, help_text):
        p = parent.add_parser(name, help=help_text)
        _globals(p, suppress=True)
        p.set_defaults(func=func)
        return p

    def group(name, help_text):
        g = sub.add_parser(name, help=help_text)
        return g.add_subparsers(dest="action", required=True)

    sc = group("scene", "scene files")
    p = leaf(sc, "validate", cmd_scene_validate, "check a scene file and print a summary")
    p.add_argument("scene")
    p = leaf(sc, "demo", cmd_scene_demo, "write the built-in demo city")
    p.add_argument("--twin", action="store_true", help="drop foliage (the full-fidelity twin)")

    tw = group("twin", "twin variants")
    p = leaf(tw, "degrade", cmd_twin_degrade, "derive an impaired twin scene")
    p.add_argument("scene")
    p.add_argument("--density", type=float, default=None, help="rebuild buildings from a point cloud at this density (pts/m^2)")
    p.add_argument("--material", default=None, help="swap the building material")
    p.add_argument("--fov", type=float, default=None, help="BS field of view in degrees")
    p.add_argument("--no-foliage", action="store_true")

    p = leaf(sub, "trace", cmd_trace, "trace paths to the UE grid and write them as CSV")
    p.add_argument("scene")
    p.add_argument("--max-reflections", type=int, default=4)
    p.add_argument("--limit", type=int, default=None, help="trace only this many UEs, drawn with --seed")

    ds = group("dataset", "CSI datasets")
    p = leaf(ds, "gen", cmd_dataset_gen, "generate a CSI dataset")
    p.add_argument("scene", nargs="?")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--max-reflections", type=int, default=4)
    p.add_argument("--origin", choices=("target", "twin"), default="target")
    p.add_argument("--statistical", action="store_true", help="statistical channel model instead of ray tracing")
    p.add_argument("--raw", action="store_true", help="keep the frequency-domain channels")
    p = leaf(ds, "split", cmd_dataset_split, "seeded train/test split into --out/{train,test}.csid")
    p.add_argument("dataset")
    p.add_argument("--ratio", type=float, default=0.8)
    p = leaf(ds, "info", cmd_dataset_info, "print dataset header information")
    p.add_argument("dataset")

    fi = group("fidelity", "twin fidelity metrics")
    for name, func, text in (("f1", cmd_fidelity_f1, "geometry F1 of the twin buildings"), ("report", cmd_fidelity_report, "F1 plus material, tracing and FoV settings")):
        p = leaf(fi, name, func, text)
        p.add_argument("real")
        p.add_argument("twin")
        p.add_argument("--density", type=float, default=2.0)
        p.add_argument("--tau", type=float, default=None, help="distance threshold in metres (default: chosen from the real mesh)")
        p.add_argument("--max-reflections", type=int, default=4)

    p = leaf(sub, "train", cmd_train, "train an autoencoder")
    p.add_argument("dataset")
    p.add_argument("--latent", type=int, default=None)
    p.add_argument("--ratio", type=float, default=1 / 64)
    _train_args(p, 1e-3, 30)

    p = leaf(sub, "select", cmd_select, "select refinement samples by reconstruction error")
    p.add_argument("model")
    p.add_argument("dataset")
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--validation", default=None, help="dataset whose 90th-percentile NMSE sets the threshold")

    p = leaf(sub, "refine", cmd_refine, "refine a model on selected samples")
    p.add_argument("model")
    p.add_argument("selected")
    p.add_argument("--twin", default=None, help="twin dataset rehearsed alongside the selected samples")
    p.add_argument("--method", choices=("rehearsal", "naive"), default="rehearsal")
    p.add_argument("--refine-fraction", type=float, default=None)
    _train_args(p, 1e-4, 10)

    ev = group("eval", "evaluation")
    p = leaf(ev, "nmse", cmd_eval_nmse, "mean reconstruction NMSE")
    p.add_argument("model")
    p.add_argument("dataset")
    p = leaf(ev, "sumrate", cmd_eval_sumrate, "zero-forcing sum rate with fed-back CSI")
    p.add_argument("dataset")
    p.add_argument("--model", default=None, help="compress the noisy estimate with this model")
    p.add_argument("--perfect", action="store_true", help="precode on the true channels")
    p.add_argument("--users", type=int, default=2)
    p.add_argument("--groups", type=int, default=20)
    p = leaf(ev, "coverage", cmd_eval_coverage, "share of UEs with at least one path")
    p.add_argument("scene")
    p.add_argument("--max-reflections", type=int, default=4)
    p.add_argument("--limit", type=int, default=None, help="trace only this many UEs, drawn with --seed")

    ex = group("experiment", "experiment recipes")
    p = leaf(ex, "run", cmd_experiment_run, "run a recipe from a JSON spec")
    p.add_argument("spec")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.command = " ".join(x for x in (args.group, getattr(args, "action", None)) if x)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except (CliError, SceneError, ExperimentError, ValueError, OSError) as exc:
        print(f"twincsi {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
