"""Command-line orchestration: reproducible runs that emit CSV/JSON artifacts.

Every subcommand writes a RunManifest (manifest.json) plus its artifacts into
an output directory.  All randomness flows from one root seed, split per
subsystem through the counter-based stream, so identical configurations give
byte-identical CSV outputs.  Configuration may come from a flat key=value
file (--config), overridden by flags.  Exit codes: 0 success, 1 runtime
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__, backend
from .data import Dataset, project_dataset, synthetic_digits, toy_three_gaussians
from .decompose import (auroc, input_grad_matrix, ood_scores, signal_dimension,
                        training_grad_basis)
from .errors import EpkitError
from .geometry import (ModelClassifier, boundary_bisect, boundary_normal,
                       crossing_angles, persistence_bracket, persistence_curve,
                       stability_grid, wedge_persistence_oracle)
from .model import ModelSpec
from .numerics import RngState, pca_fit
from .pathkernel import EpkConfig, epk_convergence_study
from .train import TrainConfig, TrainingPath, mag_alignment_metric, train, train_mag
from . import attack as attack_mod

_FLOAT = "{:.17g}".format


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = [_FLOAT(v) if isinstance(v, float) else str(v) for v in row]
            fh.write(",".join(cells) + "\n")


def _fingerprint(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.inputs).tobytes())
    h.update(np.ascontiguousarray(ds.labels).tobytes())
    return h.hexdigest()


def _write_manifest(out_dir, command, config, seed, fingerprint, outputs, t0):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "dataset_fingerprint": fingerprint,
        "code_version": __version__,
        "backend": backend.backend_name(),
        "outputs": sorted(outputs),
        "wall_time_s": round(time.time() - t0, 3),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)


def _load_config_file(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise EpkitError(f"config line without '=': {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _merged(args, key, cast, default):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if args.config_values and key in args.config_values:
        return cast(args.config_values[key])
    return default


def _make_dataset(name, rng, per_class, dim, count):
    if name == "toy":
        return toy_three_gaussians(rng, dim=dim, per_class=per_class)
    if name == "digits":
        return synthetic_digits(rng, n=count)
    if name.startswith("csv:"):
        return Dataset.from_csv(name[4:])
    raise EpkitError(f"unknown dataset {name!r} (use toy, digits, or csv:PATH)")


def _parse_hidden(text) -> tuple:
    if not text:
        return ()
    return tuple(int(p) for p in str(text).split(",") if p)


def _load_run(run_dir):
    path = TrainingPath.load(os.path.join(run_dir, "path"))
    return path


def _holdout(ds_name, rng, per_class, dim, count):
    # fresh draws from the same generator serve as held-out test data
    return _make_dataset(ds_name, rng, per_class, dim, count)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_train(args):
    t0 = time.time()
    os.makedirs(args.out, exist_ok=True)
    root = RngState(args.seed)
    ds = _make_dataset(args.dataset, root.split("data"), args.per_class,
                       args.dim, args.count)
    hidden = _parse_hidden(args.hidden)
    spec = ModelSpec((ds.dim, *hidden, ds.n_classes))
    config = TrainConfig(steps=args.steps, lr=args.lr, batch_size=args.batch_size,
                         seed=args.seed, loss=args.loss)
    if args.adv_eps is not None:
        from .train import AdvTrainConfig
        config.adversarial = AdvTrainConfig(kind="fgsm", epsilon=args.adv_eps)
    path = train(ds, spec, config, root.split("train"))
    path.save(os.path.join(args.out, "path"))
    ds.to_csv(os.path.join(args.out, "dataset.csv"))
    preds = np.argmax(backend.forward(path.final_theta, spec.layer_sizes, ds.inputs), axis=1)
    metrics = {"train_accuracy": float(np.mean(preds == ds.labels)),
               "final_loss": float(path.loss_trace[-1]) if path.n_steps else None,
               "n_steps": path.n_steps, "dataset": args.dataset}
    with open(os.path.join(args.out, "metrics.json"), "w") as fh:
        json.dump(metrics, fh, sort_keys=True)
    _write_manifest(args.out, "train", vars_config(args), args.seed,
                    _fingerprint(ds), ["path", "dataset.csv", "metrics.json"], t0)
    print(f"trained {spec.layer_sizes} for {path.n_steps} steps; "
          f"train accuracy {metrics['train_accuracy']:.4f}")
    return 0


def vars_config(args) -> dict:
    skip = {"config_values", "func"}
    return {k: v for k, v in vars(args).items()
            if k not in skip and not callable(v)}


def _cmd_attack(args):
    t0 = time.time()
    os.makedirs(args.out, exist_ok=True)
    path = _load_run(args.run)
    ds = Dataset.from_csv(os.path.join(args.run, "dataset.csv"))
    spec, theta = path.spec, path.final_theta
    rng = RngState(args.seed).split("attack")
    idx = np.arange(min(args.count, ds.n))
    examples = []
    for i in idx:
        x, y = ds.inputs[i], int(ds.labels[i])
        target = None
        if args.targeted:
            target = (y + 1) % ds.n_classes
        if args.method == "fgsm":
            ex = attack_mod.fgsm(spec, theta, x, y, args.eps)
        elif args.method == "igsm":
            ex = attack_mod.igsm(spec, theta, x, y, args.eps, args.alpha,
                                 args.iters, target=target)
        elif args.method == "pgd":
            ex = attack_mod.pgd(spec, theta, x, y, args.eps, args.alpha,
                                args.iters, norm=args.norm, random_start=True,
                                rng=rng.split(int(i)), target=target)
        elif args.method == "mindist":
            tgt = target if target is not None else (y + 1) % ds.n_classes
            ex = attack_mod.min_distortion_attack(spec, theta, x, tgt)
        else:
            raise EpkitError(f"unknown method {args.method!r}")
        examples.append(ex)
    attack_mod.attack_batch_csv(os.path.join(args.out, "attacks.csv"), examples)
    np.save(os.path.join(args.out, "adversarial.npy"),
            np.stack([ex.perturbed for ex in examples]))
    np.save(os.path.join(args.out, "attack_indices.npy"), idx)
    succ = [ex for ex in examples if ex.success]
    print(f"{len(succ)}/{len(examples)} attacks succeeded; "
          f"mean distortion of successes "
          f"{np.mean([ex.distortion for ex in succ]) if succ else float('nan'):.5f}")
    _write_manifest(args.out, "attack", vars_config(args), args.seed,
                    _fingerprint(ds), ["attacks.csv", "adversarial.npy"], t0)
    return 0


def _cmd_persist(args):
    t0 = time.time()
    os.makedirs(args.out, exist_ok=True)
    rng = RngState(args.seed).split("persist")
    if args.oracle == "wedge":
        from .data import WedgeSpec
        from .geometry import WedgeClassifier
        closed_form = wedge_persistence_oracle(args.k, args.d, args.gamma)
        clf = WedgeClassifier(WedgeSpec(n=max(args.k, 3), k=args.k))
        x = np.full(max(args.k, 3), args.d)
        res = persistence_bracket(clf, x, gamma=args.gamma, n=args.samples,
                                  precision=args.precision, rng=rng)
        print(f"closed form sigma*: {closed_form:.6g}")
        print(f"bracketing estimate: {res.sigma_star:.6g} "
              f"(converged={res.converged}, {len(res.trace)} evaluations)")
        _write_csv(os.path.join(args.out, "persistence_oracle.csv"),
                   ["k", "d", "gamma", "closed_form", "bracketing", "converged"],
                   [(args.k, float(args.d), float(args.gamma), float(closed_form),
                     float(res.sigma_star), int(res.converged))])
        _write_manifest(args.out, "persist", vars_config(args), args.seed, "",
                        ["persistence_oracle.csv"], t0)
        return 0

    path = _load_run(args.run)
    ds = Dataset.from_csv(os.path.join(args.run, "dataset.csv"))
    clf = ModelClassifier(path.spec, path.final_theta)
    points = ds.inputs[:args.count]
    kinds = ["natural"] * len(points)
    if args.attack_dir:
        adv = np.load(os.path.join(args.attack_dir, "adversarial.npy"))
        points = np.vstack([points, adv[:args.count]])
        kinds += ["adversarial"] * min(args.count, len(adv))

    def job(i):
        return persistence_bracket(clf, points[i], gamma=args.gamma,
                                   n=args.samples, precision=args.precision,
                                   rng=rng.split(i))

    with ThreadPoolExecutor(max_workers=args.threads) as pool:
        results = list(pool.map(job, range(len(points))))
    rows = [(i, kinds[i], float(r.sigma_star), int(r.converged))
            for i, r in enumerate(results)]
    _write_csv(os.path.join(args.out, "persistence.csv"),
               ["id", "kind", "sigma_star", "converged"], rows)
    for kind in ("natural", "adversarial"):
        vals = [r for (i, k, r, c) in rows if k == kind and np.isfinite(r)]
        if vals:
            print(f"mean {args.gamma}-persistence ({kind}): {np.mean(vals):.4f} "
                  f"over {len(vals)} points")
    _write_manifest(args.out, "persist", vars_config(args), args.seed,
                    _fingerprint(ds), ["persistence.csv"], t0)
    return 0


def _cmd_curve(args):
    t0 = time.time()
    os.makedirs(args.out, exist_ok=True)
    path = _load_run(args.run)
    ds = Dataset.from_csv(os.path.join(args.run, "dataset.csv"))
    clf = ModelClassifier(path.spec, path.final_theta)
    rng = RngState(args.seed).split("curve")
    x_from = ds.inputs[args.index_a]
    if args.attack_dir:
        adv = np.load(os.path.join(args.attack_dir, "adversarial.npy"))
        x_to = adv[args.index_b]
    else:
        x_to = ds.inputs[args.index_b]
    curve = persistence_curve(clf, x_from, x_to, steps=args.points,
                              gamma=args.gamma, n=args.samples,
                              precision=args.precision, rng=rng)
    _write_csv(os.path.join(args.out, "curve.csv"),
               ["t", "class", "sigma_star", "converged"],
               [(float(t), c, float(s), int(cv)) for t, c, s, cv in curve])
    outputs = ["curve.csv"]
    if args.heatmap:
        ts = np.linspace(0, 1, args.points)
        sigmas = np.linspace(args.sigma_min, args.sigma_max, args.sigma_steps)
        grid = stability_grid(clf, x_from, x_to, ts, sigmas, args.samples,
                              rng.split("grid"))
        rows = [(float(t), float(sig), float(grid[i, j]))
                for i, t in enumerate(ts) for j, sig in enumerate(sigmas)]
        _write_csv(os.path.join(args.out, "heatmap.csv"),
                   ["t", "sigma", "match_fraction"], rows)
        outputs.append("heatmap.csv")
    _write_manifest(args.out, "curve", vars_config(args), args.seed,
                    _fingerprint(ds), outputs, t0)
    print(f"curve over {args.points} points written")
    return 0


def _cmd_boundary(args):
    t0 = time.time()
    os.makedirs(args.out, exist_ok=True)
    path = _load_run(args.run)
    ds = Dataset.from_csv(os.path.join(args.run, "dataset.csv"))
    spec, theta = path.spec, path.final_theta
    clf = ModelClassifier(spec, theta)
    rng = RngState(args.seed).split("boundary")
    x_a = ds.inputs[args.index_a]
    x_b = ds.inputs[args.index_b]
    crossing = boundary_bisect(clf, x_a, x_b)

    def attack_fn(samples):
        other = crossing.class_pair[1]
        out = np.empty_like(samples)
        for i, s in enumerate(samples):
            lab = int(clf.labels(s[None, :])[0])
            ex = attack_mod.igsm(spec, theta, s, lab, epsilon=args.eps,
                                 alpha=args.eps / 10.0, iters=30, target=other
                                 if lab != other else crossing.class_pair[0],
                                 box=None)
            out[i] = ex.perturbed
        return out

    est = boundary_normal(clf, attack_fn, crossing.x_boundary,
                          n_samples=args.samples, sigma=args.sigma, rng=rng)
    direction = x_b - x_a
    angle = crossing_angles(est.normal, direction[None, :])[0]
    _write_csv(os.path.join(args.out, "angles.csv"),
               ["direction_id", "angle_rad"], [(0, float(angle))])
    np.save(os.path.join(args.out, "normal.npy"), est.normal)
    print(f"boundary at t={crossing.t:.6f} between classes {crossing.class_pair}; "
          f"interpolant crosses at {angle:.4f} rad "
          f"(low_confidence={est.low_confidence})")
    _write_manifest(args.out, "boundary", vars_config(args), args.seed,
                    _fingerprint(ds), ["angles.csv", "normal.npy"], t0)
    return 0


def _cmd_epk(args):
    t0 = time.time()
    os.makedirs(args.out, exist_ok=True)
    path = _load_run(args.run)
    rng = RngState(args.seed).split("epk-test")
    X = rng.normal(size=(args.count, path.spec.input_dim)) + \
        path.require_data()[0][:args.count].mean(axis=0)
    substeps = [int(p) for p in args.substeps.split(",")]
    rows = epk_convergence_study(path, X, substeps)
    _write_csv(os.path.join(args.out, "convergence.csv"),
               ["T", "max_err", "mean_err"],
               [(T, float(mx), float(mn)) for T, mx, mn in rows])
    for T, mx, mn in rows:
        print(f"T={T:5d}  max err {mx:.3e}  mean err {mn:.3e}")
    _write_manifest(args.out, "epk", vars_config(args), args.seed, "",
                    ["convergence.csv"], t0)
    return 0


def _cmd_ood(args):
    t0 = time.time()
    os.makedirs(args.out, exist_ok=True)
    path = _load_run(args.run)
    ds = Dataset.from_csv(os.path.join(args.run, "dataset.csv"))
    root = RngState(args.seed)
    basis = training_grad_basis(path, steps=args.basis_steps,
                                threshold=args.threshold)
    id_test = _make_dataset(args.dataset, root.split("id-test"),
                            per_class=args.count // 3 + 1, dim=ds.dim,
                            count=args.count)
    shift = np.full(ds.dim, args.shift)
    ood = root.split("ood").normal(size=(args.count, ds.dim)) + shift
    id_scores = ood_scores(path, basis, id_test.inputs[:args.count])
    out_scores = ood_scores(path, basis, ood)
    rows = [(i, float(s), 0) for i, s in enumerate(id_scores)] + \
           [(len(id_scores) + i, float(s), 1) for i, s in enumerate(out_scores)]
    _write_csv(os.path.join(args.out, "scores.csv"),
               ["point_id", "score", "is_ood_label_if_known"], rows)
    basis.save(os.path.join(args.out, "basis.npz"))
    area = auroc(id_scores, out_scores)
    with open(os.path.join(args.out, "ood_summary.json"), "w") as fh:
        json.dump({"auroc": area, "basis_rank": basis.rank,
                   "explained": basis.explained}, fh, sort_keys=True)
    print(f"basis rank {basis.rank} ({basis.explained:.3f} explained); "
          f"AUROC {area:.4f}")
    _write_manifest(args.out, "ood", vars_config(args), args.seed,
                    _fingerprint(ds), ["scores.csv", "basis.npz",
                                       "ood_summary.json"], t0)
    return 0


def _cmd_dimension(args):
    t0 = time.time()
    os.makedirs(args.out, exist_ok=True)
    path = _load_run(args.run)
    ds = Dataset.from_csv(os.path.join(args.run, "dataset.csv"))
    x_test = ds.inputs[args.test_index]
    cfg = EpkConfig(substeps=args.substeps, class_reduction="class-sum")
    G, _ = input_grad_matrix(path, x_test, cfg)
    spectrum = signal_dimension(G, point_id=args.test_index)
    rows = [(i, float(s), float(c)) for i, (s, c) in
            enumerate(zip(spectrum.singular_values, spectrum.cdf))]
    _write_csv(os.path.join(args.out, "spectrum.csv"),
               ["component", "sigma", "cdf"], rows)
    with open(os.path.join(args.out, "dimension.json"), "w") as fh:
        json.dump({"n95": spectrum.n95, "test_index": args.test_index},
                  fh, sort_keys=True)
    print(f"signal dimension n95 = {spectrum.n95} "
          f"(of {len(spectrum.singular_values)} components)")
    _write_manifest(args.out, "dimension", vars_config(args), args.seed,
                    _fingerprint(ds), ["spectrum.csv", "dimension.json"], t0)
    return 0


def _cmd_mag(args):
    t0 = time.time()
    os.makedirs(args.out, exist_ok=True)
    root = RngState(args.seed)
    ds = _make_dataset(args.dataset, root.split("data"), args.per_class,
                       args.dim, args.count)
    components = pca_fit(ds.inputs, args.mag_k)
    ds_proj = project_dataset(ds, components)
    hidden = _parse_hidden(args.hidden)
    spec = ModelSpec((ds.dim, *hidden, ds.n_classes))
    base_cfg = TrainConfig(steps=args.steps, lr=args.lr, seed=args.seed)
    mag_cfg = TrainConfig(steps=args.steps, lr=args.lr, seed=args.seed,
                          mag_alpha=args.alpha)
    base_path = train(ds_proj, spec, base_cfg, RngState(args.seed))
    mag_path = train_mag(ds_proj, components, spec, mag_cfg, RngState(args.seed))
    held = project_dataset(_holdout(args.dataset, root.split("holdout"),
                                    args.per_class, args.dim, args.count),
                           components)
    base_stats = mag_alignment_metric(spec, base_path.final_theta, held, components)
    mag_stats = mag_alignment_metric(spec, mag_path.final_theta, held, components)
    rows = [(i, float(base_stats["cosines"][i]), float(mag_stats["cosines"][i]))
            for i in range(held.n)]
    _write_csv(os.path.join(args.out, "cosines.csv"),
               ["point_id", "baseline_cosine", "mag_cosine"], rows)
    summary = {
        "baseline_mean_cosine": base_stats["mean_cosine"],
        "mag_mean_cosine": mag_stats["mean_cosine"],
        "baseline_mean_ratio": base_stats["mean_ratio"],
        "mag_mean_ratio": mag_stats["mean_ratio"],
        "alpha": args.alpha,
    }
    with open(os.path.join(args.out, "mag_summary.json"), "w") as fh:
        json.dump(summary, fh, sort_keys=True)
    print(f"mean cosine baseline {summary['baseline_mean_cosine']:.4f} vs "
          f"mag {summary['mag_mean_cosine']:.4f}")
    _write_manifest(args.out, "mag", vars_config(args), args.seed,
                    _fingerprint(ds), ["cosines.csv", "mag_summary.json"], t0)
    return 0


def emit_report(run_dir) -> dict:
    """Aggregate per-run metrics from the artifacts found in a directory."""
    if not os.path.isdir(run_dir) or not os.listdir(run_dir):
        raise EpkitError(f"no artifacts in {run_dir!r}")
    report: dict = {"run_dir": os.path.basename(os.path.normpath(run_dir)),
                    "partial": False, "missing": []}
    metrics_path = os.path.join(run_dir, "metrics.json")
    if os.path.exists(metrics_path):
        with open(metrics_path) as fh:
            report["train"] = json.load(fh)
    else:
        report["partial"] = True
        report["missing"].append("metrics.json")
    attacks_path = os.path.join(run_dir, "attacks.csv")
    if os.path.exists(attacks_path):
        raw = np.genfromtxt(attacks_path, delimiter=",", skip_header=1)
        raw = np.atleast_2d(raw)
        if raw.size:
            success = raw[:, 3] > 0
            report["attacks"] = {
                "count": int(raw.shape[0]),
                "success_rate": float(success.mean()),
                "avg_dist": float(raw[success, 4].mean()) if success.any() else None,
            }
    persist_path = os.path.join(run_dir, "persistence.csv")
    if os.path.exists(persist_path):
        rows = []
        with open(persist_path) as fh:
            next(fh)
            for line in fh:
                pid, kind, sig, conv = line.strip().split(",")
                rows.append((kind, float(sig)))
        for kind in ("natural", "adversarial"):
            vals = [s for k, s in rows if k == kind and np.isfinite(s)]
            if vals:
                report[f"persist_{kind[:3]}_mean"] = float(np.mean(vals))
    return report


def _cmd_report(args):
    report = emit_report(args.run)
    text = json.dumps(report, sort_keys=True, indent=1)
    out_path = os.path.join(args.run, "report.json")
    with open(out_path, "w") as fh:
        fh.write(text)
    print(text)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="run")
    p.add_argument("--config", default=None,
                   help="flat key=value file; flags override")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)


_SUBPARSERS: dict = {}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="epkit",
        description="Path-checkpointed training, adversarial geometry, and "
                    "exact kernel representations")
    sub = parser.add_subparsers(dest="command", required=True)
    original_add = sub.add_parser

    def add_parser(name, **kwargs):
        p = original_add(name, **kwargs)
        _SUBPARSERS[name] = p
        return p

    sub.add_parser = add_parser

    p = sub.add_parser("train", help="train a model, checkpointing every step")
    _add_common(p)
    p.add_argument("--dataset", default="toy")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--hidden", default="64")
    p.add_argument("--loss", default="cce", choices=["cce", "mse"])
    p.add_argument("--per-class", type=int, default=1000)
    p.add_argument("--dim", type=int, default=100)
    p.add_argument("--count", type=int, default=600)
    p.add_argument("--adv-eps", type=float, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("attack", help="generate adversarial examples for a run")
    _add_common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--method", default="igsm",
                   choices=["fgsm", "igsm", "pgd", "mindist"])
    p.add_argument("--eps", type=float, default=0.3)
    p.add_argument("--alpha", type=float, default=0.02)
    p.add_argument("--iters", type=int, default=40)
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--norm", default="linf", choices=["linf", "l2"])
    p.add_argument("--targeted", action="store_true")
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("persist", help="persistence of points or wedge oracle")
    _add_common(p)
    p.add_argument("--run", default=None)
    p.add_argument("--oracle", default=None, choices=[None, "wedge"])
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--d", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=0.7)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--precision", type=float, default=0.01)
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--attack-dir", default=None)
    p.set_defaults(func=_cmd_persist)

    p = sub.add_parser("curve", help="persistence along an interpolation")
    _add_common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--index-a", type=int, default=0)
    p.add_argument("--index-b", type=int, default=1)
    p.add_argument("--attack-dir", default=None)
    p.add_argument("--points", type=int, default=21)
    p.add_argument("--gamma", type=float, default=0.7)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--precision", type=float, default=0.01)
    p.add_argument("--heatmap", action="store_true")
    p.add_argument("--sigma-min", type=float, default=0.05)
    p.add_argument("--sigma-max", type=float, default=2.0)
    p.add_argument("--sigma-steps", type=int, default=20)
    p.set_defaults(func=_cmd_curve)

    p = sub.add_parser("boundary", help="boundary crossing, normal, and angle")
    _add_common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--index-a", type=int, default=0)
    p.add_argument("--index-b", type=int, default=1)
    p.add_argument("--samples", type=int, default=5000)
    p.add_argument("--sigma", type=float, default=1e-6)
    p.add_argument("--eps", type=float, default=0.5)
    p.set_defaults(func=_cmd_boundary)

    p = sub.add_parser("epk", help="kernel-vs-network convergence study")
    _add_common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--substeps", default="1,10,100,200")
    p.add_argument("--count", type=int, default=20)
    p.set_defaults(func=_cmd_epk)

    p = sub.add_parser("ood", help="gradient-basis out-of-distribution scores")
    _add_common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--dataset", default="toy")
    p.add_argument("--shift", type=float, default=-4.0)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--threshold", type=float, default=0.95)
    p.add_argument("--basis-steps", default="final")
    p.set_defaults(func=_cmd_ood)

    p = sub.add_parser("dimension", help="signal-manifold dimension at a test point")
    _add_common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--test-index", type=int, default=0)
    p.add_argument("--substeps", type=int, default=20)
    p.set_defaults(func=_cmd_dimension)

    p = sub.add_parser("mag", help="train baseline vs manifold-aligned model")
    _add_common(p)
    p.add_argument("--dataset", default="digits")
    p.add_argument("--mag-k", type=int, default=28)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=60)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--hidden", default="32")
    p.add_argument("--per-class", type=int, default=60)
    p.add_argument("--dim", type=int, default=100)
    p.add_argument("--count", type=int, default=300)
    p.set_defaults(func=_cmd_mag)

    p = sub.add_parser("report", help="aggregate run metrics into JSON")
    p.add_argument("--run", required=True)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.config_values = None
    if getattr(args, "config", None):
        # Flags beat config beats defaults: a value still equal to the
        # subcommand default is taken as "not given on the command line".
        args.config_values = _load_config_file(args.config)
        defaults = {a.dest: a.default
                    for a in _SUBPARSERS[args.command]._actions}
        for key, value in args.config_values.items():
            attr = key.replace("-", "_")
            if attr not in defaults:
                continue
            default = defaults[attr]
            if getattr(args, attr) != default:
                continue  # explicitly set on the command line
            if isinstance(default, bool):
                setattr(args, attr, value.lower() in ("1", "true", "yes"))
            elif default is None:
                setattr(args, attr, value)
            else:
                setattr(args, attr, type(default)(value))
    try:
        return args.func(args)
    except EpkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
