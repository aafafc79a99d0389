"""Command-line interface: dataset tooling, training, inference, evaluation,
importance maps, embedding export, the ensemble baseline, and the
active-learning harness.

Every run resolves its configuration (defaults < TOML config file < explicit
flags), writes a JSON manifest with input digests, and is bit-reproducible
from that manifest in deterministic (single-threaded) mode.

Exit codes: 0 success, 1 user/config error, 2 data/format error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # unknown flags -> usage text, exit 1
        raise _UsageError(f"{self.format_usage()}error: {message}")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_config_file(path) -> dict:
    """Read a TOML config, or the `config` block of a run manifest (JSON)."""
    text = Path(path).read_bytes()
    if str(path).endswith(".json"):
        obj = json.loads(text)
        return obj.get("config", obj)
    try:
        import tomllib  # python >= 3.11
    except ModuleNotFoundError:
        import tomli as tomllib
    return tomllib.loads(text.decode("utf-8"))


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Defaults, then config-file values, then explicitly passed flags."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = _load_config_file(args.config)
        for key, value in file_cfg.items():
            key = key.replace("-", "_")
            if key in resolved:
                resolved[key] = value
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _write_manifest(out_path, command: str, config: dict, inputs: list) -> None:
    from . import __version__
    manifest = {
        "tool_version": __version__,
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs if p and Path(p).exists()},
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    path = Path(str(out_path) + ".manifest.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _add_common(parser):
    parser.add_argument("--config", help="TOML config file (or a run manifest JSON)")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS thread count (default 1 = deterministic)")
    parser.add_argument("--seed", type=int, default=None)


def _set_threads(n: int | None) -> None:
    n = 1 if n is None else n
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


# ---------------------------------------------------------------------------
# subcommand handlers


def _parse_cluster(text: str):
    from .data import ClusterSpec
    from .errors import ConfigError
    fields = {}
    for part in text.split(","):
        key, _, value = part.partition("=")
        if not value:
            raise ConfigError(f"bad --cluster entry {text!r}; expected key=value pairs")
        fields[key.strip().replace("-", "_")] = float(value)
    try:
        return ClusterSpec(embedding_mean=fields.pop("mean"),
                           embedding_sigma=fields.pop("sigma"),
                           error_mean=fields.pop("err_mean"),
                           error_sigma=fields.pop("err_sigma"),
                           fraction=fields.pop("frac"))
    except KeyError as exc:
        raise ConfigError(f"--cluster missing field {exc}") from None


def cmd_gen_synthetic(args) -> int:
    from .data import ClusterSpec, SynthSpec, synth_generate, write_container
    defaults = {"n": 5000, "dim": 8, "size_min": 3, "size_max": 20,
                "seed": 0, "charges": True, "atomic_numbers": True, "out": None}
    cfg = _resolve(args, defaults)
    if args.cluster:
        clusters = [_parse_cluster(c) for c in args.cluster]
    else:
        # two well-separated clusters: low-error vs high-error
        clusters = [ClusterSpec(0.0, 0.5, 0.5, 0.1, 0.5),
                    ClusterSpec(1.0, 0.5, 5.0, 0.5, 0.5)]
    spec = SynthSpec(n_molecules=int(cfg["n"]), embed_dim=int(cfg["dim"]),
                     clusters=clusters,
                     size_range=(int(cfg["size_min"]), int(cfg["size_max"])),
                     with_charges=bool(cfg["charges"]),
                     with_atomic_numbers=bool(cfg["atomic_numbers"]))
    records = synth_generate(spec, seed=int(cfg["seed"]))
    write_container(records, cfg["out"])
    cfg["clusters"] = [vars(c) for c in clusters]
    _write_manifest(cfg["out"], "dataset gen-synthetic", cfg, [])
    print(f"wrote {len(records)} records to {cfg['out']}")
    return 0


def cmd_inspect(args) -> int:
    from .data import inspect_container
    info = inspect_container(args.path)
    for key, value in info.items():
        print(f"{key}: {value}")
    return 0


def _model_config_from_flags(cfg: dict, input_dim: int, has_charges: bool):
    from .model import ProbeConfig
    widths = tuple(int(w) for w in str(cfg["encoder_widths"]).split(","))
    cls_widths = tuple(int(w) for w in str(cfg["classifier_widths"]).split(","))
    return ProbeConfig(input_dim=input_dim, encoder_widths=widths,
                       heads=int(cfg["heads"]), head_dim=int(cfg["head_dim"]),
                       embedding_dim=int(cfg["embedding_dim"]),
                       classifier_widths=cls_widths,
                       dropout=float(cfg["dropout"]),
                       use_charges=has_charges and bool(cfg["use_charges"]))


_TRAIN_DEFAULTS = {
    "data": None, "out": None, "percentile": 50.0, "val_fraction": 0.1,
    "lr": 5e-5, "weight_decay": 1e-4, "clip_norm": 1.0,
    "scheduler_factor": 0.9, "scheduler_patience": 5, "min_lr": 5e-6,
    "early_stop_patience": 25, "max_epochs": 100, "batch_size": 256,
    "seed": 0, "per_atom_errors": False,
    "encoder_widths": "256,128,256", "heads": 32, "head_dim": 8,
    "embedding_dim": 256, "classifier_widths": "128,32", "dropout": 0.1,
    "use_charges": True,
}


def cmd_train(args) -> int:
    from .data import assign_labels, read_container, split_train_val
    from .model import ProbeModel
    from .training import TrainConfig, fit, save_checkpoint

    cfg = _resolve(args, _TRAIN_DEFAULTS)
    records = read_container(cfg["data"])
    dataset = assign_labels(records, p=float(cfg["percentile"]),
                            per_atom_errors=bool(cfg["per_atom_errors"]))
    train_set, val_set = split_train_val(
        dataset, fraction=1.0 - float(cfg["val_fraction"]), seed=int(cfg["seed"]))
    has_charges = records[0].charges is not None
    model_cfg = _model_config_from_flags(cfg, dataset.embed_dim, has_charges)
    model = ProbeModel(model_cfg, seed=int(cfg["seed"]))
    train_cfg = TrainConfig(
        lr=float(cfg["lr"]), weight_decay=float(cfg["weight_decay"]),
        clip_norm=float(cfg["clip_norm"]),
        scheduler_factor=float(cfg["scheduler_factor"]),
        scheduler_patience=int(cfg["scheduler_patience"]),
        min_lr=float(cfg["min_lr"]),
        early_stop_patience=int(cfg["early_stop_patience"]),
        max_epochs=int(cfg["max_epochs"]), batch_size=int(cfg["batch_size"]),
        percentile=float(cfg["percentile"]), seed=int(cfg["seed"]))
    model, state, checkpoint = fit(model, train_set, val_set, train_cfg)
    save_checkpoint(checkpoint, cfg["out"])

    from . import __version__
    history_path = Path(str(cfg["out"])).with_suffix(".losses.csv")
    with open(history_path, "w") as fh:
        fh.write(f"# probe {__version__}\n")
        fh.write("epoch,train_loss,val_loss,lr\n")
        for i, (tl, vl, lr) in enumerate(zip(state.train_history,
                                             state.val_history,
                                             state.lr_history), 1):
            fh.write(f"{i},{tl!r},{vl!r},{lr!r}\n")
    _write_manifest(cfg["out"], "train", cfg, [cfg["data"]])
    print(f"trained {state.epoch} epochs (best epoch {state.best_epoch}, "
          f"best val loss {state.best_val_loss:.6f}); wrote {cfg['out']}")
    return 0


def cmd_infer(args) -> int:
    from . import __version__
    from .data import make_batches, read_container
    from .training import load_checkpoint

    defaults = {"model": None, "data": None, "out": None, "batch_size": 256, "seed": 0}
    cfg = _resolve(args, defaults)
    model, _ = load_checkpoint(cfg["model"])
    records = read_container(cfg["data"])
    with open(cfg["out"], "w") as fh:
        fh.write(f"# probe {__version__}\n")
        fh.write("mol_id,p_reliable,p_unreliable,label\n")
        for batch in make_batches(records, batch_size=int(cfg["batch_size"])):
            out = model.forward(batch)
            for i in range(len(batch)):
                label = int(out.probs[i, 1] >= 0.5)
                fh.write(f"{int(batch.mol_ids[i])},{float(out.probs[i, 0])!r},"
                         f"{float(out.probs[i, 1])!r},{label}\n")
    _write_manifest(cfg["out"], "infer", cfg, [cfg["model"], cfg["data"]])
    print(f"wrote probabilities for {len(records)} molecules to {cfg['out']}")
    return 0


def _collect_probs(model, records, batch_size=256):
    import numpy as np
    from .data import make_batches
    probs = []
    for batch in make_batches(records, batch_size=batch_size):
        probs.append(model.forward(batch).probs)
    return np.concatenate(probs, axis=0)


def cmd_eval(args) -> int:
    import numpy as np
    from .data import read_container
    from .errors import DataError
    from .evaluation import DEFAULT_CUTOFFS, build_report, emit_report
    from .training import load_checkpoint

    defaults = {"model": None, "data": None, "out": None, "cutoffs": None,
                "boundary": None, "calibration_bins": 10, "error_bins": 50,
                "seed": 0}
    cfg = _resolve(args, defaults)
    model, meta = load_checkpoint(cfg["model"])
    records = read_container(cfg["data"])
    if any(r.e_ref is None for r in records):
        raise DataError("evaluation requires reference energies in the container")
    boundary = float(cfg["boundary"]) if cfg["boundary"] is not None \
        else float(meta["boundary"])
    errors = np.array([abs(r.e_pred - r.e_ref) for r in records])
    labels = (errors >= boundary).astype(int)
    probs = _collect_probs(model, records)
    cutoffs = (tuple(float(c) for c in str(cfg["cutoffs"]).split(","))
               if cfg["cutoffs"] else DEFAULT_CUTOFFS)
    report = build_report(probs, labels, errors, cutoffs=cutoffs,
                          calibration_bins=int(cfg["calibration_bins"]),
                          error_bins=int(cfg["error_bins"]),
                          extra={"boundary": boundary,
                                 "checkpoint_meta": {k: meta.get(k) for k in
                                                     ("percentile", "epochs_run",
                                                      "best_val_loss")}})
    paths = emit_report(report, cfg["out"])
    _write_manifest(Path(cfg["out"]) / "report", "eval", cfg,
                    [cfg["model"], cfg["data"]])
    print(Path(paths["table"]).read_text())
    return 0


def cmd_importance(args) -> int:
    from .data import make_batches, read_container
    from .model import importance_from_attention
    from .training import load_checkpoint

    defaults = {"model": None, "data": None, "out": None, "top_k": 5,
                "batch_size": 64, "seed": 0}
    cfg = _resolve(args, defaults)
    model, _ = load_checkpoint(cfg["model"])
    records = read_container(cfg["data"])
    numbers_by_id = {r.mol_id: r.atomic_numbers for r in records}
    top_k = int(cfg["top_k"])
    with open(cfg["out"], "w") as fh:
        for batch in make_batches(records, batch_size=int(cfg["batch_size"])):
            out = model.forward(batch, capture_attention=True)
            scores = importance_from_attention(out.attention, batch.mask,
                                               batch.n_atoms)
            for i, s in enumerate(scores):
                mol_id = int(batch.mol_ids[i])
                k = min(top_k, len(s))
                top = sorted(range(len(s)), key=lambda j: (-s[j], j))[:k]
                obj = {"mol_id": mol_id,
                       "p_unreliable": float(out.probs[i, 1]),
                       "scores": [float(v) for v in s],
                       "top_atoms": top}
                numbers = numbers_by_id.get(mol_id)
                if numbers is not None:
                    obj["atomic_numbers"] = [int(z) for z in numbers]
                fh.write(json.dumps(obj) + "\n")
    _write_manifest(cfg["out"], "importance", cfg, [cfg["model"], cfg["data"]])
    print(f"wrote importance maps to {cfg['out']}")
    return 0


def cmd_export_embeddings(args) -> int:
    from .data import read_container
    from .model import export_molecular_embeddings
    from .training import load_checkpoint

    defaults = {"model": None, "data": None, "out": None, "format": None,
                "batch_size": 256, "seed": 0}
    cfg = _resolve(args, defaults)
    model, _ = load_checkpoint(cfg["model"])
    records = read_container(cfg["data"])
    export_molecular_embeddings(model, records, cfg["out"], fmt=cfg["format"],
                                batch_size=int(cfg["batch_size"]))
    _write_manifest(cfg["out"], "export-embeddings", cfg,
                    [cfg["model"], cfg["data"]])
    print(f"exported {len(records)} molecular embeddings to {cfg['out']}")
    return 0


def cmd_baseline_ensemble(args) -> int:
    import numpy as np
    from .data import quantile_boundary, read_container
    from .errors import DataError
    from .evaluation import EnsembleInput, ensemble_baseline
    from . import __version__

    defaults = {"members": None, "out": None, "boundary": None,
                "percentile": 50.0, "seed": 0}
    cfg = _resolve(args, defaults)
    paths = [p for p in str(cfg["members"]).split(",") if p]
    if len(paths) < 2:
        from .errors import ConfigError
        raise ConfigError("--members needs at least two comma-separated containers")
    member_records = [read_container(p) for p in paths]
    ids0 = [r.mol_id for r in member_records[0]]
    for recs, path in zip(member_records[1:], paths[1:]):
        if [r.mol_id for r in recs] != ids0:
            raise DataError(f"{path}: molecule ids differ from {paths[0]}")
    if any(r.e_ref is None for r in member_records[0]):
        raise DataError("ensemble baseline requires reference energies")
    preds = np.array([[r.e_pred for r in recs] for recs in member_records])
    n_atoms = np.array([r.n_atoms for r in member_records[0]])
    e_ref = np.array([r.e_ref for r in member_records[0]])
    errors = np.abs(preds[0] - e_ref)   # first member is the production model
    boundary = (float(cfg["boundary"]) if cfg["boundary"] is not None
                else quantile_boundary(errors, float(cfg["percentile"])))
    labels = (errors >= boundary).astype(int)
    ens = EnsembleInput(predictions=preds, n_atoms=n_atoms, e_ref=e_ref)
    result = ensemble_baseline(ens, errors, labels)

    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    mc = result["median_classifier"]
    summary = {
        "tool_version": __version__,
        "members": paths,
        "boundary": boundary,
        "spearman_rho": result["spearman_rho"],
        "spearman_note": result["spearman_note"],
        "median_threshold": result["median_threshold"],
        "median_classifier": {"accuracy": mc["accuracy"], "mcc": mc["mcc"],
                              "f1": mc["f1"]},
    }
    (out_dir / "ensemble_baseline.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n")
    with open(out_dir / "scaled_sigma.csv", "w") as fh:
        fh.write(f"# probe {__version__}\n")
        fh.write("mol_id,scaled_sigma,abs_error,label\n")
        for i, r in enumerate(member_records[0]):
            fh.write(f"{r.mol_id},{float(result['scaled_sigma'][i])!r},"
                     f"{float(errors[i])!r},{int(labels[i])}\n")
    _write_manifest(out_dir / "ensemble_baseline", "baseline-ensemble", cfg, paths)
    rho = result["spearman_rho"]
    print(f"spearman rho: {'n/a' if rho is None else f'{rho:.4f}'}; "
          f"median classifier accuracy: {mc['accuracy']:.4f}")
    return 0


def cmd_al_sim(args) -> int:
    from .active_learning import (planted_al_config, run_cycles,
                                  write_acquisition_log, write_cycle_csv)

    defaults = {"strategy": "probe", "out": None, "pool_size": 2500,
                "cycles": 2, "seed": 0}
    cfg = _resolve(args, defaults)
    al_cfg = planted_al_config(cfg["strategy"], seed=int(cfg["seed"]),
                               pool_size=int(cfg["pool_size"]),
                               n_cycles=int(cfg["cycles"]))
    results = run_cycles(al_cfg)
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_cycle_csv(results, out_dir / "cycles.csv")
    write_acquisition_log(results, out_dir / "acquisitions.jsonl")
    _write_manifest(out_dir / "al_sim", "al-sim", cfg, [])
    for r in results:
        print(f"cycle {r.cycle}: rmse {r.rmse:.4f} (delta {r.delta_rmse:+.4f})")
    return 0


# ---------------------------------------------------------------------------
# parser wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="probe",
                     description="Reliability classification for interatomic "
                                 "potential predictions from frozen embeddings")
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="container tooling")
    ds_sub = ds.add_subparsers(dest="dataset_command", required=True)

    gen = ds_sub.add_parser("gen-synthetic", help="generate a synthetic container")
    _add_common(gen)
    gen.add_argument("--out", required=True)
    gen.add_argument("--n", type=int)
    gen.add_argument("--dim", type=int)
    gen.add_argument("--size-min", dest="size_min", type=int)
    gen.add_argument("--size-max", dest="size_max", type=int)
    gen.add_argument("--cluster", action="append",
                     help="mean=..,sigma=..,err_mean=..,err_sigma=..,frac=.. "
                          "(repeatable)")
    gen.add_argument("--no-charges", dest="charges", action="store_false",
                     default=None)
    gen.add_argument("--no-atomic-numbers", dest="atomic_numbers",
                     action="store_false", default=None)
    gen.set_defaults(func=cmd_gen_synthetic)

    ins = ds_sub.add_parser("inspect", help="validate and summarize a container")
    ins.add_argument("path")
    ins.set_defaults(func=cmd_inspect)

    tr = sub.add_parser("train", help="train the reliability classifier")
    _add_common(tr)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--percentile", type=float)
    tr.add_argument("--val-fraction", dest="val_fraction", type=float)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--weight-decay", dest="weight_decay", type=float)
    tr.add_argument("--clip-norm", dest="clip_norm", type=float)
    tr.add_argument("--scheduler-factor", dest="scheduler_factor", type=float)
    tr.add_argument("--scheduler-patience", dest="scheduler_patience", type=int)
    tr.add_argument("--min-lr", dest="min_lr", type=float)
    tr.add_argument("--early-stop-patience", dest="early_stop_patience", type=int)
    tr.add_argument("--max-epochs", dest="max_epochs", type=int)
    tr.add_argument("--batch-size", dest="batch_size", type=int)
    tr.add_argument("--per-atom-errors", dest="per_atom_errors",
                    action="store_true", default=None)
    tr.add_argument("--encoder-widths", dest="encoder_widths")
    tr.add_argument("--heads", type=int)
    tr.add_argument("--head-dim", dest="head_dim", type=int)
    tr.add_argument("--embedding-dim", dest="embedding_dim", type=int)
    tr.add_argument("--classifier-widths", dest="classifier_widths")
    tr.add_argument("--dropout", type=float)
    tr.add_argument("--no-charges", dest="use_charges", action="store_false",
                    default=None)
    tr.set_defaults(func=cmd_train)

    inf = sub.add_parser("infer", help="predict reliability probabilities")
    _add_common(inf)
    inf.add_argument("--model", required=True)
    inf.add_argument("--data", required=True)
    inf.add_argument("--out", required=True)
    inf.add_argument("--batch-size", dest="batch_size", type=int)
    inf.set_defaults(func=cmd_infer)

    ev = sub.add_parser("eval", help="full evaluation report")
    _add_common(ev)
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True, help="output directory")
    ev.add_argument("--cutoffs", help="comma-separated probability cutoffs")
    ev.add_argument("--boundary", type=float,
                    help="override the checkpoint's class boundary")
    ev.add_argument("--calibration-bins", dest="calibration_bins", type=int)
    ev.add_argument("--error-bins", dest="error_bins", type=int)
    ev.set_defaults(func=cmd_eval)

    imp = sub.add_parser("importance", help="per-atom attention importance maps")
    _add_common(imp)
    imp.add_argument("--model", required=True)
    imp.add_argument("--data", required=True)
    imp.add_argument("--out", required=True)
    imp.add_argument("--top-k", dest="top_k", type=int)
    imp.add_argument("--batch-size", dest="batch_size", type=int)
    imp.set_defaults(func=cmd_importance)

    exp = sub.add_parser("export-embeddings",
                         help="export molecular embeddings with P(unreliable)")
    _add_common(exp)
    exp.add_argument("--model", required=True)
    exp.add_argument("--data", required=True)
    exp.add_argument("--out", required=True)
    exp.add_argument("--format", choices=("csv", "binary"))
    exp.add_argument("--batch-size", dest="batch_size", type=int)
    exp.set_defaults(func=cmd_export_embeddings)

    be = sub.add_parser("baseline-ensemble", help="ensemble-spread baseline")
    _add_common(be)
    be.add_argument("--members", required=True,
                    help="comma-separated member containers (first = production model)")
    be.add_argument("--out", required=True, help="output directory")
    be.add_argument("--boundary", type=float)
    be.add_argument("--percentile", type=float)
    be.set_defaults(func=cmd_baseline_ensemble)

    al = sub.add_parser("al-sim", help="retrospective active-learning harness")
    _add_common(al)
    al.add_argument("--strategy", choices=("probe", "ensemble", "random"))
    al.add_argument("--out", required=True, help="output directory")
    al.add_argument("--pool-size", dest="pool_size", type=int)
    al.add_argument("--cycles", type=int)
    al.set_defaults(func=cmd_al_sim)

    return parser


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        _set_threads(getattr(args, "threads", None))
        from .errors import ConfigError, DataError, NumericalError
        try:
            return args.func(args)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        except (DataError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        except NumericalError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 3
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
