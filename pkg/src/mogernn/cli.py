"""Command-line entry point: ``mogernn {generate,train,evaluate,predict,sweep}``.

Every artifact embeds the resolved configuration; feeding that block back
through ``--config`` reproduces the artifact bit for bit.
"""

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .aggregators import KINDS
from .data import (DataError, SyntheticSpec, generate_synthetic, load_metadata, load_speed_matrix,
                   save_metadata, save_speed_matrix, split_train_test)
from .estimator import MoGERNN
from .evaluation import (ROLES, RoleAssignment, assign_roles, baseline_knn_ed, baseline_persistence,
                         run_dynamic_scenario, vs_to_aas_distance)
from .graph import SensorGraph, default_sigma, load_distances, save_distances
from .training import EmptyDatasetError, TrainingDiverged

log = logging.getLogger("mogernn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

SPEED_FILE, DIST_FILE, META_FILE = "speed.csv", "distances.csv", "meta.json"


class UsageError(Exception):
    pass


def _env_seed():
    raw = os.environ.get("MOGE_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"MOGE_SEED must be an integer, got {raw!r}")


def _int_list(text):
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text):
    return [x.strip() for x in str(text).split(",") if x.strip()]


def _add_model_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--p", dest="history", type=int, default=12)
    g.add_argument("--f", dest="horizon", type=int, default=12)
    g.add_argument("--hidden", type=int, default=64)
    g.add_argument("--top-k", type=int, default=2)
    g.add_argument("--diffusion-steps", type=int, default=2)
    g.add_argument("--experts", type=_str_list, default=list(KINDS))
    g.add_argument("--gating", choices=("sparse", "average"), default="sparse")
    g.add_argument("--gru-aggregator", choices=KINDS, default="diffusion")
    g.add_argument("--transpose-diffusion", action="store_true")
    g.add_argument("--no-moge", dest="use_moge", action="store_false")
    t = p.add_argument_group("training")
    t.add_argument("--stride", type=int, default=12)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--epochs", dest="max_epochs", type=int, default=200)
    t.add_argument("--lr", dest="learning_rate", type=float, default=1e-3)
    t.add_argument("--mask-rate", type=float, default=0.25)
    t.add_argument("--tf-end", dest="tf_end_epoch", type=int, default=30)
    t.add_argument("--patience", type=int, default=10)
    t.add_argument("--clip-norm", type=float, default=None)
    t.add_argument("--scaling", choices=("zscore", "minmax"), default="zscore")
    t.add_argument("--kappa", type=float, default=None, help="adjacency distance threshold (required)")
    t.add_argument("--sigma", type=float, default=None, help="kernel width; default: std of distances")
    t.add_argument("--split", type=float, default=0.7)


def _add_data_args(p):
    p.add_argument("--data", required=False, default=None,
                   help=f"directory holding {SPEED_FILE}, {DIST_FILE}, {META_FILE}")


def build_parser():
    parser = argparse.ArgumentParser(prog="mogernn", description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=None, help="JSON file of defaults; flags override it")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--topology", choices=("ring", "line", "grid"), default="ring")
    g.add_argument("--nodes", type=int, default=20)
    g.add_argument("--days", type=float, default=7.0)
    g.add_argument("--free-speed", type=float, default=65.0)
    g.add_argument("--noise-std", type=float, default=1.0)
    g.add_argument("--episodes-per-day", type=float, default=8.0)
    g.add_argument("--spacing", type=float, default=800.0)
    g.add_argument("--one-way", dest="two_way", action="store_false",
                   help="links carry traffic (and congestion) from lower to higher index only")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=False, default=None)

    t = sub.add_parser("train", help="fit a model on the AAS+FS nodes of the training split")
    _add_data_args(t)
    _add_model_args(t)
    t.add_argument("--roles", type=_int_list, default=None, help="AAS,VS,NAS,FS counts (default: all AAS)")
    t.add_argument("--role-seed", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", default=None)

    e = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    _add_data_args(e)
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--roles", type=_int_list, default=None, help="re-sample roles with these counts")
    e.add_argument("--role-seed", type=int, default=None)
    e.add_argument("--baselines", type=_str_list, default=["knn_ed", "persistence"])
    e.add_argument("--knn-k", type=int, default=2)
    e.add_argument("--eval-stride", type=int, default=None)
    e.add_argument("--dump-predictions", action="store_true")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--out", default=None)

    pr = sub.add_parser("predict", help="forecast from the last history window of a speed file")
    pr.add_argument("--checkpoint", default=None)
    pr.add_argument("--speed", default=None, help="speed CSV; the last P rows are used")
    pr.add_argument("--distances", default=None)
    pr.add_argument("--virtual", type=_str_list, default=[], help="extra sensor ids without data")
    pr.add_argument("--zero-is-missing", action="store_true")
    pr.add_argument("--seed", type=int, default=None)
    pr.add_argument("--out", default=None)

    s = sub.add_parser("sweep", help="vary the number of virtual sensors")
    _add_data_args(s)
    _add_model_args(s)
    s.add_argument("--vs-counts", type=_int_list, default=None)
    s.add_argument("--aas-counts", type=_int_list, default=None, help="default: all remaining nodes")
    s.add_argument("--role-seed", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", default=None)
    return parser


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        cfg = cfg.get("config", cfg)
        cfg.pop("command", None)
        # re-parse with file values as defaults so explicit flags still win
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        sub.set_defaults(**{k: v for k, v in cfg.items() if k in known})
        args = parser.parse_args(argv)
    if args.seed is None:
        args.seed = _env_seed()
    if getattr(args, "role_seed", "absent") is None:
        args.role_seed = args.seed
    return args


def resolved_config(args):
    # output locations do not influence results, so they stay out of the record
    cfg = {k: v for k, v in vars(args).items() if k not in ("config", "verbose", "out")}
    return json.loads(json.dumps(cfg))


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) in (None, [])]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}")
    return out


def _load_bundle(data_dir):
    d = Path(data_dir)
    for name in (SPEED_FILE, DIST_FILE, META_FILE):
        if not (d / name).exists():
            raise DataError(f"{d / name} not found")
    meta = load_metadata(d / META_FILE)
    ds = load_speed_matrix(d / SPEED_FILE, zero_is_missing=meta["zero_is_missing"], units=meta["units"])
    if ds.length > 1 and abs(ds.frequency - float(meta["frequency_min"])) > 1e-9:
        raise DataError(f"speed file samples every {ds.frequency} min, metadata says {meta['frequency_min']}")
    dist = load_distances(d / DIST_FILE, ds.sensor_ids)
    return ds, dist, meta


# -- commands --------------------------------------------------------------------


def cmd_generate(args):
    _require(args, "out")
    spec = SyntheticSpec(topology=args.topology, n_nodes=args.nodes, days=args.days,
                         free_speed=args.free_speed, noise_std=args.noise_std,
                         episodes_per_day=args.episodes_per_day, spacing_m=args.spacing,
                         two_way=args.two_way, seed=args.seed)
    ds, graph = generate_synthetic(spec)
    out = _out_dir(args.out)
    save_speed_matrix(out / SPEED_FILE, ds)
    save_distances(out / DIST_FILE, graph.distances, ds.sensor_ids)
    save_metadata(out / META_FILE, spec.frequency_min, ds.units, False,
                  config=resolved_config(args), synthetic=spec.to_dict())
    return EXIT_OK


def _model_from_args(args):
    return MoGERNN(history=args.history, horizon=args.horizon, hidden=args.hidden, top_k=args.top_k,
                   diffusion_steps=args.diffusion_steps, experts=tuple(args.experts),
                   gating=args.gating, gru_aggregator=args.gru_aggregator,
                   transpose_diffusion=args.transpose_diffusion, use_moge=args.use_moge,
                   stride=args.stride, batch_size=args.batch_size, max_epochs=args.max_epochs,
                   learning_rate=args.learning_rate, mask_rate=args.mask_rate,
                   tf_end_epoch=args.tf_end_epoch, patience=args.patience, clip_norm=args.clip_norm,
                   scaling=args.scaling,
                   random_state=args.seed)


def _check_model_args(args):
    bad = set(args.experts) - set(KINDS)
    if bad:
        raise UsageError(f"unknown experts {sorted(bad)}; choose from {', '.join(KINDS)}")
    if not 0 < args.split < 1:
        raise UsageError("--split must lie in (0, 1)")
    if not 0 < args.mask_rate < 1:
        raise UsageError("--mask-rate must lie in (0, 1)")


def _roles_for(args, n):
    counts = args.roles if args.roles is not None else [n, 0, 0, 0]
    if len(counts) != 4:
        raise UsageError("--roles needs four counts: AAS,VS,NAS,FS")
    if sum(counts) != n:
        raise UsageError(f"--roles counts sum to {sum(counts)}, dataset has {n} sensors")
    return assign_roles(n, counts, args.role_seed)


def _fit(args, ds, dist, roles, log_path=None, config=None):
    sigma = args.sigma if args.sigma is not None else default_sigma(dist)
    graph = SensorGraph.from_distances(dist, args.kappa, sigma, sensor_ids=ds.sensor_ids)
    train, _ = split_train_test(ds, args.split)
    nodes = roles.train_nodes
    if nodes.size == 0:
        raise UsageError("no training nodes (AAS + FS) in the role assignment")
    model = _model_from_args(args)
    fh = open(log_path, "w") if log_path else None
    try:
        if fh:
            fh.write(json.dumps({"type": "config", "config": config}, sort_keys=True) + "\n")

        def on_epoch(entry):
            log.info("epoch %(epoch)d tf=%(tf_rate).3f train=%(train_loss).5f val=%(val_loss).5f", entry)
            if fh:
                fh.write(json.dumps(dict(entry, type="epoch"), sort_keys=True) + "\n")

        model.fit(train.series[nodes], graph.adjacency[np.ix_(nodes, nodes)],
                  valid=train.valid[nodes], callback=on_epoch)
    finally:
        if fh:
            fh.close()
    return model, graph


def cmd_train(args):
    _require(args, "data", "kappa", "out")
    _check_model_args(args)
    ds, dist, meta = _load_bundle(args.data)
    roles = _roles_for(args, ds.n_nodes)
    out = _out_dir(args.out)
    config = resolved_config(args)
    model, graph = _fit(args, ds, dist, roles, out / "train_log.jsonl", config)
    model.save(out / "checkpoint.json", extra={
        "config": config,
        "sigma": graph.sigma,
        "kappa": graph.kappa,
        "split": args.split,
        "sensor_ids": list(ds.sensor_ids),
        "roles": roles.to_dict(),
        "frequency_min": ds.frequency,
    })
    return EXIT_OK


def _load_checkpoint(path):
    if path is None or not Path(path).exists():
        raise DataError(f"checkpoint {path} not found")
    try:
        return MoGERNN.load(path)
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"unreadable checkpoint {path}: {exc}")


def cmd_evaluate(args):
    _require(args, "data", "checkpoint", "out")
    model = _load_checkpoint(args.checkpoint)
    extra = model.checkpoint_extra_
    ds, dist, meta = _load_bundle(args.data)
    if extra.get("sensor_ids") and list(extra["sensor_ids"]) != list(ds.sensor_ids):
        raise DataError("dataset sensors do not match the ones the checkpoint was trained with")
    if args.roles is not None:
        roles = _roles_for(args, ds.n_nodes)
    elif "roles" in extra:
        roles = RoleAssignment.from_dict(extra["roles"])
    else:
        roles = assign_roles(ds.n_nodes, (ds.n_nodes, 0, 0, 0), args.role_seed)
    if roles.n_nodes != ds.n_nodes:
        raise DataError(f"role assignment covers {roles.n_nodes} nodes, dataset has {ds.n_nodes}")
    bad = set(args.baselines) - {"knn_ed", "persistence"}
    if bad:
        raise UsageError(f"unknown baselines {sorted(bad)}")
    graph = SensorGraph.from_distances(dist, extra.get("kappa"), extra.get("sigma"), sensor_ids=ds.sensor_ids)
    _, test = split_train_test(ds, extra.get("split", 0.7))
    stride = args.eval_stride or model.stride
    freq = ds.frequency or 5.0
    report, dump = run_dynamic_scenario(model, test.series, test.valid, graph.adjacency, roles, stride, freq)
    observed = roles.test_observed
    groups = roles.groups()
    reports = {"mogernn": report}
    if "knn_ed" in args.baselines:
        reports["knn_ed"], _ = baseline_knn_ed(model, test.series, test.valid, dist, graph.adjacency,
                                               observed, groups, args.knn_k, stride, freq)
    if "persistence" in args.baselines:
        reports["persistence"], _ = baseline_persistence(test.series, test.valid, dist, observed, groups,
                                                         model.history, model.horizon, stride,
                                                         args.knn_k, freq)
    d_v2a = vs_to_aas_distance(roles, dist) if roles.nodes("VS").size and roles.nodes("AAS").size else None
    out = _out_dir(args.out)
    for name, rep in reports.items():
        rep.write_csv(out / ("report.csv" if name == "mogernn" else f"report_{name}.csv"))
    _write_json(out / "report.json", {
        "config": resolved_config(args),
        "checkpoint_config": extra.get("config"),
        "roles": roles.to_dict(),
        "d_v2a": d_v2a,
        "models": {k: v.rows for k, v in reports.items()},
    })
    if args.dump_predictions:
        _dump_predictions(out / "predictions.csv", dump, ds.sensor_ids, roles)
    return EXIT_OK


def _dump_predictions(path, dump, sensor_ids, roles):
    pred, target, valid = dump["pred"], dump["target"], dump["valid"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window", "sensor_id", "role", "step", "prediction", "target", "valid"])
        for b in range(pred.shape[0]):
            for i, sid in enumerate(sensor_ids):
                for t in range(pred.shape[2]):
                    w.writerow([b, sid, roles.roles[i], t + 1, repr(float(pred[b, i, t])),
                                repr(float(target[b, i, t])), int(valid[b, i, t])])


def cmd_predict(args):
    _require(args, "checkpoint", "speed", "distances", "out")
    model = _load_checkpoint(args.checkpoint)
    extra = model.checkpoint_extra_
    ds = load_speed_matrix(args.speed, zero_is_missing=args.zero_is_missing)
    if ds.length < model.history:
        raise DataError(f"speed file has {ds.length} rows, the model needs a window of {model.history}")
    overlap = set(args.virtual) & set(ds.sensor_ids)
    if overlap:
        raise UsageError(f"virtual ids also present in the speed file: {sorted(overlap)}")
    ids = list(ds.sensor_ids) + list(args.virtual)
    dist = load_distances(args.distances, ids)
    graph = SensorGraph.from_distances(dist, extra.get("kappa"), extra.get("sigma"), sensor_ids=ids)
    n_obs = ds.n_nodes
    window = np.zeros((len(ids), model.history))
    valid = np.zeros_like(window, dtype=bool)
    window[:n_obs] = ds.series[:, -model.history:]
    valid[:n_obs] = ds.valid[:, -model.history:]
    observed = np.arange(len(ids)) < n_obs
    pred = model.predict(window, graph.adjacency, observed=observed, valid=valid)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        _out_dir(out.parent)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sensor_id", "step", "prediction", "observed"])
        for i, sid in enumerate(ids):
            for t in range(model.horizon):
                w.writerow([sid, t + 1, repr(float(pred[i, t])), int(observed[i])])
    _write_json(out.with_suffix(".json"), {"config": resolved_config(args), "n_rows": len(ids) * model.horizon})
    return EXIT_OK


def cmd_sweep(args):
    _require(args, "data", "kappa", "out", "vs_counts")
    _check_model_args(args)
    ds, dist, meta = _load_bundle(args.data)
    n = ds.n_nodes
    aas_counts = args.aas_counts or [n - v for v in args.vs_counts]
    if len(aas_counts) != len(args.vs_counts):
        raise UsageError("--aas-counts must match --vs-counts in length")
    out = _out_dir(args.out)
    rows = []
    for vs, aas in zip(args.vs_counts, aas_counts):
        if vs < 1 or aas < 1 or vs + aas > n:
            raise UsageError(f"invalid VS/AAS pair ({vs}, {aas}) for {n} sensors")
        keep = assign_roles(n, (aas, vs, 0, n - vs - aas), args.role_seed)
        # nodes beyond aas + vs take no part in this point of the sweep
        nodes = keep.nodes("AAS", "VS")
        sub_roles = RoleAssignment(keep.roles[nodes], args.role_seed)
        sub = ds.select(nodes)
        model, graph = _fit(args, sub, dist[np.ix_(nodes, nodes)], sub_roles)
        _, test = split_train_test(sub, args.split)
        report, _ = run_dynamic_scenario(model, test.series, test.valid, graph.adjacency, sub_roles,
                                         None, sub.frequency or 5.0)
        vs_row = report.get("VS")
        rows.append({"vs": vs, "aas": aas, "d_v2a": vs_to_aas_distance(sub_roles, graph.distances),
                     "mape": vs_row["mape"], "mae": vs_row["mae"], "rmse": vs_row["rmse"]})
        log.info("sweep vs=%d aas=%d mae=%.4f", vs, aas, vs_row["mae"])
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["vs", "aas", "d_v2a", "mape", "mae", "rmse"])
        for r in rows:
            w.writerow([r["vs"], r["aas"], repr(r["d_v2a"]), repr(r["mape"]), repr(r["mae"]), repr(r["rmse"])])
    _write_json(out / "sweep.json", {"config": resolved_config(args), "rows": rows})
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "sweep": cmd_sweep,
}


def main(argv=None):
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"mogernn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"mogernn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"mogernn {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, EmptyDatasetError, FileNotFoundError, ValueError) as exc:
        print(f"mogernn {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
