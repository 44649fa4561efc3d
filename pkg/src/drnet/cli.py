"""Command-line pipeline driver.

Subcommands: generate, di, preclassify, run, ablate, sweep, predict,
evaluate, validate-table.  Every value is resolved as CLI flag > config
file (``key=value`` lines, ``#`` comments) > built-in default, and the
resolved values are echoed to a manifest file next to the outputs.  All
randomness derives from one ``--seed`` fanned out to named substreams.

Exit codes: 0 success, 2 usage, 3 data/parse, 4 config, 5 numeric/training.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from importlib import resources

import numpy as np

from . import difference, network, pgm, pipeline, synth
from .errors import ConfigError, DataFormatError, DrnetError
from .tensor import STREAM_DATA, STREAM_PRECLASS, STREAM_SAMPLING, STREAM_WEIGHTS, Rng

_UNCERTAIN_GRAY = 128

_TYPES = {
    "seed": int,
    "size": int,
    "height": int,
    "width": int,
    "change_fraction": float,
    "looks": float,
    "contrast": float,
    "operator": str,
    "fraction": float,
    "conv": str,
    "pool": str,
    "s": int,
    "epochs": int,
    "batch": int,
    "lr": float,
    "momentum": float,
    "patch_size": int,
    "balance": lambda v: v in ("1", "true", "yes"),
    "labels_from_truth": lambda v: v in ("1", "true", "yes"),
    "nt": int,
    "which": str,
    "dataset": str,
}

_TRAIN_DEFAULTS = {
    "seed": 0,
    "operator": "log-ratio",
    "fraction": 0.06,
    "conv": "deformable",
    "pool": "residual",
    "s": 4,
    "epochs": 50,
    "batch": 128,
    "lr": 1e-3,
    "momentum": 0.9,
    "patch_size": 9,
    "balance": True,
    "labels_from_truth": False,
    "dataset": "synthetic",
}

DEFAULTS = {
    "generate": {
        "seed": 0,
        "size": 256,
        "height": None,
        "width": None,
        "change_fraction": 0.05,
        "looks": 4.0,
        "contrast": 2.0,
    },
    "di": {"seed": 0, "operator": "log-ratio"},
    "preclassify": {"seed": 0},
    "run": dict(_TRAIN_DEFAULTS),
    "ablate": dict(_TRAIN_DEFAULTS),
    "sweep": dict(_TRAIN_DEFAULTS, which="samples"),
    "predict": {"seed": 0},
    "evaluate": {"dataset": "synthetic"},
    "validate-table": {"nt": 65536},
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drnet",
        description="Change detection on speckled image pairs with a "
        "deformable residual network.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(cmd, help_text):
        p = sub.add_parser(cmd, help=help_text)
        p.add_argument("--config", help="key=value config file ('#' comments)")
        p.add_argument("--out-dir", default=None, help="output directory")
        return p

    g = add("generate", "synthesise a speckled pair and ground-truth mask")
    g.add_argument("--seed", type=int)
    g.add_argument("--size", type=int, help="square extent shorthand")
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--change-fraction", type=float, dest="change_fraction")
    g.add_argument("--looks", type=float)
    g.add_argument("--contrast", type=float)

    d = add("di", "compute a difference image from a pair")
    d.add_argument("--i1", required=True)
    d.add_argument("--i2", required=True)
    d.add_argument("--operator", choices=["log-ratio", "mean-ratio"])
    d.add_argument("--out", default="di.pgm")

    pc = add("preclassify", "cluster a difference image into labels")
    pc.add_argument("--di", required=True)
    pc.add_argument("--seed", type=int)
    pc.add_argument("--out", default="labels.pgm")

    def add_train_flags(p, with_variant=True):
        p.add_argument("--i1", required=True)
        p.add_argument("--i2", required=True)
        p.add_argument("--truth", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--operator", choices=["log-ratio", "mean-ratio"])
        p.add_argument("--fraction", type=float)
        if with_variant:
            p.add_argument("--conv", choices=list(network.CONV_TYPES))
            p.add_argument("--pool", choices=list(network.POOL_TYPES))
        p.add_argument("--s", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--momentum", type=float)
        p.add_argument("--patch-size", type=int, dest="patch_size")
        p.add_argument("--labels-from-truth", action="store_const", const=True,
                       default=None, dest="labels_from_truth")
        p.add_argument("--no-balance", action="store_const", const=False,
                       default=None, dest="balance")
        p.add_argument("--dataset", help="dataset tag for metric rows")

    r = add("run", "train one variant and write change map + metrics")
    add_train_flags(r)
    r.add_argument("--save-model", dest="save_model", default=None)

    a = add("ablate", "run all six variants on one pair")
    add_train_flags(a, with_variant=False)

    w = add("sweep", "sweep the sample fraction or the subset count")
    add_train_flags(w)
    w.add_argument("--which", choices=["samples", "s"])

    pr = add("predict", "apply a saved model to a pair")
    pr.add_argument("--model", required=True)
    pr.add_argument("--i1", required=True)
    pr.add_argument("--i2", required=True)
    pr.add_argument("--out", default="map.pgm")

    ev = add("evaluate", "score a predicted map against ground truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--dataset")
    ev.add_argument("--variant", default="external")
    ev.add_argument("--out", default=None, help="optional metrics CSV path")

    vt = add("validate-table", "consistency-check published metric rows")
    vt.add_argument("--csv", default=None, help="rows CSV (default: bundled fixture)")
    vt.add_argument("--nt", type=int)

    return parser


def _parse_config_file(path: str) -> dict:
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                text = line.split("#", 1)[0].strip()
                if not text:
                    continue
                if "=" not in text:
                    raise ConfigError(
                        f"{path}:{lineno}: expected key=value, got {text!r}"
                    )
                key, raw = (part.strip() for part in text.split("=", 1))
                key = key.replace("-", "_")
                if key not in _TYPES:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                try:
                    values[key] = _TYPES[key](raw)
                except ValueError as exc:
                    raise ConfigError(
                        f"{path}:{lineno}: bad value for {key}: {raw!r}"
                    ) from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return values


def _resolve(args: argparse.Namespace) -> dict:
    cmd = args.command
    resolved = dict(DEFAULTS.get(cmd, {}))
    if getattr(args, "config", None):
        file_values = _parse_config_file(args.config)
        for key, value in file_values.items():
            if key in resolved:
                resolved[key] = value
            else:
                raise ConfigError(f"key {key!r} does not apply to '{cmd}'")
    for key in list(resolved) + ["out_dir"]:
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            resolved[key] = cli_value
    resolved.setdefault("out_dir", ".")
    if resolved.get("out_dir") is None:
        resolved["out_dir"] = "."
    # passthrough flags that have no config-file equivalent
    for key in ("i1", "i2", "truth", "di", "model", "pred", "out", "save_model",
                "csv", "variant", "which"):
        if hasattr(args, key) and getattr(args, key) is not None:
            resolved[key] = getattr(args, key)
    return resolved


def _write_manifest(cfg: dict, cmd: str) -> None:
    lines = [f"command={cmd}"]
    for key in sorted(cfg):
        lines.append(f"{key}={cfg[key]}")
    path = os.path.join(cfg["out_dir"], f"{cmd.replace('-', '_')}_manifest.txt")
    pgm.atomic_write_text(path, "\n".join(lines) + "\n")


def _read_mask(path) -> np.ndarray:
    img = pgm.read_pgm(path)
    return (img > 0).astype(np.uint8)


def _load_pair(cfg: dict) -> synth.ImagePair:
    i1 = pgm.read_pgm(cfg["i1"])
    i2 = pgm.read_pgm(cfg["i2"])
    return synth.ImagePair(i1, i2)


def _difference(cfg: dict, pair: synth.ImagePair) -> difference.DifferenceImage:
    if cfg["operator"] == "mean-ratio":
        return difference.mean_ratio(pair.i1, pair.i2)
    return difference.log_ratio(pair.i1, pair.i2)


def _label_field(cfg: dict, pair: synth.ImagePair, truth: np.ndarray):
    if cfg["labels_from_truth"]:
        return difference.labels_from_truth(truth), "truth"
    di = _difference(cfg, pair)
    field = difference.fcm_preclassify(di, rng=Rng(cfg["seed"], STREAM_PRECLASS))
    return field, "preclassified"


def _network_config(cfg: dict, conv: str | None = None, pool: str | None = None,
                    s: int | None = None) -> network.NetworkConfig:
    return network.NetworkConfig(
        patch_size=cfg["patch_size"],
        conv_type=conv if conv is not None else cfg["conv"],
        pool_type=pool if pool is not None else cfg["pool"],
        s=s if s is not None else cfg["s"],
    )


def _train_and_score(cfg: dict, pair, truth, coords, labels,
                     net_config) -> tuple[pipeline.MetricsReport, np.ndarray, object]:
    patchset = synth.extract_patches(pair, coords, cfg["patch_size"], labels)
    net = network.build(net_config, Rng(cfg["seed"], STREAM_WEIGHTS))
    net, trace = pipeline.train(
        net,
        patchset,
        epochs=cfg["epochs"],
        batch_size=cfg["batch"],
        lr=cfg["lr"],
        momentum=cfg["momentum"],
        seed=cfg["seed"],
    )
    pred = pipeline.predict_map(net, pair)
    report = pipeline.evaluate(pred, truth)
    return report, pred, (net, trace)


def _variant_tag(conv: str, pool: str) -> str:
    for row, combo in network.VARIANTS.items():
        if combo == (conv, pool):
            return str(row)
    return f"{conv}+{pool}"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(cfg: dict) -> int:
    height = cfg["height"] if cfg["height"] is not None else cfg["size"]
    width = cfg["width"] if cfg["width"] is not None else cfg["size"]
    rng = Rng(cfg["seed"], STREAM_DATA)
    pair, mask = synth.generate_pair(
        height, width, cfg["change_fraction"], cfg["looks"], cfg["contrast"], rng
    )
    scale = 65535.0 / max(pair.i1.max(), pair.i2.max())
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    pgm.write_pgm(pair.i1 * scale, os.path.join(out, "i1.pgm"), maxval=65535)
    pgm.write_pgm(pair.i2 * scale, os.path.join(out, "i2.pgm"), maxval=65535)
    pgm.write_pgm(mask * 255.0, os.path.join(out, "truth.pgm"), maxval=255)
    _write_manifest(cfg, "generate")
    print(f"wrote i1.pgm, i2.pgm, truth.pgm to {out} "
          f"(mask fraction {mask.mean():.4f})")
    return 0


def cmd_di(cfg: dict) -> int:
    pair = _load_pair(cfg)
    di = _difference(cfg, pair)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    out_path = os.path.join(cfg["out_dir"], cfg["out"])
    pgm.write_pgm(di.values * 65535.0, out_path, maxval=65535)
    _write_manifest(cfg, "di")
    print(f"wrote {out_path} ({di.operator})")
    return 0


def cmd_preclassify(cfg: dict) -> int:
    img = pgm.read_pgm(cfg["di"])
    maxval = img.max()
    di = difference.DifferenceImage(img / maxval if maxval > 0 else img, "file")
    field = difference.fcm_preclassify(di, rng=Rng(cfg["seed"], STREAM_PRECLASS))
    encoded = np.where(
        field.labels == difference.CHANGED,
        255,
        np.where(field.labels == difference.UNCERTAIN, _UNCERTAIN_GRAY, 0),
    )
    os.makedirs(cfg["out_dir"], exist_ok=True)
    out_path = os.path.join(cfg["out_dir"], cfg["out"])
    pgm.write_pgm(encoded.astype(np.float64), out_path, maxval=255)
    _write_manifest(cfg, "preclassify")
    counts = {
        "unchanged": int((field.labels == difference.UNCHANGED).sum()),
        "changed": int((field.labels == difference.CHANGED).sum()),
        "uncertain": int((field.labels == difference.UNCERTAIN).sum()),
    }
    print(f"wrote {out_path} {counts}")
    return 0


def cmd_run(cfg: dict) -> int:
    pair = _load_pair(cfg)
    truth = _read_mask(cfg["truth"])
    field, label_source = _label_field(cfg, pair, truth)
    coords, labels = difference.select_samples(
        field, cfg["fraction"], Rng(cfg["seed"], STREAM_SAMPLING), cfg["balance"]
    )
    net_config = _network_config(cfg)
    report, pred, (net, trace) = _train_and_score(
        cfg, pair, truth, coords, labels, net_config
    )
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    pgm.write_pgm(pred.astype(np.float64) * 255.0, os.path.join(out, "map.pgm"),
                  maxval=255)
    tag = _variant_tag(net_config.conv_type, net_config.pool_type)
    lines = ["dataset,variant,FP,FN,OE,PCC", report.csv_row(cfg["dataset"], tag)]
    pgm.atomic_write_text(os.path.join(out, "metrics.csv"), "\n".join(lines) + "\n")
    trace_lines = ["epoch,loss"] + [
        f"{i},{loss:.9g}" for i, loss in enumerate(trace)
    ]
    pgm.atomic_write_text(os.path.join(out, "loss_trace.csv"),
                          "\n".join(trace_lines) + "\n")
    if cfg.get("save_model"):
        network.save(net, cfg["save_model"])
    cfg_echo = dict(cfg)
    cfg_echo["label_source"] = label_source
    _write_manifest(cfg_echo, "run")
    print(f"variant {tag} [{label_source} labels]: {report}")
    return 0


def cmd_ablate(cfg: dict) -> int:
    pair = _load_pair(cfg)
    truth = _read_mask(cfg["truth"])
    field, label_source = _label_field(cfg, pair, truth)
    coords, labels = difference.select_samples(
        field, cfg["fraction"], Rng(cfg["seed"], STREAM_SAMPLING), cfg["balance"]
    )
    rows = ["variant,FP,FN,OE,PCC"]
    for row in sorted(network.VARIANTS):
        conv, pool = network.VARIANTS[row]
        try:
            net_config = _network_config(cfg, conv=conv, pool=pool)
            report, _, _ = _train_and_score(
                cfg, pair, truth, coords, labels, net_config
            )
            rows.append(f"{row},{report.fp},{report.fn},{report.oe},"
                        f"{pipeline.format_pcc(report.pcc)}")
            print(f"variant {row} ({conv}+{pool}): {report}")
        except DrnetError as exc:
            rows.append(f"{row},error:{type(exc).__name__},,,")
            print(f"variant {row} ({conv}+{pool}): failed: {exc}", file=sys.stderr)
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    pgm.atomic_write_text(os.path.join(out, "ablation.csv"), "\n".join(rows) + "\n")
    cfg_echo = dict(cfg)
    cfg_echo["label_source"] = label_source
    _write_manifest(cfg_echo, "ablate")
    return 0


def cmd_sweep(cfg: dict) -> int:
    pair = _load_pair(cfg)
    truth = _read_mask(cfg["truth"])
    field, label_source = _label_field(cfg, pair, truth)
    rows = ["value,FP,FN,OE,PCC"]
    if cfg["which"] == "samples":
        grid = [0.02, 0.04, 0.06, 0.08, 0.10]
        for fraction in grid:
            coords, labels = difference.select_samples(
                field, fraction, Rng(cfg["seed"], STREAM_SAMPLING), cfg["balance"]
            )
            net_config = _network_config(cfg)
            report, _, _ = _train_and_score(
                cfg, pair, truth, coords, labels, net_config
            )
            rows.append(f"{fraction:.2f},{report.fp},{report.fn},{report.oe},"
                        f"{pipeline.format_pcc(report.pcc)}")
            print(f"fraction {fraction:.2f}: {report}")
    else:
        coords, labels = difference.select_samples(
            field, cfg["fraction"], Rng(cfg["seed"], STREAM_SAMPLING), cfg["balance"]
        )
        for s in (1, 2, 3, 4, 5):
            try:
                net_config = _network_config(cfg, pool="residual", s=s)
            except ConfigError:
                rows.append(f"{s},skip,,,")
                print(f"s={s}: skipped (channel counts not divisible)")
                continue
            report, _, _ = _train_and_score(
                cfg, pair, truth, coords, labels, net_config
            )
            rows.append(f"{s},{report.fp},{report.fn},{report.oe},"
                        f"{pipeline.format_pcc(report.pcc)}")
            print(f"s={s}: {report}")
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    pgm.atomic_write_text(os.path.join(out, "sweep.csv"), "\n".join(rows) + "\n")
    cfg_echo = dict(cfg)
    cfg_echo["label_source"] = label_source
    _write_manifest(cfg_echo, "sweep")
    return 0


def cmd_predict(cfg: dict) -> int:
    net = network.load(cfg["model"])
    pair = _load_pair(cfg)
    pred = pipeline.predict_map(net, pair)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    out_path = os.path.join(cfg["out_dir"], cfg["out"])
    pgm.write_pgm(pred.astype(np.float64) * 255.0, out_path, maxval=255)
    _write_manifest(cfg, "predict")
    print(f"wrote {out_path} (changed fraction {pred.mean():.4f})")
    return 0


def cmd_evaluate(cfg: dict) -> int:
    pred = _read_mask(cfg["pred"])
    truth = _read_mask(cfg["truth"])
    report = pipeline.evaluate(pred, truth)
    print(report)
    if cfg.get("out"):
        lines = [
            "dataset,variant,FP,FN,OE,PCC",
            report.csv_row(cfg["dataset"], cfg.get("variant", "external")),
        ]
        pgm.atomic_write_text(cfg["out"], "\n".join(lines) + "\n")
    return 0


def _read_results_csv(text: str, source: str):
    rows = []
    labels = []
    reader = csv.reader(io.StringIO(text))
    for lineno, row in enumerate(reader, 1):
        if lineno == 1 and row and row[0].strip().lower() == "dataset":
            continue
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 6:
            raise DataFormatError(f"{source}: line {lineno}: expected 6 fields, "
                                  f"got {len(row)}")
        try:
            fp, fn, oe = (int(cell) for cell in row[2:5])
            pcc = float(row[5])
        except ValueError as exc:
            raise DataFormatError(
                f"{source}: line {lineno}: non-numeric field ({exc})"
            ) from exc
        labels.append((row[0].strip(), row[1].strip()))
        rows.append((fp, fn, oe, pcc))
    return labels, rows


def cmd_validate_table(cfg: dict) -> int:
    if cfg.get("csv"):
        source = cfg["csv"]
        with open(source, "r", encoding="utf-8") as f:
            text = f.read()
    else:
        source = "bundled reference_results.csv"
        text = (
            resources.files("drnet.fixtures")
            .joinpath("reference_results.csv")
            .read_text(encoding="utf-8")
        )
    labels, rows = _read_results_csv(text, source)
    checks = pipeline.validate_table(rows, cfg["nt"])
    flagged = 0
    for (dataset, method), row, check in zip(labels, rows, checks):
        if check.ok:
            continue
        flagged += 1
        problems = []
        if not check.oe_consistent:
            problems.append(
                f"OE {row[2]} != FP {row[0]} + FN {row[1]} (= {row[0] + row[1]})"
            )
        if not check.pcc_consistent:
            expected = (1.0 - row[2] / cfg["nt"]) * 100.0
            problems.append(f"PCC {row[3]} != {expected:.4f}")
        print(f"FLAG {dataset}/{method}: {'; '.join(problems)}")
    print(f"checked {len(rows)} rows with Nt={cfg['nt']}: {flagged} flagged")
    return 0


_COMMANDS = {
    "generate": cmd_generate,
    "di": cmd_di,
    "preclassify": cmd_preclassify,
    "run": cmd_run,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "validate-table": cmd_validate_table,
}


def _origin_module(exc: BaseException) -> str:
    name = "drnet"
    tb = exc.__traceback__
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("drnet."):
            name = mod.rsplit(".", 1)[1]
        tb = tb.tb_next
    return name


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _resolve(args)
        return _COMMANDS[args.command](cfg)
    except DrnetError as exc:
        print(f"error[{_origin_module(exc)}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
