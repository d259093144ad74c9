"""Command-line front end.

Subcommands: ``gradcheck``, ``ssr-scan``, ``train``, ``eval`` and
``render-attention``. Exit status is 0 on success, 1 on a runtime or
validation failure and 2 on a usage error (bad flags, a missing or
malformed config file).

Configuration files are INI text with ``[data]``, ``[model]`` and
``[train]`` sections; flags given on the command line win over the file.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import gradsuite
from .ssr import PhiKind, ssr_gradient_scan, write_scan_csv
from .toy.checkpoint import CheckpointError, load_checkpoint
from .toy.config import ToyConfig
from .toy.data import gen_dataset
from .toy.train import METRICS_HEADER, MetricsRow, TrainingError, evaluate, model_from_checkpoint, train

log = logging.getLogger("afa_ssr")

SECTIONS: Dict[str, List[str]] = {
    "data": ["image_size", "num_classes", "min_shapes", "max_shapes", "noise", "train_size", "val_size"],
    "model": ["fusion", "widths", "scales", "phi", "attn_mid", "reduction", "attn_out_scale"],
    "train": ["seed", "epochs", "lr", "momentum", "batch_size"],
}
_TYPES = {"noise": float, "lr": float, "momentum": float, "attn_out_scale": float, "fusion": str, "phi": str}


class UsageError(Exception):
    """Bad invocation: exit status 2."""


class RuntimeFailure(Exception):
    """The command ran but failed: exit status 1."""


# -- configuration ----------------------------------------------------------


def _convert(key: str, text: str):
    text = text.strip()
    if key == "widths":
        return tuple(int(v) for v in text.replace(",", " ").split())
    if key == "scales":
        return tuple(float(v) for v in text.replace(",", " ").split())
    kind = _TYPES.get(key, int)
    return kind(text)


def _section_of(key: str) -> Optional[str]:
    for section, keys in SECTIONS.items():
        if key in keys:
            return section
    return None


def _valid_keys() -> str:
    return "; ".join(f"[{s}] " + ", ".join(k) for s, k in SECTIONS.items())


def parse_config_text(text: str, source: str = "<config>") -> dict:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise UsageError(f"cannot parse {source}: {exc}") from exc
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise UsageError(f"{source}: unknown section [{section}]; valid keys are {_valid_keys()}")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise UsageError(f"{source}: unknown key {key!r} in [{section}]; valid keys are {_valid_keys()}")
            try:
                values[key] = _convert(key, raw)
            except ValueError as exc:
                raise UsageError(f"{source}: bad value for {key}: {raw!r}") from exc
    return values


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def parse_overrides(pairs: List[str]) -> dict:
    out = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        key = key.strip().split(".")[-1]
        if not sep or _section_of(key) is None:
            raise UsageError(f"bad override {pair!r}; expected key=value with a key from {_valid_keys()}")
        try:
            out[key] = _convert(key, value)
        except ValueError as exc:
            raise UsageError(f"bad value in override {pair!r}") from exc
    return out


def build_config(values: dict) -> ToyConfig:
    try:
        return ToyConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def config_to_ini(config: ToyConfig) -> str:
    d = config.to_dict()
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = d[key]
            if isinstance(value, list):
                value = ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def _resolve(args) -> ToyConfig:
    values = load_config(args.config) if args.config else {}
    values.update(parse_overrides(args.set))
    for key in ("seed", "epochs", "fusion", "lr", "phi"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    config = build_config(values)
    for line in config_to_ini(config).splitlines():
        if line:
            log.info("config %s", line)
    return config


# -- argument types ---------------------------------------------------------------


def grid_range(text: str) -> np.ndarray:
    """``a:b:n`` -> ``n`` evenly spaced values from ``a`` to ``b`` inclusive."""
    parts = text.split(":")
    try:
        if len(parts) != 3:
            raise ValueError
        a, b, n = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a:b:n, got {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError(f"point count must be at least 1, got {n}")
    return np.linspace(a, b, n)


def phi_list(text: str) -> List[PhiKind]:
    try:
        return [PhiKind.parse(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


# -- PGM --------------------------------------------------------------------


def to_pgm(values: np.ndarray) -> bytes:
    """Binary 8-bit PGM; values in [0, 1] map linearly onto 0..255, rounded half up."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"PGM needs a 2-D map, got shape {v.shape}")
    h, w = v.shape
    pix = np.floor(np.clip(v, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def read_pgm(blob: bytes) -> np.ndarray:
    parts = blob.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError("not an 8-bit binary PGM")
    w, h = (int(x) for x in parts[1].split())
    pix = parts[3]
    if len(pix) != w * h:
        raise ValueError(f"PGM body has {len(pix)} bytes, expected {w * h}")
    return np.frombuffer(pix, dtype=np.uint8).reshape(h, w)


# -- commands ---------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    failures = 0
    print(f"{'case':<32} {'max rel err':>12}  result")
    for name, report in gradsuite.run_suite(args.module, args.seed, eps=args.eps, tol=args.tol):
        ok = report.passed
        failures += not ok
        print(f"{name:<32} {report.max_rel_error:>12.3e}  {'ok' if ok else 'FAIL'}")
        if not ok:
            print(str(report))
    print(f"{args.module}: {'all passed' if not failures else f'{failures} failed'} in {time.perf_counter() - start:.2f}s")
    return 0 if failures == 0 else 1


def cmd_ssr_scan(args) -> int:
    rows = ssr_gradient_scan(args.phi, args.y1_range, args.y2_range)
    if args.out is None or args.out == "-":
        write_scan_csv(rows, sys.stdout)
        return 0
    try:
        with open(args.out, "w", newline="") as fh:
            write_scan_csv(rows, fh)
    except OSError as exc:
        raise RuntimeFailure(f"cannot write {args.out}: {exc}") from exc
    log.info("wrote %d rows to %s", len(rows), args.out)
    return 0


def cmd_train(args) -> int:
    config = _resolve(args)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(config_to_ini(config))
    except OSError as exc:
        raise RuntimeFailure(f"cannot write to {out}: {exc}") from exc
    try:
        result = train(config, out_dir=out)
    except TrainingError as exc:
        raise RuntimeFailure(str(exc)) from exc
    final = result.rows[-1]
    print(f"epoch {final.epoch} val loss={final.loss!r} miou={final.miou!r} f1={final.f1!r}")
    return 0


def _load_model(args):
    ckpt_path = Path(args.checkpoint)
    try:
        ckpt = load_checkpoint(ckpt_path)
    except CheckpointError as exc:
        raise RuntimeFailure(f"{ckpt_path}: {exc}") from exc
    cfg_path = Path(args.config) if args.config else ckpt_path.parent / "config.ini"
    config = build_config(load_config(cfg_path))
    try:
        model = model_from_checkpoint(ckpt, config)
    except (CheckpointError, ValueError) as exc:
        raise RuntimeFailure(f"{ckpt_path}: {exc}") from exc
    return ckpt, config, model


def cmd_eval(args) -> int:
    ckpt, config, model = _load_model(args)
    data = gen_dataset(config, args.split)
    loss, miou, f1 = evaluate(model, data)
    row = MetricsRow(ckpt.epoch, args.split, loss, miou, f1)
    print(",".join(METRICS_HEADER))
    print(",".join(row.formatted()))
    if args.out:
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
            with open(out / "eval.csv", "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(METRICS_HEADER)
                writer.writerow(row.formatted())
        except OSError as exc:
            raise RuntimeFailure(f"cannot write to {out}: {exc}") from exc
    return 0


def attention_maps(model, image: np.ndarray) -> Dict[str, np.ndarray]:
    """File stem -> 2-D map for every attention map of one image."""
    from . import tensor as T

    with T.no_grad():
        out = model.forward(image[None])
    maps = {}
    for s, (factor, att) in enumerate(zip(model.config.scales, out.attention)):
        for name, t in att.items():
            stem = f"scale{s}_x{factor:g}_{name.replace('.', '-')}"
            maps[stem] = t.data[0, 0]
    return maps


def cmd_render_attention(args) -> int:
    _, config, model = _load_model(args)
    data = gen_dataset(config, args.split)
    if not 0 <= args.index < len(data):
        raise RuntimeFailure(f"index {args.index} out of range for the {args.split} split of {len(data)} images")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        maps = attention_maps(model, data.images[args.index])
        for stem, m in maps.items():
            (out / f"{stem}.pgm").write_bytes(to_pgm(m))
    except OSError as exc:
        raise RuntimeFailure(f"cannot write to {out}: {exc}") from exc
    log.info("wrote %d maps to %s", len(maps), out)
    return 0


# -- parser -----------------------------------------------------------------------


def _add_config_flags(p, with_training=True):
    p.add_argument("--config", help="INI file with [data], [model] and [train] sections")
    if with_training:
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--fusion", choices=("afa", "sum", "concat-proj"))
        p.add_argument("--lr", type=float)
        p.add_argument("--phi", choices=[k.value for k in PhiKind])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="afa-ssr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log at debug level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks for one module")
    p.add_argument("--module", required=True, choices=sorted(gradsuite.MODULES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ssr-scan", help="two-scale attention and Jacobian norm over a grid")
    p.add_argument("--phi", type=phi_list, default=list(PhiKind), help="comma-separated list of abs, softplus, hma")
    p.add_argument("--y1-range", type=grid_range, default=grid_range("-5:5:11"), metavar="A:B:N")
    p.add_argument("--y2-range", type=grid_range, default=grid_range("0:0:1"), metavar="A:B:N")
    p.add_argument("--out", help="CSV path (stdout when omitted)")
    p.set_defaults(func=cmd_ssr_scan)

    p = sub.add_parser("train", help="train the toy model")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the synthetic data")
    p.add_argument("--checkpoint", required=True)
    _add_config_flags(p, with_training=False)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--out", help="directory for eval.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render-attention", help="write attention maps of one image as PGM files")
    p.add_argument("--checkpoint", required=True)
    _add_config_flags(p, with_training=False)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render_attention)
    return parser


def _join_ranges(argv: List[str]) -> List[str]:
    # "--y1-range -1:1:5" would otherwise read the range as a flag
    out, it = [], iter(argv)
    for tok in it:
        if tok in ("--y1-range", "--y2-range"):
            nxt = next(it, None)
            out.append(tok if nxt is None else f"{tok}={nxt}")
        else:
            out.append(tok)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(_join_ranges(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except RuntimeFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
