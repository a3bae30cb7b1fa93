"""Command-line entry point: train, gradflow, stability, probe, compare, rerun.

Configuration comes from a YAML file with ``model``, ``train``, ``data``,
``protocol``, ``detectors``, ``gradflow`` and ``probe`` sections. Any field
can be overridden with ``--set section.field=value``; a few common ones have
shortcuts (``--topology``, ``--layers``, ``--seed``).

Every command writes ``manifest.json`` into its output directory before it
starts. ``keellab rerun manifest.json --out DIR`` repeats the run.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import yaml

from . import __version__
from .config import ModelConfig, Topology
from .errors import ConfigError, ContractError, IntegrityError, NumericOverflow
from .gradflow import measure_gradflow
from .probes import layer_redundancy, write_profile_csv, write_summary_json
from .stability import DetectorConfig, RampProtocol, run_ramp, write_verdict_csv
from .topology import checkpoint_bytes, load_checkpoint, wire_model
from .trainer import Batcher, TrainConfig, evaluate_ppl, load_corpus, split_corpus, train

log = logging.getLogger("keellab")

OUT_ENV = "KEELLAB_OUT"

DEFAULTS = {
    "model": ModelConfig().to_dict(),
    "train": asdict(TrainConfig()),
    "data": {"corpus": "tests/data/corpus.txt", "holdout_fraction": 0.1},
    "protocol": {"eta_peak": 5e-2, "warmup_steps": 2000, "monitor_window": 100,
                 "reference_peak": 1e-4, "with_reference": True},
    "detectors": asdict(DetectorConfig()),
    "gradflow": {"probes": 8, "batch_size": 4, "seq_len": 64, "seed": 1234},
    "probe": {"n_windows": 64, "seq_len": 64},
    "topologies": ["postln", "preln", "keel"],
}


# -- configuration ----------------------------------------------------------------

def _merge(base: dict, upd: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in upd.items():
        where = f"{path}{k}"
        if k not in out:
            raise ConfigError(f"unknown config field {where!r}")
        if isinstance(out[k], dict):
            if k == "topology" and isinstance(v, str):
                v = {"kind": v}
            if not isinstance(v, dict):
                raise ConfigError(f"{where} must be a mapping")
            out[k] = _merge(out[k], v, where + ".")
        else:
            out[k] = v
    return out


def parse_override(text: str) -> dict:
    """``a.b.c=value`` -> nested dict; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form path=value")
    key, raw = text.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override {text!r} has an empty path")
    value = yaml.safe_load(raw) if raw.strip() else ""
    return _nest(".".join(parts), value)


def resolve_config(path=None, overrides=(), shortcuts=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            loaded = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {p}: {e}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{p} must contain a mapping at top level")
        cfg = _merge(cfg, loaded)
    for o in overrides:
        cfg = _merge(cfg, parse_override(o))
    for key, value in (shortcuts or {}).items():
        if value is not None:
            cfg = _merge(cfg, _nest(key, value))
    _validate(cfg)
    return cfg


def _nest(key: str, value) -> dict:
    d = value
    for p in reversed(key.split(".")):
        d = {p: d}
    return d


def _validate(cfg: dict) -> None:
    """Build every typed section once so errors surface before any work."""
    model_config(cfg)
    try:
        TrainConfig.from_dict(cfg["train"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"train: {e}") from None
    protocol(cfg)
    detectors(cfg)
    if not isinstance(cfg["topologies"], list) or not cfg["topologies"]:
        raise ConfigError("topologies must be a non-empty list")
    for t in cfg["topologies"]:
        Topology(kind=t)


def model_config(cfg: dict, kind=None) -> ModelConfig:
    d = copy.deepcopy(cfg["model"])
    if kind is not None:
        d["topology"] = dict(d["topology"], kind=kind)
    try:
        return ModelConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"model: {e}") from None


def protocol(cfg: dict) -> RampProtocol:
    p = cfg["protocol"]
    try:
        return RampProtocol(eta_peak=float(p["eta_peak"]), warmup_steps=int(p["warmup_steps"]),
                            monitor_window=int(p["monitor_window"]),
                            reference_peak=float(p["reference_peak"]))
    except ContractError as e:
        raise ConfigError(f"protocol: {e}") from None


def detectors(cfg: dict) -> DetectorConfig:
    try:
        return DetectorConfig(**cfg["detectors"])
    except TypeError as e:
        raise ConfigError(f"detectors: {e}") from None


# -- manifest ---------------------------------------------------------------------

def write_manifest(out: Path, command: str, cfg: dict, artifacts: dict, inputs: dict) -> dict:
    """Record everything needed to repeat the run; written before any work."""
    manifest = {"command": command, "config": cfg, "seed": cfg["train"]["seed"],
                "artifacts": artifacts, "inputs": inputs, "version": __version__}
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    (out / "manifest.json").write_text(text, encoding="utf-8")
    return manifest


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def output_dir(args, command: str, cfg: dict) -> Path:
    if args.out:
        return Path(args.out)
    root = Path(os.environ.get(OUT_ENV, "runs"))
    tag = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:10]
    return root / f"{command}-{tag}"


def _corpus(cfg: dict):
    path = Path(cfg["data"]["corpus"])
    if not path.is_file():
        raise ConfigError(f"corpus file not found: {path}")
    return split_corpus(load_corpus(path), float(cfg["data"]["holdout_fraction"]))


# -- commands ---------------------------------------------------------------------

def run_train(cfg: dict, out: Path, inputs: dict) -> int:
    arts = {"metrics": "metrics.jsonl", "checkpoint": "model.ckpt", "summary": "summary.json"}
    write_manifest(out, "train", cfg, arts, inputs)
    tr, held = _corpus(cfg)
    tc = TrainConfig.from_dict(cfg["train"])
    model = wire_model(model_config(cfg))
    rec = train(model, tr, tc, metrics_path=out / arts["metrics"])
    overflow = sum(m.overflow for m in rec.metrics)
    (out / arts["checkpoint"]).write_bytes(checkpoint_bytes(model, {"steps": tc.total_steps}))
    final = rec.metrics[-1].loss if rec.metrics else None
    summary = {"final_loss": final, "overflow_steps": overflow,
               "heldout_ppl": evaluate_ppl(model, held, tc.seq_len, max_windows=64)}
    (out / arts["summary"]).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"final loss {final if final is None else format(final, '.4f')}  "
          f"held-out ppl {summary['heldout_ppl']:.3f}")
    return 0


def _model_from_inputs(cfg: dict, inputs: dict):
    ck = inputs.get("checkpoint")
    if ck:
        p = Path(ck)
        if not p.is_file():
            raise ConfigError(f"checkpoint not found: {p}")
        if "checkpoint_sha256" in inputs and _digest(p) != inputs["checkpoint_sha256"]:
            raise IntegrityError(f"checkpoint {p} differs from the one in the manifest")
        model, _ = load_checkpoint(p)
        return model
    return wire_model(model_config(cfg))


def run_gradflow(cfg: dict, out: Path, inputs: dict) -> int:
    arts = {"report": "gradflow.jsonl", "layers": "gradflow.csv"}
    write_manifest(out, "gradflow", cfg, arts, inputs)
    model = _model_from_inputs(cfg, inputs)
    g = cfg["gradflow"]
    tr, _ = _corpus(cfg)
    seq = min(int(g["seq_len"]), model.cfg.max_seq_len)
    batches = Batcher(tr, int(g["batch_size"]), seq, int(g["seed"])).take(int(g["probes"]))
    rep = measure_gradflow(model, batches)
    rep.write_jsonl(out / arts["report"], append=False)
    rep.write_csv(out / arts["layers"])
    print(f"topology {rep.topology}  L={rep.L}  alpha={rep.alpha:g}")
    print(f"theoretical product {rep.theoretical_product:.6e}")
    print(f"empirical product   {rep.empirical_product:.6e}")
    print(f"window product      {rep.window_product:.6e} (from sub-layer {rep.start})")
    print(f"fitted decay rate   {rep.fitted_decay_rate:.6e}")
    return 2 if rep.overflow else 0


def run_stability(cfg: dict, out: Path, inputs: dict) -> int:
    arts = {"verdicts": "verdicts.csv", "metrics_dir": "streams"}
    write_manifest(out, "stability", cfg, arts, inputs)
    tr, _ = _corpus(cfg)
    base = TrainConfig.from_dict(cfg["train"])
    prot, det = protocol(cfg), detectors(cfg)
    streams = out / arts["metrics_dir"]
    streams.mkdir(exist_ok=True)
    rows = []
    for kind in cfg["topologies"]:
        mc = model_config(cfg, kind)
        name = mc.topology.kind.value
        with_ref = bool(cfg["protocol"].get("with_reference", True))
        verdict, metrics, ref = run_ramp(mc, prot, tr, base, det, with_reference=with_ref)
        _write_stream(streams / f"{name}.jsonl", metrics)
        if ref:
            _write_stream(streams / f"{name}.reference.jsonl", ref)
        rows.append(verdict.row(name))
        print(f"{name:14s} {verdict.pathology.value:26s} step {verdict.step:5d}  max_lr {verdict.max_lr:.4e}")
    write_verdict_csv(rows, out / arts["verdicts"])
    return 0


def _write_stream(path: Path, metrics) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in metrics:
            fh.write(m.to_json() + "\n")


def run_probe(cfg: dict, out: Path, inputs: dict) -> int:
    arts = {"profile": "redundancy.csv", "summary": "redundancy.json"}
    write_manifest(out, "probe", cfg, arts, inputs)
    model = _model_from_inputs(cfg, inputs)
    _, held = _corpus(cfg)
    p = cfg["probe"]
    prof = layer_redundancy(model, held, int(p["seq_len"]), int(p["n_windows"]))
    write_profile_csv([prof], out / arts["profile"])
    write_summary_json([prof], out / arts["summary"])
    print(f"full ppl {prof.full_ppl:.4f}  argmax layer {prof.argmax_layer}"
          + ("  WARNING: model looks untrained" if prof.untrained_warning else ""))
    return 0


def run_compare(cfg: dict, out: Path, inputs: dict) -> int:
    """Train every listed topology on the same budget, then profile each."""
    arts = {"table": "compare.csv", "profiles": "redundancy.csv", "summary": "redundancy.json"}
    write_manifest(out, "compare", cfg, arts, inputs)
    tr, held = _corpus(cfg)
    tc = TrainConfig.from_dict(cfg["train"])
    p = cfg["probe"]
    rows, profiles = [], []
    for kind in cfg["topologies"]:
        mc = model_config(cfg, kind)
        name = mc.topology.kind.value
        model = wire_model(mc)
        rec = train(model, tr, tc, metrics_path=out / f"{name}.metrics.jsonl")
        (out / f"{name}.ckpt").write_bytes(checkpoint_bytes(model, {"steps": tc.total_steps}))
        prof = layer_redundancy(model, held, int(p["seq_len"]), int(p["n_windows"]))
        profiles.append(prof)
        rows.append([name, repr(rec.metrics[-1].loss), repr(prof.full_ppl),
                     sum(m.overflow for m in rec.metrics)])
        print(f"{name:14s} final loss {rec.metrics[-1].loss:.4f}  held-out ppl {prof.full_ppl:.3f}")
    with open(out / arts["table"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["topology", "final_loss", "heldout_ppl", "overflow_steps"])
        w.writerows(rows)
    write_profile_csv(profiles, out / arts["profiles"])
    write_summary_json(profiles, out / arts["summary"])
    return 0


COMMANDS = {"train": run_train, "gradflow": run_gradflow, "stability": run_stability,
            "probe": run_probe, "compare": run_compare}


# -- argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="keellab", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE",
                        help="override a config field by dotted path (repeatable)")
        sp.add_argument("--topology", help="shortcut for model.topology.kind")
        sp.add_argument("--layers", type=int, help="shortcut for model.n_sublayers")
        sp.add_argument("--seed", type=int, help="shortcut for train.seed and model.init_seed")
        sp.add_argument("--corpus", help="shortcut for data.corpus")
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<command>-<hash>)")
        if name in ("gradflow", "probe"):
            sp.add_argument("--checkpoint", help="model checkpoint; a fresh model is built otherwise")
        if name == "gradflow":
            sp.add_argument("--probes", type=int, help="shortcut for gradflow.probes")
        if name in ("stability", "compare"):
            sp.add_argument("--topologies", help="comma-separated list, in report order")
    rr = sub.add_parser("rerun", help="repeat a run from its manifest")
    rr.add_argument("manifest")
    rr.add_argument("--out", required=True)
    return ap


def _shortcuts(args) -> dict:
    s = {"model.topology.kind": args.topology, "model.n_sublayers": args.layers,
         "train.seed": args.seed, "model.init_seed": args.seed, "data.corpus": args.corpus}
    if getattr(args, "probes", None) is not None:
        s["gradflow.probes"] = args.probes
    if getattr(args, "topologies", None):
        s["topologies"] = [t.strip() for t in args.topologies.split(",") if t.strip()]
    return s


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rerun":
            m = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
            command, cfg, inputs = m["command"], m["config"], m.get("inputs", {})
            if command not in COMMANDS:
                raise ConfigError(f"manifest names unknown command {command!r}")
            _validate(cfg)
            out = Path(args.out)
        else:
            command = args.command
            cfg = resolve_config(args.config, args.overrides, _shortcuts(args))
            inputs = {}
            ck = getattr(args, "checkpoint", None)
            if ck:
                if not Path(ck).is_file():
                    raise ConfigError(f"checkpoint not found: {ck}")
                inputs = {"checkpoint": str(Path(ck).resolve()), "checkpoint_sha256": _digest(ck)}
            out = output_dir(args, command, cfg)
        return COMMANDS[command](cfg, out, inputs)
    except (ConfigError, ContractError, IntegrityError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (NumericOverflow, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
