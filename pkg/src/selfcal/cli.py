"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every subcommand
prints the hash of its fully resolved configuration, and all randomness
flows from ``--seed``. Result files are byte-stable for identical
arguments; wall-clock metadata goes to a ``<name>.meta.json`` sidecar
(the per-layer compression CSV also carries timings).

Option layering: built-in defaults, then ``--config`` JSON, then explicit
flags.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import harness
from .calibration import (
    CalibrationSpec,
    TemperatureSchedule,
    build_calibration_set,
    load_calibration_set,
    save_calibration_set,
)
from .compress import CompressionConfig, compress_model
from .errors import SelfCalError, UsageError
from .text_metrics import CSV_HEADER, analyze
from .tiny_lm import (
    ModelConfig,
    TrainConfig,
    init_model,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .tiny_lm.tokenizer import ByteTokenizer


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config_hash(params: dict) -> str:
    blob = json.dumps(params, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _announce(command: str, params: dict) -> None:
    print(f"[{command}] config-hash {_config_hash(params)}")


def _write_sidecar(target: Path, seconds: float, extra: dict | None = None) -> None:
    meta = {
        "created": datetime.now(timezone.utc).isoformat(),
        "seconds": seconds,
    }
    if extra:
        meta.update(extra)
    target.with_name(target.name + ".meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _layered(args, defaults: dict) -> dict:
    """defaults <- config file <- explicitly passed flags."""
    params = dict(defaults)
    if getattr(args, "config", None):
        params.update(json.loads(Path(args.config).read_text("utf-8")))
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            params[key] = value
    return params


def _threads(args) -> int:
    if getattr(args, "threads", None) is not None:
        return args.threads
    env = os.environ.get("SELFCAL_THREADS")
    return int(env) if env else 1


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_train(args) -> int:
    defaults = {
        "corpus": None, "out": "model.tlm", "steps": 2000, "batch_size": 8,
        "lr": 3e-4, "seed": 0, "layers": 2, "heads": 4, "dim": 128,
        "ffn_dim": 512, "context_len": 256, "log_every": 0,
    }
    p = _layered(args, defaults)
    if not p["corpus"]:
        raise UsageError("train requires --corpus")
    _announce("train", p)
    config = ModelConfig(
        layers=p["layers"], heads=p["heads"], model_dim=p["dim"],
        ffn_dim=p["ffn_dim"], context_len=p["context_len"],
    )
    tokens = ByteTokenizer().encode(Path(p["corpus"]).read_bytes())
    start = time.perf_counter()
    model = train(
        init_model(config, seed=p["seed"]),
        tokens,
        TrainConfig(steps=p["steps"], batch_size=p["batch_size"],
                    learning_rate=p["lr"], seed=p["seed"]),
        log_every=p["log_every"],
    )
    out = Path(p["out"])
    save_checkpoint(model, out)
    _write_sidecar(out, time.perf_counter() - start)
    print(f"wrote {out}")
    return 0


def _cmd_gen_calib(args) -> int:
    defaults = {
        "model": None, "source": "self", "n": 128, "len": 2048, "seed": 0,
        "t_initial": 1.0, "t_final": 1.0, "ramp": 10,
        "stopword_constraint": False, "corpus": None, "out": "calib.cal",
    }
    p = _layered(args, defaults)
    _announce("gen-calib", p)
    spec = CalibrationSpec(
        source=p["source"],
        num_examples=p["n"],
        example_len=p["len"],
        seed=p["seed"],
        schedule=TemperatureSchedule(p["t_initial"], p["t_final"], p["ramp"]),
        stopword_constraint=bool(p["stopword_constraint"]),
        corpus_path=p["corpus"],
    )
    if p["source"] == "self" and not p["model"]:
        raise UsageError("self source requires --model")
    model = load_checkpoint(p["model"]) if p["source"] == "self" else None
    start = time.perf_counter()
    calib = build_calibration_set(spec, model=model, threads=_threads(args))
    out = Path(p["out"])
    save_calibration_set(calib, out)
    _write_sidecar(out, time.perf_counter() - start)
    print(f"wrote {out} ({spec.num_examples} x {spec.example_len} tokens)")
    return 0


def _cmd_compress(args) -> int:
    defaults = {
        "model": None, "calib": None, "method": "gptq", "out": "compressed",
        "bits": 4, "group_size": 128, "dampening": 0.01,
        "desc_act_order": True, "true_sequential": True,
    }
    p = _layered(args, defaults)
    if not p["model"] or not p["calib"]:
        raise UsageError("compress requires --model and --calib")
    _announce("compress", p)
    cfg = CompressionConfig(
        method=p["method"], bits=p["bits"], group_size=p["group_size"],
        dampening=p["dampening"], desc_act_order=p["desc_act_order"],
        true_sequential=p["true_sequential"],
    )
    model = load_checkpoint(p["model"])
    calib = load_calibration_set(p["calib"])
    out_dir = Path(p["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    compressed, report = compress_model(model, calib, cfg)
    seconds = time.perf_counter() - start
    save_checkpoint(compressed, out_dir / "compressed.tlm")
    (out_dir / "report.json").write_text(
        json.dumps(report.result_dict(), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    report.write_csv(out_dir / "report.csv")
    _write_sidecar(out_dir / "report.json", seconds,
                   {"layer_seconds": report.timing_dict()})
    for layer in report.layers:
        print(f"  {layer.layer}: recon_error={layer.recon_error:.6g} "
              f"sparsity={layer.sparsity:.2f}")
    print(f"wrote {out_dir / 'compressed.tlm'}")
    return 0


def _cmd_eval(args) -> int:
    defaults = {
        "model": None, "eval_corpus": None, "n": 16, "len": 256, "out": None,
    }
    p = _layered(args, defaults)
    if not p["model"] or not p["eval_corpus"]:
        raise UsageError("eval requires --model and --eval-corpus")
    _announce("eval", p)
    model = load_checkpoint(p["model"])
    data = harness.load_eval_windows(p["eval_corpus"], p["n"], p["len"])
    metrics = harness.evaluate_model(model, data)
    print(f"ppl {metrics['ppl']:.4f}  next_token_acc {metrics['next_token_acc']:.4f}")
    if p["out"]:
        Path(p["out"]).write_text(
            json.dumps(metrics, sort_keys=True) + "\n", encoding="utf-8"
        )
    return 0


def _cmd_analyze(args) -> int:
    defaults = {"model": None, "calib": None, "out": "metrics"}
    p = _layered(args, defaults)
    if not p["model"] or not p["calib"]:
        raise UsageError("analyze requires --model and --calib")
    _announce("analyze", p)
    model = load_checkpoint(p["model"])
    calib = load_calibration_set(p["calib"])
    report = analyze(model, calib)
    prefix = Path(p["out"])
    prefix.with_suffix(".json").write_text(report.to_json() + "\n", encoding="utf-8")
    prefix.with_suffix(".csv").write_text(
        CSV_HEADER + "\n" + report.csv_row() + "\n", encoding="utf-8"
    )
    print(report.to_json())
    return 0


def _experiment_config(args) -> harness.ExperimentConfig:
    if not getattr(args, "config", None):
        raise UsageError("this command requires --config")
    params = json.loads(Path(args.config).read_text("utf-8"))
    for key in ("seed", "out"):
        value = getattr(args, key, None)
        if value is not None:
            params["out_dir" if key == "out" else key] = value
    params["threads"] = _threads(args)
    return harness.ExperimentConfig.from_dict(params)


def _cmd_experiment(args) -> int:
    cfg = _experiment_config(args)
    _announce("experiment", cfg.to_dict())
    start = time.perf_counter()
    table = harness.run_experiment(cfg)
    paths = harness.write_result_files(table, cfg.out_dir)
    _write_sidecar(Path(paths["json"]), time.perf_counter() - start)
    print(f"wrote {paths['json']}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _experiment_config(args)
    kind = args.kind or cfg.ablation
    if kind not in ("quantity", "temperature_grid"):
        raise UsageError("ablate needs --kind quantity|temperature_grid")
    _announce("ablate", {**cfg.to_dict(), "ablation": kind})
    start = time.perf_counter()
    if kind == "quantity":
        table = harness.ablate_quantity(cfg)
    else:
        table = harness.ablate_temperature_grid(cfg)
    paths = harness.write_result_files(table, cfg.out_dir)
    if kind == "temperature_grid":
        harness.write_heatmaps(table, cfg, cfg.out_dir)
    _write_sidecar(Path(paths["json"]), time.perf_counter() - start)
    print(f"wrote {paths['json']}")
    return 0


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------


def _add_common(sp):
    sp.add_argument("--seed", type=int, default=None, help="base RNG seed")
    sp.add_argument("--config", default=None, help="JSON config file")
    sp.add_argument("--out", default=None, help="output path or directory")
    sp.add_argument("--threads", type=int, default=None,
                    help="worker threads (or SELFCAL_THREADS); never changes results")


def build_parser() -> _Parser:
    parser = _Parser(prog="selfcal", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("train", help="train the tiny model on a byte corpus")
    sp.add_argument("--corpus", help="UTF-8 training text")
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--layers", type=int, default=None)
    sp.add_argument("--heads", type=int, default=None)
    sp.add_argument("--dim", type=int, default=None)
    sp.add_argument("--ffn-dim", dest="ffn_dim", type=int, default=None)
    sp.add_argument("--context-len", dest="context_len", type=int, default=None)
    sp.add_argument("--log-every", dest="log_every", type=int, default=None)
    _add_common(sp)
    sp.set_defaults(fn=_cmd_train)

    sp = sub.add_parser("gen-calib", help="build and save a calibration set")
    sp.add_argument("--model", help="model checkpoint (self source)")
    sp.add_argument("--source", choices=["self", "corpus", "random_vocab"],
                    default=None)
    sp.add_argument("--n", type=int, default=None, help="number of examples")
    sp.add_argument("--len", type=int, default=None, help="tokens per example")
    sp.add_argument("--t-initial", dest="t_initial", type=float, default=None)
    sp.add_argument("--t-final", dest="t_final", type=float, default=None)
    sp.add_argument("--ramp", type=int, default=None, help="schedule ramp length")
    sp.add_argument("--stopword-constraint", dest="stopword_constraint",
                    action="store_const", const=True, default=None,
                    help="restrict the first sampled token to stop-word bytes")
    sp.add_argument("--corpus", default=None, help="corpus file (corpus source)")
    _add_common(sp)
    sp.set_defaults(fn=_cmd_gen_calib)

    sp = sub.add_parser("compress", help="compress a checkpoint with one method")
    sp.add_argument("--model")
    sp.add_argument("--calib", help="calibration set file")
    sp.add_argument("--method",
                    choices=["wanda", "sparsegpt", "gptq", "rtn", "aws"],
                    default=None)
    sp.add_argument("--bits", type=int, default=None)
    sp.add_argument("--group-size", dest="group_size", type=int, default=None)
    sp.add_argument("--dampening", type=float, default=None)
    sp.add_argument("--no-desc-act-order", dest="desc_act_order",
                    action="store_const", const=False, default=None)
    sp.add_argument("--no-true-sequential", dest="true_sequential",
                    action="store_const", const=False, default=None)
    _add_common(sp)
    sp.set_defaults(fn=_cmd_compress)

    sp = sub.add_parser("eval", help="held-out perplexity and accuracy")
    sp.add_argument("--model")
    sp.add_argument("--eval-corpus", dest="eval_corpus")
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--len", type=int, default=None)
    _add_common(sp)
    sp.set_defaults(fn=_cmd_eval)

    sp = sub.add_parser("analyze", help="text metrics of a calibration set")
    sp.add_argument("--model")
    sp.add_argument("--calib")
    _add_common(sp)
    sp.set_defaults(fn=_cmd_analyze)

    sp = sub.add_parser("experiment", help="multi-seed compression experiment")
    _add_common(sp)
    sp.set_defaults(fn=_cmd_experiment)

    sp = sub.add_parser("ablate", help="data-quantity or temperature-grid ablation")
    sp.add_argument("--kind", choices=["quantity", "temperature_grid"], default=None)
    _add_common(sp)
    sp.set_defaults(fn=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return 0 if exc.code in (0, None) else 1
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SelfCalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entrypoint()
