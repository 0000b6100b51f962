"""Command-line pipeline driver.

One binary, subcommands for each pipeline stage:

    tonetrans gen-data         generate a toy parallel corpus
    tonetrans train-quantizer  pretrain a speech quantizer (target side)
    tonetrans pretrain-encoder masked code prediction for the speech encoder
    tonetrans train-s2st       train the translation model
    tonetrans evaluate         metrics on a corpus split
    tonetrans sweep            ablation sweep to CSV
    tonetrans inspect          dump checkpoint contents

Exit codes: 0 success, 2 usage or config error, 3 numeric failure during
training, 4 corrupt artifact. Every command is non-interactive and writes
only under its --out directory. Environment: TONETRANS_VERBOSITY (0, 1, 2)
controls logging; TONETRANS_THREADS is recorded in the run manifest for
schedulers (computation itself is single-threaded numpy).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import subprocess
import sys
import time

from . import corpus as corpus_io
from . import harness, sweep as sweep_mod
from .checkpoint import CorruptCheckpointError, file_sha256, inspect_checkpoint, load_checkpoint
from .evaluation import calibrate_transcriber, evaluate_model
from .features import FrontendConfig
from .grammar import ToyGrammar, default_grammar
from .harness import ConfigError, TrainConfig
from .quantizer import VqConfig, codebook_utilization, quantize_utterance
from .tensor import NonFiniteError
from .tensorio import TensorFormatError, atomic_write_bytes
from .translator import ModelConfig

log = logging.getLogger("tonetrans")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_CORRUPT = 4


def _dataclass_from_dict(cls, data: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(
            f"{where}: unknown field(s) {unknown}; known fields: {sorted(names)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def _resolve_train_config(args, file_cfg: dict) -> TrainConfig:
    section = dict(file_cfg.get("train", {}))
    for flag, key in (("steps", "steps"), ("batch_size", "batch_size"),
                      ("lr", "learning_rate"), ("seed", "seed"),
                      ("warmup", "warmup_steps")):
        value = getattr(args, flag, None)
        if value is not None:
            section[key] = value
    return _dataclass_from_dict(TrainConfig, section, "train")


def _resolve_vq_config(args, file_cfg: dict) -> VqConfig:
    section = dict(file_cfg.get("quantizer", {}))
    if getattr(args, "kind", None) is not None:
        section["quantizer_kind"] = args.kind
    if getattr(args, "stride", None) is not None:
        section["stride"] = args.stride
    if getattr(args, "codebook_size", None) is not None:
        section["codebook_size"] = args.codebook_size
    return _dataclass_from_dict(VqConfig, section, "quantizer")


def _resolve_model_config(args, file_cfg: dict, vq: VqConfig | None = None) -> ModelConfig:
    section = dict(file_cfg.get("model", {}))
    if vq is not None:
        section.setdefault("stride", vq.stride)
        section.setdefault("codebook_size", vq.codebook_size)
    return _dataclass_from_dict(ModelConfig, section, "model")


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.TimeoutExpired):
        pass
    return "unknown"


def write_run_manifest(out_dir: str, command: str, config_snapshot: dict,
                       input_checkpoints: dict[str, str],
                       ended: bool = False, started_at: float | None = None) -> dict:
    """Reproducibility record, written before training starts."""
    started_at = started_at if started_at is not None else time.time()
    hashes = {}
    for name, path in input_checkpoints.items():
        hashes[name] = file_sha256(path) if path and os.path.exists(path) else None
    body = {
        "run_id": hashlib.sha256(
            (command + json.dumps(config_snapshot, sort_keys=True)).encode()
        ).hexdigest()[:16],
        "command": command,
        "config": config_snapshot,
        "input_checkpoint_hashes": hashes,
        "git_describe": _git_describe(),
        "threads_env": os.environ.get("TONETRANS_THREADS"),
        "started_at": started_at,
        "ended_at": time.time() if ended else None,
    }
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_bytes(os.path.join(out_dir, "run_manifest.json"),
                       (json.dumps(body, sort_keys=True, indent=2) + "\n").encode())
    return body


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")
    if args.grammar is not None:
        try:
            with open(args.grammar, "r", encoding="utf-8") as f:
                grammar = ToyGrammar.from_json(f.read())
        except FileNotFoundError:
            raise ConfigError(f"grammar file not found: {args.grammar}") from None
        except (ValueError, KeyError, TypeError) as e:
            raise ConfigError(f"invalid grammar file {args.grammar}: {e}") from None
    else:
        grammar = default_grammar(vocab=args.vocab, seed=args.grammar_seed,
                                  reorder_rule=args.reorder)
    records = corpus_io.write_corpus(args.out, grammar, args.count, args.seed,
                                     FrontendConfig())
    log.info("wrote %d utterance pairs to %s", len(records), args.out)
    print(f"generated {len(records)} pairs in {args.out}")
    return EXIT_OK


def _train_command(stage: str, args) -> int:
    file_cfg = _load_config_file(args.config)
    tcfg = _resolve_train_config(args, file_cfg)
    vq = _resolve_vq_config(args, file_cfg) if stage == "quantizer" else None
    mcfg = None
    if stage in ("encoder_pretrain", "s2st"):
        q_cfg, _ = load_checkpoint(args.quantizer)
        ref_vq = _dataclass_from_dict(VqConfig, q_cfg.get("vq_config", {}), "quantizer")
        mcfg = _resolve_model_config(args, file_cfg, ref_vq)
    snapshot = {
        "stage": stage,
        "train": tcfg.to_dict(),
        "quantizer": vq.to_dict() if vq else None,
        "model": mcfg.to_dict() if mcfg else None,
        "data": args.data,
        "resume": args.resume,
    }
    started = time.time()
    inputs = {}
    if getattr(args, "quantizer", None):
        inputs["quantizer"] = args.quantizer
    if getattr(args, "encoder_init", None):
        inputs["encoder_init"] = args.encoder_init
    write_run_manifest(args.out, f"train-{stage}", snapshot, inputs,
                       started_at=started)
    result = harness.run_training(
        stage, out_dir=args.out, corpus_dir=args.data, train_config=tcfg,
        vq_config=vq, model_config=mcfg,
        quantizer_path=getattr(args, "quantizer", None),
        encoder_init_path=getattr(args, "encoder_init", None),
        init_synth_from_vqvae=getattr(args, "init_synth_from_vqvae", False),
        resume=args.resume)
    write_run_manifest(args.out, f"train-{stage}", snapshot, inputs,
                       ended=True, started_at=started)
    final = result["loss_history"][-1] if result["loss_history"] else float("nan")
    print(f"{stage}: {tcfg.steps} steps, final loss {final:.6f}, "
          f"checkpoint {result['checkpoint']}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, m_config, _ = harness.load_model_checkpoint(args.model)
    q, q_config, _ = harness.load_quantizer_checkpoint(args.quantizer)
    if model.cfg.stride != q.cfg.stride:
        raise ConfigError(
            f"model stride {model.cfg.stride} != quantizer stride {q.cfg.stride}")
    if model.cfg.codebook_size != q.cfg.codebook_size:
        raise ConfigError(
            f"model codebook_size {model.cfg.codebook_size} != quantizer "
            f"{q.cfg.codebook_size}")
    pairs = corpus_io.load_split(args.data, args.split)
    grammar = corpus_io.load_grammar(args.data)
    frontend = corpus_io.load_frontend(args.data)
    if args.calibrate:
        cal = calibrate_transcriber(pairs, grammar, frontend)
        log.info("transcriber calibration: %s", cal)
        if cal["token_recovery"] < 0.99:
            raise ConfigError(
                f"transcriber calibration gate failed: recovery "
                f"{cal['token_recovery']:.4f} < 0.99")
    report = evaluate_model(model, q, pairs, grammar, frontend, split=args.split)
    text = report.to_json()
    if args.report:
        atomic_write_bytes(args.report, text.encode())
    print(text, end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    with open(args.spec, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"sweep spec {args.spec} is not valid JSON: {e}") from None
    if args.data is not None:
        raw["corpus_dir"] = args.data
    for key, cls in (("quantizer_train", TrainConfig), ("s2st_train", TrainConfig),
                     ("pretrain_train", TrainConfig), ("vq_base", VqConfig),
                     ("model_base", ModelConfig)):
        if key in raw:
            raw[key] = _dataclass_from_dict(cls, raw[key], f"sweep.{key}")
    spec = sweep_mod.SweepSpec(**{k: v for k, v in raw.items()
                                  if k in {f.name for f in
                                           dataclasses.fields(sweep_mod.SweepSpec)}})
    csv_path = sweep_mod.run_sweep(spec, args.out)
    print(f"sweep complete: {csv_path}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    info = inspect_checkpoint(args.checkpoint)
    if args.data is not None and info["config"].get("kind") == "quantizer":
        q, _, _ = harness.load_quantizer_checkpoint(args.checkpoint)
        import numpy as np

        ids = []
        for split in ("train", "dev", "test"):
            try:
                pairs = corpus_io.load_split(args.data, split)
            except ValueError:
                continue
            for pair in pairs:
                ids.append(quantize_utterance(q, pair.target).code_ids)
        if ids:
            util = codebook_utilization(np.concatenate(ids), q.cfg.codebook_size)
            info["codebook_utilization"] = {
                "entropy": util["entropy"],
                "perplexity": util["perplexity"],
                "codes_used": int((util["histogram"] > 0).sum()),
            }
    print(json.dumps(info, sort_keys=True, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_train_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON config file (default: none)")
    p.add_argument("--steps", type=int, default=None, help="override train.steps")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None,
                   help="override train.batch_size")
    p.add_argument("--lr", type=float, default=None, help="override train.learning_rate")
    p.add_argument("--warmup", type=int, default=None, help="override train.warmup_steps")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--resume", action="store_true",
                   help="resume from an existing checkpoint in --out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tonetrans",
        description="Textless speech-to-speech translation on a procedural toy corpus.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a toy parallel corpus")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--count", type=int, required=True, help="number of utterance pairs")
    p.add_argument("--seed", type=int, default=0, help="corpus seed (default 0)")
    p.add_argument("--grammar", default=None,
                   help="grammar JSON file (default: built-in 20-token grammar)")
    p.add_argument("--vocab", type=int, default=20,
                   help="built-in grammar vocabulary size (default 20)")
    p.add_argument("--grammar-seed", dest="grammar_seed", type=int, default=1234,
                   help="built-in grammar template seed (default 1234)")
    p.add_argument("--reorder", choices=("swap_adjacent", "none"),
                   default="swap_adjacent",
                   help="built-in grammar reordering rule (default swap_adjacent)")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-quantizer", help="pretrain a speech quantizer")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--kind", choices=("random", "linear", "transformer"), default=None,
                   help="override quantizer.quantizer_kind")
    p.add_argument("--stride", type=int, default=None, help="override quantizer.stride")
    p.add_argument("--codebook-size", dest="codebook_size", type=int, default=None,
                   help="override quantizer.codebook_size")
    _add_train_overrides(p)
    p.set_defaults(fn=lambda a: _train_command("quantizer", a))

    p = sub.add_parser("pretrain-encoder",
                       help="masked code-prediction pretraining for the encoder")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--quantizer", required=True,
                   help="random-quantizer checkpoint providing mask targets")
    _add_train_overrides(p)
    p.set_defaults(fn=lambda a: _train_command("encoder_pretrain", a))

    p = sub.add_parser("train-s2st", help="train the translation model")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--quantizer", required=True, help="trained quantizer checkpoint")
    p.add_argument("--encoder-init", dest="encoder_init", default=None,
                   help="encoder-pretraining checkpoint to initialize from")
    p.add_argument("--init-synth-from-vqvae", dest="init_synth_from_vqvae",
                   action="store_true",
                   help="seed the synthesizer from the quantizer decoder")
    _add_train_overrides(p)
    p.set_defaults(fn=lambda a: _train_command("s2st", a))

    p = sub.add_parser("evaluate", help="evaluate a trained model on a split")
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--quantizer", required=True, help="quantizer checkpoint")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--split", choices=("train", "dev", "test"), default="test",
                   help="corpus split (default test)")
    p.add_argument("--report", default=None, help="write the JSON report here")
    p.add_argument("--calibrate", action="store_true",
                   help="run the transcriber calibration gate first")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep", help="run an ablation sweep")
    p.add_argument("--spec", required=True, help="sweep spec JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data", default=None, help="override the spec's corpus_dir")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("inspect", help="print checkpoint contents")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", default=None,
                   help="corpus directory for codebook utilization (quantizers)")
    p.set_defaults(fn=cmd_inspect)
    return parser


def main(argv=None) -> int:
    verbosity = os.environ.get("TONETRANS_VERBOSITY", "1")
    level = {"0": logging.ERROR, "1": logging.INFO, "2": logging.DEBUG}.get(
        verbosity, logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except CorruptCheckpointError as e:
        print(f"corrupt checkpoint: {e}", file=sys.stderr)
        return EXIT_CORRUPT
    except TensorFormatError as e:
        print(f"corrupt artifact: {e}", file=sys.stderr)
        return EXIT_CORRUPT
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
