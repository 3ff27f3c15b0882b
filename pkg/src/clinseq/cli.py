"""Command-line entry point: ``clinseq <command> [flags]``.

Exit codes are 0 on success, 2 for usage or configuration problems and 3
when an input file or saved state is corrupt.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError
from .datagen import CohortError, CohortSpec, PackingError, generate_cohort, pack_sequences
from .evaluation import collect_records
from .io_utils import atomic_write_text
from .masking import LayoutError, SequenceLayout, compile_block_mask, export_mask, materialize, patient_mask, \
    window_mask
from .metrics import EvaluationError, evaluate, records_from_csv, records_to_csv, report_json, report_table
from .model import ModelConfig, ModelConfigError, export_embeddings
from .optim import OptimConfig, OptimConfigError
from .tokenizer import Tokenizer, TokenizerError, read_timelines, read_token_file, write_timelines, write_token_file
from .training import CHECKPOINT_NAME, TrainConfig, TrainConfigError, restore, train

log = logging.getLogger("clinseq")

EXIT_USAGE = 2
EXIT_CORRUPT = 3


class UsageError(Exception):
    pass


class CorruptInput(Exception):
    pass


def _defaults(cls) -> dict:
    return {f.name: f.default for f in fields(cls)}


# flag -> (config section, key, type); every flag defaults to None so that
# only options given on the command line override the JSON config
TRAIN_FLAGS = {
    "--layers": ("model", "n_layers", int),
    "--d-model": ("model", "d_model", int),
    "--heads": ("model", "n_heads", int),
    "--mlp-ratio": ("model", "mlp_ratio", int),
    "--w-base": ("model", "w_base", int),
    "--alpha": ("model", "alpha", int),
    "--window-interval": ("model", "window_interval", int),
    "--w-max": ("model", "w_max", int),
    "--block-size": ("model", "block_size", int),
    "--lambda-init": ("model", "lambda_init", float),
    "--rope-base": ("model", "rope_base", float),
    "--lr": ("optim", "lr", float),
    "--momentum": ("optim", "momentum", float),
    "--ns-steps": ("optim", "ns_steps", int),
    "--adam-lr": ("optim", "adam_lr", float),
    "--warmup": ("optim", "warmup_steps", int),
    "--clip-norm": ("optim", "clip_norm", float),
    "--steps": ("train", "steps", int),
    "--max-len": ("train", "max_len", int),
    "--checkpoint-every": ("train", "checkpoint_every", int),
}
SECTION_DEFAULTS = {"model": _defaults(ModelConfig), "optim": _defaults(OptimConfig), "train": _defaults(TrainConfig)}


def _load_json(path) -> dict:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as err:
        raise UsageError(f"{path}: {err.strerror}") from None
    except json.JSONDecodeError as err:
        raise UsageError(f"{path}: invalid JSON ({err})") from None
    if not isinstance(obj, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return obj


def _check_type(section: str, key: str, value) -> None:
    default = SECTION_DEFAULTS[section].get(key)
    if default is None or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise UsageError(f"config {section}.{key} must be {type(default).__name__}, got {value!r}")


def resolve_train_config(args, vocab_size: int) -> tuple[ModelConfig, OptimConfig, TrainConfig]:
    """Merge dataclass defaults, the optional JSON config file and command-line flags."""
    cfg = {"model": {}, "optim": {}, "train": {}}
    if args.config:
        raw = _load_json(args.config)
        unknown = set(raw) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config sections: {sorted(unknown)}")
        for section, values in raw.items():
            if not isinstance(values, dict):
                raise UsageError(f"config section {section!r} must be an object")
            for key, value in values.items():
                _check_type(section, key, value)
            cfg[section].update(values)
    for flag, (section, key, _) in TRAIN_FLAGS.items():
        value = getattr(args, flag[2:].replace("-", "_"))
        if value is not None:
            cfg[section][key] = value
    if args.literal_eq11:
        cfg["optim"]["literal_eq11"] = True
    if args.seed is not None:
        cfg["model"]["seed"] = args.seed
        cfg["train"]["seed"] = args.seed
    if "vocab_size" in cfg["model"] and cfg["model"]["vocab_size"] != vocab_size:
        raise UsageError(f"config vocab_size {cfg['model']['vocab_size']} does not match the tokenizer ({vocab_size})")
    cfg["model"]["vocab_size"] = vocab_size
    try:
        return (ModelConfig.from_dict(cfg["model"]), OptimConfig.from_dict(cfg["optim"]),
                TrainConfig.from_dict(cfg["train"]))
    except TypeError as err:
        raise UsageError(f"bad config value: {err}") from None


# -- commands ------------------------------------------------------------
def cmd_gen(args) -> int:
    spec = CohortSpec(n_patients=args.patients, events_min=args.events_min, events_max=args.events_max,
                      n_variables=args.variables, rho=args.rho, noise=args.noise, seed=args.seed)
    log.info("resolved config: %s", json.dumps(asdict(spec), sort_keys=True))
    write_timelines(args.out, generate_cohort(spec))
    return 0


def _read_timelines(path):
    try:
        return read_timelines(path)
    except OSError as err:
        raise UsageError(f"{path}: {err.strerror}") from None
    except TokenizerError as err:
        raise CorruptInput(f"{path}: {err}") from None


def _load_tokenizer(directory) -> Tokenizer:
    try:
        return Tokenizer.load(directory)
    except OSError as err:
        raise UsageError(f"tokenizer directory {directory}: {err.strerror}") from None
    except (TokenizerError, ValueError, KeyError) as err:
        raise CorruptInput(f"tokenizer directory {directory}: {err}") from None


def cmd_fit_tokenizer(args) -> int:
    tok = Tokenizer.fit(_read_timelines(args.data))
    tok.save(args.out)
    log.info("fitted %d variables, vocabulary of %d tokens", len(tok.binners), len(tok.vocab))
    return 0


def cmd_tokenize(args) -> int:
    tok = _load_tokenizer(args.tokenizer)
    timelines = _read_timelines(args.data)
    write_token_file(args.out, [tok.encode(tl) for tl in timelines], tok.vocab)
    return 0


def _load_checkpoint(path) -> Checkpoint:
    if not Path(path).exists():
        raise UsageError(f"{path}: no such checkpoint")
    try:
        return Checkpoint.load(path)
    except CheckpointError as err:
        raise CorruptInput(str(err)) from None


def cmd_train(args) -> int:
    tok = _load_tokenizer(args.tokenizer)
    try:
        sequences, vocab_hash = read_token_file(args.tokens)
    except OSError as err:
        raise UsageError(f"{args.tokens}: {err.strerror}") from None
    except (TokenizerError, ValueError, KeyError) as err:
        raise CorruptInput(f"{args.tokens}: {err}") from None
    if vocab_hash != tok.vocab.hash:
        raise UsageError(f"{args.tokens} was tokenized with a different vocabulary")
    model_cfg, optim_cfg, train_cfg = resolve_train_config(args, len(tok.vocab))
    out = Path(args.out)
    resume = None
    if args.resume:
        resume = _load_checkpoint(out / CHECKPOINT_NAME)
        try:
            _, model_cfg, optim_cfg, saved, _ = restore(resume)
        except CheckpointError as err:
            raise CorruptInput(f"{out / CHECKPOINT_NAME}: {err}") from None
        train_cfg = TrainConfig(**{**saved.to_dict(), "steps": train_cfg.steps})
    resolved = {"model": model_cfg.to_dict(), "optim": optim_cfg.to_dict(), "train": train_cfg.to_dict()}
    log.info("resolved config: %s", json.dumps(resolved, sort_keys=True))
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.json", json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    batches = pack_sequences(sequences, train_cfg.max_len, tok.vocab)
    state = train(batches, model_cfg, optim_cfg, train_cfg, tok.vocab.hash, out, resume)
    if state.history:
        log.info("finished at step %d, last loss %.4f", state.step, state.history[-1]["loss"])
    return 0


def _model_from_checkpoint(path, tok: Tokenizer):
    ck = _load_checkpoint(path)
    try:
        state, model_cfg, *_, vocab_hash = restore(ck)
    except CheckpointError as err:
        raise CorruptInput(f"{path}: {err}") from None
    if vocab_hash != tok.vocab.hash:
        raise UsageError(f"{path} was trained with a different vocabulary than {tok.vocab.hash[:12]}")
    return state, model_cfg


def cmd_eval(args) -> int:
    if args.records:
        try:
            records = records_from_csv(Path(args.records).read_text(encoding="utf-8"))
        except OSError as err:
            raise UsageError(f"{args.records}: {err.strerror}") from None
        except (EvaluationError, ValueError) as err:
            raise CorruptInput(f"{args.records}: {err}") from None
    else:
        if not (args.checkpoint and args.data and args.tokenizer):
            raise UsageError("eval needs --records, or --checkpoint with --data and --tokenizer")
        tok = _load_tokenizer(args.tokenizer)
        state, model_cfg = _model_from_checkpoint(args.checkpoint, tok)
        timelines = _read_timelines(args.data)
        records = collect_records(state.params, model_cfg, tok, timelines, args.max_len, state.step)
        if args.records_out:
            atomic_write_text(args.records_out, records_to_csv(records))
    report = evaluate(records, kappa=args.kappa)
    atomic_write_text(args.out, report_json(report) + "\n")
    sys.stdout.write(report_table(report))
    return 0


def _int_list(text: str, name: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--{name} must be a comma-separated list of integers") from None


def layout_from_flags(lengths: str, statics: str | None, pad: int) -> SequenceLayout:
    """Packed layout of consecutive patients with the given token counts."""
    lens = _int_list(lengths, "lengths")
    stat = _int_list(statics, "statics") if statics else [0] * len(lens)
    if not lens or len(stat) != len(lens):
        raise UsageError("--statics needs one entry per --lengths entry")
    if any(n < 1 for n in lens) or any(not 0 <= s <= n for s, n in zip(stat, lens)) or pad < 0:
        raise UsageError("lengths must be positive, 0 <= statics <= length and pad >= 0")
    pid, sflag = [], []
    for p, (n, s) in enumerate(zip(lens, stat)):
        pid += [p] * n
        sflag += [True] * s + [False] * (n - s)
    pid += [-1] * pad
    sflag += [False] * pad
    padf = [False] * sum(lens) + [True] * pad
    return SequenceLayout(np.array(pid), np.array(sflag), np.array(padf))


def cmd_export_mask(args) -> int:
    if args.causal is not None:
        if args.causal < 1:
            raise UsageError("--causal must be >= 1")
        lengths, statics, pad = str(args.causal), None, 0
    elif args.lengths:
        lengths, statics, pad = args.lengths, args.statics, args.pad
    else:
        raise UsageError("export-mask needs --causal N or --lengths")
    if not (args.pgm or args.csv):
        raise UsageError("export-mask needs --pgm and/or --csv")
    try:
        layout = layout_from_flags(lengths, statics, pad)
        spec = window_mask(layout, args.window) if args.window else patient_mask(layout)
    except (LayoutError, ValueError) as err:
        raise UsageError(str(err)) from None
    blocks = compile_block_mask(spec, args.block_size)
    log.info("tiles: %s", blocks.counts())
    dense = materialize(blocks)
    export_mask(dense, args.pgm, args.csv)
    return 0


def cmd_export_embeddings(args) -> int:
    tok = _load_tokenizer(args.tokenizer)
    state, _ = _model_from_checkpoint(args.checkpoint, tok)
    export_embeddings(state.params, tok.vocab, args.out)
    return 0


# -- parser --------------------------------------------------------------
class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, except for options without one or that state their own."""

    def _get_help_string(self, action):
        if action.default is None or action.default is False or "(default" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    p = argparse.ArgumentParser(prog="clinseq", description="Clinical event-sequence transformer toolkit.",
                                formatter_class=fmt)
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    cs = _defaults(CohortSpec)
    g = sub.add_parser("gen", help="generate a synthetic cohort CSV", formatter_class=fmt)
    g.add_argument("--out", required=True, help="output timeline CSV")
    g.add_argument("--patients", type=int, default=cs["n_patients"], help="number of patients")
    g.add_argument("--events-min", type=int, default=cs["events_min"], help="fewest events per patient")
    g.add_argument("--events-max", type=int, default=cs["events_max"], help="most events per patient")
    g.add_argument("--variables", type=int, default=cs["n_variables"], help="number of measured variables")
    g.add_argument("--rho", type=float, default=cs["rho"], help="AR(1) coefficient of the latent severity")
    g.add_argument("--noise", type=float, default=cs["noise"], help="measurement noise scale")
    g.add_argument("--seed", type=int, default=cs["seed"], help="cohort seed")
    g.set_defaults(func=cmd_gen)

    f = sub.add_parser("fit-tokenizer", help="fit decile binners and the vocabulary", formatter_class=fmt)
    f.add_argument("--data", required=True, help="timeline CSV")
    f.add_argument("--out", required=True, help="directory for binners.json and vocab.json")
    f.set_defaults(func=cmd_fit_tokenizer)

    t = sub.add_parser("tokenize", help="encode a timeline CSV into a token file", formatter_class=fmt)
    t.add_argument("--data", required=True, help="timeline CSV")
    t.add_argument("--tokenizer", required=True, help="directory written by fit-tokenizer")
    t.add_argument("--out", required=True, help="int32 token file (a .json sidecar is written next to it)")
    t.set_defaults(func=cmd_tokenize)

    tr = sub.add_parser("train", help="train a model on a token file", formatter_class=fmt)
    tr.add_argument("--tokens", required=True, help="token file written by tokenize")
    tr.add_argument("--tokenizer", required=True, help="directory written by fit-tokenizer")
    tr.add_argument("--out", required=True, help="run directory (checkpoint, log, resolved config)")
    tr.add_argument("--config", help="JSON file with optional 'model', 'optim' and 'train' sections")
    tr.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    tr.add_argument("--seed", type=int, default=None, help="model and batch-order seed (default 0)")
    tr.add_argument("--literal-eq11", action="store_true",
                    help="orthogonalize the parameter itself instead of the momentum update")
    for flag, (section, key, typ) in TRAIN_FLAGS.items():
        tr.add_argument(flag, type=typ, default=None, help=f"{section}.{key} (default {SECTION_DEFAULTS[section][key]})")
    tr.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a record CSV", formatter_class=fmt)
    e.add_argument("--checkpoint", help="checkpoint.bin from a training run")
    e.add_argument("--data", help="timeline CSV to evaluate on")
    e.add_argument("--tokenizer", help="directory written by fit-tokenizer")
    e.add_argument("--records", help="evaluate this record CSV instead of running a model")
    e.add_argument("--records-out", help="also write the collected records as CSV")
    e.add_argument("--out", required=True, help="JSON metric report")
    e.add_argument("--max-len", type=int, default=256, help="evaluation sequence length")
    e.add_argument("--kappa", type=float, default=1.0, help="severity weight exponent")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("export-mask", help="write an attention mask as PGM and/or CSV", formatter_class=fmt)
    m.add_argument("--causal", type=int, help="single-patient causal mask of this length")
    m.add_argument("--lengths", help="comma-separated token counts of packed patients")
    m.add_argument("--statics", help="comma-separated static-token counts, one per patient")
    m.add_argument("--pad", type=int, default=0, help="trailing pad positions")
    m.add_argument("--window", type=int, default=None, help="sliding window width (none: full causal)")
    m.add_argument("--block-size", type=int, default=16, help="tile size of the compiled mask that is exported")
    m.add_argument("--pgm", help="output PGM (allowed=255, blocked=0)")
    m.add_argument("--csv", help="output CSV of 0/1")
    m.set_defaults(func=cmd_export_mask)

    x = sub.add_parser("export-embeddings", help="write token embeddings as CSV", formatter_class=fmt)
    x.add_argument("--checkpoint", required=True, help="checkpoint file")
    x.add_argument("--tokenizer", required=True, help="directory written by fit-tokenizer")
    x.add_argument("--out", required=True, help="output CSV, one row per token")
    x.set_defaults(func=cmd_export_embeddings)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, CohortError, ModelConfigError, OptimConfigError, TrainConfigError, PackingError) as err:
        print(f"clinseq {args.command}: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (CorruptInput, CheckpointError) as err:
        print(f"clinseq {args.command}: {err}", file=sys.stderr)
        return EXIT_CORRUPT
    except (TokenizerError, EvaluationError) as err:
        print(f"clinseq {args.command}: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
