"""Command-line surface: data preparation, training, generation, evaluation.

Every artifact-producing run records a manifest (tool version, seed, full
config snapshot, content digests of the inputs, artifact paths) before any
work starts, so a run can be reproduced byte for byte from its manifest.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import corpus as cp
from . import evaluation as ev
from . import training as tr
from .autodiff import Rng, load_checkpoint
from .errors import ConfigError, MissingKey, SegcvaeError
from .gradsuite import TOLERANCE, run_suite
from .model import ModelConfig, SegCVAE

# config keys: interface name -> (TrainingConfig field, parser, validator)
_POS = ("must be positive", lambda v: v > 0)
_ANY = ("", lambda v: True)
_UNIT = ("must lie in [0, 1]", lambda v: 0.0 <= v <= 1.0)


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: '{text}'")


KEY_SPECS = {
    "learning_rate": ("learning_rate", float, _POS),
    "batch_size": ("batch_size", int, _POS),
    "epochs": ("epochs", int, _POS),
    "grad_clip": ("grad_clip", float, _POS),
    "snorm_step": ("snorm_step", int, _POS),
    "lambda_constant": ("lambda_constant", float, _UNIT),
    "kl_anneal_steps": ("kl_anneal_steps", int, _POS),
    "seed": ("seed", int, _ANY),
    "vocab_cap": ("vocab_cap", int, ("must be at least 4", lambda v: v >= 4)),
    "max_clen": ("max_len", int, ("must be at least 2", lambda v: v >= 2)),
    "N_emb": ("emb_dim", int, _POS),
    "N_hid": ("hidden_dim", int, _POS),
    "d_z": ("latent_dim", int, _POS),
    "m": ("kernel_width", int, _POS),
    "chan": ("conv_channels", int, _POS),
    "M": ("num_triggers", int, _POS),
    "tau": ("tau", float, _POS),
    "gs_noise": ("gs_noise", _bool, _ANY),
    "no_is": ("no_is", _bool, _ANY),
    "no_eg": ("no_eg", _bool, _ANY),
    "no_san": ("no_san", _bool, _ANY),
    "no_scn": ("no_scn", _bool, _ANY),
    "no_sdn": ("no_sdn", _bool, _ANY),
}
PATH_KEYS = ("data_dir", "corpus")


def parse_config(path) -> tuple[tr.TrainingConfig, dict[str, str]]:
    """Read line-oriented ``key = value`` text into a full configuration.

    Unknown keys, wrong types and out-of-range values are reported with
    their line number; absent keys keep their documented defaults.
    """
    values: dict[str, object] = {}
    paths: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got '{line}'")
            key, _, text = line.partition("=")
            key, text = key.strip(), text.strip()
            if key in PATH_KEYS:
                paths[key] = text
                continue
            if key not in KEY_SPECS:
                raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
            field, convert, (why, check) = KEY_SPECS[key]
            try:
                value = convert(text)
            except ValueError:
                raise ConfigError(
                    f"{path}:{lineno}: '{key}' needs a {convert.__name__} value, got '{text}'")
            if not check(value):
                raise ConfigError(f"{path}:{lineno}: '{key}' {why}, got {text}")
            values[field] = value
    return tr.TrainingConfig(**values), paths


def config_snapshot(cfg: tr.TrainingConfig) -> dict[str, str]:
    """The full configuration under its file-format key names."""
    snapshot = {}
    for key, (field, convert, _) in KEY_SPECS.items():
        value = getattr(cfg, field)
        if value is None:
            continue
        if convert is _bool:
            snapshot[key] = "true" if value else "false"
        elif convert is float:
            snapshot[key] = repr(float(value))
        else:
            snapshot[key] = str(value)
    return snapshot


def _digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: tr.TrainingConfig | None,
                   inputs: list[Path], artifacts: list[str],
                   extra: dict[str, str] = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"command = {command}", f"tool_version = {__version__}"]
    if cfg is not None:
        for key, value in sorted(config_snapshot(cfg).items()):
            lines.append(f"config.{key} = {value}")
        lines.append(f"seed = {cfg.seed}")
    for key, value in sorted((extra or {}).items()):
        lines.append(f"{key} = {value}")
    for path in inputs:
        lines.append(f"input.{Path(path).name} = sha256:{_digest(path)}")
    for name in artifacts:
        lines.append(f"artifact.{name} = {name}")
    path = out_dir / "manifest.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _load_config(args) -> tuple[tr.TrainingConfig, dict[str, str]]:
    if getattr(args, "config", None):
        cfg, paths = parse_config(args.config)
    else:
        cfg, paths = tr.TrainingConfig(), {}
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    for name in getattr(args, "drop", None) or ():
        setattr(cfg, f"no_{name}", True)
    cfg.validate()
    return cfg, paths


def _read_pairs_file(path: Path) -> list[cp.DialoguePair]:
    if not Path(path).exists():
        raise MissingKey(f"required data file '{path}' does not exist")
    return cp.read_pairs(path)


def _load_run(run_dir: Path) -> tuple[SegCVAE, cp.Vocabulary]:
    run_dir = Path(run_dir)
    arrays, meta = load_checkpoint(run_dir / tr.CHECKPOINT_NAME)
    config = ModelConfig.from_meta(meta)
    embedding = arrays["param.emb"]
    vocab = cp.Vocabulary.load(run_dir / "vocab.txt", embedding)
    model = SegCVAE(config, np.zeros((config.vocab_size, config.emb_dim)), Rng(0))
    model.load_state({k[len("param."):]: v for k, v in arrays.items()
                      if k.startswith("param.")})
    return model, vocab


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_prepare_data(args) -> int:
    cfg, paths = _load_config(args)
    corpus_path = Path(args.infile or paths.get("corpus", ""))
    if not str(corpus_path):
        raise MissingKey("prepare-data needs --in or a 'corpus' config entry")
    dialogues = cp.read_corpus_file(corpus_path)
    pairs = cp.pairs_from_corpus(dialogues)
    if args.mode == "general":
        splits, manifest = cp.general_split(pairs)
    else:
        splits, manifest = cp.build_cdm_dataset(pairs, args.mode)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for name in ("train", "valid", "test"):
        cp.write_pairs(out_dir / f"{name}.tsv", splits[name])
        artifacts.append(f"{name}.tsv")
    extra = {"mode": args.mode,
             "groups": str(manifest["groups"]),
             **{f"pairs.{k}": str(v) for k, v in manifest["pairs"].items()}}
    write_manifest(out_dir, "prepare-data", cfg, [corpus_path], artifacts, extra)
    print(f"wrote {sum(manifest['pairs'].values())} pairs "
          f"({manifest['pairs']}) to {out_dir}")
    return 0


def _cmd_cdm_stats(args) -> int:
    dialogues = cp.read_corpus_file(args.infile)
    report = cp.mine_cdm(cp.pairs_from_corpus(dialogues))
    sys.stdout.write(report.text())
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "cdm_report.txt").write_text(report.text(), encoding="utf-8")
        write_manifest(out_dir, "cdm-stats", None, [Path(args.infile)],
                       ["cdm_report.txt"])
    return 0


def _train_like(args, command: str) -> int:
    cfg, paths = _load_config(args)
    data_dir = Path(args.infile or paths.get("data_dir", ""))
    if not str(data_dir):
        raise MissingKey(f"{command} needs --in or a 'data_dir' config entry")
    train_pairs = _read_pairs_file(data_dir / "train.tsv")
    valid_path = data_dir / "valid.tsv"
    valid_pairs = cp.read_pairs(valid_path) if valid_path.exists() else []
    vocab = cp.build_vocab(train_pairs, max_size=cfg.vocab_cap,
                           emb_dim=cfg.emb_dim, seed=cfg.seed)
    out_dir = Path(args.out)
    inputs = [data_dir / "train.tsv"] + ([valid_path] if valid_path.exists() else [])
    write_manifest(out_dir, command, cfg, inputs,
                   [tr.CHECKPOINT_NAME, tr.LOG_NAME, "vocab.txt"])
    vocab.save(out_dir / "vocab.txt")
    result = tr.fit({"train": train_pairs, "valid": valid_pairs}, vocab, cfg, out_dir)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {result.log_path}")
    print(f"best_val_ppl: {min(result.val_ppl)!r}")
    return 0


def _cmd_train(args) -> int:
    return _train_like(args, "train")


def _cmd_ablate(args) -> int:
    if not args.drop:
        raise MissingKey("ablate needs at least one --drop flag")
    return _train_like(args, "ablate")


def _grouped_records(pairs):
    """Group a pair file by context, keeping first-seen order."""
    order = []
    by_context = {}
    for pair in pairs:
        if pair.context not in by_context:
            by_context[pair.context] = []
            order.append(pair.context)
        by_context[pair.context].append(pair.response)
    return [(ctx, by_context[ctx]) for ctx in order]


def _cmd_generate(args) -> int:
    model, vocab = _load_run(args.run)
    pairs = _read_pairs_file(args.data)
    grouped = _grouped_records(pairs)
    if args.limit:
        grouped = grouped[:args.limit]
    rng = Rng(args.seed if args.seed is not None else 123456)
    records = [ev.generate_n(model, vocab, ctx, args.n_responses, rng,
                             ground_truths=truths)
               for ctx, truths in grouped]
    out_dir = Path(args.out)
    write_manifest(out_dir, "generate", None,
                   [Path(args.run) / tr.CHECKPOINT_NAME, Path(args.data)],
                   ["generated.tsv"],
                   {"n_responses": str(args.n_responses),
                    "seed": str(args.seed if args.seed is not None else 123456)})
    ev.write_generation(out_dir / "generated.tsv", records)
    print(f"wrote {len(records)} contexts x {args.n_responses} responses "
          f"to {out_dir / 'generated.tsv'}")
    return 0


def _cmd_evaluate(args) -> int:
    model, vocab = _load_run(args.run)
    records = ev.read_generation(args.infile)
    pairs = _read_pairs_file(args.data)
    truths = {}
    for pair in pairs:
        truths.setdefault(pair.context, []).append(pair.response)
    for rec in records:
        rec.ground_truths = [tuple(t) for t in truths.get(rec.context, [])]
    metrics = ev.evaluate_records(records, vocab)
    data = cp.encode_pairs(pairs, vocab, model.config.max_len)
    metrics["ppl"] = tr.perplexity(model, data)
    text = ev.report_text(metrics, corpus_size=len(pairs))
    sys.stdout.write(text)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.txt").write_text(text, encoding="utf-8")
        write_manifest(out_dir, "evaluate", None,
                       [Path(args.infile), Path(args.data)], ["metrics.txt"])
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_suite(primitive_rounds=args.rounds, loss_rounds=1)
    failed = False
    for name, err, count in results:
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name:20s} max_rel_err={err:.3e} configs={count} {status}")
        failed = failed or err >= TOLERANCE
    print(f"checked {sum(c for _, _, c in results)} configurations")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segcvae",
        description="Dialogue generation with segmented prominent semantics",
        epilog="SEGCVAE_THREADS caps evaluation worker counts.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, infile=True, out_required=True):
        p.add_argument("--config", help="key = value configuration file")
        if infile:
            p.add_argument("--in", dest="infile", help="input path")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, help="override the configured seed")

    p = sub.add_parser("prepare-data", help="build datasets from a raw corpus")
    common(p)
    p.add_argument("--mode", choices=("o2m", "m2o", "general"), default="general")
    p.set_defaults(func=_cmd_prepare_data)

    p = sub.add_parser("cdm-stats", help="report one-to-many / many-to-one fractions")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", help="optional directory for the report file")
    p.set_defaults(func=_cmd_cdm_stats)

    p = sub.add_parser("train", help="train on a prepared dataset directory")
    common(p)
    p.add_argument("--drop", action="append", choices=("is", "eg", "san", "scn", "sdn"))
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("ablate", help="train with components dropped")
    common(p)
    p.add_argument("--drop", action="append", required=True,
                   choices=("is", "eg", "san", "scn", "sdn"))
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("generate", help="generate N responses per test context")
    p.add_argument("--run", required=True, help="training output directory")
    p.add_argument("--data", required=True, help="pair file with test contexts")
    p.add_argument("--out", required=True)
    p.add_argument("--n-responses", type=int, default=8)
    p.add_argument("--seed", type=int)
    p.add_argument("--limit", type=int, help="cap the number of contexts")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("evaluate", help="score a generation dump against references")
    p.add_argument("--in", dest="infile", required=True, help="generation dump")
    p.add_argument("--data", required=True, help="reference pair file")
    p.add_argument("--run", required=True, help="training output directory")
    p.add_argument("--out", help="optional directory for the metric report")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--rounds", type=int, default=3)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_request:
        code = exit_request.code
        return code if isinstance(code, int) else 2
    try:
        return args.func(args)
    except SegcvaeError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
