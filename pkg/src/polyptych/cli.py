"""Command-line entry point: forge, curate, pretrain, train, sample, eval, report."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .evaluate import (
    PROVIDERS,
    MetricReport,
    ProviderError,
    benchmark_items,
    format_comparison,
    get_provider,
    multiref_compare,
    run_benchmark,
)
from .flow import (
    StageError,
    TrainConfig,
    compose_prompt,
    euler_sample,
    make_mask,
    make_optimizer,
    run_stage,
)
from .forge import (
    ShardError,
    WorldConfig,
    WorldConfigError,
    curate,
    diptych_samples,
    generate_items,
    item_samples,
    read_shard,
    synthesize_multiref,
    world_vocab,
    write_shard,
)
from .flow import Vocab
from .geometry import assemble_polyptych, read_pgm, read_ppm, write_layout, write_ppm
from .icma import ICMAConfigError, TaskMode
from .masks import DegenerateMaskError
from .model import (
    CheckpointVersionError,
    DiT,
    ModelConfig,
    ModelConfigError,
    attach_lora,
    format_param_report,
    load_model,
    save_model,
    set_phase,
    trainable_param_report,
)
from .seeding import SEED_ENV, resolve_seed

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("polyptych")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# -- configuration -------------------------------------------------------------


def _train_defaults(**kw) -> dict:
    return dataclasses.asdict(TrainConfig(**kw))


def default_config() -> dict:
    world = dataclasses.asdict(WorldConfig())
    return {
        "seed": 0,
        "world": world,
        "forge": {"n_items": 64},
        "curate": {"threshold": 0.2, "provider": "toy", "embeddings": ""},
        "model": dataclasses.asdict(ModelConfig()),
        "pretrain": _train_defaults(steps=3000, batch_size=8, lr=1e-3),
        "stage1": _train_defaults(steps=2000, batch_size=8, lr=1e-3),
        "stage2": _train_defaults(steps=1000, batch_size=8, lr=1e-3),
        "synth": {"per_item": 2, "steps": 20, "threshold": 0.2},
        "sample": {"steps": 20},
        "eval": {"steps": 20, "modes": ["precise", "user_drawn", "position_free"], "provider": "toy",
                 "embeddings": "", "ref_counts": [1, 2, 3]},
    }


def _coerce(value, default, key: str):
    """Check ``value`` against the type of the schema default (ints widen to floats, lists to tuples)."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a table, got {value!r}")
        return dict(value)
    return value


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict) and key not in ("palette", "places"):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a table")
            _merge(base[key], value, path + ".")
        else:
            base[key] = _coerce(value, base[key], path)


def parse_override(text: str) -> dict:
    """``a.b=value`` as a nested dict; the value is read as a TOML literal, else as a bare string."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise UsageError(f"override {text!r} is not key=value")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def load_config(path: str | None, overrides=()) -> dict:
    cfg = default_config()
    if path:
        try:
            with open(path, "rb") as fh:
                _merge(cfg, tomllib.load(fh))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for item in overrides:
        _merge(cfg, parse_override(item))
    cfg["seed"] = resolve_seed(cfg["seed"])
    return cfg


def _tuplify(x):
    if isinstance(x, list):
        return tuple(_tuplify(v) for v in x)
    return x


def world_config(cfg: dict) -> WorldConfig:
    kw = {k: _tuplify(v) for k, v in cfg["world"].items()}
    kw["seed"] = cfg["seed"]
    try:
        return WorldConfig(**kw)
    except (WorldConfigError, TypeError) as exc:
        raise ConfigError(f"world: {exc}") from exc


def model_config(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig(**cfg["model"])
    except (ModelConfigError, ICMAConfigError, TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from exc


def train_config(cfg: dict, section: str) -> TrainConfig:
    kw = {k: _tuplify(v) for k, v in cfg[section].items()}
    kw["seed"] = cfg["seed"]
    try:
        return TrainConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def check_provider(name: str, embeddings: str):
    if name not in PROVIDERS:
        raise ConfigError(f"unknown embedding provider {name!r}; registered: {', '.join(sorted(PROVIDERS))}")
    try:
        return get_provider(name, embeddings or None)
    except ProviderError as exc:
        raise DataError(str(exc)) from exc


def validate_config(cfg: dict) -> None:
    """Fail fast on any bad section, whatever the command."""
    world_config(cfg)
    model_config(cfg)
    for section in ("pretrain", "stage1", "stage2"):
        train_config(cfg, section)
    for mode in cfg["eval"]["modes"]:
        try:
            TaskMode.parse(mode)
        except ICMAConfigError as exc:
            raise ConfigError(f"eval.modes: {exc}") from exc


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


# -- commands ------------------------------------------------------------------


def cmd_forge(args, cfg: dict) -> int:
    world = world_config(cfg)
    n = cfg["forge"]["n_items"]
    if n < 0:
        raise ConfigError("forge.n_items must be >= 0")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"output directory {out} exists and is not empty; pass --force to replace it")
        shutil.rmtree(out)
    items = generate_items(world, n, cfg["seed"])
    manifest = write_shard(out, items, {"seed": cfg["seed"]})
    print(f"forged {manifest['items']} items into {out} (hash {manifest['hash'][:16]})")
    return EXIT_OK


def cmd_curate(args, cfg: dict) -> int:
    c = cfg["curate"]
    provider = check_provider(c["provider"], c["embeddings"])
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"output directory {out} exists and is not empty; pass --force to replace it")
    items = read_shard(args.data)
    kept, report = curate(items, provider, c["threshold"])
    if out.exists():
        shutil.rmtree(out)
    write_shard(out, kept, {"seed": cfg["seed"], "source": str(args.data), "threshold": c["threshold"]})
    (out / "curation.log").write_text("\n".join(report.lines()) + "\n")
    print(f"kept {len(kept)} of {len(items)} items; log in {out / 'curation.log'}")
    return EXIT_OK


STAGE_SECTIONS = {0: "pretrain", 1: "stage1", 2: "stage2"}


def _stage_data(stage: int, items, cfg: dict, init_model, vocab: Vocab):
    seed = cfg["seed"]
    if stage in (0, 1):
        return diptych_samples(items, seed)
    samples = [s for it in items for s in item_samples(it, (1, 2, 3), seed)]
    syn = cfg["synth"]
    provider = check_provider(cfg["curate"]["provider"], cfg["curate"]["embeddings"])
    extra, notes = synthesize_multiref(init_model, items, world_config(cfg), vocab, seed, provider,
                                       syn["threshold"], syn["steps"], syn["per_item"])
    for note in notes:
        log.info(note)
    log.info("stage 2: %d real and %d synthesized polyptychs", len(samples), len(extra))
    return samples + extra


def cmd_train(args, cfg: dict) -> int:
    stage = args.stage
    section = STAGE_SECTIONS[stage]
    tc = train_config(cfg, section)
    mcfg = model_config(cfg)
    world = world_config(cfg)
    vocab = world_vocab(world)
    if len(vocab) > mcfg.vocab_size:
        raise ConfigError(f"model.vocab_size={mcfg.vocab_size} is smaller than the world vocabulary ({len(vocab)})")
    if stage == 1 and not args.init and not args.resume:
        raise UsageError("stage 1 needs a pretrained base checkpoint (--init)")
    if stage == 2 and not args.init:
        raise UsageError("stage 2 needs a stage-1 checkpoint (--init); it also drives polyptych synthesis")
    items = read_shard(args.data)
    if not items:
        raise DataError(f"{args.data} holds no items")

    init_model = None
    if args.init:
        init_model, init_meta, _ = load_model(args.init, expect=mcfg)
        if init_meta.get("stage") != stage - 1:
            raise DataError(f"{args.init} is a stage-{init_meta.get('stage')} checkpoint; stage {stage} needs stage {stage - 1}")

    start, opt_state = 0, None
    init_hash = _file_hash(args.init) if args.init else ""
    if args.resume:
        model, meta, opt_state = load_model(args.resume, expect=mcfg)
        if meta.get("stage") != stage or meta.get("train") != _jsonable(tc):
            raise CheckpointVersionError(f"{args.resume} was written by a different stage or training config")
        if args.init and meta.get("init_hash") != _file_hash(args.init):
            raise CheckpointVersionError(f"{args.resume} was trained from a different --init checkpoint")
        start = int(meta["step"])
        init_hash = meta.get("init_hash", "")
    elif init_model is not None:
        model, _, _ = load_model(args.init)
        if stage == 1:
            attach_lora(model, seed=cfg["seed"])
    else:
        model = DiT(mcfg, seed=cfg["seed"])

    samples = _stage_data(stage, items, cfg, init_model, vocab)
    set_phase(model, "pretrain" if stage == 0 else "customize")
    opt = make_optimizer(model, tc)
    if opt_state:
        opt.load_state_tensors(opt_state, start)
    print(format_param_report(trainable_param_report(model)))

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out.with_suffix(".log")
    _truncate_log(log_path, start)
    meta = {"stage": stage, "train": _jsonable(tc), "seed": cfg["seed"], "vocab": vocab.words,
            "init_hash": init_hash}

    def checkpoint(step, m, o):
        save_model(out, m, {**meta, "step": step}, o.state_tensors())

    result = run_stage(model, samples, tc, stage, vocab, start_step=start, optimizer=opt, log_path=log_path,
                       on_checkpoint=checkpoint, stop_after=args.stop_after)
    checkpoint(start + result.steps_run, model, opt)
    if result.losses:
        print(f"stage {stage}: steps {start}..{start + result.steps_run}, last loss {result.losses[-1]:.5f}")
    return EXIT_OK


def _jsonable(tc: TrainConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(tc).items()}


def _truncate_log(path: Path, steps: int) -> None:
    """Keep one line per completed step so a resumed run appends without duplicates."""
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    path.write_text("".join(lines[:steps]))


def _vocab_from(meta: dict, cfg: dict) -> Vocab:
    return Vocab(meta["vocab"]) if "vocab" in meta else world_vocab(world_config(cfg))


def cmd_sample(args, cfg: dict) -> int:
    try:
        mode = TaskMode.parse(args.mode)
    except ICMAConfigError as exc:
        raise UsageError(str(exc)) from exc
    if mode.position_aware and not args.mask:
        raise UsageError(f"{mode.label} mode needs --mask")
    if mode.position_aware and not args.target:
        raise UsageError(f"{mode.label} mode needs --target (the scene to edit)")
    if not mode.position_aware and args.mask:
        log.warning("position-free mode ignores the supplied --mask")
    steps = args.steps or cfg["sample"]["steps"]
    if steps < 1:
        raise ConfigError("sample.steps must be >= 1")
    model, meta, _ = load_model(args.ckpt)
    vocab = _vocab_from(meta, cfg)
    refs = [read_ppm(p) for p in args.ref]
    target = read_ppm(args.target) if args.target else np.zeros_like(refs[0])
    canvas = assemble_polyptych(refs, target)
    if mode.position_aware:
        sil = read_pgm(args.mask) > 0.5
        mask = make_mask(mode, canvas, sil, user_mask=sil)
    else:
        mask = make_mask(mode, canvas)
    text = compose_prompt(vocab, args.ref_caption or [], args.caption)
    full, panel = euler_sample(model, refs, target, mask, text, mode, steps, cfg["seed"], vocab)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(out / "target.ppm", panel)
    write_ppm(out / "canvas.ppm", full)
    write_layout(out / "sample.txt", canvas, mode=mode.label, seed=cfg["seed"], steps=steps,
                 checkpoint=_file_hash(args.ckpt), prompt=vocab.decode(text))
    print(f"wrote {out / 'target.ppm'} and {out / 'canvas.ppm'}")
    return EXIT_OK


def cmd_eval(args, cfg: dict) -> int:
    e = cfg["eval"]
    provider = check_provider(e["provider"], e["embeddings"])
    try:
        modes = [TaskMode.parse(m) for m in e["modes"]]
    except ValueError as exc:
        raise ConfigError(f"eval.modes: {exc}") from exc
    model, meta, _ = load_model(args.ckpt)
    vocab = _vocab_from(meta, cfg)
    items = read_shard(args.data)
    bench = benchmark_items(items, cfg["seed"])
    report = run_benchmark(model, bench, modes, provider, cfg["seed"], vocab, e["steps"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_text())
    print(report.to_text().split("\n\n")[0])
    if args.compare:
        other, meta2, _ = load_model(args.compare)
        names = {f"stage{meta.get('stage', 'a')}": model, f"stage{meta2.get('stage', 'b')}": other}
        if len(names) < 2:
            names = {"model": model, "compare": other}
        rows, notes = multiref_compare(names, bench, e["ref_counts"], provider, cfg["seed"], vocab, e["steps"])
        for note in notes:
            log.info(note)
        table = format_comparison(rows)
        out.with_name(out.stem + ".multiref.txt").write_text(table)
        print(table.split("\n\n")[0])
    if report.missing:
        log.error("%d item(s) could not be evaluated", len(report.missing))
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_report(args, cfg: dict) -> int:
    path = Path(args.rows)
    if not path.exists():
        raise DataError(f"{path} not found")
    text = MetricReport.from_text(path.read_text()).to_text()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="TOML config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. stage1.steps=100")
    common.add_argument("--seed", type=int, help=f"root seed (the {SEED_ENV} environment variable wins)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="polyptych", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("forge", parents=[common], help="generate a synthetic item shard")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")

    s = sub.add_parser("curate", parents=[common], help="filter a shard with the curation rules")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")

    for name in ("pretrain", "train"):
        s = sub.add_parser(name, parents=[common], help="train the base" if name == "pretrain" else "customization stage 1 or 2")
        if name == "train":
            s.add_argument("--stage", type=int, choices=(1, 2), required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--out", required=True, help="checkpoint path")
        s.add_argument("--init", help="checkpoint of the previous stage")
        s.add_argument("--resume", help="continue from this checkpoint of the same stage")
        s.add_argument("--log", help="loss log (default: next to the checkpoint)")
        s.add_argument("--stop-after", type=int, help="stop once this step is reached")

    s = sub.add_parser("sample", parents=[common], help="generate one customized image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--ref", action="append", required=True, help="reference image (repeatable)")
    s.add_argument("--ref-caption", action="append", help="caption of a reference (repeatable)")
    s.add_argument("--caption", required=True, help="target scene caption")
    s.add_argument("--target", help="scene image to edit (position-aware modes)")
    s.add_argument("--mask", help="PGM mask of the region to generate")
    s.add_argument("--mode", default="position_free")
    s.add_argument("--steps", type=int)
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", parents=[common], help="benchmark a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--compare", help="second checkpoint for the multi-reference comparison")

    s = sub.add_parser("report", parents=[common], help="regenerate a report from its stored rows")
    s.add_argument("--rows", required=True)
    s.add_argument("--out")
    return p


COMMANDS = {"forge": cmd_forge, "curate": cmd_curate, "pretrain": cmd_train, "train": cmd_train,
            "sample": cmd_sample, "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "pretrain":
        args.stage = 0
    torch.set_num_threads(1)
    try:
        overrides = list(args.set) + ([f"seed={args.seed}"] if args.seed is not None else [])
        cfg = load_config(args.config, overrides)
        validate_config(cfg)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CheckpointVersionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShardError, StageError, DegenerateMaskError, ProviderError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
