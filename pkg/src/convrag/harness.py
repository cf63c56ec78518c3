"""Command-line entry point: data generation, training, retrieval, generation, evaluation.

One JSON config file drives every command; flags override its fields
(flag > file > default). Every artifact carries the resolved config in its
header. Failures print one line ``error: {"code": ..., "type": ..., "message": ...}``
on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

from .corpus import (SynthSpec, compose_session_query, mix_datasets, read_data_dir, split_by_kind,
                     synth_corpus, write_corpus)
from .errors import ConfigError, ConvRagError, IntegrityError
from .index import DenseIndex, build_index, search, write_run_file
from .inference import MODES, GenerationConfig, run_pipeline, write_response_file
from .metrics import evaluate, gold_tables, read_report_records, write_report, write_turn_tsv
from .model import ModelConfig, ModelState, load_checkpoint
from .objectives import LossConfig, check_stream, train

log = logging.getLogger("convrag")

ABLATIONS = ("full", "no_cii", "no_ddm")
COMPARISONS = ("unified", "separated")
SYNTH_REQUIRED = ("n_sessions", "turns_per_session", "collection_size", "vocab_size", "seed")


@dataclass(frozen=True)
class Paths:
    out: str = "runs"
    data: str | None = None            # default: <out>/data
    checkpoint: str | None = None      # default: <out>/model.npz
    retriever_checkpoint: str | None = None
    generator_checkpoint: str | None = None

    def data_dir(self) -> Path:
        return Path(self.data) if self.data else Path(self.out) / "data"

    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out) / "model.npz"


def pinned_model() -> ModelConfig:
    return ModelConfig(vocab_size=256, d_model=64, n_layers=2, n_heads=4, max_seq_len=160)


def pinned_loss() -> LossConfig:
    return LossConfig(alpha=0.5, learning_rate=0.5, batch_size=8, epochs=1000, grad_accum_steps=1,
                      clip_norm=1.0, max_steps=4000)


def pinned_generation() -> GenerationConfig:
    return GenerationConfig(max_new_tokens=16, top_k_passages=10, mode="rag")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    synth: SynthSpec = field(default_factory=SynthSpec)
    model: ModelConfig = field(default_factory=pinned_model)
    loss: LossConfig = field(default_factory=pinned_loss)
    generation: GenerationConfig = field(default_factory=pinned_generation)
    ablation: str = "full"
    comparison: str = "unified"
    # adhoc, instruct, convsearch
    mix_ratios: tuple[float, float, float] = (1.0, 1.0, 1.0)
    matrix_ablations: tuple[str, ...] = ("full", "no_cii")
    matrix_modes: tuple[str, ...] = ("zero_shot", "rag")

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.comparison not in COMPARISONS:
            raise ConfigError(f"comparison must be one of {COMPARISONS}, got {self.comparison!r}")
        bad = [a for a in self.matrix_ablations if a not in ABLATIONS]
        bad += [m for m in self.matrix_modes if m not in MODES]
        if bad:
            raise ConfigError(f"unknown matrix entries: {bad}")
        if len(self.mix_ratios) != 3:
            raise ConfigError("mix_ratios needs three weights (adhoc, instruct, convsearch)")

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"paths": Paths, "synth": SynthSpec, "model": ModelConfig, "loss": LossConfig,
             "generation": GenerationConfig}
_SEEDED = ("synth", "model", "loss")


def _build(cls, values: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown field '{where}.{unknown[0]}'")
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from e


def resolve_config(file_values: dict | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Merge defaults, a parsed config file, and flag overrides (in rising precedence).

    Both mappings are nested ``{section: {field: value}}`` plus top-level scalars.
    A top-level ``seed`` seeds the synth, model, and loss sections unless the
    file sets a section seed; a seed given as a flag overrides all of them.
    """
    file_values = dict(file_values or {})
    overrides = dict(overrides or {})
    default = ExperimentConfig()
    top_known = {f.name for f in fields(ExperimentConfig)}
    for src in (file_values, overrides):
        unknown = sorted(set(src) - top_known)
        if unknown:
            raise ConfigError(f"unknown field '{unknown[0]}'")
    seed = overrides.get("seed", file_values.get("seed", default.seed))
    kwargs: dict[str, Any] = {"seed": seed}
    for name, cls in _SECTIONS.items():
        base = asdict(getattr(default, name))
        sec_file = file_values.get(name, {}) or {}
        sec_flag = overrides.get(name, {}) or {}
        if not isinstance(sec_file, dict) or not isinstance(sec_flag, dict):
            raise ConfigError(f"section '{name}' must be an object")
        merged = {**base, **sec_file}
        if name in _SEEDED:
            if "seed" not in sec_file or "seed" in overrides:
                merged["seed"] = seed
        merged.update(sec_flag)
        kwargs[name] = _build(cls, merged, name)
    for name in top_known - set(_SECTIONS) - {"seed"}:
        val = overrides.get(name, file_values.get(name, getattr(default, name)))
        kwargs[name] = tuple(val) if isinstance(val, list) else val
    return ExperimentConfig(**kwargs)


def load_config_file(path: str | Path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def load_synth_spec(path: str | Path) -> SynthSpec:
    """A standalone synthetic-corpus spec file; the core fields are mandatory."""
    data = load_config_file(path)
    for name in SYNTH_REQUIRED:
        if name not in data:
            raise ConfigError(f"{path}: synth spec is missing field '{name}'")
    return _build(SynthSpec, data, "synth")


# ---------------------------------------------------------------------------
# commands


def _header(cfg: ExperimentConfig, **extra) -> dict:
    return {"config": cfg.to_dict(), **extra}


def cmd_gen_data(cfg: ExperimentConfig, spec: SynthSpec | None = None) -> list[Path]:
    spec = spec or cfg.synth
    out = cfg.paths.data_dir()
    written = write_corpus(synth_corpus(spec), out)
    (out / "spec.json").write_text(json.dumps(asdict(spec), sort_keys=True) + "\n", encoding="utf-8")
    log.info("wrote %d files to %s", len(written) + 1, out)
    return written


def _data(cfg: ExperimentConfig):
    d = cfg.paths.data_dir()
    if not (d / "collection.jsonl").exists():
        raise ConfigError(f"data directory {d} has no collection.jsonl; run gen-data first")
    data = read_data_dir(d)
    if len(data.vocab) > cfg.model.vocab_size:
        raise ConfigError(f"data vocabulary has {len(data.vocab)} words, model.vocab_size is "
                          f"{cfg.model.vocab_size}")
    return data


def training_stream(cfg: ExperimentConfig, data, ablation: str) -> list:
    """Mixed example order; the no_ddm ablation drops the conversational-search stream."""
    kinds = split_by_kind(data.examples())
    ratios = list(cfg.mix_ratios)
    if ablation == "no_ddm":
        ratios[2] = 0.0
    sources = [kinds["adhoc"], kinds["instruct"], kinds["convsearch"]]
    return list(mix_datasets(sources, ratios, seed=cfg.loss.seed, shuffle=True))


def _loss_for(cfg: ExperimentConfig, ablation: str) -> LossConfig:
    return replace(cfg.loss, enable_cii=False) if ablation == "no_cii" else cfg.loss


def cmd_train(cfg: ExperimentConfig, ablation: str | None = None, out_dir: Path | None = None) -> Path:
    ablation = ablation or cfg.ablation
    data = _data(cfg)
    stream = training_stream(cfg, data, ablation)
    counts = check_stream(stream)
    if counts["convsearch"] == 0:
        log.info("DDM disabled: stream has no conversational-search examples")
    mcfg = replace(cfg.model, eos_token_id=data.vocab.eos_id)
    state = ModelState.init(mcfg)
    out = Path(out_dir) if out_dir else Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.npz" if out_dir else cfg.paths.checkpoint_path()
    ckpt.parent.mkdir(parents=True, exist_ok=True)

    def progress(rec):
        if rec["step"] == 1 or rec["step"] % 200 == 0:
            log.info("step %d l_r=%.4f l_g=%.4f l_cii=%.4f", rec["step"], rec["l_r"], rec["l_g"],
                     rec["l_cii"])

    res = train(_loss_for(cfg, ablation), stream, state, data.vocab, data.passage_text(),
                log_path=out / "loss.jsonl", checkpoint_path=ckpt, progress=progress,
                header=_header(cfg, ablation=ablation))
    log.info("trained %d steps, consumed %s, checkpoint %s", len(res.log), res.consumed, ckpt)
    return ckpt


def _load(path: str | Path | None, what: str) -> ModelState:
    if path is None:
        raise ConfigError(f"{what} checkpoint path is not set")
    if not Path(path).exists():
        raise ConfigError(f"{what} checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_index(cfg: ExperimentConfig) -> Path:
    data = _data(cfg)
    state = _load(cfg.paths.checkpoint_path(), "model")
    index = build_index(data.collection, state, data.vocab, cfg.generation.passage_budget)
    path = Path(cfg.paths.out) / "index.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    index.save(path, _header(cfg))
    return path


def _index_for(cfg, data, state) -> DenseIndex:
    path = Path(cfg.paths.out) / "index.npz"
    if path.exists():
        try:
            return DenseIndex.load(path, state)
        except IntegrityError:
            log.info("stored index does not match the checkpoint; rebuilding in memory")
    return build_index(data.collection, state, data.vocab, cfg.generation.passage_budget)


def cmd_search(cfg: ExperimentConfig) -> Path:
    data = _data(cfg)
    state = _load(cfg.paths.checkpoint_path(), "model")
    index = _index_for(cfg, data, state)
    runs = []
    qbudget = min(cfg.generation.query_budget, state.config.max_seq_len - 1)
    for s in data.test_sessions:
        for n in range(1, len(s) + 1):
            ctx = compose_session_query(s, n, qbudget, data.vocab)
            runs.append(search(index, state, ctx, cfg.generation.top_k_passages, s.turn_id(n)))
    path = Path(cfg.paths.out) / "run.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_run_file(path, runs, header=_header(cfg, fingerprint=state.fingerprint()))
    return path


def _pipeline(cfg, data, generator, retriever, mode):
    gcfg = replace(cfg.generation, mode=mode)
    retrieves = mode in ("rag", "history_aware") or gcfg.log_retrieval
    index = _index_for(cfg, data, retriever) if retrieves else None
    return run_pipeline(generator, index, data.test_sessions, gcfg, data.vocab, data.passage_text(),
                        retriever=retriever)


def _emit(cfg, out_dir: Path, output, data, header: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_run_file(out_dir / "run.txt", output.runs, header=header)
    write_response_file(out_dir / "responses.jsonl", output.results, header=header)
    qrels, gold, ev = gold_tables(data.test_sessions)
    report = evaluate(output.results, qrels, gold, ev)
    write_report(out_dir / "report.txt", report, header)
    write_turn_tsv(out_dir / "turns.tsv", report)
    log.info("%s: %s", out_dir, {k: round(v, 4) for k, v in report.aggregates.items()})
    return out_dir / "report.txt"


def cmd_generate(cfg: ExperimentConfig) -> Path:
    data = _data(cfg)
    state = _load(cfg.paths.checkpoint_path(), "model")
    output = _pipeline(cfg, data, state, state, cfg.generation.mode)
    out = Path(cfg.paths.out) / f"generate_{cfg.generation.mode}"
    out.mkdir(parents=True, exist_ok=True)
    header = _header(cfg, fingerprint=state.fingerprint(), mode=cfg.generation.mode)
    write_run_file(out / "run.txt", output.runs, header=header)
    write_response_file(out / "responses.jsonl", output.results, header=header)
    return out / "responses.jsonl"


def _models(cfg: ExperimentConfig, comparison: str) -> tuple[ModelState, ModelState, dict]:
    if comparison == "unified":
        state = _load(cfg.paths.checkpoint_path(), "model")
        return state, state, {"fingerprint": state.fingerprint()}
    p = cfg.paths
    if not (p.retriever_checkpoint and p.generator_checkpoint):
        raise ConfigError("separated comparison needs paths.retriever_checkpoint and "
                          "paths.generator_checkpoint")
    ret = _load(p.retriever_checkpoint, "retriever")
    gen = _load(p.generator_checkpoint, "generator")
    return gen, ret, {"retriever_fingerprint": ret.fingerprint(),
                      "generator_fingerprint": gen.fingerprint()}


def cmd_eval(cfg: ExperimentConfig, comparison: str | None = None,
             out_dir: Path | None = None) -> Path:
    comparison = comparison or cfg.comparison
    data = _data(cfg)
    gen, ret, fps = _models(cfg, comparison)
    mode = cfg.generation.mode
    output = _pipeline(cfg, data, gen, ret, mode)
    out = out_dir or Path(cfg.paths.out) / f"eval_{comparison}_{mode}"
    return _emit(cfg, out, output, data, _header(cfg, comparison=comparison, mode=mode, **fps))


def cmd_ablate(cfg: ExperimentConfig) -> list[Path]:
    """Train every matrix ablation and evaluate each in every matrix mode."""
    data = _data(cfg)
    reports = []
    for ab in cfg.matrix_ablations:
        base = Path(cfg.paths.out) / "ablate" / ab
        ckpt = cmd_train(cfg, ablation=ab, out_dir=base)
        state = load_checkpoint(ckpt)
        for mode in cfg.matrix_modes:
            output = _pipeline(replace(cfg, paths=replace(cfg.paths, out=str(base))), data,
                               state, state, mode)
            header = _header(cfg, ablation=ab, mode=mode, fingerprint=state.fingerprint())
            reports.append(_emit(cfg, base / mode, output, data, header))
    summary = Path(cfg.paths.out) / "ablate" / "summary.tsv"
    _summarize(reports, summary)
    return reports


def cmd_compare(cfg: ExperimentConfig) -> list[Path]:
    reports = [cmd_eval(cfg, c, Path(cfg.paths.out) / "compare" / c) for c in COMPARISONS]
    _summarize(reports, Path(cfg.paths.out) / "compare" / "summary.tsv")
    return reports


def _summarize(reports: Sequence[Path], path: Path) -> None:
    rows, metrics = [], []
    for rp in reports:
        vals = {r["metric"]: r["value"] for r in read_report_records(rp) if r["scope"] == "all"}
        metrics += [m for m in vals if m not in metrics]
        rows.append((rp.parent.relative_to(path.parent).as_posix(), vals))
    lines = ["run\t" + "\t".join(metrics)]
    lines += [name + "\t" + "\t".join(f"{v[m]:.4f}" if m in v else "-" for m in metrics)
              for name, v in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# argument handling


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(args) -> dict:
    o: dict[str, Any] = {}

    def put(section, key, value):
        o.setdefault(section, {})[key] = value

    if args.seed is not None:
        o["seed"] = args.seed
    if args.out is not None:
        put("paths", "out", args.out)
    for flag, key in (("data", "data"), ("checkpoint", "checkpoint"),
                      ("retriever_checkpoint", "retriever_checkpoint"),
                      ("generator_checkpoint", "generator_checkpoint")):
        if getattr(args, flag, None) is not None:
            put("paths", key, getattr(args, flag))
    if getattr(args, "mode", None) is not None:
        put("generation", "mode", args.mode)
    if getattr(args, "steps", None) is not None:
        put("loss", "max_steps", args.steps)
    for flag in ("ablation", "comparison"):
        if getattr(args, flag, None) is not None:
            o[flag] = getattr(args, flag)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        parts = key.split(".")
        if len(parts) == 1:
            o[parts[0]] = _parse_value(value)
        elif len(parts) == 2:
            put(parts[0], parts[1], _parse_value(value))
        else:
            raise ConfigError(f"--set key too deep: {key}")
    return o


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="convrag", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON config file")
    shared.add_argument("--seed", type=int, help="seed for data, init, and example order")
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--data", help="data directory (default <out>/data)")
    shared.add_argument("--checkpoint", help="model checkpoint (default <out>/model.npz)")
    shared.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE",
                        help="override any config field; VALUE is parsed as JSON when possible")

    g = sub.add_parser("gen-data", parents=[shared], help="write the synthetic corpus")
    g.add_argument("--spec", help="standalone synthetic spec file")
    t = sub.add_parser("train", parents=[shared], help="joint training")
    t.add_argument("--ablation", choices=ABLATIONS)
    t.add_argument("--steps", type=int, help="stop after this many optimizer steps")
    sub.add_parser("index", parents=[shared], help="encode the collection")
    sub.add_parser("search", parents=[shared], help="retrieve for held-out turns")
    gen = sub.add_parser("generate", parents=[shared], help="responses for held-out turns")
    gen.add_argument("--mode", choices=MODES)
    e = sub.add_parser("eval", parents=[shared], help="pipeline plus report")
    e.add_argument("--mode", choices=MODES)
    e.add_argument("--comparison", choices=COMPARISONS)
    e.add_argument("--retriever-checkpoint", dest="retriever_checkpoint")
    e.add_argument("--generator-checkpoint", dest="generator_checkpoint")
    a = sub.add_parser("ablate", parents=[shared], help="{modes} x {ablations} matrix")
    a.add_argument("--steps", type=int)
    c = sub.add_parser("compare", parents=[shared], help="unified vs separated models")
    c.add_argument("--mode", choices=MODES)
    c.add_argument("--retriever-checkpoint", dest="retriever_checkpoint")
    c.add_argument("--generator-checkpoint", dest="generator_checkpoint")
    return p


COMMANDS = {"gen-data": None, "train": cmd_train, "index": cmd_index, "search": cmd_search,
            "generate": cmd_generate, "eval": cmd_eval, "ablate": cmd_ablate,
            "compare": cmd_compare}


def error_line(exc: BaseException) -> str:
    code = exc.code if isinstance(exc, ConvRagError) else {
        FileNotFoundError: "io", PermissionError: "io"}.get(type(exc), "argument")
    return "error: " + json.dumps({"code": code, "type": type(exc).__name__, "message": str(exc)},
                                  sort_keys=True)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        file_values = load_config_file(args.config) if args.config else {}
        cfg = resolve_config(file_values, _overrides(args))
        if args.command == "gen-data":
            spec = load_synth_spec(args.spec) if args.spec else None
            if spec is not None and args.seed is not None:
                spec = replace(spec, seed=args.seed)
            cmd_gen_data(cfg, spec)
        else:
            COMMANDS[args.command](cfg)
    except (ConvRagError, ValueError, OSError, KeyError) as e:
        print(error_line(e), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
