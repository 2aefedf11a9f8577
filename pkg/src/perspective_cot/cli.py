"""Command-line pipeline: transform -> gen-cot -> train -> evaluate, plus ablation.

Every subcommand reads a JSON pipeline config (``--config``) and exchanges
data with the others only through files under ``output_dir``::

    instances/{train,dev,eval}.jsonl     transformed analysis instances
    runs/<run>/cot/{train,dev}.jsonl     teacher records with validation
    runs/<run>/sft/{train,dev}.jsonl     {system, user, target} examples
    runs/<run>/checkpoints/seed<S>.pt    best-by-eval-loss adapters
    runs/<run>/logs/seed<S>.jsonl        per-step / per-epoch training log
    runs/<run>/predictions/seed<S>.jsonl raw outputs on the eval split
    runs/<run>/report.{json,md,csv}      per-seed accuracy and mean
    ablation/report.{json,md,csv}        stage x seed accuracy matrix

``<run>`` is ``sft``, ``sft-cot`` or ``proposed-k<stages>``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training/runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

from . import corpus as corpus_mod
from .cot_dataset import (
    EmptyDatasetError,
    SFTExample,
    assemble_sft_dataset,
    format_summary_table,
    read_sft_dataset,
    validate_cot_record,
    write_sft_dataset,
)
from .corpus import CorpusError, SPLITS, format_stats_table, read_instances, write_instances
from .evaluation import (
    AblationMatrix,
    EvalReport,
    PredictionFileError,
    SeedResult,
    ablation_report,
    emit_report,
    evaluate_seeds,
    make_prediction,
    read_prediction_rows,
    write_predictions,
    write_report,
)
from .lora import attach_adapters, load_adapter_state
from .prompts import NO_PERSPECTIVES, build_student_prompt, load_perspectives, perspective_prefix
from .teacher_client import (
    HttpTransport,
    MockTransport,
    TeacherConfig,
    TeacherError,
    Transport,
    generate_cot_dataset,
    read_records,
    write_records,
)
from .tinylm import greedy_decode
from .trainer import (
    Checkpoint,
    TrainConfig,
    TrainingDivergence,
    build_base_model,
    config_digest,
    encode_prompt,
    train,
)

logger = logging.getLogger("perspective_cot")

METHODS = ("sft", "sft-cot", "proposed")
LABELED_SPLITS = ("train", "dev")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DigestMismatch(ValueError):
    pass


@dataclass
class PipelineConfig:
    output_dir: Path
    corpus: dict[str, Path] = field(default_factory=dict)
    perspectives: Optional[Path] = None
    stages: int = 4
    method: str = "proposed"
    mock_teacher: bool = False
    keep_invalid: bool = False
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    max_new: int = 384

    def __post_init__(self):
        if self.method not in METHODS:
            raise UsageError(f"unknown method {self.method!r}; choose from {METHODS}")
        if not 1 <= self.stages <= 4:
            raise UsageError(f"stages must be in 1..4, got {self.stages}")
        for split in self.corpus:
            if split not in SPLITS:
                raise UsageError(f"unknown split {split!r} in corpus section")

    @property
    def run_name(self) -> str:
        return f"proposed-k{self.stages}" if self.method == "proposed" else self.method

    @property
    def run_dir(self) -> Path:
        return self.output_dir / "runs" / self.run_name

    @property
    def tagged(self) -> bool:
        return self.method != "sft"

    def perspective_set(self):
        if self.method != "proposed":
            return NO_PERSPECTIVES
        return perspective_prefix(load_perspectives(self.perspectives), self.stages)

    def data_digest(self) -> str:
        return config_digest(
            {
                "method": self.method,
                "stages": self.stages if self.method == "proposed" else 0,
                "perspectives": self.perspective_set().render(),
                "teacher_model": self.teacher.model_name if self.method != "sft" else None,
                "keep_invalid": self.keep_invalid,
            }
        )

    def model_digest(self) -> str:
        return config_digest({"data": self.data_digest(), "train": self.train.to_dict()})


def load_config(path: str | Path | None, overrides: Optional[dict] = None) -> PipelineConfig:
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise UsageError(f"config file {path} not found")
        raw = json.loads(path.read_text(encoding="utf-8"))
        base = path.parent
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})

    def resolve(p):
        return None if p is None else (Path(p) if Path(p).is_absolute() else base / p)

    output_dir = resolve(raw.get("output_dir", "pipeline_out"))
    teacher_raw = dict(raw.get("teacher", {}))
    teacher_raw.setdefault("cache_dir", str(output_dir / "teacher_cache"))
    teacher_raw["cache_dir"] = str(resolve(teacher_raw["cache_dir"]))
    try:
        teacher = TeacherConfig(**teacher_raw)
        train = TrainConfig(**raw.get("train", {}))
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid config: {e}") from None
    if "seed" in raw:
        train = replace(train, seeds=[int(raw["seed"])])
    perspectives = resolve(raw.get("perspectives"))
    if perspectives is not None and not perspectives.exists():
        raise UsageError(f"perspective file {perspectives} not found")
    return PipelineConfig(
        output_dir=output_dir,
        corpus={k: resolve(v) for k, v in raw.get("corpus", {}).items()},
        perspectives=perspectives,
        stages=int(raw.get("stages", 4)),
        method=raw.get("method", "proposed"),
        mock_teacher=bool(raw.get("mock_teacher", False)),
        keep_invalid=bool(raw.get("keep_invalid", False)),
        teacher=teacher,
        train=train,
        max_new=int(raw.get("max_new", 384)),
    )


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_meta(path: Path) -> dict:
    meta = path.with_suffix(".meta.json")
    if not meta.exists():
        raise DigestMismatch(f"{path} has no metadata file {meta.name}")
    return json.loads(meta.read_text(encoding="utf-8"))


def _instances_path(cfg: PipelineConfig, split: str) -> Path:
    return cfg.output_dir / "instances" / f"{split}.jsonl"


def _load_split(cfg: PipelineConfig, split: str):
    path = _instances_path(cfg, split)
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run `transform` first")
    return read_instances(path)


# ---------------------------------------------------------------------------
# commands


def cmd_transform(cfg: PipelineConfig, out=sys.stdout) -> list[corpus_mod.SplitStats]:
    if not cfg.corpus:
        raise UsageError("config has no corpus paths")
    stats = []
    for split in SPLITS:
        if split not in cfg.corpus:
            continue
        try:
            corpus = corpus_mod.load_corpus(cfg.corpus[split], require_labels=split in LABELED_SPLITS)
        except CorpusError as e:
            raise CorpusError(f"[{split}] {e}") from None
        if split == "train" and corpus.dialog_count == 0:
            raise CorpusError(f"[{split}] corpus {cfg.corpus[split]} contains no dialogs")
        instances = corpus_mod.transform_corpus(corpus)
        write_instances(instances, _instances_path(cfg, split))
        stats.append(corpus_mod.corpus_stats(corpus, instances, split))
    table = format_stats_table(stats)
    (cfg.output_dir / "instances" / "stats.tsv").write_text(table + "\n", encoding="utf-8")
    print(table, file=out)
    return stats


def _make_transport(cfg: PipelineConfig) -> Transport:
    if cfg.mock_teacher:
        return MockTransport()
    try:
        return HttpTransport(cfg.teacher)
    except TeacherError as e:
        raise UsageError(f"live teacher unavailable: {e} (use --mock-teacher for offline runs)") from None


def _write_sft(cfg: PipelineConfig, split: str, examples: list[SFTExample]) -> None:
    path = cfg.run_dir / "sft" / f"{split}.jsonl"
    write_sft_dataset(examples, path)
    _write_json(
        path.with_suffix(".meta.json"),
        {"digest": cfg.data_digest(), "method": cfg.method, "stages": cfg.stages, "count": len(examples)},
    )


def cmd_gen_cot(cfg: PipelineConfig, transport: Optional[Transport] = None, out=sys.stdout) -> dict:
    """Teacher extraction and SFT assembly for the train and dev splits."""
    perspectives = cfg.perspective_set()
    summaries = {}
    for split in LABELED_SPLITS:
        instances = _load_split(cfg, split)
        prompts = [build_student_prompt(i, perspectives, tagged=cfg.tagged) for i in instances]
        if cfg.method == "sft":
            examples = [SFTExample(p.system, p.user, i.gold_label.value) for i, p in zip(instances, prompts)]
            _write_sft(cfg, split, examples)
            summaries[split] = {"total": len(examples), "retained": len(examples), "dropped": {}}
            continue
        if transport is None:
            transport = _make_transport(cfg)
        records = generate_cot_dataset(instances, perspectives, cfg.teacher, transport)
        write_records(records, cfg.run_dir / "cot" / f"{split}.jsonl")
        examples, summary = assemble_sft_dataset(records, prompts, keep_invalid=cfg.keep_invalid)
        _write_sft(cfg, split, examples)
        summaries[split] = asdict(summary)
        print(f"[{split}]\n{format_summary_table(summary)}", file=out)
    _write_json(cfg.run_dir / "cot" / "summary.json", summaries)
    return summaries


def cmd_validate(cfg: PipelineConfig, out=sys.stdout) -> dict:
    """Re-run validation on persisted teacher records and reassemble the SFT files."""
    if cfg.method == "sft":
        raise UsageError("method sft has no reasoning records to validate")
    perspectives = cfg.perspective_set()
    summaries = {}
    for split in LABELED_SPLITS:
        records = read_records(cfg.run_dir / "cot" / f"{split}.jsonl")
        instances = {i.instance_id: i for i in _load_split(cfg, split)}
        prompts = []
        for rec in records:
            if rec.ok:
                rec.validation = validate_cot_record(rec, len(perspectives))
            prompts.append(build_student_prompt(instances[rec.instance_id], perspectives, tagged=True))
        write_records(records, cfg.run_dir / "cot" / f"{split}.jsonl")
        examples, summary = assemble_sft_dataset(records, prompts, keep_invalid=cfg.keep_invalid)
        _write_sft(cfg, split, examples)
        summaries[split] = asdict(summary)
        print(f"[{split}]\n{format_summary_table(summary)}", file=out)
    return summaries


def _load_sft(cfg: PipelineConfig, split: str) -> list[SFTExample]:
    path = cfg.run_dir / "sft" / f"{split}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run `gen-cot` first")
    meta = _read_meta(path)
    if meta["digest"] != cfg.data_digest():
        raise DigestMismatch(
            f"{path} was built for method={meta['method']} stages={meta['stages']}, "
            f"not method={cfg.method} stages={cfg.stages}"
        )
    return read_sft_dataset(path)


def cmd_train(cfg: PipelineConfig, out=sys.stdout) -> dict[int, Checkpoint]:
    train_set, dev_set = _load_sft(cfg, "train"), _load_sft(cfg, "dev")
    results, failures = {}, {}
    for seed in cfg.train.seeds:
        log_path = cfg.run_dir / "logs" / f"seed{seed}.jsonl"
        log_path.parent.mkdir(parents=True, exist_ok=True)
        model = build_base_model(cfg.train)
        with log_path.open("w", encoding="utf-8") as log_file:

            def log(rec, f=log_file):
                f.write(json.dumps(rec) + "\n")

            try:
                ckpt = train(model, train_set, dev_set, cfg.train, seed, digest=cfg.model_digest(), log=log)
            except TrainingDivergence as e:
                logger.error("seed %d diverged: %s", seed, e)
                failures[seed] = str(e)
                continue
        ckpt_path = cfg.run_dir / "checkpoints" / f"seed{seed}.pt"
        ckpt_path.parent.mkdir(parents=True, exist_ok=True)
        ckpt.save(ckpt_path, data_digest=cfg.data_digest(), method=cfg.method, stages=cfg.stages)
        results[seed] = ckpt
        print(f"seed {seed}: best epoch {ckpt.epoch}, eval loss {ckpt.eval_loss:.6f}", file=out)
    if failures:
        detail = "; ".join(f"seed {s}: {m}" for s, m in sorted(failures.items()))
        raise RuntimeError(f"{len(failures)} of {len(cfg.train.seeds)} seeds diverged ({detail})")
    return results


def _load_checkpoint(cfg: PipelineConfig, seed: int):
    path = cfg.run_dir / "checkpoints" / f"seed{seed}.pt"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run `train` first")
    ckpt, meta = Checkpoint.load(path)
    if meta.get("data_digest") != cfg.data_digest():
        raise DigestMismatch(
            f"checkpoint {path} was trained with method={meta.get('method')} stages={meta.get('stages')}; "
            f"refusing to score it as method={cfg.method} stages={cfg.stages}"
        )
    model = build_base_model(cfg.train)
    attach_adapters(model, cfg.train.targets, cfg.train.r, cfg.train.alpha, seed)
    load_adapter_state(model, ckpt.adapters)
    return model


def cmd_infer(cfg: PipelineConfig, split: str = "eval", out=sys.stdout) -> dict[int, Path]:
    instances = _load_split(cfg, split)
    perspectives = cfg.perspective_set()
    budget = cfg.train.model.max_seq_len - cfg.max_new
    stop = "</answer>" if cfg.tagged else None
    paths = {}
    for seed in cfg.train.seeds:
        model = _load_checkpoint(cfg, seed)
        preds = []
        for inst in instances:
            sp = build_student_prompt(inst, perspectives, tagged=cfg.tagged)
            raw = greedy_decode(model, encode_prompt(sp.system, sp.user, budget), cfg.max_new, stop)
            preds.append(make_prediction(inst.instance_id, raw, inst.gold_label, cfg.tagged))
        path = cfg.run_dir / "predictions" / f"seed{seed}.jsonl"
        write_predictions(preds, path, seed=seed)
        paths[seed] = path
        print(f"seed {seed}: {len(preds)} predictions -> {path}", file=out)
    return paths


def _group_injected(files: list[Path], seeds: list[int], by_stage: bool) -> dict:
    """Group injected prediction rows by seed (and stage). Rows lacking ``seed``
    take the seed at their file's position in the configured seed list."""
    groups: dict = {}
    for i, path in enumerate(files):
        for row in read_prediction_rows(path):
            seed = row.get("seed")
            if seed is None:
                if i >= len(seeds):
                    raise PredictionFileError(f"{path}: rows have no seed and no configured seed is left")
                seed = seeds[i]
            key = int(seed)
            if by_stage:
                if "stage" not in row:
                    raise PredictionFileError(f"{path}: ablation rows need a 'stage' field")
                key = (int(row["stage"]), key)
            groups.setdefault(key, []).append(row)
    return groups


def _score_rows(rows: list[dict], tagged: bool):
    preds = []
    for row in rows:
        gold = corpus_mod.Label.parse(row["gold"]) if row.get("gold") is not None else None
        preds.append(make_prediction(row["instance_id"], row["raw_output"], gold, tagged))
    return preds


def _emit(obj, stem: Path, out) -> None:
    _write_json(stem.with_suffix(".json"), obj.to_dict())
    write_report(obj, stem.with_suffix(".md"), "markdown")
    write_report(obj, stem.with_suffix(".csv"), "csv")
    print(emit_report(obj, "markdown"), file=out, end="")


def cmd_evaluate(cfg: PipelineConfig, inject: Optional[list[Path]] = None, out=sys.stdout) -> EvalReport:
    if inject:
        grouped = _group_injected(inject, list(cfg.train.seeds), by_stage=False)
        per_seed = {seed: _score_rows(rows, cfg.tagged) for seed, rows in grouped.items()}
    else:
        paths = cmd_infer(cfg, out=out)
        per_seed = {seed: _score_rows(read_prediction_rows(p), cfg.tagged) for seed, p in paths.items()}
    report = evaluate_seeds(cfg.run_name, per_seed)
    _emit(report, cfg.run_dir / "report", out)
    return report


def cmd_ablate(
    cfg: PipelineConfig,
    inject: Optional[list[Path]] = None,
    transport: Optional[Transport] = None,
    stages: tuple[int, ...] = (1, 2, 3, 4),
    out=sys.stdout,
) -> AblationMatrix:
    """Proposed method at each perspective stage count, through the same train/eval path."""
    runs: dict[int, list[SeedResult]] = {}
    if inject:
        grouped = _group_injected(inject, list(cfg.train.seeds), by_stage=True)
        per_stage: dict[int, dict[int, list]] = {}
        for (stage, seed), rows in grouped.items():
            per_stage.setdefault(stage, {})[seed] = _score_rows(rows, tagged=True)
        for stage, per_seed in sorted(per_stage.items()):
            runs[stage] = evaluate_seeds(f"stage{stage}", per_seed).seed_results
    else:
        for k in stages:
            stage_cfg = replace(cfg, method="proposed", stages=k)
            cmd_gen_cot(stage_cfg, transport=transport, out=out)
            cmd_train(stage_cfg, out=out)
            runs[k] = cmd_evaluate(stage_cfg, out=out).seed_results
    matrix = ablation_report(runs)
    _emit(matrix, cfg.output_dir / "ablation" / "report", out)
    return matrix


def cmd_report(cfg: PipelineConfig, fmt: str = "markdown", out=sys.stdout) -> str:
    """Collect finished method reports (and the ablation) into combined tables."""
    reports = []
    for name in ("sft", "sft-cot") + tuple(f"proposed-k{k}" for k in (1, 2, 3, 4)):
        path = cfg.output_dir / "runs" / name / "report.json"
        if path.exists():
            reports.append(EvalReport.from_dict(json.loads(path.read_text(encoding="utf-8"))))
    parts = []
    if reports:
        parts.append(emit_report(reports, fmt))
    ablation = cfg.output_dir / "ablation" / "report.json"
    if ablation.exists():
        parts.append(emit_report(AblationMatrix.from_dict(json.loads(ablation.read_text(encoding="utf-8"))), fmt))
    if not parts:
        raise FileNotFoundError(f"no reports under {cfg.output_dir}")
    text = "\n".join(parts)
    suffix = "md" if fmt == "markdown" else fmt
    (cfg.output_dir / f"summary.{suffix}").write_text(text, encoding="utf-8")
    print(text, file=out, end="")
    return text


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="pipeline config (JSON)")
    common.add_argument("--output-dir", type=Path)
    common.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    common.add_argument("--stages", type=int, choices=(1, 2, 3, 4))
    common.add_argument("--method", choices=METHODS)
    common.add_argument("--mock-teacher", action="store_true", default=None)
    common.add_argument("--keep-invalid", action="store_true", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="perspective-cot", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("transform", parents=[common], help="dialogs -> per-utterance instances")
    sub.add_parser("gen-cot", parents=[common], help="teacher reasoning + SFT assembly")
    sub.add_parser("validate", parents=[common], help="re-validate persisted teacher records")
    sub.add_parser("train", parents=[common], help="fine-tune adapters for each seed")
    p = sub.add_parser("infer", parents=[common], help="greedy decoding on a split")
    p.add_argument("--split", choices=SPLITS, default="eval")
    for name in ("evaluate", "ablate"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--inject-predictions", type=Path, action="append", metavar="FILE")
    p = sub.add_parser("report", parents=[common], help="combine finished reports")
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {
        "output_dir": str(args.output_dir) if args.output_dir else None,
        "seed": args.seed,
        "stages": args.stages,
        "method": args.method,
        "mock_teacher": args.mock_teacher,
        "keep_invalid": args.keep_invalid,
    }
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "transform":
            cmd_transform(cfg)
        elif args.command == "gen-cot":
            cmd_gen_cot(cfg)
        elif args.command == "validate":
            cmd_validate(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "infer":
            cmd_infer(cfg, split=args.split)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, inject=args.inject_predictions)
        elif args.command == "ablate":
            cmd_ablate(cfg, inject=args.inject_predictions)
        elif args.command == "report":
            cmd_report(cfg, fmt=args.format)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, PredictionFileError, DigestMismatch, EmptyDatasetError, FileNotFoundError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergence, TeacherError, RuntimeError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
