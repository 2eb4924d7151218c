"""Command-line interface: pipeline runs, n-sweeps, complexity reports,
dataset conversion, and dev-split sampling."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import metrics, pipeline
from .datamodel import (
    DATASETS,
    DevSplitSpec,
    load_dataset,
    load_jsonl,
    sample_dev_split,
    save_jsonl,
)
from .pipeline import ConfigError, PipelineConfig

log = logging.getLogger(__name__)


def _read_config_file(path: str) -> dict:
    """key=value lines; '#' starts a comment. Values parse as JSON when possible."""
    overrides: dict = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            overrides[key] = json.loads(value)
        except json.JSONDecodeError:
            overrides[key] = value
    return overrides


def _add_run_arguments(parser: argparse.ArgumentParser) -> None:
    # defaults stay None so config-file values survive; real defaults live
    # on PipelineConfig
    parser.add_argument("--config", help="key=value config file; flags override it")
    parser.add_argument("--dataset", choices=[*DATASETS, "jsonl"])
    parser.add_argument("--data", dest="data_path",
                        help="dataset directory, or a canonical JSONL file for --dataset jsonl")
    parser.add_argument("--split")
    parser.add_argument("--n", type=int, help="candidate count including the original")
    parser.add_argument("--seed", type=int,
                        help="required (here or in the config file); no silent default")
    parser.add_argument("--scorer", choices=list(pipeline.SCORERS))
    parser.add_argument("--backend", choices=["mock", "http"])
    parser.add_argument("--mock-table", dest="mock_table")
    parser.add_argument("--endpoint-url", dest="endpoint_url")
    parser.add_argument("--endpoint-model", dest="endpoint_model")
    parser.add_argument("--endpoint-supports-score", dest="endpoint_supports_score",
                        action="store_true")
    parser.add_argument("--backend-style", dest="backend_style",
                        choices=["completion", "chat"])
    parser.add_argument("--ablate", dest="ablations", action="append", default=None,
                        choices=sorted(pipeline.ABLATIONS),
                        help="repeatable; e.g. --ablate no_caption --ablate llm_only")
    parser.add_argument("--oracle", action="store_true",
                        help="shorthand for --ablate oracle")
    parser.add_argument("--max-inflight", dest="max_inflight", type=int)
    parser.add_argument("--cache-dir", dest="cache_dir")
    parser.add_argument("--output-dir", dest="output_dir")
    parser.add_argument("--stoplist", dest="stoplist_path")
    parser.add_argument("--prompts", dest="prompt_registry_path")
    parser.add_argument("--max-question-entities", dest="max_question_entities", type=int)
    parser.add_argument("--official-vqa-averaging", dest="official_vqa_averaging",
                        action="store_true")
    parser.add_argument("--nli", dest="nli_provider",
                        help="prompt | none | stub:<label> | http(s)://<url>")
    parser.add_argument("--log-prompts", dest="log_prompts", action="store_true")
    parser.add_argument("--force", action="store_true",
                        help="reprocess instances that already have records")
    parser.add_argument("--limit", type=int, help="process at most this many new instances")
    parser.add_argument("--sample-size", dest="sample_size", type=int,
                        help="sample a seeded dev split of this size before running")


_CONFIG_FIELDS = tuple(PipelineConfig.__dataclass_fields__)
_BOOL_FIELDS = ("endpoint_supports_score", "official_vqa_averaging",
                "log_prompts", "force")


def _config_from_args(args: argparse.Namespace) -> PipelineConfig:
    values: dict = {}
    if getattr(args, "config", None):
        overrides = _read_config_file(args.config)
        unknown = set(overrides) - set(_CONFIG_FIELDS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(overrides)

    for name in _CONFIG_FIELDS:
        if not hasattr(args, name):
            continue
        value = getattr(args, name)
        if name == "ablations":
            merged = set(values.get("ablations") or []) | set(value or [])
            if getattr(args, "oracle", False):
                merged.add("oracle")
            values[name] = merged
        elif name in _BOOL_FIELDS:
            if value:  # store_true flags can only turn a setting on
                values[name] = True
        elif value is not None:
            values[name] = value

    if isinstance(values.get("ablations"), (list, tuple)):
        values["ablations"] = set(values["ablations"])
    if "seed" not in values:
        raise ConfigError("seed is required (via --seed or the config file)")
    if not values.get("data_path"):
        raise ConfigError("data path is required (via --data or the config file)")
    return PipelineConfig(**values)


def _cmd_run(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    if args.seeds:
        summary = pipeline.run_multi_seed(config, args.seeds)
        for mode, stats in summary.items():
            print(f"{mode}: {stats['mean']:.2f} ± {stats['stddev']:.2f}")
        return 0
    result = pipeline.run_pipeline(config)
    for mode, report in result["report"]["modes"].items():
        print(f"{mode}: overall {report['overall']:.2f}")
    print(f"records: {Path(config.output_dir) / 'records.jsonl'}")
    return 0


def _cmd_sweep_n(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    result = pipeline.sweep_n(config, args.n_values)
    for row in result["rows"]:
        print(f"n={row['n']}: selection {row['selection']:.2f}, "
              f"oracle {row['oracle']:.2f}, baseline {row['baseline']:.2f}")
    return 0


def _cmd_complexity(args: argparse.Namespace) -> int:
    original = metrics.ingest_conllu(args.original)
    rephrased = metrics.ingest_conllu(args.rephrased)
    cmp = metrics.compare_complexity(original, rephrased, count_aux=args.id_count_aux)
    metrics.write_complexity_csv(cmp, args.out)
    print(f"original:  ADD {cmp.original_add:.4f}  ID {cmp.original_id:.4f}")
    print(f"rephrased: ADD {cmp.rephrased_add:.4f}  ID {cmp.rephrased_id:.4f}")
    print(f"delta:     ADD {cmp.delta_add:+.4f}  ID {cmp.delta_id:+.4f}")
    return 0


def _cmd_convert(args: argparse.Namespace) -> int:
    instances = load_dataset(args.data, args.dataset, args.split)
    save_jsonl(instances, args.out)
    print(f"wrote {len(instances)} instances to {args.out}")
    return 0


def _cmd_sample_dev(args: argparse.Namespace) -> int:
    instances = load_jsonl(args.data)
    spec = DevSplitSpec(dataset=args.dataset, sample_size=args.size, seed=args.seed)
    sampled = sample_dev_split(instances, spec)
    save_jsonl(sampled, args.out)
    print(f"sampled {len(sampled)} of {len(instances)} instances to {args.out}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    records = []
    with Path(args.records).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    config = PipelineConfig(scorer=args.scorer, seed=0, mock_table="unused")
    payload = pipeline.emit_report(records, config, args.output_dir)
    for mode, report in payload["modes"].items():
        print(f"{mode}: overall {report['overall']:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vqa-rephrase",
        description="Rephrase and augment visual questions, select by answer "
                    "confidence, and evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the full pipeline over a dataset")
    _add_run_arguments(run)
    run.add_argument("--seeds", type=int, nargs="*", default=None,
                     help="run once per seed and summarize mean/spread")
    run.set_defaults(func=_cmd_run)

    sweep = sub.add_parser("sweep-n", help="selection/oracle accuracy across candidate counts")
    _add_run_arguments(sweep)
    sweep.add_argument("--n-values", dest="n_values", type=int, nargs="+", required=True)
    sweep.set_defaults(func=_cmd_sweep_n)

    complexity = sub.add_parser("complexity",
                                help="ADD/ID comparison from two CoNLL-U files")
    complexity.add_argument("--original", required=True)
    complexity.add_argument("--rephrased", required=True)
    complexity.add_argument("--out", default="complexity.csv")
    complexity.add_argument("--id-count-aux", dest="id_count_aux", action="store_true")
    complexity.set_defaults(func=_cmd_complexity)

    convert = sub.add_parser("convert", help="dataset release -> canonical JSONL")
    convert.add_argument("--dataset", required=True, choices=list(DATASETS))
    convert.add_argument("--data", required=True)
    convert.add_argument("--split", default="val")
    convert.add_argument("--out", required=True)
    convert.set_defaults(func=_cmd_convert)

    sample = sub.add_parser("sample-dev", help="seeded dev split from canonical JSONL")
    sample.add_argument("--data", required=True)
    sample.add_argument("--dataset", required=True)
    sample.add_argument("--size", type=int, required=True)
    sample.add_argument("--seed", type=int, required=True)
    sample.add_argument("--out", required=True)
    sample.set_defaults(func=_cmd_sample_dev)

    report = sub.add_parser("report", help="re-emit reports from records.jsonl")
    report.add_argument("--records", required=True)
    report.add_argument("--output-dir", dest="output_dir", required=True)
    report.add_argument("--scorer", default="answer_conf", choices=list(pipeline.SCORERS))
    report.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, metrics.ConlluError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
