#!/usr/bin/env python3
"""End-to-end demo on synthetic data with the mock backend.

Builds a small dataset and mock table, runs the pipeline with oracle
selection enabled, and prints the per-mode report. Everything runs offline.

Usage:
    python scripts/run_mock_demo.py --out runs/demo --count 25 --n 5 --seed 0
"""

import argparse
from pathlib import Path

from vqarephrase.pipeline import PipelineConfig, run_pipeline
from vqarephrase.synthetic import write_bundle


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/demo")
    parser.add_argument("--count", type=int, default=25)
    parser.add_argument("--n", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    out = Path(args.out)
    dataset_path, table_path = write_bundle(out / "inputs", count=args.count, seed=args.seed)

    config = PipelineConfig(
        dataset="jsonl",
        data_path=str(dataset_path),
        n=args.n,
        seed=args.seed,
        backend="mock",
        mock_table=str(table_path),
        ablations={"oracle"},
        cache_dir=str(out / "cache"),
        output_dir=str(out / "run"),
    )
    result = run_pipeline(config)

    print()
    for mode, report in result["report"]["modes"].items():
        print(f"{mode:12s} overall {report['overall']:6.2f}")
    print(f"\nrecords: {out / 'run' / 'records.jsonl'}")
    print(f"reports: {out / 'run' / 'report.csv'}, {out / 'run' / 'report.json'}")


if __name__ == "__main__":
    main()
