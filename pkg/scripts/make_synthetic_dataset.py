#!/usr/bin/env python3
"""Emit a synthetic canonical dataset plus a matching mock-backend table.

Usage:
    python scripts/make_synthetic_dataset.py --out runs/synthetic --count 25 --seed 0
"""

import argparse

from vqarephrase.synthetic import write_bundle


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/synthetic")
    parser.add_argument("--count", type=int, default=25)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    dataset_path, table_path = write_bundle(args.out, count=args.count, seed=args.seed)
    print(f"dataset: {dataset_path}")
    print(f"mock table: {table_path}")


if __name__ == "__main__":
    main()
