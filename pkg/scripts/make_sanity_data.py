#!/usr/bin/env python3
"""Generate the synthetic sine-vs-noise sanity corpus and its manifest."""

from __future__ import annotations

import argparse
from pathlib import Path

from rawnetlite.sanity import generate_corpus


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("data/sanity"))
    parser.add_argument("--n-per-class", type=int, default=64)
    parser.add_argument("--seed", type=int, default=42)
    args = parser.parse_args()
    manifest = generate_corpus(args.out, n_per_class=args.n_per_class, seed=args.seed)
    print(f"wrote {2 * args.n_per_class} clips; manifest at {manifest}")


if __name__ == "__main__":
    main()
