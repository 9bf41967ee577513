#!/usr/bin/env python3
"""Convert a Planetoid citation dataset (Cora, Citeseer, Pubmed) to the
directory format read by `lwgcn`.

Input: the `ind.<name>.{x,y,tx,ty,allx,ally,graph,test.index}` files of the
public Planetoid release. Output directory:

    edges.tsv     one undirected edge per line, `u<TAB>v`
    features.csv  one comma-separated feature row per node
    labels.txt    one class id per node, -1 when a node has no label
    splits.json   {"train": [...], "val": [...], "test": [...]}

Splits follow the supervised protocol: the standard validation (500 nodes
after the labelled training block) and test indices are kept, every other
labelled node is used for training.

Usage:
    python scripts/planetoid_to_dir.py --raw-dir planetoid/data --name cora --out data/cora
"""

import argparse
import json
import pickle
import sys
from pathlib import Path

import numpy as np
import scipy.sparse as sp

PARTS = ["x", "y", "tx", "ty", "allx", "ally", "graph"]


def load_part(raw_dir, name, part):
    with open(raw_dir / f"ind.{name}.{part}", "rb") as f:
        return pickle.load(f, encoding="latin1")


def dense(m):
    return m.toarray() if sp.issparse(m) else np.asarray(m)


def convert(raw_dir, name):
    x, y, tx, ty, allx, ally, graph = (load_part(raw_dir, name, p) for p in PARTS)
    test_index = [int(line) for line in (raw_dir / f"ind.{name}.test.index").read_text().split()]
    test_sorted = sorted(test_index)

    allx, ally, tx, ty = dense(allx), dense(ally), dense(tx), dense(ty)
    if name == "citeseer":
        # Some test ids have no entry in the test block; give them empty rows.
        full = range(test_sorted[0], test_sorted[-1] + 1)
        tx_ext = np.zeros((len(full), tx.shape[1]))
        tx_ext[np.array(test_sorted) - test_sorted[0]] = tx
        ty_ext = np.zeros((len(full), ty.shape[1]))
        ty_ext[np.array(test_sorted) - test_sorted[0]] = ty
        tx, ty = tx_ext, ty_ext

    features = np.vstack([allx, tx])
    onehot = np.vstack([ally, ty])
    # The test block is stored in file order; move rows to their node ids.
    features[test_index] = features[test_sorted]
    onehot[test_index] = onehot[test_sorted]

    n = features.shape[0]
    labels = np.where(onehot.sum(axis=1) > 0, onehot.argmax(axis=1), -1)

    edges = set()
    for u, nbrs in graph.items():
        for v in nbrs:
            if u != v and u < n and v < n:
                edges.add((min(u, v), max(u, v)))

    val = list(range(len(y), len(y) + 500))
    held_out = set(val) | set(test_index)
    train = [i for i in range(n) if labels[i] >= 0 and i not in held_out]
    test = [i for i in test_sorted if labels[i] >= 0]
    return features, labels, sorted(edges), {"train": train, "val": val, "test": test}


def write(out, features, labels, edges, splits):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "edges.tsv", "w") as f:
        f.writelines(f"{u}\t{v}\n" for u, v in edges)
    with open(out / "features.csv", "w") as f:
        for row in features:
            f.write(",".join(repr(float(v)) for v in row) + "\n")
    with open(out / "labels.txt", "w") as f:
        f.writelines(f"{int(y)}\n" for y in labels)
    with open(out / "splits.json", "w") as f:
        json.dump(splits, f)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--raw-dir", type=Path, required=True, help="directory with the ind.<name>.* files")
    ap.add_argument("--name", required=True, choices=["cora", "citeseer", "pubmed"])
    ap.add_argument("--out", type=Path, required=True)
    args = ap.parse_args()

    missing = [p for p in PARTS + ["test.index"] if not (args.raw_dir / f"ind.{args.name}.{p}").is_file()]
    if missing:
        sys.exit(f"missing files in {args.raw_dir}: " + ", ".join(f"ind.{args.name}.{p}" for p in missing))

    features, labels, edges, splits = convert(args.raw_dir, args.name)
    write(args.out, features, labels, edges, splits)
    print(
        f"{args.name}: {len(labels)} nodes, {len(edges)} edges, {features.shape[1]} features, "
        f"{labels.max() + 1} classes, splits {len(splits['train'])}/{len(splits['val'])}/{len(splits['test'])} -> {args.out}"
    )


if __name__ == "__main__":
    main()
