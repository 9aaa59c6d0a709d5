"""Repeat the experiment over several root seeds and tabulate the headline numbers.

Each seed gets its own run directory under --out. Useful for judging how much
of a result is the method and how much is the draw.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from devdet.cli import main


def headline(out: Path) -> dict[str, float]:
    load = lambda n: json.loads((out / "eval" / f"{n}.json").read_text())  # noqa: E731
    base, pipe = load("base_in_domain"), load("pipeline_in_domain")
    aucs = [m["auc"] for m in base["per_domain"].values()]
    return {
        "min_domain_auc": min(aucs),
        "gap": float(np.mean(aucs)) - base["m_acc"],
        "m_acc_gain": pipe["m_acc"] - base["m_acc"],
        "s_auc_drop": base["s_auc"] - pipe["s_auc"],
        "holdout_diff": abs(load("pipeline_holdout")["m_acc"] - load("base_holdout")["m_acc"]),
    }


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/default.yaml")
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--seeds", default="0,1,2")
    a = ap.parse_args()
    table = {}
    for s in (int(x) for x in a.seeds.split(",")):
        out = Path(a.out) / f"seed{s}"
        if main(["--config", a.config, "--out", str(out), "--seed", str(s), "run-all"]) != 0:
            print(f"seed {s}: run failed")
            continue
        table[s] = headline(out)
        print(f"seed {s}: " + "  ".join(f"{k} {v:+.3f}" for k, v in table[s].items()), flush=True)
    if table:
        keys = next(iter(table.values()))
        print("mean:   " + "  ".join(f"{k} {np.mean([t[k] for t in table.values()]):+.3f}" for k in keys))
