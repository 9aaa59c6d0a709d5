"""Run the full pipeline and the variant ablation, then print a summary table.

    python3 scripts/run_experiment.py --config configs/default.yaml --out runs/default
"""

import argparse
import json
import sys
from pathlib import Path

from devdet.cli import main


def summary(out: Path) -> str:
    rows = []
    for name in ("base_in_domain", "pipeline_in_domain", "base_holdout", "pipeline_holdout"):
        r = json.loads((out / "eval" / f"{name}.json").read_text())
        per = " ".join(f"d{d}:{m['auc']:.3f}" for d, m in sorted(r["per_domain"].items()))
        rows.append(f"{name:<20} M-ACC {r['m_acc']:.4f}  S-AUC {r['s_auc']:.4f}  AUC {per}")
    variants = out / "ablate" / "variants.json"
    if variants.exists():
        rows.append("")
        for k, v in json.loads(variants.read_text()).items():
            rows.append(f"{k:<20} M-ACC {v['m_acc']:.4f}  holdout ACC {v['holdout_acc']:.4f}")
    return "\n".join(rows)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/default.yaml")
    ap.add_argument("--out", default="runs/default")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--grid", default="variants", choices=("variants", "strategies", "all", "none"))
    a = ap.parse_args()
    common = ["--config", a.config, "--out", a.out] + (["--seed", str(a.seed)] if a.seed is not None else [])
    code = main(common + ["run-all"])
    if code == 0 and a.grid != "none":
        code = main(common + ["ablate", "--grid", a.grid])
    if code == 0:
        print(summary(Path(a.out)))
    sys.exit(code)
