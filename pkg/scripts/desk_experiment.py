"""Desk-scale experiment: quality ordering, variant verification, base vs fine-tuned pipeline.

    python3 scripts/desk_experiment.py --out runs/desk
"""

from __future__ import annotations

import argparse
import json
import logging
from dataclasses import replace

from f2p.experiment import DeskConfig, run_desk


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--ids", type=int, default=20)
    ap.add_argument("--impressions", type=int, default=4)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = replace(DeskConfig(), seed=args.seed, n_ids=args.ids, impressions=args.impressions)
    res = run_desk(cfg, args.out)
    q, v, f = res["quality"], res["verification"], res["f2p"]
    print("local contrast (median):", json.dumps({k: round(x["local_contrast"], 4) for k, x in q.items()}))
    print("verification AUC:", json.dumps({k: round(x["auc"], 4) for k, x in v.items()}))
    for name in ("base", "finetuned"):
        r = f[name]
        print(f"F2P {name}: AUC {r['auc']:.4f} EER {r['eer']:.2f} "
              f"SepRatio cos {r['sep_ratio_cosine']:.3f} (all sessions {r['sep_ratio_cosine_all']:.3f})")
    print(f"total {res['timings']['total']:.0f} s; results in {args.out}/desk_results.json")


if __name__ == "__main__":
    main()
