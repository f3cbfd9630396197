"""Run the whole pipeline through the command-line front end, stage by stage.

    python3 scripts/cli_pipeline.py --config configs/desk.cfg --out runs/cli
"""

from __future__ import annotations

import argparse
import sys

from f2p.cli import main as f2p

STAGES = [
    ["synth"], ["ingest"], ["align"], ["segment"], ["diff"],
    ["train-fusion"], ["fuse"], ["train-enhancer"], ["enhance"],
    ["train-embed", "--variant", "I"], ["train-embed", "--variant", "I_flash"], ["train-embed"],
    ["finetune"],
    ["embed", "--variant", "I"], ["embed", "--variant", "I_flash"], ["embed"],
    ["embed", "--manifest", "{out}/models/f2p_finetuned.manifest"],
    ["verify", "--name", "I"], ["verify", "--name", "I_flash"], ["verify", "--name", "f2p"],
    ["verify", "--name", "f2p_finetuned"],
    ["quality"],
]


def run(config: str, out: str, seed: int | None = None) -> None:
    common = ["--config", config, "--out", out] + (["--seed", str(seed)] if seed is not None else [])
    for stage in STAGES:
        argv = [a.format(out=out) for a in stage] + common
        print("f2p", " ".join(argv), flush=True)
        if f2p(argv) != 0:
            sys.exit(f"stage {stage[0]} failed")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default="configs/desk.cfg")
    ap.add_argument("--out", default="runs/cli")
    ap.add_argument("--seed", type=int, default=None)
    a = ap.parse_args()
    run(a.config, a.out, a.seed)
