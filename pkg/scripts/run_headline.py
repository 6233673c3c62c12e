"""Positional vs. standard attention on cumulative min, n = 8, at the full budget.

Runs are written under ``--out`` as ``<attention>_seed<k>/`` and skipped when
already completed, so the script can be restarted. A ``summary.json`` with
the median OOD MSE at c = 3 per model kind is refreshed after every run.
"""

import argparse
import json
import logging
from pathlib import Path

from posattn.harness import TrainConfig, gap_summary, load_run, run_with_ood


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/headline")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=2000)
    ap.add_argument("--samples", type=int, default=30_000)
    ap.add_argument("--attn", nargs="+", default=["positional", "self"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    for seed in args.seeds:
        for kind in args.attn:
            run_dir = out / f"{kind}_seed{seed}"
            if (run_dir / "manifest.json").exists() and load_run(run_dir)[0].status == "completed":
                continue
            cfg = TrainConfig(task="cumulative_min", attention=kind, n=8, samples=args.samples,
                              epochs=args.epochs, seed=seed)
            run_with_ood(cfg, run_dir, progress_every=10)
            manifests = [load_run(p.parent)[0] for p in sorted(out.glob("*/manifest.json"))]
            (out / "summary.json").write_text(json.dumps(gap_summary(manifests), indent=1))


if __name__ == "__main__":
    main()
