"""Run the whole pipeline on a freshly generated synthetic corpus.

    python scripts/run_desk_experiment.py --config scripts/configs/desk.json --n 200

Equivalent to calling the ``featprobe`` subcommands one after another; the
markdown summary ends up in ``<out_dir>/report.md``.
"""

import argparse
import sys
import time
from pathlib import Path

from featprobe import cli
from featprobe.config import ExperimentConfig

STEPS = ("melspec", "features", "deepfeat", "similarity", "decode", "report")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(Path(__file__).parent / "configs" / "desk.json"))
    ap.add_argument("--n", type=int, default=200, help="number of synthetic clips")
    ap.add_argument("--corpus-seed", type=int, default=0)
    ap.add_argument("--classes", type=int, default=2)
    args = ap.parse_args(argv)

    cfg = ExperimentConfig.load(args.config)
    corpus = Path(cfg.manifest).parent
    if not Path(cfg.manifest).exists():
        code = cli.main(["synth", "--out", str(corpus), "--n", str(args.n),
                         "--seed", str(args.corpus_seed), "--classes", str(args.classes)])
        if code:
            return code
    for step in STEPS:
        t0 = time.perf_counter()
        code = cli.main([step, "--config", args.config])
        print(f"{step:<10} exit {code}  {time.perf_counter() - t0:6.1f}s")
        if code:
            return code
    print(f"report: {Path(cfg.out_dir) / 'report.md'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
