"""``featprobe`` command line: synth, melspec, features, deepfeat, similarity, decode, report.

Exit codes: 0 success, 1 partial data failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import ConfigError, ExperimentConfig
from .tensorio import FTBError, ManifestError

log = logging.getLogger("featprobe")


def _csv_list(text: str) -> list[str]:
    # split on commas outside parentheses so "waveletStat(25,mean,overTime)" survives
    out, depth, cur = [], 0, ""
    for ch in text:
        if ch == "," and depth == 0:
            out.append(cur.strip())
            cur = ""
            continue
        depth += (ch == "(") - (ch == ")")
        cur += ch
    if cur.strip():
        out.append(cur.strip())
    return out


def _int_list(text: str) -> list[int]:
    return [int(x) for x in _csv_list(text)]


def _add_experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--manifest")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--architectures", type=_csv_list)
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--taps", type=_csv_list)
    p.add_argument("--features", type=_csv_list)
    p.add_argument("--tasks", type=_csv_list)
    p.add_argument("--source-tasks", dest="source_tasks", type=_csv_list)
    p.add_argument("--measures", type=_csv_list)
    p.add_argument("--concat-with", dest="concat_with", type=_csv_list)
    p.add_argument("--similarity-split", dest="similarity_split", choices=["train", "test", "all"])
    p.add_argument("--noise-seed", dest="noise_seed", type=int)
    p.add_argument("--no-noise", dest="noise_baseline", action="store_false", default=None)
    p.add_argument("--cross-task", dest="cross_task", action="store_true", default=None)
    p.add_argument("--workers", type=int)
    p.add_argument("--force", action="store_true", help="recompute existing outputs")


OVERRIDES = ("manifest", "out_dir", "architectures", "seeds", "taps", "features", "tasks",
             "source_tasks", "measures", "concat_with", "similarity_split", "noise_seed",
             "noise_baseline", "cross_task", "workers")


def build_config(args: argparse.Namespace, need_manifest: bool = True) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    for name in OVERRIDES:
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    cfg.validate(need_manifest)
    return cfg


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="featprobe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic tone/chirp corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--sample-rate", type=int, default=16000)

    for name, text in [
        ("melspec", "compute dB mel-spectrograms for every manifest record"),
        ("features", "compute hand-crafted feature matrices"),
        ("deepfeat", "extract CNN feature taps (untrained or imported weights)"),
        ("similarity", "similarity grids between deep and hand-crafted features"),
        ("decode", "linear decoding reports"),
        ("report", "summarize decode/similarity outputs as markdown"),
    ]:
        _add_experiment_args(sub.add_parser(name, help=text))
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            return pipeline.run_synth(args.out, args.n, args.seed, args.classes, args.sample_rate)
        cfg = build_config(args, need_manifest=args.command != "report")
        if args.command == "melspec":
            return pipeline.run_melspec(cfg, args.force)
        if args.command == "features":
            return pipeline.run_features(cfg, args.force)
        if args.command == "deepfeat":
            return pipeline.run_deepfeat(cfg, args.force)
        if args.command == "similarity":
            return pipeline.run_similarity(cfg)
        if args.command == "decode":
            return pipeline.run_decode(cfg)
        if args.command == "report":
            return pipeline.run_report(cfg)
    except (ConfigError, ManifestError) as e:
        log.error("%s", e)
        return 2
    except (pipeline.DataError, FTBError, ValueError) as e:
        log.error("%s", e)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
