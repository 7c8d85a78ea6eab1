"""Layer-by-layer linear CKA between untrained networks and hand-crafted features.

    python scripts/untrained_layers.py --n 120 --arch Regular --arch Deformable

Generates a small synthetic corpus in a temporary directory, extracts every
tap for several random initializations and prints one seed-averaged grid
per architecture (rows: taps, columns: hand-crafted features plus noise).
"""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from featprobe import convnet, dsp, handcrafted, simlab, synth
from featprobe.tensorio import load_manifest

FEATURES = ["meanPower", "timeToDb(-70)", "waveletStat(25,mean,overTime)",
            "waveletCombined(25,overTime)", "top4Combined"]


def spectrograms(manifest_path):
    man = load_manifest(manifest_path)
    specs = [dsp.clip_to_db(dsp.read_wav(r.path), man.clip_seconds).values for r in man.records]
    return man, np.stack(specs)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=120)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--arch", action="append", default=None)
    ap.add_argument("--split", choices=["train", "test", "all"], default="test")
    args = ap.parse_args(argv)
    archs = args.arch or ["Regular", "Deformable"]

    with tempfile.TemporaryDirectory() as tmp:
        manifest = synth.generate(Path(tmp), synth.SynthConfig(n=args.n))
        man, specs = spectrograms(manifest)
    rows = np.arange(len(man.records)) if args.split == "all" else man.split_indices(args.split)
    hand = {}
    for name in FEATURES:
        fm = handcrafted.assemble([handcrafted.FeatureSpec.parse(name)], list(specs))
        hand[name] = fm.values[rows]

    for arch_id in archs:
        arch = convnet.architecture(arch_id)
        grids = []
        for seed in range(args.seeds):
            weights = convnet.init_weights(arch, convnet.InitConfig(seed=seed))
            acts = convnet.forward_extract(arch, weights, specs[rows], convnet.TAPS)
            deep = {tap: convnet.flatten_tap(tap, acts[tap]) for tap in convnet.TAPS}
            grids.append(simlab.similarity_grid(deep, hand, "cka", noise_seed=0))
        mean = simlab.average_grids(grids)
        width = max(len(c) for c in mean.col_labels)
        print(f"\n{arch_id} (untrained, mean over {args.seeds} seeds, {len(rows)} clips)")
        print(" " * 6 + "".join(f"{c[:width]:>{width + 2}}" for c in mean.col_labels))
        for label, vals in zip(mean.row_labels, mean.values):
            print(f"{label:<6}" + "".join(f"{v:>{width + 2}.3f}" for v in vals))


if __name__ == "__main__":
    main()
