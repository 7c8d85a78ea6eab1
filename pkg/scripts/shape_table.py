"""Print tap shapes and parameter counts for every architecture and input geometry."""

from featprobe.convnet import ARCHITECTURES, TAPS, architecture

GEOMETRIES = {"128x128 (16 kHz, 4 s)": 128, "128x176 (22.05 kHz, 4 s)": 176}


def main():
    for title, frames in GEOMETRIES.items():
        print(f"\n{title}")
        print(f"{'architecture':<12}" + "".join(f"{t:>16}" for t in TAPS) + f"{'conv params':>14}")
        for arch_id in ARCHITECTURES:
            arch = architecture(arch_id, frames=frames)
            shapes = arch.tap_shapes()
            cells = "".join(f"{str(shapes[t]):>16}" for t in TAPS)
            print(f"{arch_id:<12}{cells}{arch.trainable_parameter_count():>14}")


if __name__ == "__main__":
    main()
