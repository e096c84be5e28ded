"""Write the small binary fixtures used by the format tests.

Everything is derived from a fixed numpy seed, so re-running the script
reproduces the committed files byte for byte.
"""
import struct
import sys
from pathlib import Path

import numpy as np


def main(out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(20240229)

    # CIFAR-10: 6 records of label byte + 3072 pixel bytes.
    records = []
    for label in [0, 9, 3, 3, 7, 1]:
        records.append(bytes([label]) + rng.integers(0, 256, 3072, dtype=np.uint8).tobytes())
    (out / "cifar10.bin").write_bytes(b"".join(records))

    # CIFAR-100: coarse byte, fine byte, pixels.
    records = []
    for coarse, fine in [(0, 99), (19, 0), (4, 42), (11, 57)]:
        records.append(bytes([coarse, fine]) + rng.integers(0, 256, 3072, dtype=np.uint8).tobytes())
    (out / "cifar100.bin").write_bytes(b"".join(records))

    # Colour IDX (0x804): 3 images of 3x4x5.
    images = rng.integers(0, 256, (3, 3, 4, 5), dtype=np.uint8)
    (out / "colour-images.idx4-ubyte").write_bytes(struct.pack(">IIIII", 0x804, 3, 3, 4, 5) + images.tobytes())
    (out / "colour-labels.idx1-ubyte").write_bytes(struct.pack(">II", 0x801, 3) + bytes([2, 0, 1]))

    # Malformed files.
    good10 = (out / "cifar10.bin").read_bytes()
    (out / "bad-cifar10-truncated.bin").write_bytes(good10[:-100])
    bad_label = bytearray(good10)
    bad_label[3073] = 10
    (out / "bad-cifar10-label.bin").write_bytes(bytes(bad_label))
    mnist = struct.pack(">IIII", 0x803, 2, 4, 4) + rng.integers(0, 256, 32, dtype=np.uint8).tobytes()
    (out / "bad-idx-magic.idx3-ubyte").write_bytes(b"\x00\x00\x09\x03" + mnist[4:])
    (out / "bad-idx-truncated.idx3-ubyte").write_bytes(mnist[:-5])
    (out / "bad-idx-header.idx3-ubyte").write_bytes(mnist[:10])
    (out / "short-labels.idx1-ubyte").write_bytes(struct.pack(">II", 0x801, 2) + bytes([1]))
    (out / "mismatch-labels.idx1-ubyte").write_bytes(struct.pack(">II", 0x801, 3) + bytes([1, 0, 1]))
    (out / "good-images.idx3-ubyte").write_bytes(mnist)
    (out / "good-labels.idx1-ubyte").write_bytes(struct.pack(">II", 0x801, 2) + bytes([1, 0]))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/fixtures/formats")
