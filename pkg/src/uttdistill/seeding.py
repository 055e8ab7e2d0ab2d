"""One master seed fans out to named, independent sub-seeds."""
import zlib

import numpy as np

SEED_NAMES = ("data", "init", "mask", "probe")


def sub_seed(master: int, name: str) -> int:
    ss = np.random.SeedSequence([int(master), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def fan_out(master: int) -> dict[str, int]:
    return {name: sub_seed(master, name) for name in SEED_NAMES}
