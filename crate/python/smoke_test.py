"""Smoke test for the thsmooth extension module.

Build and install first, e.g. `maturin develop -m crates/python/Cargo.toml
--features extension-module`, then run `python python/smoke_test.py`.
"""

import math
import os
import random
import tempfile

import thsmooth


def check(cond, msg):
    if not cond:
        raise SystemExit(f"FAIL: {msg}")
    print(f"ok   {msg}")


def main():
    check(abs(thsmooth.huber(0.05, 0.1) - 0.0125) < 1e-15, "huber quadratic branch")
    check(abs(thsmooth.truncated_huber(1.0, 0.1, 0.5) - 0.45) < 1e-15, "truncated huber cap")

    names = thsmooth.preset_names()
    check(len(names) == 7 and "group2_sharpen" in names, "seven presets")
    p = thsmooth.preset("group4_texture", lambda_=0.3)
    check(abs(p.lambda_ - 0.3) < 1e-15, "preset override")
    try:
        thsmooth.preset("nope")
        check(False, "unknown preset rejected")
    except ValueError:
        check(True, "unknown preset rejected")

    rng = random.Random(0)
    h, w = 12, 16
    f = thsmooth.ImageGrid(h, w, 3, [rng.random() for _ in range(h * w * 3)])
    out, energies = thsmooth.smooth(f, thsmooth.preset("group2_sharpen"), audit=True)
    check((out.height, out.width, out.channels) == (h, w, 3), "shape preserved")
    check(all(math.isfinite(v) for v in out.data()), "finite output")
    e_u = [e[0] for e in energies]
    check(all(b <= a + 1e-10 for a, b in zip(e_u, e_u[1:])), "energy non-increasing")

    sig = thsmooth.gen_1d_fixture("blurred_step", 0)
    u = thsmooth.smooth(sig, thsmooth.fixture_params("blurred_step"))
    check(u.width == sig.width == 256, "1-D fixture round trip")

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "x.png")
        thsmooth.save_image(out.clamped(), path, 16)
        back = thsmooth.load_image(path)
        err = max(abs(a - b) for a, b in zip(back.data(), out.clamped().data()))
        check(err <= 0.5 / 65535 + 1e-12, "16-bit png round trip")

    g = f.to_luma()
    low = thsmooth.ImageGrid(3, 4, 1, [rng.random() for _ in range(12)])
    up = thsmooth.upsample_depth(low, g, 4)
    check((up.height, up.width) == (h, w), "depth upsampling shape")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
