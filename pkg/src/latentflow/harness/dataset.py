"""On-disk sample directories: ``NNNN_img1.png``, ``NNNN_img2.png``, ``NNNN_flow.flo``."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from latentflow.harness.flo import read_flo, write_flo
from latentflow.harness.images import load_png, save_png
from latentflow.harness.synthetic import SyntheticSample


def in_frame(flow: np.ndarray) -> np.ndarray:
    _, h, w = flow.shape
    ys, xs = np.mgrid[0:h, 0:w]
    tx, ty = xs + flow[0], ys + flow[1]
    return (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)


def write_dataset(out_dir, samples) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stems = []
    for i, s in enumerate(samples):
        stem = out / f"{i:04d}"
        save_png(f"{stem}_img1.png", s.image1)
        save_png(f"{stem}_img2.png", s.image2)
        write_flo(f"{stem}_flow.flo", s.flow)
        stems.append(stem)
    return stems


def read_dataset(data_dir) -> list:
    d = Path(data_dir)
    samples = []
    for flo in sorted(d.glob("*_flow.flo")):
        stem = str(flo)[: -len("_flow.flo")]
        flow = read_flo(flo)
        samples.append(SyntheticSample(load_png(f"{stem}_img1.png"), load_png(f"{stem}_img2.png"),
                                       flow, in_frame(flow)))
    return samples
