"""Masked cost-volume pretraining, then supervised finetuning, against training from scratch.

    python demos/mcva_vs_scratch.py --pretrain-steps 500 --train-steps 600

Pretraining sees only image pairs (no flow labels). The pretrained checkpoint
is loaded into a fresh supervised model; only the reconstruction head is
left over. Both runs then train on the same labelled pairs and report a
running AEPE.
"""
import argparse
import tempfile
from pathlib import Path

import numpy as np

from latentflow.config import desk_config
from latentflow.harness.checkpoint import load_checkpoint, load_into, save_checkpoint
from latentflow.harness.synthetic import synth_dataset
from latentflow.harness.train import PretrainConfig, TrainConfig, pretrain, train_supervised
from latentflow.mcva import pretrained_state
from latentflow.model import FlowModel


WINDOW = 50


def running(log):
    a = log.column("aepe")
    w = min(WINDOW, len(a))
    return np.convolve(a, np.ones(w) / w, mode="valid")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--pretrain-steps", type=int, default=500)
    ap.add_argument("--train-steps", type=int, default=600)
    ap.add_argument("--pairs", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    data = synth_dataset(args.pairs, 96, 96, seed=args.seed)

    pre = FlowModel(desk_config(freeze_image_encoder=True, seed=args.seed))
    log, head = pretrain(pre, data, PretrainConfig(steps=args.pretrain_steps, seed=args.seed))
    print(f"pretext loss {log.rows[0]['loss']:.3f} -> {np.mean(log.column('loss')[-50:]):.3f}")

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "mcva.ckpt"
        save_checkpoint(path, pretrained_state(pre, head), pre.cfg.to_dict(), kind="pretrain")
        init = FlowModel(desk_config(seed=args.seed))
        report = load_into(init, load_checkpoint(path))
    print("left unmatched:", report.unmatched_layers)

    scratch = FlowModel(desk_config(seed=args.seed))
    cfg = TrainConfig(steps=args.train_steps, seed=args.seed)
    curves = {"mcva": running(train_supervised(init, data, cfg)),
              "scratch": running(train_supervised(scratch, data, cfg))}
    first = args.train_steps - len(curves["mcva"])
    for i in range(0, len(curves["mcva"]), WINDOW):
        print(f"step {i + first:4d}  running AEPE  mcva {curves['mcva'][i]:.3f}  scratch {curves['scratch'][i]:.3f}")


if __name__ == "__main__":
    main()
