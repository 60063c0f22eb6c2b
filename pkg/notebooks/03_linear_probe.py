"""
Probing frozen teacher embeddings
=================================

Loads the teacher written by ``02_pretrain_tiny.py`` and compares a linear
probe on its CLS embeddings with one on a randomly initialised encoder of
the same shape. The labelled task is two classes of noisy sinusoids that
differ only in their dominant frequency.
"""

import glob

import numpy as np

from tsdistill.evaluate import embed, linear_probe
from tsdistill.model import init_params
from tsdistill.tasks import frequency_task
from tsdistill.trainer import load_teacher

cfg, teacher = load_teacher(sorted(glob.glob("demo_run/checkpoint_*.utck"))[-1])
train = frequency_task(0, 500, split="train")
test = frequency_task(0, 200, split="test")

for name, params in (("pretrained teacher", teacher), ("random encoder", init_params(cfg.model, 1000, with_heads=False))):
    xtr, xte = embed(params, cfg.model, train), embed(params, cfg.model, test)
    accs = [linear_probe(xtr, train.labels, xte, test.labels, seed=s, selection="val").accuracy for s in range(3)]
    print(f"{name:>18}: accuracy {np.mean(accs):.3f} over seeds {np.round(accs, 3).tolist()}")
