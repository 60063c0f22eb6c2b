"""Small labelled toy tasks for sanity-checking learned representations."""

import numpy as np

from .rng import stream
from .tsfile import LabeledDataset

# cycles per series for each class; the bands do not overlap
FREQUENCY_BANDS = ((2.0, 5.0), (8.0, 14.0))


def frequency_task(seed, n_per_class, length=512, bands=FREQUENCY_BANDS, noise=0.5, split="train"):
    """Noisy sinusoids whose class is the band their frequency is drawn from.

    Phase, amplitude and offset are random per series, and Gaussian noise of
    ``noise`` times the amplitude is added, so the class is carried only by the
    dominant frequency.
    """
    rng = stream(seed, "frequency_task", split)
    t = np.arange(length) / length
    series, labels = [], []
    for label, (lo, hi) in enumerate(bands):
        for _ in range(n_per_class):
            cycles = rng.uniform(lo, hi)
            amp = np.exp(rng.normal(0.0, 0.5))
            x = amp * np.sin(2 * np.pi * cycles * t + rng.uniform(0, 2 * np.pi))
            x += rng.normal(0.0, 1.0) + noise * amp * rng.standard_normal(length)
            series.append(x[None, :])
            labels.append(str(label))
    order = rng.permutation(len(series))
    classes = tuple(str(i) for i in range(len(bands)))
    return LabeledDataset("frequency", [series[i] for i in order], np.array(labels, dtype=object)[order], classes)
