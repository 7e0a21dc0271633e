"""Regenerate the stored golden heatmaps: python tests/data/regen_golden.py"""

from pathlib import Path

import numpy as np

from camforge.cam import METHODS, AttributionRequest, attribute
from camforge.nn import ScoreSpec, forward, generate_toy_model
from camforge.postproc import synthetic_image

HERE = Path(__file__).parent
IMAGE_SEED = 7


def golden_inputs():
    model = generate_toy_model(42, "tiny").astype(64)
    image = synthetic_image(IMAGE_SEED, model.input_shape)
    c = int(np.argmax(forward(model, image).pre_softmax))
    return model, image, c


def compute(method):
    model, image, c = golden_inputs()
    req = AttributionRequest(method, model.last_spatial_layer(), ScoreSpec(c, "pre"))
    return attribute(model, image, req).values


if __name__ == "__main__":
    for m in METHODS:
        np.save(HERE / f"golden_{m}.npy", compute(m))
        print("wrote", HERE / f"golden_{m}.npy")
