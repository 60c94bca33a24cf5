"""Shared builders for tests: toy networks, containers, synthetic images."""

import os
import struct

import numpy as np

from deepsim.nets import (Conv2D, MaxPool, NetworkSpec, ReLU,
                          WeightContainer, load_network, write_container)

TOY_MEAN = (0.5, 0.5, 0.5)
TOY_STD = (0.25, 0.25, 0.25)


def toy_spec(widths=(16, 32), name="toynet"):
    """Two conv layers with ReLU taps, a pool in between."""
    return NetworkSpec(
        name=name,
        layers=(Conv2D(widths[0], 3, 3, stride=1, padding=1), ReLU(tap=True),
                MaxPool(2, 2),
                Conv2D(widths[1], 3, 3, stride=1, padding=1), ReLU(tap=True)),
        mean=TOY_MEAN, std=TOY_STD)


def toy_tensors(spec, seed, bias_scale=0.0):
    rng = np.random.default_rng(seed)
    tensors = {}
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv2D):
            cin = spec.in_channels(i)
            fan = cin * layer.kernel_h * layer.kernel_w
            shape = (layer.out_channels, cin, layer.kernel_h, layer.kernel_w)
            tensors[f"layers.{i}.weight"] = (
                rng.standard_normal(shape) / np.sqrt(fan)).astype(np.float32)
            tensors[f"layers.{i}.bias"] = (
                bias_scale * rng.standard_normal(layer.out_channels)).astype(np.float32)
    return tensors


def toy_network(tmp_path, seed=7, widths=(16, 32), bias_scale=0.0,
                name="toynet"):
    """Build and load a toy network backed by a container under tmp_path."""
    spec = toy_spec(widths, name=name)
    path = str(tmp_path / f"{name}_{seed}.dsw")
    write_container(path, toy_tensors(spec, seed, bias_scale),
                    meta={"preprocess": {"mean": list(TOY_MEAN),
                                         "std": list(TOY_STD)}})
    return load_network(spec, WeightContainer(path))


def synth_images(seed, n, size=16):
    """Structured color images: a grating, a smooth blob, light noise."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size),
                         indexing="ij")
    out = []
    for _ in range(n):
        freq = rng.uniform(1, 8)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        grating = 0.5 + 0.5 * np.sin(
            2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy)
            + phase)
        color_a = rng.random(3)[:, None, None]
        color_b = rng.random(3)[:, None, None]
        img = color_a * grating + color_b * (1 - grating)
        cx, cy = rng.uniform(0, 1, 2)
        sigma = rng.uniform(0.1, 0.4)
        blob = np.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2)
                        / (2 * sigma * sigma)))
        img = 0.6 * img + 0.4 * rng.random(3)[:, None, None] * blob
        img += 0.05 * rng.standard_normal((3, size, size))
        out.append(np.clip(img, 0, 1).astype(np.float32))
    return out


class ListDataset(list):
    """A list of images with the dataset-handle attribute evaluation wants."""
    ident = "synthetic"


def write_patch_layout(root, part, split, categories, n, judge_value=None):
    """Build a tiny human-judgement patch layout for dataset tests."""
    from deepsim.evaluation import save_png

    rng = np.random.default_rng(40)
    subs = ("ref", "p0", "p1", "judge") if part == "2afc" \
        else ("p0", "p1", "same")
    for cat in categories:
        for sub in subs:
            os.makedirs(os.path.join(str(root), part, split, cat, sub),
                        exist_ok=True)
        for i in range(n):
            ident = f"{i:06d}"
            for sub in subs[:-1]:
                img = rng.random((3, 6, 6), dtype=np.float32)
                save_png(os.path.join(str(root), part, split, cat, sub,
                                      ident + ".png"), img)
            value = rng.random() if judge_value is None else judge_value
            with open(os.path.join(str(root), part, split, cat, subs[-1],
                                   ident), "wb") as fh:
                fh.write(struct.pack("<f", value))


def random_stack_pair(rng, shapes):
    """Two FeatureStacks of the given (C, H, W) shapes, random positive."""
    from deepsim.nets import FeatureStack

    def one():
        layers = tuple(rng.random(s, dtype=np.float32) for s in shapes)
        return FeatureStack(layers=layers,
                            tap_indices=tuple(range(len(shapes))))

    return one(), one()
