"""Desk-scale stand-ins: a synthetic 10-class shapes dataset and small CNNs.

Every model exposes ``stage1`` .. ``stage4`` sub-modules (depth indices for
feature drop) and ends in global average pooling plus a single ``fc`` layer,
so the deep-layer statistics have a final linear layer to sort by.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from swfd.data import from_levels, save_image_lossless, write_manifest

log = logging.getLogger(__name__)

SHAPES = ("square", "disk", "triangle", "cross", "ring", "hbar", "vbar", "diamond", "xmark", "ell")


def _conv_bn(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU())


class ConvNet(nn.Module):
    def __init__(self, num_classes=10, widths=(16, 32, 64, 128)):
        super().__init__()
        chans = (3,) + tuple(widths)
        stages = []
        for i in range(len(widths)):
            layers = [_conv_bn(chans[i], chans[i + 1]), _conv_bn(chans[i + 1], chans[i + 1])]
            if i < len(widths) - 1:
                layers.append(nn.MaxPool2d(2))
            stages.append(nn.Sequential(*layers))
        for i, stage in enumerate(stages, 1):
            setattr(self, f"stage{i}", stage)
        self.num_stages = len(stages)
        self.fc = nn.Linear(widths[-1], num_classes)

    def forward(self, x):
        for i in range(1, self.num_stages + 1):
            x = getattr(self, f"stage{i}")(x)
        return self.fc(x.mean(dim=(2, 3)))


class _Residual(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, stride, 1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(),
            nn.Conv2d(cout, cout, 3, 1, 1, bias=False),
            nn.BatchNorm2d(cout),
        )
        self.skip = (
            nn.Identity()
            if stride == 1 and cin == cout
            else nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))
        )

    def forward(self, x):
        return F.relu(self.body(x) + self.skip(x))


class ResNet(nn.Module):
    def __init__(self, num_classes=10, widths=(16, 32, 64, 128)):
        super().__init__()
        self.stem = _conv_bn(3, widths[0])
        cin = widths[0]
        for i, w in enumerate(widths, 1):
            setattr(self, f"stage{i}", _Residual(cin, w, 1 if i == 1 else 2))
            cin = w
        self.fc = nn.Linear(widths[-1], num_classes)

    def forward(self, x):
        x = self.stem(x)
        for i in range(1, 5):
            x = getattr(self, f"stage{i}")(x)
        return self.fc(x.mean(dim=(2, 3)))


class PlainNet(nn.Module):
    """No batch norm, 5x5 first conv, average pooling between stages."""

    def __init__(self, num_classes=10, widths=(24, 48, 96, 96)):
        super().__init__()
        self.stage1 = nn.Sequential(nn.Conv2d(3, widths[0], 5, padding=2), nn.ReLU())
        self.stage2 = nn.Sequential(nn.AvgPool2d(2), nn.Conv2d(widths[0], widths[1], 3, padding=1), nn.ReLU())
        self.stage3 = nn.Sequential(nn.AvgPool2d(2), nn.Conv2d(widths[1], widths[2], 3, padding=1), nn.ReLU())
        self.stage4 = nn.Sequential(nn.AvgPool2d(2), nn.Conv2d(widths[2], widths[3], 3, padding=1), nn.ReLU())
        self.fc = nn.Linear(widths[3], num_classes)

    def forward(self, x):
        x = self.stage4(self.stage3(self.stage2(self.stage1(x))))
        return self.fc(x.mean(dim=(2, 3)))


BUILDERS = {"convnet": ConvNet, "resnet": ResNet, "plainnet": PlainNet}


def build(arch: str, num_classes: int = 10, **kwargs) -> nn.Module:
    if arch not in BUILDERS:
        raise KeyError(f"unknown toy architecture {arch!r}")
    if "widths" in kwargs:
        kwargs["widths"] = tuple(kwargs["widths"])
    return BUILDERS[arch](num_classes=num_classes, **kwargs)


def _shape_mask(kind, size, yy, xx, cy, cx):
    r = size / 2
    dy, dx = yy - cy, xx - cx
    t = max(1.5, size / 5)
    if kind == "square":
        return (abs(dy) <= r) & (abs(dx) <= r)
    if kind == "disk":
        return dy**2 + dx**2 <= r**2
    if kind == "triangle":
        return (dy <= r) & (dy >= -r) & (abs(dx) <= (dy + r) / 2)
    if kind == "cross":
        return ((abs(dy) <= t / 2) & (abs(dx) <= r)) | ((abs(dx) <= t / 2) & (abs(dy) <= r))
    if kind == "ring":
        d = np.sqrt(dy**2 + dx**2)
        return (d <= r) & (d >= r - t)
    if kind == "hbar":
        return (abs(dy) <= t / 2 + 0.5) & (abs(dx) <= r)
    if kind == "vbar":
        return (abs(dx) <= t / 2 + 0.5) & (abs(dy) <= r)
    if kind == "diamond":
        return abs(dy) + abs(dx) <= r
    if kind == "xmark":
        return ((abs(dy - dx) <= t / 1.4) | (abs(dy + dx) <= t / 1.4)) & (abs(dy) <= r) & (abs(dx) <= r)
    if kind == "ell":
        return ((abs(dx + r - t / 2) <= t / 2) & (abs(dy) <= r)) | ((abs(dy - r + t / 2) <= t / 2) & (abs(dx) <= r))
    raise KeyError(kind)


def render_shapes(n: int, size: int = 32, seed: int = 0, num_classes: int = 10, clutter: int = 6, noise: float = 0.05):
    """Return (uint8 images (n, 3, size, size), labels (n,)).

    One coloured shape per image on a noisy background with up to
    ``clutter`` small distractor strokes; the class is the shape kind, so the
    object occupies the discriminative region. The clutter keeps the models
    from relying on coarse cues alone, which brings their adversarial
    behaviour closer to that of natural-image classifiers.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, 3, size, size), dtype=np.uint8)
    labels = rng.integers(0, num_classes, size=n)
    for i in range(n):
        base = rng.uniform(0.1, 0.6, size=3)
        gy, gx = rng.uniform(-0.15, 0.15, size=2)
        bg = base[:, None, None] + gy * (yy / size - 0.5) + gx * (xx / size - 0.5)
        bg = bg + rng.normal(0, noise, size=(3, size, size))
        for _ in range(rng.integers(0, clutter + 1)):
            # distractor strokes and blobs, too small to read as a class shape
            kind = rng.integers(0, 3)
            py, px = rng.uniform(0, size, size=2)
            if kind == 0:
                blob = (yy - py) ** 2 + (xx - px) ** 2 <= rng.uniform(1, 3) ** 2
            elif kind == 1:
                blob = (abs(yy - py) <= 0.6) & (abs(xx - px) <= rng.uniform(2, 6))
            else:
                blob = (abs(xx - px) <= 0.6) & (abs(yy - py) <= rng.uniform(2, 6))
            bg = np.where(blob[None], rng.uniform(0, 1, size=3)[:, None, None], bg)
        obj = rng.uniform(10, size * 0.55)
        cy, cx = rng.uniform(obj / 2 + 1, size - obj / 2 - 1, size=2)
        mask = _shape_mask(SHAPES[labels[i] % len(SHAPES)], obj, yy, xx, cy, cx)
        color = rng.uniform(0.0, 1.0, size=3)
        color[rng.integers(0, 3)] = rng.uniform(0.85, 1.0)
        img = np.where(mask[None], color[:, None, None], bg)
        images[i] = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    return images, labels


def train(
    model: nn.Module,
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int = 6,
    batch_size: int = 64,
    lr: float = 3e-3,
    seed: int = 0,
    mean=(0.5, 0.5, 0.5),
    std=(0.25, 0.25, 0.25),
) -> float:
    """Adam training on uint8 images; returns final training accuracy."""
    torch.manual_seed(seed)
    x_all = from_levels(torch.from_numpy(images))
    m = torch.tensor(mean).view(1, 3, 1, 1)
    s = torch.tensor(std).view(1, 3, 1, 1)
    x_all = (x_all - m) / s
    y_all = torch.from_numpy(labels).long()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.OneCycleLR(
        opt, max_lr=lr, total_steps=epochs * ((len(x_all) + batch_size - 1) // batch_size)
    )
    gen = torch.Generator().manual_seed(seed)
    model.train()
    for epoch in range(epochs):
        perm = torch.randperm(len(x_all), generator=gen)
        total = correct = 0
        for start in range(0, len(x_all), batch_size):
            idx = perm[start:start + batch_size]
            xb, yb = x_all[idx], y_all[idx]
            if torch.rand(1, generator=gen).item() < 0.5:
                xb = xb.flip(3)
            out = model(xb)
            loss = F.cross_entropy(out, yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += len(yb)
            correct += (out.argmax(1) == yb).sum().item()
        log.info("epoch %d: train acc %.3f", epoch + 1, correct / total)
    model.eval()
    return correct / total


def build_zoo(
    out_dir,
    archs=("convnet", "resnet", "plainnet"),
    n_train: int = 6000,
    n_eval: int = 200,
    epochs: int = 6,
    seed: int = 0,
) -> dict:
    """Train the toy models and write an evaluation split with a manifest.

    Layout: ``<out_dir>/checkpoints/toy_<arch>.pt`` and
    ``<out_dir>/data/{manifest.csv, *.png}``. Returns accuracies per model.
    """
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    data_dir = out_dir / "data"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    images, labels = render_shapes(n_train, seed=seed)
    eval_images, eval_labels = render_shapes(n_eval, seed=seed + 10_000)
    rng = np.random.Generator(np.random.Philox(seed + 20_000))
    targets = (eval_labels + rng.integers(1, 10, size=n_eval)) % 10
    rows = []
    for i in range(n_eval):
        fname = f"img{i:04d}.png"
        save_image_lossless(from_levels(torch.from_numpy(eval_images[i])), data_dir / fname)
        rows.append((f"img{i:04d}", fname, int(eval_labels[i]), int(targets[i])))
    write_manifest(data_dir / "manifest.csv", rows)

    x_eval = from_levels(torch.from_numpy(eval_images))
    report = {}
    for k, arch in enumerate(archs):
        torch.manual_seed(seed + k)
        model = build(arch)
        train_acc = train(model, images, labels, epochs=epochs, seed=seed + k)
        torch.save(model.state_dict(), ckpt_dir / f"toy_{arch}.pt")
        with torch.no_grad():
            pred = model((x_eval - 0.5) / 0.25).argmax(1).numpy()
        report[f"toy_{arch}"] = {"train_acc": train_acc, "eval_acc": float((pred == eval_labels).mean())}
        log.info("toy_%s: %s", arch, report[f"toy_{arch}"])
    return report
