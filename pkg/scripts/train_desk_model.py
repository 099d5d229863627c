"""Fit the reference tiny convnet on the synthetic desk corpus.

Writes ``src/visual_summaries/data/desk_model/{model.yaml,weights.pt}``.
Run once; the weights are committed so tests never retrain.
"""
import argparse
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from visual_summaries import desk
from visual_summaries.oracle import ModelManifest, TinyConvNet

MEAN = [0.5, 0.5, 0.5]
STD = [0.25, 0.25, 0.25]


def to_tensor(items):
    x = np.stack([it.image for it in items]).transpose(0, 3, 1, 2)
    x = (x - np.array(MEAN)[None, :, None, None]) / np.array(STD)[None, :, None, None]
    y = np.array([desk.LABELS.index(it.label) for it in items])
    return torch.tensor(x, dtype=torch.float32), torch.tensor(y)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=Path(__file__).resolve().parents[1] / "src/visual_summaries/data/desk_model")
    ap.add_argument("--per-class", type=int, default=600)
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--label-smoothing", type=float, default=0.02)
    args = ap.parse_args()
    torch.manual_seed(args.seed)
    xtr, ytr = to_tensor(desk.training_set(args.seed, args.per_class))
    xva, yva = to_tensor(desk.training_set(args.seed + 1, 100))
    model = TinyConvNet(len(desk.LABELS))
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    g = torch.Generator().manual_seed(args.seed)
    for epoch in range(args.epochs):
        model.train()
        perm = torch.randperm(len(xtr), generator=g)
        for i in range(0, len(perm), 64):
            idx = perm[i:i + 64]
            loss = F.cross_entropy(model(xtr[idx])["logits"], ytr[idx], label_smoothing=args.label_smoothing)
            opt.zero_grad()
            loss.backward()
            opt.step()
        model.eval()
        with torch.no_grad():
            acc = (model(xva)["logits"].argmax(1) == yva).float().mean().item()
        print(f"epoch {epoch} loss {loss.item():.4f} val acc {acc:.4f}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out / "weights.pt")
    ModelManifest(
        architecture="tiny_convnet",
        labels=desk.LABELS,
        input_size=(desk.IMAGE_SIZE, desk.IMAGE_SIZE),
        mean=MEAN,
        std=STD,
        feature_layers={"fc1": 32, "pool": 32},
        weights="weights.pt",
    ).dump(out / "model.yaml")


if __name__ == "__main__":
    main()
