"""Gated attention-based multiple-instance learning for slide classification.

Bags of frozen patch embeddings are pooled by a gated attention head and
classified by a single linear layer. Training runs full-batch over padded bag
tensors, so it is deterministic for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import roc_auc_score
from torch import nn

from .errors import InputError


@dataclass
class Bag:
    slide_id: str
    instances: np.ndarray  # (n_instances, d)
    label: int


@dataclass
class AbmilConfig:
    hidden: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 100
    patience: int = 10
    seed: int = 0


class AbmilModel(nn.Module):
    """Gated attention pooling (tanh gate * sigmoid gate) over instances,
    followed by a linear classifier on the pooled embedding."""

    def __init__(self, input_dim: int, hidden: int = 64):
        super().__init__()
        self.attn_v = nn.Linear(input_dim, hidden)
        self.attn_u = nn.Linear(input_dim, hidden)
        self.attn_w = nn.Linear(hidden, 1, bias=False)
        self.classifier = nn.Linear(input_dim, 1)

    def attention_scores(self, x: torch.Tensor) -> torch.Tensor:
        return self.attn_w(torch.tanh(self.attn_v(x)) * torch.sigmoid(self.attn_u(x))).squeeze(-1)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """x: (B, n_max, d) padded bags; mask: (B, n_max) True for real instances.
        Returns (logits (B,), attention (B, n_max)) with padded weights at 0."""
        scores = self.attention_scores(x)
        scores = scores.masked_fill(~mask, float("-inf"))
        attn = torch.softmax(scores, dim=1)
        pooled = torch.einsum("bn,bnd->bd", attn, x)
        return self.classifier(pooled).squeeze(-1), attn


def _pad_bags(bags: list[Bag]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    if not bags:
        raise InputError("no bags provided")
    if any(bag.instances.shape[0] < 1 for bag in bags):
        raise InputError("every bag needs at least one instance")
    n_max = max(bag.instances.shape[0] for bag in bags)
    d = bags[0].instances.shape[1]
    x = torch.zeros(len(bags), n_max, d)
    mask = torch.zeros(len(bags), n_max, dtype=torch.bool)
    for i, bag in enumerate(bags):
        n = bag.instances.shape[0]
        x[i, :n] = torch.from_numpy(np.asarray(bag.instances, dtype=np.float32))
        mask[i, :n] = True
    y = torch.tensor([float(bag.label) for bag in bags])
    return x, mask, y


def abmil_train(train_bags: list[Bag], config: AbmilConfig,
                val_bags: list[Bag] | None = None) -> AbmilModel:
    """Fit the MIL classifier; early-stops on validation BCE when val bags are
    given, restoring the best epoch's weights."""
    x, mask, y = _pad_bags(train_bags)
    if len(set(int(b.label) for b in train_bags)) < 2:
        raise InputError("MIL training needs both bag labels present")
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        model = AbmilModel(x.shape[-1], config.hidden)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr,
                                  weight_decay=config.weight_decay)
    val = _pad_bags(val_bags) if val_bags else None
    best_loss, best_state, since_best = float("inf"), None, 0
    for _ in range(config.epochs):
        model.train()
        logits, _ = model(x, mask)
        loss = F.binary_cross_entropy_with_logits(logits, y)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if val is not None:
            model.eval()
            with torch.no_grad():
                v_logits, _ = model(val[0], val[1])
                v_loss = float(F.binary_cross_entropy_with_logits(v_logits, val[2]))
            if v_loss < best_loss - 1e-6:
                best_loss, since_best = v_loss, 0
                best_state = {k: v.clone() for k, v in model.state_dict().items()}
            else:
                since_best += 1
                if since_best >= config.patience:
                    break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model


def abmil_predict(model: AbmilModel, bag: Bag) -> tuple[float, np.ndarray]:
    """Probability of label 1 plus the per-instance attention weights."""
    x, mask, _ = _pad_bags([bag])
    model.eval()
    with torch.no_grad():
        logits, attn = model(x, mask)
    return float(torch.sigmoid(logits[0])), attn[0].numpy()


def evaluate_bags(model: AbmilModel, bags: list[Bag]) -> dict:
    """Accuracy at threshold 0.5 and AUC (nan when only one label present)."""
    probs = np.array([abmil_predict(model, bag)[0] for bag in bags])
    labels = np.array([bag.label for bag in bags])
    acc = float(((probs >= 0.5).astype(int) == labels).mean())
    auc = float(roc_auc_score(labels, probs)) if len(np.unique(labels)) == 2 else float("nan")
    return {"accuracy": acc, "auc": auc, "n_bags": len(bags)}
