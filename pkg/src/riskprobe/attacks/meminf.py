"""Membership inference under the four (access, auxiliary) cells that support it."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from riskprobe import metrics
from riskprobe.access import Access, TargetModelHandle
from riskprobe.data import LabeledImageDataset
from riskprobe.errors import CapabilityError, DegenerateLabels

BB_INPUTS = ("ranked_posteriors", "correct_onehot")
WB_INPUTS = ("ranked_posteriors", "loss", "last_layer_grad", "label_onehot")


@dataclass
class MembershipFeatures:
    """Attack inputs keyed by name plus member (1) / non-member (0) labels."""

    mode: Access
    inputs: dict[str, torch.Tensor]
    labels: torch.Tensor
    ids: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "MembershipFeatures":
        index = torch.as_tensor(np.asarray(index), dtype=torch.long)
        return MembershipFeatures(
            self.mode,
            {k: v[index] for k, v in self.inputs.items()},
            self.labels[index],
            None if self.ids is None else self.ids[index.numpy()],
        )

    @staticmethod
    def concat(parts: list["MembershipFeatures"]) -> "MembershipFeatures":
        ids = [p.ids for p in parts]
        return MembershipFeatures(
            parts[0].mode,
            {k: torch.cat([p.inputs[k] for p in parts]) for k in parts[0].inputs},
            torch.cat([p.labels for p in parts]),
            None if any(i is None for i in ids) else np.concatenate(ids),
        )

    def save(self, path) -> None:
        np.savez(
            path,
            mode=self.mode.value,
            labels=self.labels.numpy(),
            ids=np.array([]) if self.ids is None else self.ids,
            **{f"in_{k}": v.numpy() for k, v in self.inputs.items()},
        )

    @classmethod
    def load(cls, path) -> "MembershipFeatures":
        with np.load(path) as z:
            inputs = {k[3:]: torch.from_numpy(z[k]) for k in z.files if k.startswith("in_")}
            ids = z["ids"] if len(z["ids"]) else None
            return cls(Access(str(z["mode"])), inputs, torch.from_numpy(z["labels"]), ids)


def extract_features(handle: TargetModelHandle, ds: LabeledImageDataset, mode: Access, member: int) -> MembershipFeatures:
    """Per-sample attack features from ``handle``; every row gets label ``member``."""
    mode = Access(mode)
    if mode is Access.WHITE_BOX and not handle.white_box:
        raise CapabilityError("white-box membership features need a white-box handle")
    x, y = ds.tensors()
    post = handle.query(x)
    inputs = {"ranked_posteriors": torch.sort(post, dim=1, descending=True).values}
    if mode is Access.BLACK_BOX:
        correct = (post.argmax(dim=1) == y).long()
        inputs["correct_onehot"] = F.one_hot(correct, 2).float()
    else:
        inputs["loss"] = handle.loss(x, y).unsqueeze(1)
        inputs["last_layer_grad"] = handle.last_layer_gradient(x, y)
        inputs["label_onehot"] = F.one_hot(y, handle.num_classes).float()
    labels = torch.full((len(ds),), member, dtype=torch.long)
    return MembershipFeatures(mode, inputs, labels, ds.ids.copy())


def balance(features: MembershipFeatures, seed: int) -> MembershipFeatures:
    """Downsample the larger of members / non-members to the smaller count."""
    labels = features.labels.numpy()
    pos, neg = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)
    k = min(len(pos), len(neg))
    rng = np.random.default_rng(seed)
    keep = np.concatenate([rng.choice(pos, k, replace=False), rng.choice(neg, k, replace=False)])
    return features.subset(np.sort(keep))


def build_membership_trainset_shadow(
    shadow_handle: TargetModelHandle,
    shadow_train: LabeledImageDataset,
    shadow_test: LabeledImageDataset,
    mode: Access,
    seed: int = 0,
) -> MembershipFeatures:
    members = extract_features(shadow_handle, shadow_train, mode, 1)
    nonmembers = extract_features(shadow_handle, shadow_test, mode, 0)
    return balance(MembershipFeatures.concat([members, nonmembers]), seed)


def build_membership_trainset_partial(
    target_handle: TargetModelHandle,
    partial_train: LabeledImageDataset,
    nonmember_pool: LabeledImageDataset,
    mode: Access,
    seed: int = 0,
) -> MembershipFeatures:
    """Members are the known training samples, scored by the target itself.

    ``nonmember_pool`` must be disjoint from the target's training data; the
    pipeline passes one half of the target test set and evaluates on the other.
    """
    if np.intersect1d(partial_train.ids, nonmember_pool.ids).size:
        raise ValueError("non-member pool overlaps the known training samples")
    members = extract_features(target_handle, partial_train, mode, 1)
    nonmembers = extract_features(target_handle, nonmember_pool, mode, 0)
    return balance(MembershipFeatures.concat([members, nonmembers]), seed)


# ---------------------------------------------------------------------------
# attack model


def _mlp(sizes: list[int], final_act: bool) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        layers.append(nn.Linear(a, b))
        if final_act or i < len(sizes) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class MemInfAttackModel(nn.Module):
    """One 2-layer encoder per input, concatenated into a 4-layer fusion MLP."""

    ENCODER_WIDTH = 64
    FUSION_WIDTHS = (256, 128, 64)

    def __init__(self, input_dims: dict[str, int], mode: Access):
        super().__init__()
        self.mode = Access(mode)
        self.input_names = list(input_dims)
        w = self.ENCODER_WIDTH
        self.encoders = nn.ModuleDict({k: _mlp([d, w, w], final_act=True) for k, d in input_dims.items()})
        self.fusion = _mlp([w * len(input_dims), *self.FUSION_WIDTHS, 2], final_act=False)
        self.input_dims = dict(input_dims)

    def forward(self, inputs: dict[str, torch.Tensor]) -> torch.Tensor:
        return self.fusion(torch.cat([self.encoders[k](inputs[k]) for k in self.input_names], dim=1))

    @torch.no_grad()
    def member_probability(self, features: MembershipFeatures) -> np.ndarray:
        self.eval()
        return F.softmax(self(features.inputs), dim=1)[:, 1].numpy()


@dataclass
class AttackTrainConfig:
    batch_size: int = 64
    lr: float = 1e-5
    epochs: int = 50
    seed: int = 0
    loss: str = "cross_entropy"


def train_attack_model(features: MembershipFeatures, cfg: AttackTrainConfig | None = None) -> MemInfAttackModel:
    cfg = cfg or AttackTrainConfig()
    if len(torch.unique(features.labels)) < 2:
        raise DegenerateLabels("attack training set needs both members and non-members")
    torch.manual_seed(cfg.seed)
    model = MemInfAttackModel({k: v.shape[1] for k, v in features.inputs.items()}, features.mode)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = len(features)
    model.history = []
    model.train()
    for _ in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(model({k: v[idx] for k, v in features.inputs.items()}), features.labels[idx])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        model.history.append(total / n)
    model.eval()
    return model


def infer_membership(
    attack_model: MemInfAttackModel,
    target_handle: TargetModelHandle,
    samples: LabeledImageDataset,
    mode: Access | None = None,
) -> np.ndarray:
    """Member probability for each sample, from the target model's outputs."""
    mode = Access(mode or attack_model.mode)
    if mode is not attack_model.mode:
        raise CapabilityError(f"attack model was trained on {attack_model.mode.value} features, not {mode.value}")
    feats = extract_features(target_handle, samples, mode, 0)
    return attack_model.member_probability(feats)


@dataclass
class MembershipOutcome:
    metrics: dict
    scores: np.ndarray
    labels: np.ndarray
    attack_model: MemInfAttackModel = field(repr=False)
    train_features: MembershipFeatures = field(repr=False)


def evaluate_attack(
    attack_model: MemInfAttackModel,
    target_handle: TargetModelHandle,
    members: LabeledImageDataset,
    nonmembers: LabeledImageDataset,
    seed: int = 0,
) -> tuple[dict, np.ndarray, np.ndarray]:
    """Score a balanced member / non-member evaluation set."""
    feats = balance(
        MembershipFeatures.concat(
            [
                extract_features(target_handle, members, attack_model.mode, 1),
                extract_features(target_handle, nonmembers, attack_model.mode, 0),
            ]
        ),
        seed,
    )
    scores = attack_model.member_probability(feats)
    labels = feats.labels.numpy()
    return metrics.compute_metrics(scores, labels, ("acc", "f1", "auc")), scores, labels


def run_shadow_attack(
    target_handle: TargetModelHandle,
    shadow_handle: TargetModelHandle,
    target_train: LabeledImageDataset,
    target_test: LabeledImageDataset,
    shadow_train: LabeledImageDataset,
    shadow_test: LabeledImageDataset,
    mode: Access,
    cfg: AttackTrainConfig | None = None,
    seed: int = 0,
) -> MembershipOutcome:
    """Shadow-dataset variant: train on shadow features, evaluate on the target."""
    if Access(mode) is Access.WHITE_BOX and not target_handle.white_box:
        raise CapabilityError("white-box membership inference needs a white-box target handle")
    train = build_membership_trainset_shadow(shadow_handle, shadow_train, shadow_test, mode, seed)
    model = train_attack_model(train, cfg)
    result, scores, labels = evaluate_attack(model, target_handle, target_train, target_test, seed)
    return MembershipOutcome(result, scores, labels, model, train)


def run_partial_attack(
    target_handle: TargetModelHandle,
    target_train: LabeledImageDataset,
    partial_train: LabeledImageDataset,
    target_test: LabeledImageDataset,
    mode: Access,
    cfg: AttackTrainConfig | None = None,
    seed: int = 0,
) -> MembershipOutcome:
    """Partial-training-data variant.

    The target test set is halved: one half supplies non-members for attack
    training, the other half is used for evaluation.  Evaluation members are
    the training samples the adversary did *not* know.
    """
    if Access(mode) is Access.WHITE_BOX and not target_handle.white_box:
        raise CapabilityError("white-box membership inference needs a white-box target handle")
    perm = np.random.default_rng(seed).permutation(len(target_test))
    half = len(perm) // 2
    pool, held_out = target_test.subset(np.sort(perm[:half])), target_test.subset(np.sort(perm[half:]))
    train = build_membership_trainset_partial(target_handle, partial_train, pool, mode, seed)
    model = train_attack_model(train, cfg)
    unknown = ~np.isin(target_train.ids, partial_train.ids)
    eval_members = target_train.subset(np.flatnonzero(unknown)) if unknown.any() else target_train
    result, scores, labels = evaluate_attack(model, target_handle, eval_members, held_out, seed)
    return MembershipOutcome(result, scores, labels, model, train)
