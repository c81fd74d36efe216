"""The embedding network: residual backbone with taps after stages 2-4, two
attention stages, and per-branch feature heads.

Wiring: attention stage 1 reads the stage-2 feature map and its combined map
multiplies the stage-3 output.  That attended product feeds both stage 4 of
the backbone and attention stage 2, whose branches (whole, and for part-mask
variants upper and bottom) each multiply the stage-4 output.  Every branch
ends in global average pooling plus a linear head; upper and bottom heads
concatenate into the local feature, and the whole+upper+bottom concatenation,
l2-normalized, is the retrieval feature.

Five variants share this skeleton:
  baseline      no attention, one head, one classifier
  baseline_att  both attention stages, single whole branch, no mask guidance
  wmga          baseline_att plus whole-mask guidance on both stages
  dmga          three branches, targets split along the middle line
  mmga          three branches, true part-mask targets
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, AttentionModule, AttentionOutput, he_uniform
from .masks import MaskSet, middle_split
from .tensor import ShapeError, Tensor, load_tensor, save_tensor

VARIANTS = ("baseline", "baseline_att", "wmga", "dmga", "mmga")
_THREE_BRANCH = ("dmga", "mmga")
_GUIDED = ("wmga", "dmga", "mmga")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "mmga"
    num_identities: int = 751
    input_hw: tuple = (384, 128)
    stem_width: int = 64
    stage_widths: tuple = (256, 512, 1024, 2048)
    stage_blocks: tuple = (2, 2, 2, 2)
    head_dims: tuple = (1024, 512, 512)  # whole, upper, bottom
    s: int = 8
    r: int = 8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, pick from {VARIANTS}")
        if self.num_identities < 2:
            raise ValueError("need at least two identities to classify")
        h, w = self.input_hw
        if h % 16 or w % 16:
            raise ShapeError(f"input extents must divide by 16, got {self.input_hw}")
        if len(self.stage_widths) != 4 or len(self.stage_blocks) != 4:
            raise ShapeError("exactly four stages expected")
        if len(self.head_dims) != 3 or min(self.head_dims) <= 0:
            raise ShapeError("three positive head dims expected")
        # Both attention stages must satisfy the conv/linear channel chains.
        for c_in in (self.stage_widths[1], self.stage_widths[2]):
            AttentionConfig(c_in=c_in, c_out=1, s=self.s, r=self.r)

    @property
    def d_w(self) -> int:
        return self.head_dims[0]

    @property
    def d_u(self) -> int:
        return self.head_dims[1]

    @property
    def d_b(self) -> int:
        return self.head_dims[2]

    @property
    def d_l(self) -> int:
        return self.d_u + self.d_b

    @property
    def d_all(self) -> int:
        return self.d_w + self.d_u + self.d_b

    @property
    def attention_grid(self) -> tuple:
        return (self.input_hw[0] // 16, self.input_hw[1] // 16)

    def as_dict(self) -> dict:
        return {
            "variant": self.variant,
            "num_identities": self.num_identities,
            "input_hw": list(self.input_hw),
            "stem_width": self.stem_width,
            "stage_widths": list(self.stage_widths),
            "stage_blocks": list(self.stage_blocks),
            "head_dims": list(self.head_dims),
            "s": self.s,
            "r": self.r,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(
            variant=d["variant"],
            num_identities=d["num_identities"],
            input_hw=tuple(d["input_hw"]),
            stem_width=d["stem_width"],
            stage_widths=tuple(d["stage_widths"]),
            stage_blocks=tuple(d["stage_blocks"]),
            head_dims=tuple(d["head_dims"]),
            s=d["s"],
            r=d["r"],
        )


def paper_config(num_identities: int, variant: str = "mmga") -> ModelConfig:
    return ModelConfig(variant=variant, num_identities=num_identities)


def toy_config(num_identities: int, variant: str = "mmga") -> ModelConfig:
    """Laptop-scale preset: same stride plan, 1/16 the widths, 6x2 grid."""
    return ModelConfig(
        variant=variant,
        num_identities=num_identities,
        input_hw=(96, 32),
        stem_width=8,
        stage_widths=(16, 32, 64, 128),
        stage_blocks=(1, 1, 1, 1),
        head_dims=(64, 32, 32),
        s=4,
        r=4,
    )


@dataclass
class EmbeddingSet:
    """Per-branch head outputs plus the concatenated retrieval feature.

    Single-branch variants populate only f_w (their whole feature), leaving
    the part fields None; f_cat is the raw concatenation and f_all its
    row-normalized form used for ranking and the triplet loss.
    """

    f_w: Tensor
    f_u: Tensor | None
    f_b: Tensor | None
    f_l: Tensor | None
    f_cat: Tensor
    f_all: Tensor


@dataclass
class ForwardResult:
    embeddings: EmbeddingSet
    logits_w: Tensor
    logits_l: Tensor | None
    attention: tuple  # AttentionOutput per guided branch, see Model.forward


class ConvBn:
    """Convolution + batch norm; the building block of stem and stages."""

    def __init__(self, rng, c_in: int, c_out: int, k: int, stride: int, padding: int):
        self.w = Tensor(
            he_uniform(rng, (c_out, c_in, k, k), c_in * k * k), requires_grad=True
        )
        self.gamma = Tensor(np.ones(c_out, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(c_out, dtype=np.float32)
        self.running_var = np.ones(c_out, dtype=np.float32)
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor, training: bool) -> Tensor:
        h = T.conv2d(x, self.w, stride=self.stride, padding=self.padding)
        return T.batch_norm(
            h, self.gamma, self.beta, self.running_mean, self.running_var, training
        )

    def named(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def buffers(self, prefix: str):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


class ResidualBlock:
    """Two 3x3 conv+bn with a projection shortcut on stride or width change."""

    def __init__(self, rng, c_in: int, c_out: int, stride: int):
        self.conv1 = ConvBn(rng, c_in, c_out, 3, stride, 1)
        self.conv2 = ConvBn(rng, c_out, c_out, 3, 1, 1)
        self.proj = (
            ConvBn(rng, c_in, c_out, 1, stride, 0)
            if stride != 1 or c_in != c_out
            else None
        )

    def forward(self, x: Tensor, training: bool) -> Tensor:
        h = T.relu(self.conv1.forward(x, training))
        h = self.conv2.forward(h, training)
        shortcut = x if self.proj is None else self.proj.forward(x, training)
        return T.relu(T.add(h, shortcut))

    def named(self, prefix: str):
        yield from self.conv1.named(f"{prefix}.conv1")
        yield from self.conv2.named(f"{prefix}.conv2")
        if self.proj is not None:
            yield from self.proj.named(f"{prefix}.proj")

    def buffers(self, prefix: str):
        yield from self.conv1.buffers(f"{prefix}.conv1")
        yield from self.conv2.buffers(f"{prefix}.conv2")
        if self.proj is not None:
            yield from self.proj.buffers(f"{prefix}.proj")


class LinearHead:
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        self.w = Tensor(he_uniform(rng, (d_out, d_in), d_in), requires_grad=True)
        self.b = (
            Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True)
            if bias
            else None
        )

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)

    def named(self, prefix: str):
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b


class Model:
    """A built network: backbone, attention stages, heads, classifiers."""

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        cfg = config

        self.stem = ConvBn(rng, 3, cfg.stem_width, 7, 2, 3)
        self.stages: list[list[ResidualBlock]] = []
        c_prev = cfg.stem_width
        for stage_idx, (width, blocks) in enumerate(
            zip(cfg.stage_widths, cfg.stage_blocks)
        ):
            stride = 1 if stage_idx == 3 else 2  # final stage keeps resolution
            stage = []
            for b in range(blocks):
                stage.append(ResidualBlock(rng, c_prev, width, stride if b == 0 else 1))
                c_prev = width
            self.stages.append(stage)

        c2, c3, c4 = cfg.stage_widths[1], cfg.stage_widths[2], cfg.stage_widths[3]
        self.att1 = None
        self.att2: dict[str, AttentionModule] = {}
        if cfg.variant != "baseline":
            self.att1 = AttentionModule(
                AttentionConfig(
                    c_in=c2, c_out=c3, s=cfg.s, r=cfg.r,
                    pool_between_conv1_and_conv2=True,
                ),
                rng,
            )
            branch_names = ("whole", "upper", "bottom") if cfg.variant in _THREE_BRANCH else ("whole",)
            for name in branch_names:
                self.att2[name] = AttentionModule(
                    AttentionConfig(c_in=c3, c_out=c4, s=cfg.s, r=cfg.r), rng
                )

        if cfg.variant in _THREE_BRANCH:
            self.head_w = LinearHead(rng, c4, cfg.d_w)
            self.head_u = LinearHead(rng, c4, cfg.d_u)
            self.head_b = LinearHead(rng, c4, cfg.d_b)
            self.classifier_w = LinearHead(rng, cfg.d_w, cfg.num_identities, bias=False)
            self.classifier_l = LinearHead(rng, cfg.d_l, cfg.num_identities, bias=False)
        else:
            # single-feature variants: one head; width matches d_all except
            # for the plain baseline, which keeps the whole-head width
            single_dim = cfg.d_w if cfg.variant == "baseline" else cfg.d_all
            self.head_w = LinearHead(rng, c4, single_dim)
            self.head_u = None
            self.head_b = None
            self.classifier_w = LinearHead(rng, single_dim, cfg.num_identities, bias=False)
            self.classifier_l = None

    # -- parameter bookkeeping -------------------------------------------------

    def named_parameters(self):
        yield from self.stem.named("stem")
        for i, stage in enumerate(self.stages, start=1):
            for j, block in enumerate(stage):
                yield from block.named(f"stage{i}.block{j}")
        if self.att1 is not None:
            yield from self._named_attention("att1", self.att1)
        for name, module in self.att2.items():
            yield from self._named_attention(f"att2.{name}", module)
        yield from self.head_w.named("head_w")
        if self.head_u is not None:
            yield from self.head_u.named("head_u")
        if self.head_b is not None:
            yield from self.head_b.named("head_b")
        yield from self.classifier_w.named("classifier_w")
        if self.classifier_l is not None:
            yield from self.classifier_l.named("classifier_l")

    @staticmethod
    def _named_attention(prefix: str, module: AttentionModule):
        sp, ch = module.spatial, module.channel
        yield f"{prefix}.spatial.conv1_w", sp.conv1_w
        yield f"{prefix}.spatial.conv1_b", sp.conv1_b
        yield f"{prefix}.spatial.conv2_w", sp.conv2_w
        yield f"{prefix}.spatial.conv2_b", sp.conv2_b
        yield f"{prefix}.spatial.conv3_w", sp.conv3_w
        yield f"{prefix}.spatial.conv3_b", sp.conv3_b
        yield f"{prefix}.channel.fc1_w", ch.fc1_w
        yield f"{prefix}.channel.fc1_b", ch.fc1_b
        yield f"{prefix}.channel.fc2_w", ch.fc2_w
        yield f"{prefix}.channel.fc2_b", ch.fc2_b

    def named_buffers(self):
        yield from self.stem.buffers("stem")
        for i, stage in enumerate(self.stages, start=1):
            for j, block in enumerate(stage):
                yield from block.buffers(f"stage{i}.block{j}")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def param_groups(self) -> dict:
        """Backbone tensors track one learning rate, everything else another."""
        backbone, other = [], []
        for name, t in self.named_parameters():
            (backbone if name.startswith(("stem", "stage")) else other).append(t)
        return {"backbone": backbone, "other": other}

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    # -- forward ---------------------------------------------------------------

    def forward(self, images: Tensor, training: bool) -> ForwardResult:
        cfg = self.config
        n = images.shape[0]
        expected = (n, 3, cfg.input_hw[0], cfg.input_hw[1])
        if images.shape != expected:
            raise ShapeError(f"images are {images.shape}, config wants {expected}")

        h = T.relu(self.stem.forward(images, training))
        taps = []
        for stage in self.stages[:3]:
            for block in stage:
                h = block.forward(h, training)
            taps.append(h)
        _, x2, x3 = taps

        attention: list[AttentionOutput] = []
        if self.att1 is not None:
            out1 = self.att1.forward(x2)
            attention.append(out1)
            h = T.elementwise_mul(x3, out1.A)
        att2_input = h  # stage-3 features, attended when attention is on

        for block in self.stages[3]:
            h = block.forward(h, training)
        x4 = h

        if self.att1 is None:
            pooled = T.global_avg_pool(x4)
            f_w = self.head_w.forward(pooled)
            f_all = T.l2_normalize(f_w)
            return ForwardResult(
                embeddings=EmbeddingSet(
                    f_w=f_w, f_u=None, f_b=None, f_l=None, f_cat=f_w, f_all=f_all
                ),
                logits_w=self.classifier_w.forward(f_w),
                logits_l=None,
                attention=(),
            )

        branch_feats = {}
        for name, module in self.att2.items():
            out = module.forward(att2_input)
            attention.append(out)
            branch_feats[name] = T.global_avg_pool(T.elementwise_mul(x4, out.A))

        if cfg.variant in _THREE_BRANCH:
            f_w = self.head_w.forward(branch_feats["whole"])
            f_u = self.head_u.forward(branch_feats["upper"])
            f_b = self.head_b.forward(branch_feats["bottom"])
            f_l = T.concat_channels([f_u, f_b])
            f_cat = T.concat_channels([f_w, f_u, f_b])
            return ForwardResult(
                embeddings=EmbeddingSet(
                    f_w=f_w, f_u=f_u, f_b=f_b, f_l=f_l,
                    f_cat=f_cat, f_all=T.l2_normalize(f_cat),
                ),
                logits_w=self.classifier_w.forward(f_w),
                logits_l=self.classifier_l.forward(f_l),
                attention=tuple(attention),
            )

        f_w = self.head_w.forward(branch_feats["whole"])
        return ForwardResult(
            embeddings=EmbeddingSet(
                f_w=f_w, f_u=None, f_b=None, f_l=None,
                f_cat=f_w, f_all=T.l2_normalize(f_w),
            ),
            logits_w=self.classifier_w.forward(f_w),
            logits_l=None,
            attention=tuple(attention),
        )


def variant_mask_targets(variant: str, masks: MaskSet | None) -> list:
    """Mask targets per guided attention output, in forward() order.

    mmga: (whole, whole, upper, bottom); dmga replaces the part masks with
    the middle-line split of the whole mask; wmga guides only the two whole
    maps; baselines train unguided.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if variant not in _GUIDED:
        return []
    if masks is None:
        raise ValueError(f"variant {variant!r} needs mask targets")
    if variant == "wmga":
        return [masks.whole, masks.whole]
    if variant == "dmga":
        upper_half, bottom_half = middle_split(masks.whole)
        return [masks.whole, masks.whole, upper_half, bottom_half]
    return [masks.whole, masks.whole, masks.upper, masks.bottom]


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(model: Model, directory, epoch: int) -> None:
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "config": model.config.as_dict(),
        "variant": model.config.variant,
        "epoch": epoch,
        "seed": model.seed,
        "tensors": [],
        "buffers": [],
    }
    for name, t in model.named_parameters():
        manifest["tensors"].append(name)
        save_tensor(os.path.join(directory, f"{name}.tns"), t)
    for name, buf in model.named_buffers():
        manifest["buffers"].append(name)
        save_tensor(os.path.join(directory, f"{name}.tns"), Tensor(buf))
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(directory) -> tuple[Model, int]:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    model = Model(ModelConfig.from_dict(manifest["config"]), seed=manifest["seed"])
    named = dict(model.named_parameters())
    if set(named) != set(manifest["tensors"]):
        missing = set(named) ^ set(manifest["tensors"])
        raise ValueError(f"checkpoint/model tensor names disagree: {sorted(missing)}")
    for name, t in named.items():
        data = load_tensor(os.path.join(directory, f"{name}.tns"))
        t.data = data.reshape(t.shape).astype(t.data.dtype)
    for name, buf in model.named_buffers():
        data = load_tensor(os.path.join(directory, f"{name}.tns"))
        buf[:] = data.reshape(buf.shape)
    return model, manifest["epoch"]
