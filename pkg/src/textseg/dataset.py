"""Instruction-tuning corpus construction and the supervised token loss."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence, Union

import numpy as np

from .errors import BoundsError, StructuralError, TextsegError
from .masks import ClassMap, InstanceMap, PatchSpec, SemanticMask, crop, instance_to_semantic
from .policy import ToyPolicy, context_id
from .rrle import decode_rrle, encode_rrle

DEFAULT_TEMPLATE = (
    "Segment the {h}x{w} patch at row {top}, column {left} of the provided image; "
    "answer only with the run-length mask."
)


@dataclass(frozen=True)
class CorpusConfig:
    patch_height: int = 32
    patch_width: int = 32
    patches_per_image: int = 10
    seed: int = 0
    instruction_template: str = DEFAULT_TEMPLATE
    jobs: int = 1
    # Stage-1 trainer settings, exported for external trainers only.
    lora_rank: int = 8
    lora_alpha: int = 16
    sft_learning_rate: float = 2e-4
    sft_epochs: int = 20

    def __post_init__(self):
        if self.patch_height < 1 or self.patch_width < 1:
            raise BoundsError("patch dims must be >= 1")
        if self.patches_per_image < 1:
            raise StructuralError("patches_per_image must be >= 1")


@dataclass(frozen=True)
class InstructionSample:
    image_ref: str
    patch: PatchSpec
    instruction: str
    target_rrle: str
    class_map_ref: str = ""

    def to_json(self) -> dict:
        p = self.patch
        return {
            "image": self.image_ref,
            "top": p.top,
            "left": p.left,
            "h": p.height,
            "w": p.width,
            "instruction": self.instruction,
            "target": self.target_rrle,
        }

    @classmethod
    def from_json(cls, d: dict, class_map_ref: str = "") -> "InstructionSample":
        return cls(
            d["image"],
            PatchSpec(d["top"], d["left"], d["h"], d["w"]),
            d["instruction"],
            d["target"],
            class_map_ref,
        )

    @property
    def context_key(self) -> str:
        return f"{self.image_ref}:{self.patch.top}:{self.patch.left}"


def check_sample(sample: InstructionSample, cm: ClassMap) -> None:
    """Raise unless the target decodes to exactly the patch with no recovery."""
    rep = decode_rrle(sample.target_rrle, cm, sample.patch.height, sample.patch.width)
    if not rep.clean:
        raise StructuralError(f"target of {sample.context_key} needs recovery: {rep.counters()}")
    rows = sample.target_rrle.split("\n")
    if len(rows) != sample.patch.height:
        raise StructuralError(f"target of {sample.context_key} has {len(rows)} rows")


def sample_patch_spec(
    rng: np.random.Generator, image_h: int, image_w: int, patch_h: int, patch_w: int
) -> PatchSpec:
    """Uniform top-left corner over every position where the patch fits."""
    if patch_h > image_h or patch_w > image_w:
        raise BoundsError(f"patch {patch_h}x{patch_w} larger than image {image_h}x{image_w}")
    top = int(rng.integers(0, image_h - patch_h, endpoint=True))
    left = int(rng.integers(0, image_w - patch_w, endpoint=True))
    return PatchSpec(top, left, patch_h, patch_w)


def format_instruction(template: str, p: PatchSpec) -> str:
    return template.format(h=p.height, w=p.width, top=p.top, left=p.left)


def build_instruction_sample(
    s: SemanticMask,
    image_ref: str,
    p: PatchSpec,
    cm: ClassMap,
    template: str = DEFAULT_TEMPLATE,
    class_map_ref: str = "",
) -> InstructionSample:
    target = encode_rrle(crop(s, p), cm)
    return InstructionSample(image_ref, p, format_instruction(template, p), target, class_map_ref)


MaskSource = Union[SemanticMask, InstanceMap, Callable[[], Union[SemanticMask, InstanceMap]]]


@dataclass
class BuildResult:
    written: int
    errors: list[dict] = field(default_factory=list)

    def manifest(self, cfg: CorpusConfig, out: Path) -> dict:
        return {
            "output": str(out),
            "samples_written": self.written,
            "errors": self.errors,
            "config": asdict(cfg),
        }


def _image_samples(
    index: int,
    image_ref: str,
    source: MaskSource,
    cfg: CorpusConfig,
    cm: ClassMap,
    image_dims: tuple[int, int] | None,
) -> list[InstructionSample]:
    m = source() if callable(source) else source
    s = instance_to_semantic(m, cm.background_id) if isinstance(m, InstanceMap) else m
    cm.check_mask(s)
    if image_dims is not None and tuple(image_dims) != s.shape:
        raise StructuralError(f"image dims {tuple(image_dims)} differ from mask dims {s.shape}")
    rng = np.random.default_rng(cfg.seed ^ index)
    out = []
    for _ in range(cfg.patches_per_image):
        p = sample_patch_spec(rng, s.height, s.width, cfg.patch_height, cfg.patch_width)
        out.append(build_instruction_sample(s, image_ref, p, cm, cfg.instruction_template))
    return out


def build_dataset(
    corpus: Sequence[tuple[str, MaskSource]],
    cfg: CorpusConfig,
    out,
    cm: ClassMap,
    image_dims: Sequence[tuple[int, int] | None] | None = None,
) -> BuildResult:
    """Write one JSON object per sampled patch to ``out`` (JSON lines).

    Each image draws from its own RNG stream seeded with ``seed ^ index``, so the
    output is byte-identical whatever ``cfg.jobs`` is. Per-image failures are
    collected in the result; the call raises only if every image fails.
    """
    out = Path(out)
    dims = list(image_dims) if image_dims is not None else [None] * len(corpus)

    def work(i: int):
        ref, src = corpus[i]
        try:
            return _image_samples(i, ref, src, cfg, cm, dims[i]), None
        except (TextsegError, OSError, ValueError) as e:
            return [], {"index": i, "image": ref, "error": f"{type(e).__name__}: {e}"}

    with ThreadPoolExecutor(max_workers=max(1, cfg.jobs)) as pool:
        results = list(pool.map(work, range(len(corpus))))

    errors = [err for _, err in results if err is not None]
    if corpus and len(errors) == len(corpus):
        raise StructuralError(f"all {len(corpus)} corpus items failed; first: {errors[0]['error']}")
    written = 0
    with out.open("w", encoding="utf-8", newline="\n") as f:
        for samples, _ in results:
            for smp in samples:
                f.write(json.dumps(smp.to_json(), ensure_ascii=False) + "\n")
                written += 1
    return BuildResult(written, errors)


def read_dataset(path, class_map_ref: str = "") -> list[InstructionSample]:
    with open(path, encoding="utf-8") as f:
        return [InstructionSample.from_json(json.loads(line), class_map_ref) for line in f if line.strip()]


# --- supervised objective on the toy policy --------------------------------


def sample_tokens(policy: ToyPolicy, sample: InstructionSample) -> tuple[int, list[int]]:
    """Context id and token ids (EOS-terminated) of a sample's target."""
    if policy.tokenizer is None:
        raise StructuralError("policy has no tokenizer")
    tokens = policy.tokenizer.encode(sample.target_rrle)
    return context_id(sample.context_key, policy.n_contexts), tokens


def sft_nll(policy: ToyPolicy, sample: InstructionSample) -> float:
    """Negative log-likelihood of the target tokens under ``policy``."""
    ctx, tokens = sample_tokens(policy, sample)
    return float(-policy.logprobs(ctx, tokens).sum())


def sft_nll_grad(policy: ToyPolicy, sample: InstructionSample) -> np.ndarray:
    ctx, tokens = sample_tokens(policy, sample)
    return -policy.sequence_logprob_grad(ctx, tokens)


def sft_train(
    policy: ToyPolicy,
    samples: Iterable[InstructionSample],
    lr: float,
    epochs: int,
) -> tuple[ToyPolicy, list[float]]:
    """Plain full-batch gradient descent on the mean token NLL."""
    samples = list(samples)
    losses = []
    for _ in range(epochs):
        grad = np.zeros(policy.n_params)
        loss = 0.0
        for smp in samples:
            loss += sft_nll(policy, smp)
            grad += sft_nll_grad(policy, smp)
        losses.append(loss / len(samples))
        policy = policy.with_params(policy.params - lr * grad / len(samples))
    return policy, losses
