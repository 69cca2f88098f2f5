"""Adaptive depth prompts built from image statistics, and a word-level tokenizer."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

CLASS_LABELS = ("giant", "extremely close", "close", "not in distance",
                "a little remote", "far", "unseen")

TEMPLATE_KEYS = ("dataset", "task", "pixel", "class")
DEFAULT_TEMPLATES = {
    "dataset": "dataset {name} indoor monocular images",
    "task": "estimate a dense depth map for this image",
    "pixel": "pixel statistics min {min} max {max} median {median}",
    "class": "overall scene distance class {class}",
}
PROMPT_MODES = ("apg", "fixed", "none")
UNKNOWN_WORD = "unknown"

_WORD = re.compile(r"[a-z]+|[0-9]")
_PLACEHOLDER = re.compile(r"\{[a-z]+\}")


@dataclass(frozen=True)
class PixelStats:
    min: float
    max: float
    median: float
    mean: float


def luminance(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def compute_pixel_stats(image: np.ndarray) -> PixelStats:
    lum = np.sort(luminance(image), axis=None)
    if lum.size == 0:
        raise ValueError("empty image")
    return PixelStats(float(lum[0]), float(lum[-1]), float(lum[(lum.size - 1) // 2]), float(lum.mean()))


def classify_image(stats: PixelStats) -> str:
    """Median luminance in 7 equal bins over [0, 1]; a value on a bin edge goes to the lower bin."""
    m = min(max(stats.median, 0.0), 1.0)
    for i, label in enumerate(CLASS_LABELS):
        if m <= (i + 1) / len(CLASS_LABELS):
            return label
    return CLASS_LABELS[-1]


def load_templates(path) -> dict[str, str]:
    """Four lines, in dataset/task/pixel/class order."""
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if len(lines) != len(TEMPLATE_KEYS):
        raise ConfigError(f"template file needs {len(TEMPLATE_KEYS)} lines, got {len(lines)}")
    return dict(zip(TEMPLATE_KEYS, lines))


def split_words(text: str) -> list[str]:
    """Lowercase; letters form words, every digit is its own token, the rest separates."""
    return _WORD.findall(text.lower())


@dataclass
class Tokenizer:
    vocab: dict[str, int]
    size: int
    unknown_id: int = 0

    def __post_init__(self):
        if len(self.vocab) > self.size:
            raise ConfigError(f"{len(self.vocab)} words do not fit a vocabulary of {self.size}")

    @classmethod
    def build(cls, size: int, templates: dict[str, str] | None = None,
              extra_words=("nyu", "synthetic")) -> "Tokenizer":
        templates = templates or DEFAULT_TEMPLATES
        words = set()
        for text in templates.values():
            words.update(split_words(_PLACEHOLDER.sub(" ", text)))
        for label in CLASS_LABELS:
            words.update(split_words(label))
        for extra in extra_words:
            words.update(split_words(extra))
        words.add(UNKNOWN_WORD)
        words.update("0123456789")
        vocab = {"[unk]": 0}
        for w in sorted(words):
            vocab[w] = len(vocab)
        return cls(vocab, size)

    def encode(self, text: str) -> list[int]:
        return tokenize_prompts(self, text)


def tokenize_prompts(tokenizer: Tokenizer, text: str) -> list[int]:
    return [tokenizer.vocab.get(w, tokenizer.unknown_id) for w in split_words(text)]


@dataclass
class PromptBundle:
    dataset_text: str = ""
    task_text: str = ""
    pixel_text: str = ""
    class_text: str = ""
    token_ids: list[int] = field(default_factory=list)

    @property
    def text(self) -> str:
        return " ".join(t for t in (self.dataset_text, self.task_text, self.pixel_text, self.class_text) if t)


def _fill(template: str, values: dict[str, str]) -> str:
    return _PLACEHOLDER.sub(lambda m: values.get(m.group(0)[1:-1], m.group(0)), template)


def build_prompt_bundle(sample, dataset_name: str, tokenizer: Tokenizer, mode: str = "apg",
                        templates: dict[str, str] | None = None) -> PromptBundle:
    """``sample`` is a SceneSample or a bare (H, W, 3) image."""
    if mode not in PROMPT_MODES:
        raise ConfigError(f"prompt mode {mode!r} not in {PROMPT_MODES}")
    if mode == "none":
        return PromptBundle()
    templates = templates or DEFAULT_TEMPLATES
    if mode == "apg":
        stats = compute_pixel_stats(getattr(sample, "image", sample))
        values = {"min": f"{stats.min:.3f}", "max": f"{stats.max:.3f}",
                  "median": f"{stats.median:.3f}", "class": classify_image(stats)}
    else:
        values = {k: UNKNOWN_WORD for k in ("min", "max", "median", "class")}
    values["name"] = dataset_name
    texts = [_fill(templates[k], values) for k in TEMPLATE_KEYS]
    bundle = PromptBundle(*texts)
    bundle.token_ids = tokenize_prompts(tokenizer, bundle.text)
    return bundle
