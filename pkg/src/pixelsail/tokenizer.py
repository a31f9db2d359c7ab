"""Word-level tokenizer over the closed grammar used by the data engine.

The vocabulary is fixed and deterministic: special tokens first (padding,
sequence markers, the image-patch placeholder, the segmentation token, and
the contiguous block of visual-prompt tokens), then the lexicon. Decoding
re-attaches punctuation so encode/decode round-trips the template strings
byte-for-byte.
"""

import re

from .errors import ConfigError

SEG_TOKEN = "[SEG]"

# Every word the synthetic grammar and the conversation templates can emit.
_LEXICON = [
    "Question", "Answer", "Please", "Segment", "segment", "Describe", "briefly",
    "the", "in", "instance", "semantic", "mode", "It", "is", "What", "color",
    "of", "How", "many", "are", "there", "shape", "shapes", "object", "visual",
    "prompt", "does", "not", "exist", "This", "image", "A", "B", "C", "D",
    "left", "right", "above", "below", "on", "side",
    "red", "green", "blue", "yellow", "magenta", "cyan",
    "square", "disk", "squares", "disks",
    "leftmost", "rightmost", "topmost", "bottommost", "largest", "smallest",
    ".", ",", "?", ":",
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
]
_LEXICON += [f"square-{k}" for k in range(1, 7)]
_LEXICON += [f"disk-{k}" for k in range(1, 7)]

_TOKEN_RE = re.compile(r"\[SEG\]|<VP_\d+>|[A-Za-z0-9]+(?:-[A-Za-z0-9]+)*|[^\sA-Za-z0-9]")
_NO_SPACE_BEFORE = {".", ",", "?", ":", "!", ";"}


class Tokenizer:
    """Maps template/grammar text to ids and back."""

    def __init__(self, vocab_size: int = 512, n_visual_prompts: int = 8):
        specials = ["<pad>", "<bos>", "<eos>", "<unk>", "<img>", SEG_TOKEN]
        specials += [f"<VP_{i}>" for i in range(1, n_visual_prompts + 1)]
        vocab = specials + _LEXICON
        if len(vocab) > vocab_size:
            raise ConfigError(f"vocab_size {vocab_size} too small for {len(vocab)} tokens")
        self.vocab_size = vocab_size
        self.n_visual_prompts = n_visual_prompts
        self._tokens = vocab
        self._ids = {t: i for i, t in enumerate(vocab)}
        self.pad_id = 0
        self.bos_id = 1
        self.eos_id = 2
        self.unk_id = 3
        self.img_id = 4
        self.seg_id = 5
        self.vp_base = 6  # <VP_i> has id vp_base + i - 1

    def vp_id(self, index: int) -> int:
        if not 1 <= index <= self.n_visual_prompts:
            raise ConfigError(f"visual prompt index {index} outside [1, {self.n_visual_prompts}]")
        return self.vp_base + index - 1

    def vp_index(self, token_id: int) -> int | None:
        """Prompt index for a <VP_i> id, else None."""
        if self.vp_base <= token_id < self.vp_base + self.n_visual_prompts:
            return token_id - self.vp_base + 1
        return None

    def encode(self, text: str) -> list[int]:
        return [self._ids.get(t, self.unk_id) for t in _TOKEN_RE.findall(text)]

    def decode(self, ids) -> str:
        parts: list[str] = []
        for i in ids:
            tok = self._tokens[int(i)] if 0 <= int(i) < len(self._tokens) else "<unk>"
            if parts and tok not in _NO_SPACE_BEFORE:
                parts.append(" ")
            parts.append(tok)
        return "".join(parts)
