"""Toy causal language decoder standing in for the frozen LLM, plus prompt
assembly and the surrogate-caption oracle."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn as nn

from fmri2text.data import ACTIONS, CAPTION_TEMPLATES, VideoClip
from fmri2text.encoders import Block
from fmri2text.numerics import ValidationError

log = logging.getLogger(__name__)

_TOKEN = re.compile(r"[a-z0-9']+|[^\sa-z0-9']")

SPECIALS = ("<pad>", "<bos>", "<eos>", "<media>", "<sep>", "<unk>")

# general words so the closed vocabulary is not limited to the templates
_COMMON = """
a an the and or but of to in on at by for with from into over under up down out off
is are was were be been being has have had do does did can could will would should may might
he she it they we you i him her them his its their our your this that these those there here
man woman men women person people boy girl child young old white black red blue green yellow
shirt jacket hat room court gym court ball racket wall floor table chair door window street road
water pool park field stage kitchen salon car bike dog cat food hair scissors hand hands head
what where when who why how which doing happening main thing video clip scene shows show seen see
playing plays play walking walks walk running runs run sitting sits sit standing stands stand
holding holds hold hitting hits hit wearing wears wear moving moves move looking looks look
cutting cuts cut getting gets get making makes make using uses use
then while around between against back forth again also very just only some all one two
based visual content describe summarize action activity happens first next finally
""".split()


def normalize_tokens(text: str) -> list[str]:
    """Lowercase, split punctuation into separate tokens, collapse whitespace."""
    return _TOKEN.findall(text.lower())


def normalize_text(text: str) -> str:
    return " ".join(normalize_tokens(text))


class Vocab:
    def __init__(self, words: Sequence[str]):
        self.itos = list(SPECIALS)
        for w in words:
            if w not in self.itos:
                self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        self.pad, self.bos, self.eos, self.media, self.sep, self.unk = (self.stoi[s] for s in SPECIALS)

    def __len__(self) -> int:
        return len(self.itos)

    @classmethod
    def default(cls) -> "Vocab":
        words: list[str] = []
        corpus = list(CAPTION_TEMPLATES) + list(CAPTION_TEMPLATES.values()) + ACTIONS
        for text in corpus:
            words.extend(normalize_tokens(text.replace("{action}", " ")))
        words.extend(_COMMON)
        return cls(sorted(set(words)))

    def encode(self, text: str) -> list[int]:
        toks = normalize_tokens(text)
        unknown = sorted({t for t in toks if t not in self.stoi})
        if unknown:
            raise ValidationError(f"tokens not in vocabulary: {unknown}")
        return [self.stoi[t] for t in toks]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.itos[i] for i in ids if self.itos[i] not in SPECIALS)


# ---------------------------------------------------------------------------
# prompts

@dataclass
class PromptAssembly:
    media: torch.Tensor          # (M, d)
    input_ids: torch.Tensor      # (T,)
    loss_mask: torch.Tensor      # (T,) True over answer + eos

    @property
    def length(self) -> int:
        return self.media.shape[0] + self.input_ids.shape[0]


def assemble_prompt(media: torch.Tensor, instruction: str, answer: str | None, vocab: Vocab,
                    width: int | None = None) -> PromptAssembly:
    """Layout ``[media][bos][instruction][sep][answer][eos]``; only the answer
    and eos positions carry loss. Without an answer the prompt stops after sep."""
    if width is not None and media.shape[-1] != width:
        raise ValidationError(f"media width {media.shape[-1]} != decoder width {width}")
    instr = vocab.encode(instruction)
    if not instr:
        raise ValidationError("instruction is empty")
    ids = [vocab.bos] + instr + [vocab.sep]
    mask = [False] * len(ids)
    if answer is not None:
        ans = vocab.encode(answer) + [vocab.eos]
        ids += ans
        mask += [True] * len(ans)
    return PromptAssembly(media, torch.tensor(ids), torch.tensor(mask))


def collate(prompts: Sequence[PromptAssembly], pad: int):
    """Right-pad a list of prompts into (media, ids, targets, target_mask).

    ``targets[:, t]`` is the token that the logits at position t must predict.
    """
    T = max(p.input_ids.shape[0] for p in prompts)
    B = len(prompts)
    ids = torch.full((B, T), pad, dtype=torch.long)
    mask = torch.zeros((B, T), dtype=torch.bool)
    for b, p in enumerate(prompts):
        n = p.input_ids.shape[0]
        ids[b, :n] = p.input_ids
        mask[b, :n] = p.loss_mask
    media = torch.stack([p.media for p in prompts])
    targets = torch.full_like(ids, pad)
    targets[:, :-1] = ids[:, 1:]
    tmask = torch.zeros_like(mask)
    tmask[:, :-1] = mask[:, 1:]
    return media, ids, targets, tmask


# ---------------------------------------------------------------------------
# decoder

@dataclass
class DecoderConfig:
    width: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    max_len: int = 80
    max_new_tokens: int = 24


class ToyDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, vocab_size: int):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(vocab_size, cfg.width)
        self.pos = nn.Parameter(torch.randn(cfg.max_len, cfg.width) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads, cfg.mlp_ratio, causal=True) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.width)
        self.head = nn.Linear(cfg.width, vocab_size)

    def forward(self, media: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
        """Logits (B, T, V) at the text positions; media is causal prefix context."""
        M, T = media.shape[1], ids.shape[1]
        if M + T > self.cfg.max_len:
            raise ValidationError(f"sequence of {M + T} exceeds decoder max length {self.cfg.max_len}")
        h = torch.cat([media, self.embed(ids).to(media.dtype)], dim=1) + self.pos[: M + T]
        for blk in self.blocks:
            h = blk(h)
        return self.head(self.norm(h[:, M:]))


def forward_logits(prompts: Sequence[PromptAssembly], decoder: ToyDecoder, pad: int) -> torch.Tensor:
    media, ids, _, _ = collate(prompts, pad)
    return decoder(media, ids)


@dataclass
class GenerationResult:
    text: str
    ids: list[int]
    truncated: bool


@torch.no_grad()
def generate_batch(media: torch.Tensor, instruction: str, decoder: ToyDecoder, vocab: Vocab,
                   max_len: int | None = None) -> list[GenerationResult]:
    """Greedy decoding for a batch of media sharing one instruction.

    Stops a row at eos or after ``max_len`` new tokens; argmax ties resolve to
    the lowest token id.
    """
    max_len = decoder.cfg.max_new_tokens if max_len is None else max_len
    B = media.shape[0]
    prompt = torch.tensor([vocab.bos] + vocab.encode(instruction) + [vocab.sep])
    ids = prompt.expand(B, -1).clone()
    out: list[list[int]] = [[] for _ in range(B)]
    done = [False] * B
    for _ in range(max_len):
        if all(done) or media.shape[1] + ids.shape[1] > decoder.cfg.max_len:
            break
        nxt = decoder(media, ids)[:, -1].argmax(-1)
        for b in range(B):
            if not done[b]:
                if int(nxt[b]) == vocab.eos:
                    done[b] = True
                else:
                    out[b].append(int(nxt[b]))
        ids = torch.cat([ids, nxt.unsqueeze(1)], dim=1)
    return [GenerationResult(vocab.decode(o), o, not d) for o, d in zip(out, done)]


def generate(media: torch.Tensor, instruction: str, decoder: ToyDecoder, vocab: Vocab,
             max_len: int | None = None) -> GenerationResult:
    return generate_batch(media.unsqueeze(0), instruction, decoder, vocab, max_len)[0]


# ---------------------------------------------------------------------------
# surrogate captions

class CaptionError(RuntimeError):
    pass


CaptionProvider = Callable[[dict], dict]


class MockCaptionProvider:
    """In-process provider answering every request with a fixed caption."""

    def __init__(self, text: str):
        self.text = text
        self.requests: list[dict] = []

    def __call__(self, request: dict) -> dict:
        self.requests.append(request)
        return {"caption": self.text}


@dataclass
class CaptionOracle:
    """Produces reference captions for (video, instruction) pairs.

    ``template`` mode fills the instruction's caption pattern with the class
    action phrase; ``external`` mode forwards a request
    ``{"class_label", "frames", "instruction"}`` to ``provider`` and expects
    ``{"caption": text}`` back.
    """

    class_names: Sequence[str] = field(default_factory=lambda: list(ACTIONS))
    mode: str = "template"
    provider: CaptionProvider | None = None
    templates: dict[str, str] = field(default_factory=lambda: dict(CAPTION_TEMPLATES))

    def __post_init__(self):
        if self.mode not in ("template", "external"):
            raise ValidationError(f"unknown caption oracle mode {self.mode!r}")
        if self.mode == "external" and self.provider is None:
            raise ValidationError("external caption mode needs a provider")

    def caption(self, class_id: int | None, instruction: str, frames=None) -> str:
        if self.mode == "external":
            label = self.class_names[class_id] if class_id is not None and class_id < len(self.class_names) else None
            try:
                reply = self.provider({"class_label": label, "frames": frames, "instruction": instruction})
                return str(reply["caption"])
            except Exception as err:
                raise CaptionError(f"caption provider failed: {err}") from err
        if class_id is None or not 0 <= class_id < len(self.class_names):
            raise CaptionError(f"no caption template for class {class_id}")
        if instruction not in self.templates:
            raise CaptionError(f"no caption template for instruction {instruction!r}")
        return self.templates[instruction].format(action=self.class_names[class_id])


def surrogate_caption(video: VideoClip, instruction: str, oracle: CaptionOracle) -> str:
    return oracle.caption(video.class_id, instruction, frames=video.frames)
