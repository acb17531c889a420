"""A small end-to-end grounding model for synthetic videos.

visual tokens -> sequence-time embedding -> slot compression -> projection ->
one pre-norm decoder block over [K slots | prompt | answer] -> logits over the
extended (time-token) vocabulary.

All randomness comes from explicit numpy seeds; torch is only used for the
forward/backward pass.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .data import SyntheticVideo, VtgAnnotation, format_sample, sample_frames
from .metrics import Segment, parse_prediction, recall_at_1
from .ste import SteTable, TokenGrid
from .time_tokens import EmbeddingPair, ToyTokenizer, extend_and_transfer

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    frames: int = 32
    tokens_per_frame: int = 2
    d: int = 32
    slots: int = 16
    time_rows: int = 8192
    max_prompt_len: int = 24
    max_answer_len: int = 24
    n_layers: int = 1
    n_heads: int = 2
    ffn_mult: int = 4
    decode_temperature: float = 1.0
    use_time_tokens: bool = True
    use_time_embedding: bool = True
    encoder_seed: int = 0

    def __post_init__(self):
        if self.slots > self.frames * self.tokens_per_frame:
            raise ValueError(
                f"{self.slots} slots exceed the {self.frames * self.tokens_per_frame} visual tokens"
            )
        if not self.decode_temperature > 0:
            raise ValueError("decode temperature must be positive")
        if self.d % self.n_heads:
            raise ValueError("d must be divisible by n_heads")

    @classmethod
    def full_scale(cls, **kw) -> "ModelConfig":
        """96 frames x 32 tokens per frame compressed to 256 slots."""
        return cls(**{"frames": 96, "tokens_per_frame": 32, "slots": 256, **kw})

    @property
    def max_text_len(self) -> int:
        return self.max_prompt_len + self.max_answer_len

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 3e-3
    optimizer: str = "adam"
    seed: int = 0
    log_every: int = 100

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


class TrainingDiverged(RuntimeError):
    pass


# --- visual encoder stub -----------------------------------------------------------


def encoder_projection(cfg: ModelConfig) -> np.ndarray:
    """Fixed (M, d, d) random projection from the feature track to M pseudo-tokens per frame."""
    rng = np.random.default_rng([cfg.encoder_seed, 7919])
    return rng.normal(0.0, 1.0 / math.sqrt(cfg.d), size=(cfg.tokens_per_frame, cfg.d, cfg.d))


def encode_video(video: SyntheticVideo, cfg: ModelConfig, mode: str = "test", seed=None, proj=None) -> TokenGrid:
    if not video.duration > 0:
        raise ValueError("video duration must be positive")
    times = sample_frames(video.duration, cfg.frames, mode, seed)
    feats = video.features(times, cfg.d)
    proj = encoder_projection(cfg) if proj is None else proj
    return TokenGrid(np.einsum("nf,mfd->nmd", feats, proj), times)


# --- model ---------------------------------------------------------------------------


class Block(nn.Module):
    def __init__(self, d: int, n_heads: int, ffn_mult: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, ffn_mult * d), nn.GELU(), nn.Linear(ffn_mult * d, d))

    def forward(self, x, mask):
        b, n, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q, k, v = (t.view(b, n, h, d // h).transpose(1, 2) for t in (q, k, v))
        att = (q @ k.transpose(-1, -2)) / math.sqrt(d // h)
        att = att.masked_fill(~mask[:, None], -1e9).softmax(-1)
        y = (att @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.out(y)
        return x + self.ff(self.ln2(x))


class GroundingModel(nn.Module):
    def __init__(self, cfg: ModelConfig, tokenizer: ToyTokenizer, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = tokenizer
        rng = np.random.default_rng([seed, 1])
        d, k = cfg.d, cfg.slots
        t = lambda a: nn.Parameter(torch.tensor(a, dtype=dtype))  # noqa: E731

        self.seq_weight = t(rng.normal(0, 0.02, (cfg.frames, d)))
        self.time_weight = t(np.zeros((cfg.time_rows, d)))
        self.phi = t(rng.normal(0, 1 / math.sqrt(d), (k, d)))
        self.vis_proj = nn.Linear(d, d)
        base = EmbeddingPair(
            rng.normal(0, 0.5, (tokenizer.vocab.base_vocab_size, d)),
            rng.normal(0, 0.5, (tokenizer.vocab.base_vocab_size, d)),
        )
        emb = extend_and_transfer(base, tokenizer.vocab)
        self.tok_emb = t(emb.token_embedding)
        self.lm_head = t(emb.lm_head)
        self.pos_emb = t(rng.normal(0, 0.1, (k + cfg.max_text_len, d)))
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads, cfg.ffn_mult) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(d)
        # torch's default Linear init draws from its global RNG; overwrite from ours
        for mod in [self.vis_proj, *self.blocks]:
            for name, p in mod.named_parameters():
                with torch.no_grad():
                    if name.endswith("bias"):
                        p.zero_()
                    elif p.dim() == 2:
                        p.copy_(torch.tensor(rng.normal(0, 1 / math.sqrt(p.shape[1]), p.shape), dtype=dtype))
        self.to(dtype)
        self.table = SteTable(self.seq_weight.detach().numpy(), self.time_weight.detach().numpy())

    @property
    def trained(self) -> set:
        return self.table.trained

    def time_index(self, grids: Sequence[TokenGrid], mode: str):
        """(B, N, 2) W_t rows and blend weights for every frame."""
        b, n = len(grids), grids[0].frames
        rows = np.zeros((b, n, 2), dtype=np.int64)
        weights = np.zeros((b, n, 2))
        for i, g in enumerate(grids):
            for j, ts in enumerate(g.frame_times):
                for s, (r, w) in enumerate(self.table.time_weights(float(ts), mode)):
                    rows[i, j, s], weights[i, j, s] = r, w
        return torch.from_numpy(rows), torch.tensor(weights, dtype=self.phi.dtype)

    def visual(self, grids: Sequence[TokenGrid], mode: str = "test", return_weights: bool = False):
        """K projected slot embeddings per video, shape (B, K, d)."""
        n = grids[0].frames
        if n > self.cfg.frames:
            raise ValueError(f"{n} frames exceed the sequence table size {self.cfg.frames}")
        z = torch.tensor(np.stack([g.values for g in grids]), dtype=self.phi.dtype)
        z = z + self.seq_weight[:n][None, :, None, :]
        if self.cfg.use_time_embedding:
            rows, w = self.time_index(grids, mode)
            te = (self.time_weight[rows] * w[..., None]).sum(2)
            z = z + te[:, :, None, :]
            if mode == "train" and torch.is_grad_enabled():
                self.table.mark_trained(rows[..., 0].reshape(-1).tolist())
        z = z.reshape(len(grids), -1, self.cfg.d)
        weights = torch.softmax(torch.einsum("kd,bnd->bkn", self.phi, z), dim=-1)
        slots = weights @ z
        out = self.vis_proj(slots)
        return (out, weights) if return_weights else out

    def decode(self, vis: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
        """Causal logits for every text position, shape (B, L, V)."""
        b, k = vis.shape[0], vis.shape[1]
        L = ids.shape[1]
        if L > self.cfg.max_text_len:
            raise ValueError(f"text length {L} exceeds max_text_len {self.cfg.max_text_len}")
        x = torch.cat([vis, self.tok_emb[ids]], dim=1) + self.pos_emb[: k + L]
        n = k + L
        causal = torch.ones(n, n, dtype=torch.bool).tril()
        keep = torch.cat([torch.ones(b, k, dtype=torch.bool), ids != self.tokenizer.pad_id], dim=1)
        mask = causal[None] & keep[:, None, :]
        for blk in self.blocks:
            x = blk(x, mask)
        return self.ln_f(x[:, k:]) @ self.lm_head.T

    def forward(self, grids, ids, mode: str = "test"):
        return self.decode(self.visual(grids, mode), ids)


# --- text layout -----------------------------------------------------------------------


@dataclass
class Example:
    annotation: VtgAnnotation
    video: SyntheticVideo
    prompt_ids: list
    answer_ids: list
    answer_text: str = ""


def prompt_block(tok: ToyTokenizer, prompt_ids: Sequence[int], cfg: ModelConfig) -> list[int]:
    """Left-padded ``<bos> prompt <ans>`` of exactly ``max_prompt_len`` tokens."""
    body = [tok.bos_id, *prompt_ids, tok.ans_id]
    if len(body) > cfg.max_prompt_len:
        raise ValueError(f"prompt of {len(prompt_ids)} tokens exceeds max_prompt_len {cfg.max_prompt_len}")
    return [tok.pad_id] * (cfg.max_prompt_len - len(body)) + body


def build_batch(examples: Sequence[Example], tok: ToyTokenizer, cfg: ModelConfig):
    """Teacher-forcing inputs, targets and the answer-only loss mask."""
    seqs, masks = [], []
    for ex in examples:
        ans = [*ex.answer_ids, tok.eos_id]
        if len(ans) > cfg.max_answer_len:
            raise ValueError(f"answer of {len(ans)} tokens exceeds max_answer_len {cfg.max_answer_len}")
        full = prompt_block(tok, ex.prompt_ids, cfg) + ans
        pad = cfg.max_text_len - len(full)
        seqs.append(full + [tok.pad_id] * pad)
        masks.append([0] * (cfg.max_prompt_len - 1) + [1] * len(ans) + [0] * pad)
    seqs = torch.tensor(seqs)
    mask = torch.tensor(masks, dtype=torch.bool)
    return seqs[:, :-1], seqs[:, 1:], mask


def make_tokenizer(texts: Sequence[str]) -> ToyTokenizer:
    from .data import NOUNS, PROMPTS, VERBS

    pool = [p for ps in PROMPTS.values() for p in ps] + list(VERBS) + list(NOUNS)
    pool += ["seconds second significance score at"]
    return ToyTokenizer.from_texts([*pool, *texts])


def prepare_examples(pairs, tok: ToyTokenizer, cfg: ModelConfig, seed: int = 0) -> list[Example]:
    rng = np.random.default_rng([seed, 3])
    out = []
    for ann, video in pairs:
        prompt, answer = format_sample(ann, cfg.use_time_tokens, rng)
        out.append(Example(ann, video, tok.encode(prompt), tok.encode(answer), answer))
    return out


def answer_loss(model: GroundingModel, examples, grids, mode="train") -> torch.Tensor:
    inp, tgt, mask = build_batch(examples, model.tokenizer, model.cfg)
    logits = model(grids, inp, mode)
    nll = nn.functional.cross_entropy(logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1), reduction="none")
    m = mask.reshape(-1).to(nll.dtype)
    return (nll * m).sum() / m.sum()


@dataclass
class TrainResult:
    model: GroundingModel
    losses: list = field(default_factory=list)


def train(
    examples: Sequence[Example],
    model: GroundingModel,
    tcfg: TrainConfig,
) -> TrainResult:
    """Teacher-forced training on answer tokens; frames are re-drawn per step (train sampling)."""
    if not examples:
        raise ValueError("cannot train on an empty dataset")
    cfg = model.cfg
    proj = encoder_projection(cfg)
    params = [p for p in model.parameters() if p.requires_grad]
    if tcfg.optimizer == "sgd":
        opt = torch.optim.SGD(params, lr=tcfg.lr)
    elif tcfg.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=tcfg.lr)
    else:
        raise ValueError(f"unknown optimizer {tcfg.optimizer!r}")
    rng = np.random.default_rng([tcfg.seed, 11])
    losses = []
    model.train()
    for step in range(tcfg.steps):
        idx = rng.integers(len(examples), size=min(tcfg.batch_size, len(examples)))
        batch = [examples[i] for i in idx]
        grids = [encode_video(ex.video, cfg, "train", rng, proj) for ex in batch]
        loss = answer_loss(model, batch, grids, "train")
        if not torch.isfinite(loss):
            norms = {n: float(p.detach().norm()) for n, p in model.named_parameters()}
            raise TrainingDiverged(f"non-finite loss {loss.item()} at step {step}; parameter norms {norms}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if tcfg.log_every and step % tcfg.log_every == 0:
            log.info("step %d loss %.4f", step, losses[-1])
    model.eval()
    return TrainResult(model, losses)


# --- generation and evaluation ----------------------------------------------------------


@torch.no_grad()
def generate(
    model: GroundingModel,
    grids: Sequence[TokenGrid],
    prompts: Sequence[Sequence[int]],
    temperature: Optional[float] = None,
    seed: int = 0,
) -> list[list[int]]:
    """Sample answers token by token; stops at ``<eos>`` or ``max_answer_len``."""
    cfg, tok = model.cfg, model.tokenizer
    tau = cfg.decode_temperature if temperature is None else temperature
    if not tau > 0:
        raise ValueError("temperature must be positive")
    gen = torch.Generator().manual_seed(int(seed))
    vis = model.visual(grids, "test")
    ids = torch.tensor([prompt_block(tok, p, cfg) for p in prompts])
    done = torch.zeros(len(prompts), dtype=torch.bool)
    out = [[] for _ in prompts]
    for _ in range(cfg.max_answer_len):
        logits = model.decode(vis, ids)[:, -1].double()
        probs = torch.softmax(logits / tau, dim=-1)
        nxt = torch.multinomial(probs, 1, generator=gen).squeeze(1)
        nxt = torch.where(done, torch.full_like(nxt, tok.pad_id), nxt)
        for i, t in enumerate(nxt.tolist()):
            if not done[i] and t != tok.eos_id:
                out[i].append(t)
        done |= nxt == tok.eos_id
        ids = torch.cat([ids, nxt[:, None]], dim=1)
        if bool(done.all()) or ids.shape[1] >= cfg.max_text_len:
            break
    return out


def generate_texts(
    model: GroundingModel, examples: Sequence[Example], temperature=None, seed: int = 0, batch_size: int = 64
) -> list[str]:
    """Decoded answers for each example, frames taken at test-time midpoints."""
    cfg = model.cfg
    proj = encoder_projection(cfg)
    texts = []
    for b0 in range(0, len(examples), batch_size):
        chunk = examples[b0 : b0 + batch_size]
        grids = [encode_video(ex.video, cfg, "test", None, proj) for ex in chunk]
        outs = generate(model, grids, [ex.prompt_ids for ex in chunk], temperature, seed + b0)
        texts.extend(model.tokenizer.decode(o) for o in outs)
    return texts


def evaluate_mr(model: GroundingModel, examples: Sequence[Example], temperature=None, seed: int = 0, batch_size: int = 64):
    """R@1 at IoU 0.5/0.7 plus the fraction of answers that parse as a span."""
    texts = generate_texts(model, examples, temperature, seed, batch_size)
    preds = []
    for text in texts:
        parsed = parse_prediction(text, "mr")
        preds.append(parsed.items[0] if parsed.items else None)
    gts = [ex.annotation.events[0] for ex in examples]
    rec = recall_at_1(preds, gts)
    return {
        "R@1_IoU0.5": rec[0.5],
        "R@1_IoU0.7": rec[0.7],
        "parse_rate": float(np.mean([p is not None for p in preds])) if preds else 0.0,
        "n": len(examples),
    }, preds, texts


def random_span_baseline(gts: Sequence[Segment], durations: Sequence[float], trials: int = 200, seed: int = 0) -> dict:
    """Monte-Carlo R@1 of answering with two uniform random endpoints in [0, duration]."""
    rng = np.random.default_rng(seed)
    hits = {0.5: [], 0.7: []}
    for _ in range(trials):
        preds = []
        for dur in durations:
            a, b = np.sort(rng.uniform(0, dur, 2))
            preds.append(Segment(float(a), float(b)))
        r = recall_at_1(preds, gts)
        for t in hits:
            hits[t].append(r[t])
    return {f"R@1_IoU{t}": float(np.mean(v)) for t, v in hits.items()}


# --- checkpoints -----------------------------------------------------------------------------


def save_checkpoint(model: GroundingModel, path) -> None:
    torch.save(
        {
            "config": model.cfg.to_dict(),
            "tokens": model.tokenizer.tokens,
            "state": model.state_dict(),
            "trained": sorted(model.trained),
            "dtype": str(model.phi.dtype),
        },
        path,
    )


def load_checkpoint(path) -> GroundingModel:
    ck = torch.load(path, weights_only=False)
    cfg = ModelConfig.from_dict(ck["config"])
    tok = ToyTokenizer(_words_from_tokens(ck["tokens"]))
    if tok.tokens != ck["tokens"]:
        raise ValueError("checkpoint vocabulary could not be rebuilt")
    dtype = torch.float64 if ck["dtype"] == "torch.float64" else torch.float32
    model = GroundingModel(cfg, tok, dtype=dtype)
    model.load_state_dict(ck["state"])
    model.table.mark_trained(ck["trained"])
    model.eval()
    return model


def _words_from_tokens(tokens):
    from .time_tokens import PUNCT_TOKENS, SPECIAL_TOKENS, TIME_TOKENS

    skip = set(SPECIAL_TOKENS) | set(PUNCT_TOKENS) | set("0123456789") | set(TIME_TOKENS)
    return [t for t in tokens if t not in skip]
