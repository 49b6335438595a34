"""Training configuration, parameter initialization, the loop, checkpoints.

Variants:

* ``full``      - three fields, per-field history self-attention, and the
                  title/abstract contrastive term.
* ``no_mfke``   - history field sequences pass through untouched.
* ``no_c2``     - contrastive term off; the abstract field reads the raw
                  (long) abstract tokens instead of the generated title.
* ``no_abs``    - category and title fields only; contrastive term off.

Checkpoints are a single binary file: magic ``TDNR``, a version byte, a
length-prefixed UTF-8 JSON manifest (config snapshot, vocabulary, named
array layout, optimizer step, rng state, completed epochs) and a raw
little-endian float32 blob that the manifest offsets tile exactly.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .data import (
    Batch,
    FieldPlan,
    ImpressionLog,
    NewsArticle,
    Vocabulary,
    assemble_batch,
    build_vocabulary,
    make_field_plan,
    news_index,
    parse_behaviors,
    parse_news_table,
    sample_training_instances,
    validate_references,
)
from .diffcore import AdamState, Tensor
from .encoders import (
    DEFAULT_FIELDS,
    AdditiveAttentionParams,
    MhsaParams,
    ModelParams,
    ProjectionHead,
    encode_batch,
    project_for_contrast,
)
from .errors import CheckpointError, ConfigError, ContractError, DataError, NumericError
from .objectives import LossConfig, click_scores, contrastive_loss, recommendation_loss, total_loss

CHECKPOINT_MAGIC = b"TDNR"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Variant:
    """Which fields, contextualization and loss terms a model variant uses."""

    name: str
    fields: tuple[str, ...]
    abs_attr: str | None
    use_mfke: bool
    use_contrast: bool

    def plan(self) -> FieldPlan:
        return make_field_plan(self.fields, self.abs_attr or "gen_title_tokens")


VARIANTS: dict[str, Variant] = {
    "full": Variant("full", DEFAULT_FIELDS, "gen_title_tokens", True, True),
    "no_mfke": Variant("no_mfke", DEFAULT_FIELDS, "gen_title_tokens", False, True),
    "no_c2": Variant("no_c2", DEFAULT_FIELDS, "abstract_tokens", True, False),
    "no_abs": Variant("no_abs", ("cats", "title"), None, True, False),
}


@dataclass
class TrainConfig:
    """Model dimensions, data limits and optimization hyperparameters."""

    d: int = 64
    heads: int = 4
    attn_hidden: int = 64
    vocab_min_freq: int = 1
    vocab_cap: int | None = None
    max_title_len: int = 20
    max_gen_title_len: int = 25
    max_abstract_len: int = 50
    max_cats_len: int = 10
    max_history: int = 25
    negatives: int = 4
    lr: float = 2e-5
    batch_size: int = 32
    epochs: int = 5
    seed: int = 0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    temperature: float = 0.1
    lambda_cl: float = 0.1
    cl_pool: str = "batch"
    variant: str = "full"
    use_gen_title_column: bool = False

    def validate(self) -> None:
        positive = (
            "d", "heads", "attn_hidden", "vocab_min_freq", "max_title_len",
            "max_gen_title_len", "max_abstract_len", "max_cats_len",
            "max_history", "negatives", "batch_size",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d % self.heads != 0:
            raise ConfigError(f"heads ({self.heads}) must divide d ({self.d})")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.vocab_cap is not None and self.vocab_cap < 1:
            raise ConfigError("vocab_cap must be >= 1 when set")
        if self.cl_pool not in ("batch", "impression"):
            raise ConfigError(f"cl_pool must be 'batch' or 'impression', got {self.cl_pool!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"variant must be one of {sorted(VARIANTS)}, got {self.variant!r}"
            )
        self.loss_config()

    def loss_config(self) -> LossConfig:
        return LossConfig(
            alpha=self.focal_alpha,
            gamma=self.focal_gamma,
            temperature=self.temperature,
            lambda_cl=self.lambda_cl,
            negatives=self.negatives,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**values)
        cfg.validate()
        return cfg


_BOOL_VALUES = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def coerce_config_value(name: str, raw: str):
    """Parse one key=value string into the type of the matching config field."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    if name not in fields:
        raise ConfigError(f"unknown config key {name!r}")
    default = getattr(TrainConfig(), name)
    raw = raw.strip()
    if name == "vocab_cap":
        return None if raw.lower() in ("", "none") else int(raw)
    if isinstance(default, bool):
        try:
            return _BOOL_VALUES[raw.lower()]
        except KeyError:
            raise ConfigError(f"config key {name!r} expects a boolean, got {raw!r}") from None
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def load_config_file(path: str | Path) -> dict:
    """Parse a key=value config file with ``#`` comments."""
    values: dict = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{line_no}: expected key=value, got {text!r}")
        key, raw = text.split("=", 1)
        key = key.strip()
        try:
            values[key] = coerce_config_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{path}:{line_no}: bad value for {key!r}: {exc}") from exc
    return values


def resolve_config(file_values: dict | None = None, overrides: dict | None = None) -> TrainConfig:
    """Defaults <- config file <- explicit overrides, then validate."""
    merged = TrainConfig().to_dict()
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if key not in merged:
                raise ConfigError(f"unknown config key {key!r}")
            if value is not None:
                merged[key] = value
    return TrainConfig.from_dict(merged)


# -- initialization ----------------------------------------------------------


def init_params(config: TrainConfig, vocab_size: int, seed: int) -> ModelParams:
    """Glorot-uniform matrices, zero biases, +-0.1 embeddings with row 0 zeroed."""
    config.validate()
    if vocab_size < 2:
        raise ConfigError("vocab_size must include the two reserved ids")
    rng = np.random.default_rng(seed)
    d, heads, hidden = config.d, config.heads, config.attn_hidden
    dk = d // heads

    def uniform(shape, bound: float) -> Tensor:
        data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        return Tensor(data, requires_grad=True)

    def glorot(shape, fan_in: int, fan_out: int) -> Tensor:
        return uniform(shape, math.sqrt(6.0 / (fan_in + fan_out)))

    def zeros(shape) -> Tensor:
        return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    emb = rng.uniform(-0.1, 0.1, size=(vocab_size, d)).astype(np.float32)
    emb[0, :] = 0.0
    mhsa = {
        fname: MhsaParams(
            wq=glorot((heads, d, dk), d, dk),
            wk=glorot((heads, d, dk), d, dk),
            wv=glorot((heads, d, dk), d, dk),
            wo=glorot((d, d), d, d),
        )
        for fname in DEFAULT_FIELDS
    }

    def merge() -> AdditiveAttentionParams:
        return AdditiveAttentionParams(
            w=glorot((d, hidden), d, hidden),
            b=zeros((hidden,)),
            e=glorot((hidden, 1), hidden, 1),
        )

    def head() -> ProjectionHead:
        return ProjectionHead(w=glorot((d, d), d, d), b=zeros((d,)))

    return ModelParams(
        embedding=Tensor(emb, requires_grad=True),
        mhsa=mhsa,
        cand_merge=merge(),
        news_merge=merge(),
        user_merge=merge(),
        proj_title=head(),
        proj_abs=head(),
    )


# -- training loop -----------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    l_rec: float
    l_cl: float
    l_total: float


@dataclass
class TrainState:
    """Everything besides the parameters needed to continue a run."""

    config: TrainConfig
    vocab_tokens: list[str]
    adam: AdamState
    rng_state: dict
    completed_epochs: int


@dataclass
class TrainResult:
    params: ModelParams
    vocab: Vocabulary
    log: list[EpochStats]
    state: TrainState
    articles: dict[str, NewsArticle] = dataclasses.field(default_factory=dict, repr=False)


def prepare_articles(
    config: TrainConfig, vocab: Vocabulary, news_lines: Iterable[str]
) -> dict[str, NewsArticle]:
    """Parse the news table under a config's length limits, keyed by id."""
    articles = parse_news_table(
        news_lines,
        vocab,
        max_title=config.max_title_len,
        max_abstract=config.max_abstract_len,
        max_gen_title=config.max_gen_title_len,
        max_cats=config.max_cats_len,
        use_gen_column=config.use_gen_title_column,
    )
    return news_index(articles)


def _train_step(
    params: ModelParams,
    named: dict[str, Tensor],
    batch: Batch,
    variant: Variant,
    config: TrainConfig,
    lambda_cl: float,
    adam: AdamState,
) -> tuple[float, float, float]:
    enc = encode_batch(params, batch, use_mfke=variant.use_mfke)
    scores = click_scores(enc.user, enc.cands)
    l_rec = recommendation_loss(scores, config.focal_alpha, config.focal_gamma)
    if lambda_cl > 0.0:
        t_proj = project_for_contrast(enc.pool_fields["title"], params.proj_title)
        a_proj = project_for_contrast(enc.pool_fields["abs"], params.proj_abs)
        if config.cl_pool == "impression":
            per_sample = [
                contrastive_loss(
                    dc.take_rows(t_proj, idx), dc.take_rows(a_proj, idx), config.temperature
                )
                for idx in batch.sample_pools
            ]
            l_cl = dc.stack(per_sample).mean()
        else:
            l_cl = contrastive_loss(t_proj, a_proj, config.temperature)
        l_tot = total_loss(l_rec, l_cl, lambda_cl)
        cl_value = float(l_cl)
    else:
        l_tot = l_rec
        cl_value = 0.0
    rec_value, tot_value = float(l_rec), float(l_tot)
    if not (math.isfinite(rec_value) and math.isfinite(tot_value) and math.isfinite(cl_value)):
        raise NumericError("non-finite training loss")

    for t in named.values():
        t.zero_grad()
    l_tot.backward()
    grads = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in named.items()
    }
    grads["embedding"][0, :] = 0.0  # padding row stays out of updates
    dc.adam_step(named, grads, adam, config.lr)
    params.embedding.data[0, :] = 0.0
    for t in named.values():
        t.zero_grad()
    return rec_value, cl_value, tot_value


def train(
    config: TrainConfig,
    news_lines: Sequence[str],
    behavior_lines: Sequence[str],
    resume: tuple[ModelParams, TrainState] | None = None,
) -> TrainResult:
    """Run the configured number of epochs and return params plus the epoch log.

    ``resume`` continues from a loaded checkpoint; everything except the
    epoch target must match the checkpointed config.
    """
    config.validate()
    variant = VARIANTS[config.variant]

    if resume is not None:
        params, state = resume
        snap = dict(state.config.to_dict())
        want = dict(config.to_dict())
        snap.pop("epochs"), want.pop("epochs")
        if snap != want:
            diff = [k for k in want if want[k] != snap[k]]
            raise ContractError(f"resume config differs from checkpoint on {diff}")
        vocab = Vocabulary(state.vocab_tokens)
        adam = state.adam
        rng = np.random.default_rng()
        rng.bit_generator.state = state.rng_state
        start_epoch = state.completed_epochs
    else:
        vocab = build_vocabulary(
            news_lines,
            config.vocab_min_freq,
            use_gen_column=config.use_gen_title_column,
            cap=config.vocab_cap,
        )
        params = init_params(config, len(vocab), config.seed)
        adam = AdamState.for_params(params.named_tensors())
        rng = np.random.default_rng(config.seed)
        start_epoch = 0

    index = prepare_articles(config, vocab, news_lines)
    impressions = parse_behaviors(behavior_lines, max_history=config.max_history)
    validate_references(impressions, index)
    usable = [
        imp
        for imp in impressions
        if any(l == 1 for _, l in imp.candidates) and any(l == 0 for _, l in imp.candidates)
    ]
    if not usable:
        raise DataError("no impression yields a positive with sampleable negatives")

    lambda_cl = config.lambda_cl if variant.use_contrast else 0.0
    plan = variant.plan()
    named = params.named_tensors()
    log: list[EpochStats] = []
    batch_size = config.batch_size

    for epoch in range(start_epoch, config.epochs):
        order = rng.permutation(len(impressions))
        samples = []
        for i in order:
            samples.extend(
                sample_training_instances(impressions[i], config.negatives, rng, index)
            )
        sums = np.zeros(3, dtype=np.float64)
        count = 0
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo : lo + batch_size]
            batch = assemble_batch(chunk, plan)
            rec, cl, tot = _train_step(params, named, batch, variant, config, lambda_cl, adam)
            sums += np.array([rec, cl, tot]) * len(chunk)
            count += len(chunk)
        means = sums / max(count, 1)
        log.append(EpochStats(epoch + 1, float(means[0]), float(means[1]), float(means[2])))

    state = TrainState(
        config=config,
        vocab_tokens=vocab.tokens,
        adam=adam,
        rng_state=rng.bit_generator.state,
        completed_epochs=config.epochs,
    )
    return TrainResult(params=params, vocab=vocab, log=log, state=state, articles=index)


# -- checkpoints -------------------------------------------------------------


def _expected_shapes(config: TrainConfig, vocab_size: int) -> dict[str, tuple[int, ...]]:
    d, heads, hidden = config.d, config.heads, config.attn_hidden
    dk = d // heads
    shapes: dict[str, tuple[int, ...]] = {"embedding": (vocab_size, d)}
    for fname in DEFAULT_FIELDS:
        for part in ("wq", "wk", "wv"):
            shapes[f"mhsa.{fname}.{part}"] = (heads, d, dk)
        shapes[f"mhsa.{fname}.wo"] = (d, d)
    for group in ("cand_merge", "news_merge", "user_merge"):
        shapes[f"{group}.w"] = (d, hidden)
        shapes[f"{group}.b"] = (hidden,)
        shapes[f"{group}.e"] = (hidden, 1)
    for group in ("proj_title", "proj_abs"):
        shapes[f"{group}.w"] = (d, d)
        shapes[f"{group}.b"] = (d,)
    return shapes


def save_checkpoint(params: ModelParams, state: TrainState, path: str | Path) -> None:
    """Serialize params + optimizer + rng into one self-describing file."""
    named = params.named_tensors()
    entries: list[dict] = []
    blobs: list[bytes] = []
    offset = 0

    def put(name: str, arr: np.ndarray) -> None:
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)

    for name, tensor in named.items():
        put(name, tensor.data)
    for name in named:
        put(f"adam.m.{name}", state.adam.m[name])
    for name in named:
        put(f"adam.v.{name}", state.adam.v[name])

    manifest = {
        "config": state.config.to_dict(),
        "vocab": state.vocab_tokens,
        "entries": entries,
        "adam_step": state.adam.step,
        "rng_state": state.rng_state,
        "completed_epochs": state.completed_epochs,
    }
    payload = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(bytes([CHECKPOINT_VERSION]))
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        fh.write(b"".join(blobs))


def load_checkpoint(path: str | Path) -> tuple[ModelParams, TrainState]:
    """Validate and reconstruct a checkpoint; every scalar round-trips bit-exactly."""
    raw = Path(path).read_bytes()
    if len(raw) < 9 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if raw[4] != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {raw[4]}")
    (manifest_len,) = struct.unpack("<I", raw[5:9])
    if len(raw) < 9 + manifest_len:
        raise CheckpointError("truncated manifest")
    try:
        manifest = json.loads(raw[9 : 9 + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    blob = raw[9 + manifest_len :]

    try:
        config = TrainConfig.from_dict(manifest["config"])
        vocab_tokens = list(manifest["vocab"])
        entries = manifest["entries"]
        adam_step = int(manifest["adam_step"])
        rng_state = manifest["rng_state"]
        completed = int(manifest["completed_epochs"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"invalid manifest: {exc}") from exc

    expected = _expected_shapes(config, vocab_size=len(vocab_tokens) + 2)
    full_expected = dict(expected)
    for name, shape in expected.items():
        full_expected[f"adam.m.{name}"] = shape
        full_expected[f"adam.v.{name}"] = shape
    names = [e["name"] for e in entries]
    if sorted(names) != sorted(full_expected):
        raise CheckpointError("manifest entries do not match the config's parameter set")

    cursor = 0
    arrays: dict[str, np.ndarray] = {}
    for entry in entries:
        shape = tuple(int(x) for x in entry["shape"])
        if shape != full_expected[entry["name"]]:
            raise CheckpointError(
                f"shape of {entry['name']!r} is {shape}, config implies "
                f"{full_expected[entry['name']]}"
            )
        if int(entry["offset"]) != cursor:
            raise CheckpointError("manifest offsets are not contiguous")
        size = int(np.prod(shape, dtype=np.int64)) * 4
        if cursor + size > len(blob):
            raise CheckpointError("blob shorter than the manifest describes")
        arrays[entry["name"]] = (
            np.frombuffer(blob, dtype="<f4", count=int(np.prod(shape, dtype=np.int64)),
                          offset=cursor).reshape(shape).copy()
        )
        cursor += size
    if cursor != len(blob):
        raise CheckpointError("blob longer than the manifest describes")

    def tensor(name: str) -> Tensor:
        return Tensor(arrays[name], requires_grad=True)

    params = ModelParams(
        embedding=tensor("embedding"),
        mhsa={
            fname: MhsaParams(
                wq=tensor(f"mhsa.{fname}.wq"),
                wk=tensor(f"mhsa.{fname}.wk"),
                wv=tensor(f"mhsa.{fname}.wv"),
                wo=tensor(f"mhsa.{fname}.wo"),
            )
            for fname in DEFAULT_FIELDS
        },
        cand_merge=AdditiveAttentionParams(
            w=tensor("cand_merge.w"), b=tensor("cand_merge.b"), e=tensor("cand_merge.e")
        ),
        news_merge=AdditiveAttentionParams(
            w=tensor("news_merge.w"), b=tensor("news_merge.b"), e=tensor("news_merge.e")
        ),
        user_merge=AdditiveAttentionParams(
            w=tensor("user_merge.w"), b=tensor("user_merge.b"), e=tensor("user_merge.e")
        ),
        proj_title=ProjectionHead(w=tensor("proj_title.w"), b=tensor("proj_title.b")),
        proj_abs=ProjectionHead(w=tensor("proj_abs.w"), b=tensor("proj_abs.b")),
    )
    adam = AdamState(
        m={name: arrays[f"adam.m.{name}"] for name in expected},
        v={name: arrays[f"adam.v.{name}"] for name in expected},
        step=adam_step,
    )
    state = TrainState(
        config=config,
        vocab_tokens=vocab_tokens,
        adam=adam,
        rng_state=rng_state,
        completed_epochs=completed,
    )
    return params, state
