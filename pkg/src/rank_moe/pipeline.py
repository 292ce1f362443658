"""Full ranking model: encoders -> MoE -> towers/heads, plus training loop and
checkpoint IO.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import InteractionRecord
from .encoders import (
    ConcatSummaryProvider,
    EmbeddingTable,
    HashingTextEmbedder,
    JdEncoder,
    TemplateSummaryProvider,
    Vocabulary,
    build_jd_embedding,
    lookup_embedding,
    pad_history,
    role_vocabulary,
)
from .heads import (
    TOWER_A,
    TOWER_B,
    Head,
    LossWeights,
    TowerNet,
    final_score,
    head_forward,
    joint_loss,
    relevance_tower,
    task_tower,
)
from .moe import GATE_KEYS, MoeBlock

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_jd", "no_jd_no_mtl", "no_jd_no_mtl_no_pmmoe", "no_llm_summary")
CHECKPOINT_MAGIC = b"RMOE"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 1024
    lr: float = 1e-5
    dropout: float = 0.2
    max_steps: int = 20000
    n_experts: int = 3
    max_history: int = 30
    seed: int = 0
    lambda_ctr: float = 1.0
    lambda_cvr: float = 1.0
    lambda_relv: float = 1.0
    ablation: str = "full"
    id_dim: int = 32
    text_dim: int = 1024
    jd_dim: int = 1088
    relevance_stop_gradient: bool = False
    top_k_history_for_summary: int = 5
    recruiter_vocab: int = 2048
    query_vocab: int = 4096
    talent_vocab: int = 65536
    job_vocab: int = 1024
    log_every: int = 100
    record_by_record: bool = False

    # fields that shape the model; a checkpoint is only valid for these
    ARCH_FIELDS = (
        "ablation", "id_dim", "text_dim", "jd_dim", "n_experts", "max_history",
        "top_k_history_for_summary", "recruiter_vocab", "query_vocab", "talent_vocab", "job_vocab",
    )

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        positive = ("batch_size", "max_steps", "n_experts", "id_dim", "text_dim", "jd_dim",
                    "recruiter_vocab", "query_vocab", "talent_vocab", "job_vocab", "log_every")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.max_history < 0 or self.top_k_history_for_summary < 0:
            raise ValueError("history sizes must be nonnegative")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        self.loss_weights  # validates lambdas

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_ctr, self.lambda_cvr, self.lambda_relv)

    @property
    def uses_jd_encoder(self) -> bool:
        return self.ablation in ("full", "no_llm_summary")

    @property
    def uses_mtl(self) -> bool:
        return self.ablation in ("full", "no_llm_summary", "no_jd")

    @property
    def role_gates(self) -> bool:
        return self.ablation != "no_jd_no_mtl_no_pmmoe"

    def digest(self) -> bytes:
        text = "".join(f"{k}={getattr(self, k)}\n" for k in sorted(self.ARCH_FIELDS))
        return hashlib.sha256(text.encode("utf-8")).digest()


@dataclass
class PredictionTriple:
    p_ctr: float
    p_cvr: float
    p_relv: float | None
    final_score: float


@dataclass
class EncodedBatch:
    """Index arrays and constant text features for a set of records."""

    recruiter: np.ndarray
    query: np.ndarray
    talent: np.ndarray
    job: np.ndarray
    role: np.ndarray
    history: np.ndarray
    lengths: np.ndarray
    c0: np.ndarray | None
    click: np.ndarray
    apply: np.ndarray
    relevant: np.ndarray

    def __len__(self) -> int:
        return self.talent.size

    def take(self, idx) -> "EncodedBatch":
        idx = np.asarray(idx, dtype=np.int64)
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                kw[f.name] = None
            else:
                sub = v[idx]
                if f.name == "history" and sub.shape[1]:
                    sub = sub[:, : max(int(self.lengths[idx].max(initial=0)), 0)]
                kw[f.name] = sub
        return EncodedBatch(**kw)


class RankingModel:
    def __init__(self, config: TrainConfig, vocabs: dict[str, Vocabulary] | None = None,
                 resume_store: dict[str, str] | None = None, embedder=None, summarizer=None):
        self.config = config
        cfg = config
        self.vocabs = vocabs or {
            "recruiter": Vocabulary("recruiter", cfg.recruiter_vocab),
            "query": Vocabulary("query", cfg.query_vocab),
            "talent": Vocabulary("talent", cfg.talent_vocab),
            "job": Vocabulary("job", cfg.job_vocab),
            "role": role_vocabulary(),
        }
        self.resume_store: dict[str, str] = dict(resume_store or {})
        self.embedder = embedder or HashingTextEmbedder(cfg.text_dim)
        if summarizer is None:
            cls = ConcatSummaryProvider if cfg.ablation == "no_llm_summary" else TemplateSummaryProvider
            summarizer = cls(cfg.top_k_history_for_summary)
        self.summarizer = summarizer

        init_rng, drop_rng, self._shuffle_seed = _seed_streams(cfg.seed)
        self.dropout_rng = drop_rng
        rng = init_rng
        d = cfg.id_dim
        self.tables = {
            "recruiter": EmbeddingTable(cfg.recruiter_vocab, d, rng),
            "query": EmbeddingTable(cfg.query_vocab, d, rng),
            "talent": EmbeddingTable(cfg.talent_vocab, d, rng),
        }
        if cfg.role_gates:
            self.tables["role"] = EmbeddingTable(len(self.vocabs["role"]), d, rng)
        if cfg.uses_jd_encoder:
            self.jd = JdEncoder.init(cfg.text_dim, d, cfg.jd_dim, rng)
            jd_width = cfg.jd_dim
        else:
            self.jd = None
            self.tables["job"] = EmbeddingTable(cfg.job_vocab, d, rng)
            jd_width = d
        self.x_dim = 3 * d + jd_width
        gate_in = d if cfg.role_gates else self.x_dim

        if cfg.uses_mtl:
            self.moe = {"": MoeBlock(self.x_dim, gate_in, cfg.n_experts, rng, GATE_KEYS)}
            h = self.moe[""].out_dim
            self.relv_tower = TowerNet(h, TOWER_B, rng)
            r = self.relv_tower.out_dim
            self.towers = {t: TowerNet(h + r, TOWER_A, rng, out_dim=h + r) for t in ("ctr", "cvr")}
            self.shared = TowerNet(h, TOWER_B, rng)
            self.heads = {
                "ctr": Head(h + r + self.shared.out_dim, rng),
                "cvr": Head(h + r + self.shared.out_dim, rng),
                "relv": Head(r, rng),
            }
        else:
            self.moe = {t: MoeBlock(self.x_dim, gate_in, cfg.n_experts, rng, (t,)) for t in ("ctr", "cvr")}
            h = self.moe["ctr"].out_dim
            self.relv_tower = self.shared = None
            self.towers = {t: TowerNet(h, TOWER_A, rng, out_dim=h) for t in ("ctr", "cvr")}
            self.heads = {t: Head(h, rng) for t in ("ctr", "cvr")}

    # ------------------------------------------------------------ params

    def named_params(self) -> dict[str, Tensor]:
        out = {f"emb.{k}": t.weights for k, t in self.tables.items()}
        if self.jd is not None:
            out.update(self.jd.named_params())
        if self.config.uses_mtl:
            out.update(self.moe[""].named_params("moe"))
            out.update(self.relv_tower.named_params("tower.relv"))
            out.update(self.shared.named_params("shared"))
            for t, tower in self.towers.items():
                out.update(tower.named_params(f"tower.{t}"))
            for t, head in self.heads.items():
                out.update(head.named_params(f"head.{t}"))
        else:
            for t in ("ctr", "cvr"):
                out.update(self.moe[t].named_params(f"{t}.moe"))
                out.update(self.towers[t].named_params(f"{t}.tower"))
                out.update(self.heads[t].named_params(f"{t}.head"))
        return dict(sorted(out.items()))

    def param_count(self) -> int:
        return sum(p.data.size for p in self.named_params().values())

    def zero_grad(self) -> None:
        ad.zero_grads(self.named_params().values())

    def astype(self, dtype) -> "RankingModel":
        for p in self.named_params().values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    @property
    def dtype(self):
        return self.tables["talent"].weights.data.dtype

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_params().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_params()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise CheckpointError(f"tensor names differ from config: missing {missing[:5]}, extra {extra[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise CheckpointError(f"shape mismatch for {name}: file {state[name].shape}, config {p.shape}")
            p.data = np.ascontiguousarray(state[name], dtype=p.data.dtype)

    # ------------------------------------------------------------ encoding

    def fit_vocab(self, records: Sequence[InteractionRecord]) -> None:
        """Register ids and resume texts from training records, in file order."""
        v = self.vocabs
        for r in records:
            v["recruiter"].add(r.recruiter_id)
            v["query"].add(r.query_id)
            v["talent"].add(r.talent_id)
            v["job"].add(r.job_id)
            self.resume_store.setdefault(r.talent_id, r.resume_text)
        for r in records:
            for h in r.history_talent_ids:
                v["talent"].add(h)

    def summary_for(self, r: InteractionRecord) -> str:
        hist = r.history_talent_ids[: self.config.max_history]
        texts = [self.resume_store[h] for h in hist if h in self.resume_store]
        return self.summarizer.summarize(r.job_id, r.jd_text, texts)

    def encode(self, records: Sequence[InteractionRecord]) -> EncodedBatch:
        v = self.vocabs
        cfg = self.config
        hist_idx = [v["talent"].lookup_many(r.history_talent_ids[: cfg.max_history]) for r in records]
        history, lengths = pad_history(hist_idx, cfg.max_history)
        c0 = None
        if self.jd is not None:
            c0 = np.zeros((len(records), 2 * cfg.text_dim), dtype=np.float32)
            cache: dict[tuple, np.ndarray] = {}
            for i, r in enumerate(records):
                s = self.summary_for(r)
                key = ("jd", r.job_id, s)
                if key not in cache:
                    cache[key] = self.embedder.embed(s, key=r.job_id)
                c0[i, : cfg.text_dim] = cache[key]
                rkey = ("cv", r.talent_id, r.resume_text)
                if rkey not in cache:
                    cache[rkey] = self.embedder.embed(r.resume_text, key=r.talent_id)
                c0[i, cfg.text_dim :] = cache[rkey]
        return EncodedBatch(
            recruiter=v["recruiter"].lookup_many([r.recruiter_id for r in records]),
            query=v["query"].lookup_many([r.query_id for r in records]),
            talent=v["talent"].lookup_many([r.talent_id for r in records]),
            job=v["job"].lookup_many([r.job_id for r in records]),
            role=v["role"].lookup_many([r.role for r in records]),
            history=history,
            lengths=lengths,
            c0=c0,
            click=np.array([r.label_click for r in records], dtype=np.int64),
            apply=np.array([r.label_apply for r in records], dtype=np.int64),
            relevant=np.array([r.label_relevant for r in records], dtype=np.int64),
        )

    # ------------------------------------------------------------ forward

    def embed_inputs(self, b: EncodedBatch) -> tuple[Tensor, Tensor | None]:
        """Returns x = [e_r; e_q; e_t; e_j] and the role embedding (None without role gates)."""
        t = self.tables
        e_r = lookup_embedding(t["recruiter"], b.recruiter)
        e_q = lookup_embedding(t["query"], b.query)
        e_t = lookup_embedding(t["talent"], b.talent)
        e_role = lookup_embedding(t["role"], b.role) if "role" in t else None
        if self.jd is not None:
            hist = lookup_embedding(t["talent"], b.history.reshape(-1))
            c0 = Tensor(b.c0, dtype=self.dtype)
            e_j = build_jd_embedding(c0, e_t, hist, b.lengths, self.jd)
        else:
            e_j = lookup_embedding(t["job"], b.job)
        return ad.concat_cols([e_r, e_q, e_t, e_j]), e_role

    def forward(self, b: EncodedBatch, training: bool = False) -> dict[str, Tensor | None]:
        cfg = self.config
        drop, rng = cfg.dropout, self.dropout_rng
        x, e_role = self.embed_inputs(b)
        gate_in = e_role if cfg.role_gates else x
        if cfg.uses_mtl:
            mixed = self.moe[""].forward(x, gate_in, training, drop, rng)
            o_relv = relevance_tower(self.relv_tower, mixed["relv"], training, drop, rng)
            o_s = self.shared.forward(mixed["shared"], training, drop, rng)
            out = {"relv": head_forward(self.heads["relv"], o_relv, None, "relv")}
            for t in ("ctr", "cvr"):
                o = task_tower(self.towers[t], mixed[t], o_relv, training, drop, rng,
                               stop_relevance_gradient=cfg.relevance_stop_gradient)
                out[t] = head_forward(self.heads[t], o, o_s, t)
            return out
        out = {"relv": None}
        for t in ("ctr", "cvr"):
            mixed = self.moe[t].forward(x, gate_in, training, drop, rng)[t]
            o = task_tower(self.towers[t], mixed, None, training, drop, rng)
            out[t] = head_forward(self.heads[t], o, None, t)
        return out

    def loss(self, b: EncodedBatch, training: bool = True) -> tuple[Tensor, dict[str, float]]:
        y = self.forward(b, training)
        return joint_loss(y["ctr"], y["cvr"], y["relv"], b.click, b.apply, b.relevant, self.config.loss_weights)

    def predict_encoded(self, b: EncodedBatch, chunk: int = 2048) -> np.ndarray:
        """Rows of (p_ctr, p_cvr, p_relv, final_score); p_relv is NaN without MTL."""
        out = np.empty((len(b), 4), dtype=np.float64)
        with ad.no_grad():
            for lo in range(0, len(b), chunk):
                idx = np.arange(lo, min(lo + chunk, len(b)))
                y = self.forward(b.take(idx), training=False)
                out[idx, 0] = y["ctr"].data[:, 1]
                out[idx, 1] = y["cvr"].data[:, 1]
                out[idx, 2] = y["relv"].data[:, 1] if y["relv"] is not None else np.nan
                out[idx, 3] = final_score(y["ctr"], y["cvr"])
        return out

    def predict(self, records: Sequence[InteractionRecord]) -> list[PredictionTriple]:
        rows = self.predict_encoded(self.encode(records))
        return [
            PredictionTriple(float(a), float(c), None if math.isnan(r) else float(r), float(s))
            for a, c, r, s in rows
        ]


def _seed_streams(seed: int):
    """Independent Philox streams for init, dropout and shuffling."""
    ss = np.random.SeedSequence(seed)
    init_ss, drop_ss, shuffle_ss = ss.spawn(3)
    return (
        np.random.Generator(np.random.Philox(init_ss)),
        np.random.Generator(np.random.Philox(drop_ss)),
        shuffle_ss,
    )


# ---------------------------------------------------------------- training


@dataclass
class LossRecord:
    step: int
    loss_total: float
    loss_ctr: float
    loss_cvr: float
    loss_relv: float


@dataclass
class TrainResult:
    model: RankingModel
    log: list[LossRecord] = field(default_factory=list)

    def logged(self, every: int) -> list[LossRecord]:
        return [r for r in self.log if r.step % every == 0 or r.step == 1]


def _batches(n: int, batch_size: int, seed_seq):
    rng = np.random.Generator(np.random.Philox(seed_seq))
    bs = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        for lo in range(0, n - bs + 1, bs):
            yield perm[lo : lo + bs]


def _step_record_by_record(model: RankingModel, batch: EncodedBatch) -> dict[str, float]:
    n = len(batch)
    sums: dict[str, float] = {}
    for i in range(n):
        loss, parts = model.loss(batch.take([i]), training=True)
        scaled = ad.scale(loss, 1.0 / n)
        scaled.backward()
        sums["total"] = sums.get("total", 0.0) + float(loss.data[0, 0]) / n
        for k, val in parts.items():
            sums[k] = sums.get(k, 0.0) + val / n
    return sums


def train(
    records: Sequence[InteractionRecord],
    config: TrainConfig,
    model: RankingModel | None = None,
) -> TrainResult:
    if not records:
        raise TrainingError("empty training dataset")
    if model is None:
        model = RankingModel(config)
        model.fit_vocab(records)
    data = model.encode(records)
    opt = ad.Adam(model.named_params(), lr=config.lr)
    result = TrainResult(model)
    model.zero_grad()
    batches = _batches(len(data), config.batch_size, model._shuffle_seed)
    for step in range(1, config.max_steps + 1):
        batch = data.take(next(batches))
        try:
            if config.record_by_record:
                parts = _step_record_by_record(model, batch)
                total = parts.pop("total")
            else:
                loss, parts = model.loss(batch, training=True)
                total = float(loss.data[0, 0])
                loss.backward()
        except FloatingPointError as exc:
            raise TrainingError(f"non-finite value at step {step}: {exc}") from exc
        if not math.isfinite(total):
            raise TrainingError(f"non-finite loss at step {step}")
        opt.step()
        rec = LossRecord(step, total, parts.get("ctr", 0.0), parts.get("cvr", 0.0), parts.get("relv", 0.0))
        result.log.append(rec)
        if step % config.log_every == 0:
            log.info("step %d loss %.6f", step, total)
    return result


def write_loss_log(path: str | Path, rows: Sequence[LossRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss_total", "loss_ctr", "loss_cvr", "loss_relv"])
        for r in rows:
            w.writerow([r.step, repr(r.loss_total), repr(r.loss_ctr), repr(r.loss_cvr), repr(r.loss_relv)])


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(params: dict[str, np.ndarray] | RankingModel, path: str | Path, digest: bytes | None = None) -> None:
    """Binary layout: magic, u16 version, 32-byte config digest, then per tensor
    u16 name length, UTF-8 name, u32 rows, u32 cols, little-endian float32 data.
    """
    if isinstance(params, RankingModel):
        digest = params.config.digest() if digest is None else digest
        params = params.state_dict()
    if digest is None or len(digest) != 32:
        raise CheckpointError("checkpoint needs a 32-byte config digest")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(digest)
        for name in sorted(params):
            arr = np.asarray(params[name])
            if arr.ndim != 2:
                raise CheckpointError(f"tensor {name} is not 2-D")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[bytes, dict[str, np.ndarray]]:
    """Returns (config digest, tensors by name)."""
    blob = Path(path).read_bytes()
    if len(blob) < 38:
        raise CheckpointError(f"{path}: truncated header")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    digest = blob[6:38]
    pos = 38
    tensors: dict[str, np.ndarray] = {}
    while pos < len(blob):
        try:
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            if pos + nlen + 8 > len(blob):
                raise struct.error("name/shape past end of file")
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            rows, cols = struct.unpack_from("<II", blob, pos)
            pos += 8
        except (struct.error, UnicodeDecodeError) as exc:
            raise CheckpointError(f"{path}: truncated or corrupt tensor header at byte {pos}") from exc
        nbytes = rows * cols * 4
        if pos + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated data for tensor {name}")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=pos).reshape(rows, cols).astype(np.float32)
        pos += nbytes
    return digest, tensors


def meta_path(path: str | Path) -> Path:
    return Path(str(path) + ".meta.json")


def save_model(model: RankingModel, path: str | Path) -> None:
    """Checkpoint plus a sidecar with config, vocabularies and resume texts."""
    save_checkpoint(model, path)
    meta = {
        "config": asdict(model.config),
        "vocabs": {k: v.to_dict() for k, v in sorted(model.vocabs.items())},
        "resume_store": dict(sorted(model.resume_store.items())),
    }
    meta_path(path).write_text(json.dumps(meta, ensure_ascii=False, sort_keys=True), encoding="utf-8")


def load_model(path: str | Path, config: TrainConfig | None = None) -> RankingModel:
    """Rebuild a model from checkpoint + sidecar.

    When ``config`` is given its digest must match the checkpoint's.
    """
    digest, tensors = load_checkpoint(path)
    mp = meta_path(path)
    if not mp.exists():
        raise CheckpointError(f"missing model metadata {mp}")
    meta = json.loads(mp.read_text(encoding="utf-8"))
    stored = TrainConfig(**meta["config"])
    if stored.digest() != digest:
        raise CheckpointError("checkpoint digest does not match its stored config")
    if config is not None and config.digest() != digest:
        raise CheckpointError(
            f"config digest {config.digest().hex()} != checkpoint digest {digest.hex()}"
            + _digest_diff(stored, config)
        )
    cfg = config if config is not None else stored
    vocabs = {k: Vocabulary.from_dict(v) for k, v in meta["vocabs"].items()}
    model = RankingModel(replace(cfg), vocabs=vocabs, resume_store=meta["resume_store"])
    model.load_state_dict(tensors)
    return model


def _digest_diff(a: TrainConfig, b: TrainConfig) -> str:
    diffs = [f"{k}: {getattr(a, k)} -> {getattr(b, k)}" for k in TrainConfig.ARCH_FIELDS if getattr(a, k) != getattr(b, k)]
    return (" (" + "; ".join(diffs) + ")") if diffs else ""
