"""Synthetic recruitment logs drawn from a latent skill-matching world.

Jobs and talents carry skill sets; their overlap is the ground-truth affinity.
Relevance labels threshold the overlap directly. Clicks depend on affinity and
talent popularity with role-specific weights, then suffer role-dependent
label flips (sourcing assistants are the noisiest). Applications require a
click and depend mostly on affinity. Texts are rendered from the latent
fields so the hashing text embedder sees real signal.

Randomness comes from numpy's Philox counter-based generator so the output is
byte-identical across runs and platforms for a fixed seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import InteractionRecord, write_records
from .encoders import ROLES

# normalised page-view shares of SA / SG / TL
PV_RATES = (0.4940, 0.1166, 0.3891)
ROLE_FRACTIONS = tuple(round(p / sum(PV_RATES), 6) for p in PV_RATES)

FILLER = (
    "team player motivated fast paced environment growth opportunity we are looking for "
    "excellent communication passion ownership collaborate stakeholders dynamic company "
    "competitive salary benefits flexible remote office culture mission impact innovative"
).split()


@dataclass
class RoleBehavior:
    affinity_weight: float
    popularity_weight: float
    click_bias: float
    click_flip: float
    apply_flip: float


DEFAULT_BEHAVIOR = {
    "SA": RoleBehavior(affinity_weight=0.6, popularity_weight=1.2, click_bias=-0.4, click_flip=0.20, apply_flip=0.06),
    "SG": RoleBehavior(affinity_weight=1.8, popularity_weight=0.2, click_bias=-1.2, click_flip=0.04, apply_flip=0.02),
    "TL": RoleBehavior(affinity_weight=1.6, popularity_weight=-0.4, click_bias=-1.0, click_flip=0.05, apply_flip=0.02),
}


@dataclass
class GenConfig:
    n_recruiters: int = 60
    role_fractions: tuple[float, float, float] = ROLE_FRACTIONS
    n_talents: int = 2000
    n_jobs: int = 50
    n_sessions: int = 75
    session_size: int = 10
    test_fraction: float = 0.34
    k_skills: int = 16
    job_skills: int = 4
    talent_skills: int = 4
    relevance_threshold: int = 2
    queries_per_job: int = 3
    jobs_per_recruiter: int = 3
    jd_missing_fraction: float = 0.1
    retrieval_overlap_fraction: float = 0.5
    filler_tokens: int = 6
    max_history_len: int = 50
    apply_weight: float = 2.0
    apply_center: float = 1.5
    recruiter_bias_std: float = 0.3
    noise_scale: float = 1.0
    seed: int = 0
    behavior: dict[str, RoleBehavior] = field(default_factory=lambda: dict(DEFAULT_BEHAVIOR))

    def __post_init__(self):
        counts = ("n_recruiters", "n_talents", "n_jobs", "n_sessions", "session_size", "k_skills",
                  "job_skills", "talent_skills", "queries_per_job", "jobs_per_recruiter")
        for name in counts:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if len(self.role_fractions) != 3 or abs(sum(self.role_fractions) - 1.0) > 1e-4:
            raise ValueError("role_fractions must be three values summing to 1")
        if min(self.role_fractions) < 0:
            raise ValueError("role fractions must be nonnegative")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must be in (0, 1)")
        if self.n_recruiters < 3:
            raise ValueError("need at least one recruiter per role")
        if max(self.job_skills, self.talent_skills) > self.k_skills:
            raise ValueError("skill set larger than the skill universe")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be nonnegative")


def _quota(total: int, fractions) -> list[int]:
    """Largest-remainder apportionment."""
    raw = [total * f for f in fractions]
    base = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[: total - sum(base)]:
        base[i] += 1
    return base


@dataclass
class LatentWorld:
    config: GenConfig
    job_skills: np.ndarray  # n_jobs x k, 0/1
    talent_skills: np.ndarray  # n_talents x k, 0/1
    popularity: np.ndarray  # n_talents
    recruiter_roles: list[str]
    recruiter_bias: np.ndarray
    recruiter_jobs: list[list[int]]
    jd_missing: np.ndarray  # n_jobs bool
    click_flips: dict[str, list[int]] = field(default_factory=dict)

    def affinity(self, job: int, talent: int) -> float:
        return float(self.job_skills[job] @ self.talent_skills[talent])

    def click_logit(self, recruiter: int, job: int, talent: int) -> float:
        b = self.config.behavior[self.recruiter_roles[recruiter]]
        mean_overlap = self.config.job_skills * self.config.talent_skills / self.config.k_skills
        return (
            b.affinity_weight * (self.affinity(job, talent) - mean_overlap)
            + b.popularity_weight * self.popularity[talent]
            + b.click_bias
            + self.recruiter_bias[recruiter]
        )

    def apply_logit(self, job: int, talent: int) -> float:
        c = self.config
        return c.apply_weight * (self.affinity(job, talent) - c.apply_center)

    def summary(self) -> dict:
        cfg = asdict(self.config)
        return {
            "config": cfg,
            "job_skills": self.job_skills.astype(int).tolist(),
            "talent_skills": self.talent_skills.astype(int).tolist(),
            "popularity": [float(p) for p in self.popularity],
            "recruiter_roles": self.recruiter_roles,
            "recruiter_bias": [float(b) for b in self.recruiter_bias],
            "recruiter_jobs": self.recruiter_jobs,
            "jd_missing": self.jd_missing.astype(int).tolist(),
            "click_flips": self.click_flips,
        }

    @classmethod
    def from_summary(cls, d: dict) -> "LatentWorld":
        cfg = dict(d["config"])
        cfg["role_fractions"] = tuple(cfg["role_fractions"])
        cfg["behavior"] = {k: RoleBehavior(**v) for k, v in cfg["behavior"].items()}
        return cls(
            config=GenConfig(**cfg),
            job_skills=np.array(d["job_skills"], dtype=np.int64),
            talent_skills=np.array(d["talent_skills"], dtype=np.int64),
            popularity=np.array(d["popularity"], dtype=np.float64),
            recruiter_roles=list(d["recruiter_roles"]),
            recruiter_bias=np.array(d["recruiter_bias"], dtype=np.float64),
            recruiter_jobs=[list(j) for j in d["recruiter_jobs"]],
            jd_missing=np.array(d["jd_missing"], dtype=bool),
            click_flips={k: list(v) for k, v in d.get("click_flips", {}).items()},
        )


def _ids(prefix: str, n: int) -> list[str]:
    width = len(str(max(n - 1, 0)))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def _skill_tokens(row: np.ndarray) -> list[str]:
    return [f"skill:s{d:02d}" for d in np.flatnonzero(row)]


def build_world(cfg: GenConfig, rng: np.random.Generator) -> LatentWorld:
    k = cfg.k_skills

    def skill_sets(n: int, size: int) -> np.ndarray:
        out = np.zeros((n, k), dtype=np.int64)
        for i in range(n):
            out[i, rng.choice(k, size=size, replace=False)] = 1
        return out

    jobs = skill_sets(cfg.n_jobs, cfg.job_skills)
    talents = skill_sets(cfg.n_talents, cfg.talent_skills)
    popularity = rng.standard_normal(cfg.n_talents)
    per_role = _quota(cfg.n_recruiters, cfg.role_fractions)
    if min(per_role) == 0:
        per_role = [max(1, c) for c in per_role]
        per_role[int(np.argmax(per_role))] -= sum(per_role) - cfg.n_recruiters
    roles = [r for r, c in zip(ROLES, per_role) for _ in range(c)]
    roles = [roles[i] for i in rng.permutation(len(roles))]
    bias = rng.normal(0.0, cfg.recruiter_bias_std, size=cfg.n_recruiters)
    n_rj = min(cfg.jobs_per_recruiter, cfg.n_jobs)
    rjobs = [sorted(int(j) for j in rng.choice(cfg.n_jobs, size=n_rj, replace=False)) for _ in range(cfg.n_recruiters)]
    missing = rng.random(cfg.n_jobs) < cfg.jd_missing_fraction
    return LatentWorld(cfg, jobs, talents, popularity, roles, bias, rjobs, missing)


def _render(tokens: list[str], rng: np.random.Generator, n_filler: int) -> str:
    words = tokens + [FILLER[i] for i in rng.integers(0, len(FILLER), size=n_filler)]
    return " ".join(words[i] for i in rng.permutation(len(words)))


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def generate(cfg: GenConfig) -> tuple[list[InteractionRecord], list[InteractionRecord], LatentWorld]:
    """Returns (train records, test records, world). Test sessions are the latest ones."""
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    world = build_world(cfg, rng)
    job_ids = _ids("job", cfg.n_jobs)
    talent_ids = _ids("tal", cfg.n_talents)
    rec_ids = _ids("rec", cfg.n_recruiters)
    session_ids = _ids("sess", cfg.n_sessions)

    jd_text = [
        "" if world.jd_missing[j] else _render(_skill_tokens(world.job_skills[j]) + [f"dept:d{j % 7}"], rng, cfg.filler_tokens)
        for j in range(cfg.n_jobs)
    ]
    edu = rng.integers(0, 5, size=cfg.n_talents)
    resume = [
        _render(_skill_tokens(world.talent_skills[t]) + [f"edu:e{edu[t]}"], rng, cfg.filler_tokens)
        for t in range(cfg.n_talents)
    ]

    # exact role quotas over sessions, then a recruiter of that role
    by_role = {r: [i for i, rr in enumerate(world.recruiter_roles) if rr == r] for r in ROLES}
    session_roles = [r for r, c in zip(ROLES, _quota(cfg.n_sessions, cfg.role_fractions)) for _ in range(c)]
    session_roles = [session_roles[i] for i in rng.permutation(cfg.n_sessions)]

    overlap_pool = (world.job_skills @ world.talent_skills.T) > 0  # n_jobs x n_talents
    histories: list[list[int]] = [[] for _ in range(cfg.n_recruiters)]
    n_test = max(1, int(round(cfg.n_sessions * cfg.test_fraction)))
    n_train = cfg.n_sessions - n_test
    train, test = [], []
    flips: dict[str, list[int]] = {"train": [], "test": []}
    ns = cfg.noise_scale

    for s in range(cfg.n_sessions):
        role = session_roles[s]
        r = int(by_role[role][rng.integers(len(by_role[role]))])
        beh = cfg.behavior[role]
        j = int(world.recruiter_jobs[r][rng.integers(len(world.recruiter_jobs[r]))])
        q = f"q{job_ids[j][3:]}_{int(rng.integers(cfg.queries_per_job))}"
        n_near = int(round(cfg.session_size * cfg.retrieval_overlap_fraction))
        near = np.flatnonzero(overlap_pool[j])
        picks: list[int] = []
        if near.size:
            picks += [int(t) for t in rng.choice(near, size=min(n_near, near.size), replace=False)]
        while len(picks) < cfg.session_size:
            t = int(rng.integers(cfg.n_talents))
            if t not in picks:
                picks.append(t)
        hist = [talent_ids[t] for t in histories[r][: cfg.max_history_len]]
        split, out = ("train", train) if s < n_train else ("test", test)
        new_clicks = []
        for pos, t in enumerate(picks):
            aff = world.affinity(j, t)
            relevant = int(aff >= cfg.relevance_threshold)
            click = int(rng.random() < _sigmoid(world.click_logit(r, j, t)))
            if rng.random() < beh.click_flip * ns:
                click = 1 - click
                flips[split].append(len(out))
            apply = 0
            if click:
                apply = int(rng.random() < _sigmoid(world.apply_logit(j, t)))
                if rng.random() < beh.apply_flip * ns:
                    apply = 1 - apply
                new_clicks.append(t)
            out.append(
                InteractionRecord(
                    recruiter_id=rec_ids[r], role=role, query_id=q, talent_id=talent_ids[t],
                    job_id=job_ids[j], jd_text=jd_text[j], resume_text=resume[t],
                    history_talent_ids=list(hist), session_id=session_ids[s],
                    label_click=click, label_apply=apply, label_relevant=relevant,
                    timestamp=1_700_000_000 + 600 * s + pos,
                )
            )
        # newest first
        histories[r] = list(reversed(new_clicks)) + histories[r]
        del histories[r][cfg.max_history_len :]
    world.click_flips = flips
    return train, test, world


def oracle_score(world: LatentWorld, record: InteractionRecord, task: str = "affinity") -> float:
    """Ground-truth score of a generated record.

    ``affinity`` is the skill overlap (thresholded into the relevance label);
    ``click`` is the noise-free click probability; ``apply`` the probability of
    application given a click.
    """
    try:
        j = int(record.job_id[3:])
        t = int(record.talent_id[3:])
        r = int(record.recruiter_id[3:])
        if not (0 <= j < len(world.job_skills) and 0 <= t < len(world.talent_skills) and 0 <= r < len(world.recruiter_roles)):
            raise IndexError
    except (ValueError, IndexError):
        raise KeyError(f"record ids not from this world: {record.job_id}, {record.talent_id}, {record.recruiter_id}")
    if task == "affinity":
        return world.affinity(j, t)
    if task == "click":
        return _sigmoid(world.click_logit(r, j, t))
    if task == "apply":
        return _sigmoid(world.apply_logit(j, t))
    raise ValueError(f"unknown oracle task {task!r}")


def write_dataset(cfg: GenConfig, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test, world = generate(cfg)
    paths = {"train": out / "train.jsonl", "test": out / "test.jsonl", "world": out / "world.json"}
    write_records(paths["train"], train)
    write_records(paths["test"], test)
    paths["world"].write_text(json.dumps(world.summary(), sort_keys=True), encoding="utf-8")
    return paths


def load_world(path: str | Path) -> LatentWorld:
    return LatentWorld.from_summary(json.loads(Path(path).read_text(encoding="utf-8")))
