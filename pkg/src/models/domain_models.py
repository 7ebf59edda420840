from enum import Enum
from typing import Any, Dict, FrozenSet, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..config import settings


class DuplicatePolicy(str, Enum):

    KEEP_LAST = "keep-last"
    REJECT = "reject"


class DatasetFormat(str, Enum):

    MOVIELENS = "movielens"
    CSV = "csv"
    TSV = "tsv"


class CostModel(str, Enum):

    UNIT = "unit"
    ENTROPY_BIASED = "entropy_biased"


class WalkMethod(str, Enum):

    EXACT = "exact"
    TRUNCATED = "truncated"


class EntropyKind(str, Enum):

    ITEM_BASED = "item_based"
    TOPIC_BASED = "topic_based"


class Algorithm(str, Enum):

    HT = "ht"
    AT = "at"
    AC1 = "ac1"
    AC2 = "ac2"
    PPR = "ppr"
    DPPR = "dppr"
    LDA = "lda"

    @property
    def ascending(self) -> bool:
        """Time and cost valued algorithms rank smaller values first."""
        return self in (Algorithm.HT, Algorithm.AT, Algorithm.AC1, Algorithm.AC2)

    @property
    def needs_topic_model(self) -> bool:
        return self in (Algorithm.AC2, Algorithm.LDA)


class RatingRecord(BaseModel):

    model_config = ConfigDict(frozen=True)

    user_id: str = Field(..., min_length=1, description="Opaque user identifier")
    item_id: str = Field(..., min_length=1, description="Opaque item identifier")
    rating: int = Field(..., ge=1, le=5, description="Integer star rating")


class EntropyTable(BaseModel):

    kind: EntropyKind
    entries: Dict[str, float] = Field(
        ...,
        description="Per-user entropy E(u), keyed by external user id"
    )

    @field_validator('entries')
    @classmethod
    def validate_entries(cls, v):
        for user_id, value in v.items():
            if value < 0 or not np.isfinite(value):
                raise ValueError(f"Entropy of user {user_id} must be finite and >= 0, got {value}")
        return v

    def scaled(self, factor: float) -> "EntropyTable":
        return EntropyTable(kind=self.kind, entries={u: e * factor for u, e in self.entries.items()})

    def mean(self) -> float:
        return float(np.mean(list(self.entries.values()))) if self.entries else 0.0


class AbsorbingSpec(BaseModel):

    absorbing_nodes: FrozenSet[int] = Field(
        ...,
        description="Internal node indices at which the walk stops"
    )
    cost_model: CostModel = CostModel.UNIT
    entropy: Optional[EntropyTable] = None
    cost_constant: Optional[float] = Field(
        None,
        description="Cost C of a user -> item transition"
    )

    @model_validator(mode='after')
    def validate_costs(self):
        if not self.absorbing_nodes:
            raise ValueError("Absorbing node set must not be empty")
        if self.cost_model == CostModel.ENTROPY_BIASED:
            if self.entropy is None:
                raise ValueError("Entropy-biased cost model requires an entropy table")
            if self.cost_constant is None or self.cost_constant <= 0:
                raise ValueError("Entropy-biased cost model requires a constant C > 0")
        return self


class WalkResult(BaseModel):

    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray = Field(
        ...,
        description="Expected steps or cost per node; +inf where the absorbing set is unreachable"
    )
    reachable: np.ndarray
    converged_iterations: int = 0
    method: WalkMethod = WalkMethod.EXACT

    @property
    def method_label(self) -> str:
        if self.method == WalkMethod.TRUNCATED:
            return f"truncated({self.converged_iterations})"
        return self.method.value


class RecommendedItem(BaseModel):

    item_id: str
    score: float


class RecommendationList(BaseModel):

    query_user: str
    items: List[RecommendedItem] = Field(default_factory=list)
    algorithm: Algorithm
    k: int = Field(..., ge=1)

    @property
    def item_ids(self) -> List[str]:
        return [entry.item_id for entry in self.items]


class LongTailSplit(BaseModel):

    r_percent: float = Field(settings.DEFAULT_R_PERCENT, gt=0, le=1)
    tail_items: FrozenSet[str]
    head_items: FrozenSet[str]
    popularity: Dict[str, int] = Field(
        ...,
        description="Rating count per item"
    )

    @property
    def tail_item_share(self) -> float:
        total = len(self.tail_items) + len(self.head_items)
        return len(self.tail_items) / total if total else 0.0

    @property
    def tail_rating_share(self) -> float:
        total = sum(self.popularity.values())
        tail = sum(self.popularity[i] for i in self.tail_items)
        return tail / total if total else 0.0


class RecallCase(BaseModel):

    user_id: str
    item_id: str = Field(..., description="Held-out five star long tail item")
    decoys: List[str]


class RecallProtocol(BaseModel):

    seed: int
    cases: List[RecallCase]


class CategoryPath(BaseModel):

    model_config = ConfigDict(frozen=True)

    segments: List[str] = Field(..., min_length=1)

    @classmethod
    def parse(cls, text: str, separator: str = ":") -> "CategoryPath":
        return cls(segments=[part.strip() for part in text.split(separator) if part.strip()])

    @property
    def depth(self) -> int:
        """Path length, not counting the root catalog segment."""
        return len(self.segments) - 1

    def __str__(self) -> str:
        return ":".join(self.segments)


class RunConfig(BaseModel):

    model_config = ConfigDict(extra='forbid')

    dataset: Optional[str] = None
    dataset_format: DatasetFormat = DatasetFormat.MOVIELENS
    duplicate_policy: DuplicatePolicy = DuplicatePolicy.KEEP_LAST
    algorithms: List[Algorithm] = Field(default_factory=lambda: [Algorithm.AT])

    k: int = Field(settings.DEFAULT_K, ge=1)
    mu: Optional[int] = Field(settings.DEFAULT_MU, ge=1)
    tau: Optional[int] = Field(
        settings.DEFAULT_TAU,
        ge=1,
        description="Truncated iterations; None solves the walk systems exactly"
    )
    cost_constant: Optional[float] = Field(None, gt=0)

    topics: int = Field(settings.DEFAULT_TOPICS, ge=2)
    alpha: Optional[float] = Field(None, gt=0)
    beta: float = Field(settings.DEFAULT_BETA, gt=0)
    sweeps: int = Field(settings.DEFAULT_SWEEPS, ge=1)

    damping: float = Field(settings.DEFAULT_DAMPING, gt=0, lt=1)

    r_percent: float = Field(settings.DEFAULT_R_PERCENT, gt=0, le=1)
    n_cases: int = Field(settings.DEFAULT_N_CASES, ge=1)
    n_decoys: int = Field(settings.DEFAULT_N_DECOYS, ge=1)
    eval_users: int = Field(settings.DEFAULT_EVAL_USERS, ge=1)
    item_universe: Optional[int] = Field(
        None,
        ge=1,
        description="Item count used by diversity; defaults to the items of the ingested graph"
    )
    ontology: Optional[str] = None
    mu_values: List[int] = Field(default_factory=lambda: [1000, 2000, 4000, 6000])

    @field_validator('mu_values')
    @classmethod
    def validate_mu_values(cls, v):
        if not v or any(mu < 1 for mu in v):
            raise ValueError("mu_values must be a non-empty list of positive integers")
        return v

    seed: int = settings.DEFAULT_SEED
    workers: int = Field(settings.MAX_WORKERS, ge=1)
    output_dir: str = settings.OUTPUT_DIR

    @property
    def resolved_alpha(self) -> float:
        return self.alpha if self.alpha is not None else 50.0 / self.topics


class StageManifest(BaseModel):

    version: str
    command: str
    config: Dict[str, Any]
    seed: int
    inputs: Dict[str, str] = Field(default_factory=dict, description="SHA-256 per input file")
    outputs: Dict[str, str] = Field(default_factory=dict, description="SHA-256 per output file")
    inputs_digest: str = ""
    timings: Dict[str, Dict[str, float]] = Field(
        default_factory=dict,
        description="Per-algorithm seconds per user (mean, max)"
    )
