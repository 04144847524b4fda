"""Pydantic request/response models for the HTTP service.

Every subcommand of the CLI maps onto one request model here; the CLI is a
thin client that fills these in from a config file plus flag overrides.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class TransferSpecModel(BaseModel):
    word_order: str = "reversal"
    affix_rules: dict[str, str] | None = None  # None: default per-type suffixes
    script_map: dict[str, str] = Field(default_factory=dict)
    lexicon_swap_ratio: float = 0.0
    seed: int = 11


class DataConfigModel(BaseModel):
    size: int = 2000
    seed: int = 0
    min_count: int = 1
    fillers_per_type: int = 30
    lexicon_seed: int = 20240401
    transfer: TransferSpecModel = Field(default_factory=TransferSpecModel)


class ModelConfigModel(BaseModel):
    d_model: int = 64
    trunk_layers: int = 2
    attention_heads: int = 4
    max_len: int = 96
    ffn_hidden: int | None = None
    factored_action: bool = False


class TrainConfigModel(BaseModel):
    learning_rate: float = 0.002
    batch_size: int = 64
    epochs: int = 9
    alpha: float = 0.125
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gold_intent_warmup_fraction: float = 1.0 / 3.0
    seed: int = 0
    batch_reduction: str = "mean"
    action_loss_mode: str = "bce"
    lm_weight: float = 0.0
    char_fallback_prob: float = 0.5
    word_shuffle_prob: float = 0.5
    adapt_steps: int = 50
    adapt_lr_scale: float = 0.1


class GenDataRequest(BaseModel):
    run_dir: str
    data: DataConfigModel = Field(default_factory=DataConfigModel)


class GenDataResponse(BaseModel):
    run_dir: str
    source_path: str
    target_path: str
    n_records: int
    n_intents: int
    n_slot_labels: int


class TrainRequest(BaseModel):
    run_dir: str
    data: DataConfigModel = Field(default_factory=DataConfigModel)
    model: ModelConfigModel = Field(default_factory=ModelConfigModel)
    train: TrainConfigModel = Field(default_factory=TrainConfigModel)
    corpus_path: str | None = None  # train on a file instead of synthetic data


class TrainResponse(BaseModel):
    run_dir: str
    checkpoint_path: str
    history_path: str
    epochs: int
    final_slu_loss: float
    final_action_loss: float
    final_total_loss: float


class EvalRequest(BaseModel):
    run_dir: str
    checkpoint_path: str
    corpus_path: str
    alpha: float = 0.125
    metrics_mode: str = "standard"


class MetricsModel(BaseModel):
    intent_accuracy: float
    token_precision: float
    token_recall: float
    token_f1: float
    span_f1: float
    mode: str
    zero_denominator: bool


class EvalResponse(BaseModel):
    run_dir: str
    report_csv: str
    report_md: str
    metrics: MetricsModel


class DecodeRequest(BaseModel):
    run_dir: str
    checkpoint_path: str
    corpus_path: str
    alpha: float = 0.125
    bio_repair: bool = False


class DecodeResponse(BaseModel):
    run_dir: str
    predictions_path: str
    n_utterances: int


class AdaptRequest(BaseModel):
    run_dir: str
    checkpoint_path: str
    corpus_path: str
    k_shots: int = 0
    n_classes: int = 8
    seed: int = 0
    alpha: float = 0.125
    train: TrainConfigModel = Field(default_factory=TrainConfigModel)


class AdaptResponse(BaseModel):
    run_dir: str
    k_shots: int
    n_classes: int
    query_size: int
    metrics: MetricsModel
    report_csv: str


class AblateRequest(BaseModel):
    run_dir: str
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    data: DataConfigModel = Field(default_factory=DataConfigModel)
    model: ModelConfigModel = Field(default_factory=ModelConfigModel)
    train: TrainConfigModel = Field(default_factory=TrainConfigModel)
    alphas: list[float] = Field(default_factory=lambda: [0.125, 0.0])


class AblationCellModel(BaseModel):
    variant: str
    split: str
    n_seeds: int
    intent_acc_mean: float
    intent_acc_sd: float
    token_f1_mean: float
    token_f1_sd: float
    span_f1_mean: float
    span_f1_sd: float


class AblateResponse(BaseModel):
    run_dir: str
    report_csv: str
    report_md: str
    summary: list[AblationCellModel]
    failures: list[dict]


class BenchRequest(BaseModel):
    run_dir: str
    checkpoint_path: str | None = None  # None: fresh desk-scale model
    alphas: list[float] = Field(default_factory=lambda: [0.0, 0.125])
    include_factored: bool = False
    steps_per_decode: int = 16
    candidate_k: int = 8
    min_seconds: float = 10.0
    repeats: int = 5


class BenchRowModel(BaseModel):
    setting: str
    alpha: float
    mode: str
    utterances_per_sec: float
    tokens_per_sec: float


class BenchResponse(BaseModel):
    run_dir: str
    report_csv: str
    rows: list[BenchRowModel]


class GradCheckRequest(BaseModel):
    d_model: int = 16
    seed: int = 7
    vocab_size: int = 50
    length: int = 8
    trunk_layers: int = 2
    eps: float = 1e-5
    coords_per_tensor: int = 4
    tolerance: float = 1e-4


class GradCheckResponse(BaseModel):
    max_relative_error: float
    tolerance: float
    passed: bool
