import math
from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

MAX_PREAMBLE_BITS = 24
POLAR_MOTHER_LENGTH = 512
HAMMING_CODED_LENGTH = 109
HAMMING_INFO_LENGTH = 100


class SystemName(str, Enum):
    A = "A"
    B = "B"
    CUSTOM = "custom"


class CodeFamily(str, Enum):
    POLAR = "polar"
    HAMMING = "hamming"


class FeedbackVariant(str, Enum):
    NONE = "none"
    POSITIVE_ONLY = "positive_only"
    NEGATIVE_ONLY = "negative_only"
    SINGLE_THRESHOLD = "single_threshold"
    DOUBLE_THRESHOLD = "double_threshold"


class SinrEstimator(str, Enum):
    # |h|^4 / sigma^2 per payload symbol
    PER_SYMBOL = "per_symbol"
    # per-symbol value times the M replicas combined into each bit LLR
    COMBINED = "combined"


class ExperimentConfig(BaseModel):
    """
    Validated description of one Monte-Carlo experiment.
    Loaded from presets.yaml and flat YAML config files; the resolved
    instance is written back as the config snapshot of a run.
    """
    model_config = ConfigDict(extra="forbid", use_enum_values=False)

    name: str = "experiment"
    system: SystemName = SystemName.CUSTOM

    # Feed-forward frame
    k_active: int = Field(ge=1, le=2000, description="transmitting users per slot")
    n_info: int = Field(default=100, ge=1, le=400)
    n_preamble: int = Field(ge=1, le=20000)
    n_payload: int = Field(ge=1, le=100000)
    b_preamble: int = Field(ge=1, le=MAX_PREAMBLE_BITS)
    repetition: Optional[int] = Field(default=None, ge=1, le=1000)

    # Coding
    code: CodeFamily = CodeFamily.POLAR
    coded_len: Optional[int] = Field(default=None, ge=2, le=POLAR_MOTHER_LENGTH)
    crc_len: Optional[int] = Field(default=None, ge=0, le=16)
    list_size: int = Field(default=8, ge=1, le=64)
    polar_design_snr_db: float = Field(default=0.0, ge=-10.0, le=20.0)

    # Link budget
    preamble_ebn0_db: float = Field(ge=-20.0, le=60.0)
    payload_ebn0_db: float = Field(ge=-20.0, le=60.0)
    feedback_ebn0_db: float = Field(default=20.0, ge=-20.0, le=60.0)

    # Feedback
    variant: FeedbackVariant = FeedbackVariant.SINGLE_THRESHOLD
    c_tilde: float = Field(default=4.0, gt=0.0, le=100.0)
    c_tilde_low: float = Field(default=4.0, gt=0.0, le=100.0)
    c_tilde_high: float = Field(default=12.0, gt=0.0, le=100.0)
    gamma_bar: float = Field(default=0.5, gt=0.0, le=10.0)
    signature_fraction: float = Field(default=1.0, gt=0.0, le=1.0)
    pilot_length: int = Field(default=64, ge=1, le=4096)
    genie_feedback: bool = False

    # Receiver
    amp_c: float = Field(default=3.0, gt=0.0, le=10.0)
    amp_max_iters: int = Field(default=25, ge=1, le=500)
    amp_damping: float = Field(default=0.0, ge=0.0, lt=1.0)
    mud_alpha_db: Optional[float] = Field(default=None, ge=-40.0, le=20.0)
    mud_max_iters: int = Field(default=30, ge=1, le=500)
    mud_sinr_estimator: SinrEstimator = SinrEstimator.COMBINED
    # decoded words are confirmed against the transmitted messages; defaults to on for hamming
    higher_layer_check: Optional[bool] = None

    # Monte-Carlo
    slots: int = Field(default=1, ge=1, le=10000)
    trials: int = Field(default=1, ge=1, le=100000)
    seed: int = Field(default=0, ge=0, le=2**63 - 1)
    max_retransmissions: int = Field(default=1, ge=0, le=8)

    # Target search
    target_pupe: float = Field(default=0.05, gt=0.0, lt=1.0)
    sweep_span_db: float = Field(default=6.0, gt=0.0, le=30.0)
    sweep_iters: int = Field(default=10, ge=1, le=50)
    sweep_tolerance: float = Field(default=0.005, ge=0.0, lt=1.0)

    @field_validator('name')
    def name_must_not_be_blank(cls, v):
        if not v.strip():
            raise ValueError("name must not be blank")
        return v.strip()

    @model_validator(mode="after")
    def resolve_and_check(self):
        if self.code == CodeFamily.HAMMING:
            if self.crc_len:
                raise ValueError("crc_len must be 0 for the hamming code (syndrome check replaces the CRC)")
            if self.n_info != HAMMING_INFO_LENGTH:
                raise ValueError(f"n_info must be {HAMMING_INFO_LENGTH} for the hamming code")
            if self.coded_len not in (None, HAMMING_CODED_LENGTH):
                raise ValueError(f"coded_len must be {HAMMING_CODED_LENGTH} for the hamming code")
            self.crc_len = 0
            self.coded_len = HAMMING_CODED_LENGTH
        else:
            if self.crc_len is None:
                self.crc_len = 11
            if self.coded_len is None:
                self.coded_len = POLAR_MOTHER_LENGTH - 1
            if self.n_info + self.crc_len > self.coded_len:
                raise ValueError(
                    f"n_info + crc_len = {self.n_info + self.crc_len} exceeds coded_len = {self.coded_len}"
                )
        if self.higher_layer_check is None:
            self.higher_layer_check = self.code == CodeFamily.HAMMING

        if self.b_preamble >= self.coded_len:
            raise ValueError(f"b_preamble must be smaller than coded_len = {self.coded_len}")

        b_payload = self.coded_len - self.b_preamble
        if self.repetition is None:
            self.repetition = max(1, (2 * self.n_payload) // b_payload)
        needed = -(-self.repetition * b_payload // 2)
        if needed > self.n_payload:
            raise ValueError(
                f"repetition * payload bits / 2 = {needed} symbols does not fit n_payload = {self.n_payload}"
            )

        if self.c_tilde_low >= self.c_tilde_high:
            raise ValueError(
                f"c_tilde_low ({self.c_tilde_low}) must be smaller than c_tilde_high ({self.c_tilde_high})"
            )
        return self

    @property
    def b_payload(self) -> int:
        return self.coded_len - self.b_preamble

    @property
    def n_total(self) -> int:
        return self.n_preamble + self.n_payload

    @property
    def signature_length(self) -> int:
        """Feedback signature length L_f = ceil(rho * N_p)."""
        return max(1, min(self.n_preamble, math.ceil(self.signature_fraction * self.n_preamble - 1e-9)))

    def threshold_multipliers(self) -> tuple:
        if self.variant == FeedbackVariant.DOUBLE_THRESHOLD:
            return (self.c_tilde_low, self.c_tilde_high)
        return (self.c_tilde,)


class RunManifest(BaseModel):
    """What the CLI was asked to run and where the results go."""
    model_config = ConfigDict(extra="forbid")

    name: str
    output_dir: str
    seed: int = Field(ge=0)
    jobs: int = Field(default=1, ge=1, le=512)
    config_path: Optional[str] = None
    preset: Optional[str] = None
    overrides: List[str] = []
    sweep: Optional[str] = None
    target_search: bool = False
    genie_feedback: Optional[bool] = None
