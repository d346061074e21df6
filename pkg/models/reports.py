import math
from typing import Optional

from pydantic import BaseModel, Field, model_validator

from models.config import LossWeights

ROBUSTNESS_COLUMNS = (
    "model", "n_codebooks", "bandwidth_bps", "capacity_bps",
    "normal", "rsp", "noise", "sd", "ar", "ea", "lp", "resplice", "average",
)
# report column -> attack kind
ATTACK_COLUMNS = {
    "normal": "identity", "rsp": "rsp", "noise": "noise", "sd": "sd",
    "ar": "ar", "ea": "ea", "lp": "lp", "resplice": "resplice",
}
QUALITY_COLUMNS = (
    "model", "n_codebooks", "bandwidth_bps", "capacity_bps",
    "si_snr_db", "lsd", "pesq", "stoi", "visqol", "mos",
)
METRICS_COLUMNS = (
    "step", "total", "mel_recon", "quantizer", "watermark_ce",
    "adversarial_g", "adversarial_d", "feature_match", "probe_accuracy",
)


class LossReport(BaseModel):
    mel_recon: float = Field(ge=0)
    quantizer: float = Field(ge=0)
    watermark_ce: float = Field(ge=0)
    adversarial_g: Optional[float] = None
    adversarial_d: Optional[float] = None
    feature_match: Optional[float] = None
    total: float
    probe_accuracy: Optional[float] = None
    ce_clamped: int = 0

    @model_validator(mode="after")
    def _finite(self):
        for name in ("mel_recon", "quantizer", "watermark_ce", "adversarial_g", "adversarial_d", "feature_match", "total"):
            value = getattr(self, name)
            if value is not None and not math.isfinite(value):
                raise ValueError(f"{name} is not finite")
        return self

    @staticmethod
    def weighted_total(weights: LossWeights, mel_recon: float, quantizer: float, watermark_ce: float,
                       adversarial_g: Optional[float] = None, feature_match: Optional[float] = None) -> float:
        """Generator objective; disabled (None) components contribute nothing."""
        total = weights.mel * mel_recon + weights.commitment * quantizer + weights.watermark_ce * watermark_ce
        if adversarial_g is not None:
            total += weights.adversarial * adversarial_g
        if feature_match is not None:
            total += weights.feature_match * feature_match
        return total

    def csv_row(self, step: int) -> dict:
        row = {"step": step}
        for column in METRICS_COLUMNS[1:]:
            value = getattr(self, column)
            row[column] = "" if value is None else repr(float(value))
        return row


class RobustnessMatrix(BaseModel):
    """Digit accuracy per attack column for each model row."""

    rows: list[dict] = Field(default_factory=list)

    def add_row(self, model: str, n_codebooks: int, bandwidth_bps: float, capacity_bps: float,
                accuracies: dict[str, float]) -> dict:
        present = [accuracies[column] for column in ATTACK_COLUMNS if column in accuracies]
        row = {
            "model": model,
            "n_codebooks": n_codebooks,
            "bandwidth_bps": bandwidth_bps,
            "capacity_bps": capacity_bps,
        }
        for column in ATTACK_COLUMNS:
            row[column] = accuracies.get(column)
        row["average"] = math.fsum(present) / len(present) if present else None
        self.rows.append(row)
        return row


class QualityRow(BaseModel):
    model: str
    n_codebooks: int
    bandwidth_bps: float
    capacity_bps: float
    si_snr_db: float
    lsd: float
    pesq: Optional[float] = None
    stoi: Optional[float] = None
    visqol: Optional[float] = None
    mos: Optional[float] = None
