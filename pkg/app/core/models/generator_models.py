from __future__ import annotations

from pydantic import BaseModel, ConfigDict, Field, model_validator


class TrueCurve(BaseModel):
    """Truncated-polynomial truth on the model time scale (years by default)."""

    model_config = ConfigDict(frozen=True)

    knots: tuple[float, ...] = ()
    coefficients: tuple[float, ...]


class GeneratorConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    seed: int = 20240101
    n_per_group: tuple[int, int] = (50, 50)
    visit_interval_mean: float = Field(default=182.5, gt=0)
    visit_jitter: float = Field(default=30.0, ge=0)
    n_visits: int = Field(default=12, ge=1)
    T: float = Field(default=2190.0, gt=0)
    dropout_prob: float = Field(default=0.25, ge=0, lt=1)
    h_mean: tuple[float, float] = (400.0, 400.0)
    h_var: tuple[float, float] = (150.0**2, 150.0**2)
    w_mean: tuple[float, float] = (300.0, 240.0)
    w_var: tuple[float, float] = (150.0**2, 150.0**2)
    degree: int = Field(default=2, ge=1)
    time_scale: float = Field(default=365.25, gt=0)
    covariate_names: tuple[str, ...] = ("cd4_pre", "idu")
    beta_star: tuple[float, ...] = (2.0, -0.1)
    idu_prob: float = Field(default=0.3, ge=0, le=1)
    cd4_pre_range: tuple[float, float] = (1.0, 6.0)
    responder_curves: tuple[TrueCurve, TrueCurve] = (
        TrueCurve(knots=(0.0,), coefficients=(12.0, -0.5, -0.1, 0.8)),
        TrueCurve(knots=(0.0,), coefficients=(11.5, -0.5, -0.1, 0.7)),
    )
    nonresponder_curves: tuple[TrueCurve, TrueCurve] = (
        TrueCurve(coefficients=(11.0, -0.4, 0.0)),
        TrueCurve(coefficients=(10.5, -0.4, 0.0)),
    )
    re_poly_var_b: tuple[float, ...] = (1.0, 0.05, 0.005)
    re_knot_var_b: float = Field(default=0.05, ge=0)
    re_poly_var_a: tuple[float, ...] = (1.0, 0.05, 0.005)
    re_knot_var_a: float = Field(default=0.05, ge=0)
    sigma2: float = Field(default=1.0, ge=0)
    outcome_transform: str = "sqrt"

    @model_validator(mode="after")
    def _consistent(self) -> GeneratorConfig:
        if min(self.n_per_group) < 0 or sum(self.n_per_group) < 1:
            raise ValueError("n_per_group must be nonnegative with at least one subject.")
        if min(self.h_var) <= 0 or min(self.w_var) <= 0:
            raise ValueError("Base-measure variances must be positive.")
        if len(self.beta_star) != len(self.covariate_names):
            raise ValueError("beta_star must have one coefficient per covariate.")
        for name in self.covariate_names:
            if name not in {"cd4_pre", "idu"}:
                raise ValueError(f"Unsupported generator covariate '{name}'.")
        poly = self.degree + 1
        for curve in (*self.responder_curves, *self.nonresponder_curves):
            if len(curve.coefficients) != poly + len(curve.knots):
                raise ValueError("Each true curve needs 1 + degree + len(knots) coefficients.")
        if len(self.re_poly_var_b) != poly or len(self.re_poly_var_a) != poly:
            raise ValueError("Random-effect polynomial variances need degree + 1 entries.")
        if self.outcome_transform not in {"sqrt", "identity"}:
            raise ValueError("outcome_transform must be 'sqrt' or 'identity'.")
        return self
