# route_schema.py
from typing import Literal

from pydantic import BaseModel, Field

Stage = Literal["gen_data", "train", "fit_users", "rollouts", "evaluate", "report"]


class RouteDecision(BaseModel):
    step: Stage = Field(..., description="Pipeline stage the workflow should run next.")
    reason: str = Field("", description="Which stage flag drove the decision.")
