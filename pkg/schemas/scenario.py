"""Pydantic schemas for scenario scripts and their results."""
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, Field


class ServerDecl(BaseModel):
    name: str
    overrides: Dict[str, str] = Field(default_factory=dict)


class Step(BaseModel):
    at: int = Field(..., ge=0, description="Milliseconds after the run started")
    actor: str = Field(..., description="Server name, 'net' or 'expect'")
    action: str
    args: List[str] = Field(default_factory=list)
    line: int = Field(..., description="Source line, for error messages")


class Script(BaseModel):
    source: str = "<script>"
    seed: Optional[int] = None
    latency: Optional[Tuple[int, int]] = None
    servers: List[ServerDecl] = Field(default_factory=list)
    steps: List[Step] = Field(default_factory=list)

    @property
    def duration(self) -> int:
        return max((s.at for s in self.steps), default=0)


class ScenarioResult(BaseModel):
    source: str
    seed: int
    trace: List[str] = Field(default_factory=list)
    failures: List[str] = Field(default_factory=list)
    state: Dict[str, Any] = Field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures
