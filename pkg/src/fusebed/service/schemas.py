from pydantic import BaseModel, Field


class RankRequest(BaseModel):
    query: str
    k: int = Field(default=10, ge=1)


class RankResult(BaseModel):
    id: str
    score: float


class RankResponse(BaseModel):
    results: list[RankResult]


class HealthResponse(BaseModel):
    status: str
    items: int


class ErrorResponse(BaseModel):
    error: str
