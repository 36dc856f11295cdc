#FastAPI service exposing the attribution toolkit over HTTP
#Request bodies carry inline game manifests (same layout as the CLI's --game files)

#Endpoints
#1. /evaluate: v(S) for one coalition
#2. /shapley: exact or permutation-sampled Shapley values
#3. /interactions: I(S) for every coalition up to a maximum order
#4. /spectrum: order spectrum of interaction mass
#5. /learn: baseline learning with an inline learn config
#6. /health: liveness and version

#Run from backend/:  python -m uvicorn app:app

import logging
from typing import Any, Dict, List, Optional

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from attribution import interaction_table, order_spectrum, shapley_exact, shapley_sampled
from baseline_learn import LearnAborted, LearnConfig, accuracy, learn
from exceptions import (
    AttributionToolkitError,
    DomainError,
    EvaluationError,
    TrainingError,
)
from game_core import Coalition, GameSpec, game_from_manifest
from reporting import TOOL_VERSION, coalition_label
from settings import Settings

logger = logging.getLogger(__name__)

settings = Settings.from_environ()
logging.basicConfig(level=settings.log_level.upper())

app = FastAPI(title="Attribution toolkit", version=TOOL_VERSION)

# Configure CORS
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


class GameModel(BaseModel):
    n: int
    backend: Dict[str, Any]
    x: List[float]
    baseline: List[float]
    bounds: Optional[List[List[float]]] = None
    transform: str = "identity"
    label: Optional[int] = None

    def build(self, memoize: bool = False) -> GameSpec:
        manifest = self.model_dump(exclude_none=True)
        return game_from_manifest(manifest, ".", settings, memoize)


class EvaluateRequest(BaseModel):
    game: GameModel
    coalition: List[int] = Field(default_factory=list, description="1-based member indices")


class ShapleyRequest(BaseModel):
    game: GameModel
    permutations: Optional[int] = None
    seed: int = 0


class InteractionsRequest(BaseModel):
    game: GameModel
    max_order: Optional[int] = None


class SpectrumRequest(BaseModel):
    game: GameModel
    tau: Optional[float] = None


class LearnRequest(BaseModel):
    game: GameModel
    config: Dict[str, Any] = Field(default_factory=dict)
    truth: Optional[List[Optional[float]]] = None


def status_for(error: AttributionToolkitError) -> int:
    """400 for bad requests, 422 when the request was valid but evaluation failed."""
    if isinstance(error, LearnAborted):
        error = error.cause
    if isinstance(error, (EvaluationError, DomainError, TrainingError)):
        return 422
    return 400


def _fail(error: Exception) -> HTTPException:
    if isinstance(error, AttributionToolkitError):
        logger.warning("request rejected: %s", error)
        return HTTPException(status_code=status_for(error), detail=str(error))
    logger.exception("unexpected failure")
    return HTTPException(status_code=500, detail=str(error))


@app.get("/health")
def health():
    return {"status": "ok", "version": TOOL_VERSION}


@app.post("/evaluate")
def evaluate_coalition(request: EvaluateRequest):
    """v(S) for the coalition of the listed members"""
    try:
        game = request.game.build()
        coalition = Coalition.from_members(game.n, [i - 1 for i in request.coalition])
        return {"coalition": str(coalition), "value": game.evaluate(coalition)}
    except Exception as e:
        raise _fail(e)


@app.post("/shapley")
def shapley(request: ShapleyRequest):
    try:
        game = request.game.build(memoize=True)
        if request.permutations is not None:
            report = shapley_sampled(game, request.permutations, request.seed)
        else:
            report = shapley_exact(game)
        return {**report.to_dict(), "efficiency_gap": report.efficiency_gap}
    except Exception as e:
        raise _fail(e)


@app.post("/interactions")
def interactions(request: InteractionsRequest):
    try:
        game = request.game.build()
        table = interaction_table(game, request.max_order)
        return {"interactions": [{"coalition": coalition_label(bits, game.n), "order": order, "value": value}
                                 for bits, order, value in table.rows()]}
    except Exception as e:
        raise _fail(e)


@app.post("/spectrum")
def spectrum(request: SpectrumRequest):
    try:
        result = order_spectrum(request.game.build(), request.tau)
        payload = {"ratios": [float(r) for r in result.ratios], "degenerate": result.degenerate}
        if result.salient_counts is not None:
            payload["salient"] = [int(c) for c in result.salient_counts]
        return payload
    except Exception as e:
        raise _fail(e)


@app.post("/learn")
def learn_baseline(request: LearnRequest):
    """Projected gradient descent on the requested loss; returns b and the loss trace"""
    try:
        config = LearnConfig.from_dict(request.config)
        state = learn(config, request.game.build())
        score = accuracy(state.b, request.truth) if request.truth is not None else None
        return state.to_dict(score)
    except Exception as e:
        raise _fail(e)


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8000)
