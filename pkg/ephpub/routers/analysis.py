from fastapi import APIRouter, Depends, HTTPException, status
from typing import Optional

from ephpub import schemas
from ephpub.dependencies import validate_codeword_weight, validate_collision_params, validate_key_length
from ephpub.exceptions import InputError
from ephpub.services import analysis

router = APIRouter()


@router.get("/hamming", response_model=schemas.AnalysisReport)
async def hamming_entropy(n: int = Depends(validate_key_length)):
    """
    Entropy lost by revealing the Hamming weight of an n-bit key
    """
    return analysis.hamming_report(n)


@router.get("/collision", response_model=schemas.AnalysisReport)
async def collision(params: dict = Depends(validate_collision_params)):
    """
    Probability that two of n_docs EPOs share a (resolver, domain) cell
    """
    return analysis.collision_report(**params)


@router.get("/traffic", response_model=schemas.AnalysisReport)
async def traffic(
    weight: int = Depends(validate_codeword_weight),
    avg_msg_bytes: Optional[int] = None,
    prefetch: bool = False,
):
    """
    DNS traffic of storing and retrieving one key
    """
    try:
        return analysis.traffic_report(weight, avg_msg_bytes, prefetch)
    except InputError as exc:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(exc))
